#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eqat/error.hpp"
#include "eqat/tensor.hpp"

namespace eqat {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

// Reverse-mode tape. Nodes are appended in forward execution order and
// backward() visits them in exact reverse order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Var constant(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, {}, false, "const"});
        return {this, nodes_.size() - 1};
    }

    // Leaf bound to a persistent parameter; its gradient is accumulated into
    // p.grad when p.requires_grad is set.
    Var param(Parameter& p) {
        if (!p.requires_grad) {
            nodes_.push_back(Node{p.value, {}, {}, false, "param"});
            return {this, nodes_.size() - 1};
        }
        Parameter* target = &p;
        nodes_.push_back(Node{p.value, {},
                              [target](Tape& t, std::size_t self) {
                                  const Tensor& g = t.grad(self);
                                  Tensor& dst = target->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      dst[i] += g[i];
                                  }
                              },
                              true, "param"});
        return {this, nodes_.size() - 1};
    }

    Var push(Tensor value, bool requires_grad, BackwardFn backward, const char* op) {
        require(value.all_finite(), ErrorKind::numeric, std::string("non-finite output from ") + op);
        nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : BackwardFn{},
                              requires_grad, op});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool has_grad(std::size_t id) const { return nodes_.at(id).grad.size() != 0; }
    const char* op(std::size_t id) const { return nodes_.at(id).op; }

    Tensor& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.size() != n.value.size()) {
            n.grad = Tensor(n.value.shape());
        }
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    // Seeds d(root)/d(root) with `seed` (root must be a scalar) and runs the
    // backward rules in reverse order. Optionally records the visit order.
    void backward(Var root, float seed = 1.0f, std::vector<std::size_t>* visit_order = nullptr) {
        require(root.tape == this, ErrorKind::state, "variable belongs to another tape");
        require(value(root.id).size() == 1, ErrorKind::dimension, "backward root must be a scalar");
        grad(root.id)[0] += seed;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) {
                continue;
            }
            if (visit_order) {
                visit_order->push_back(i);
            }
            n.backward(*this, i);
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        bool requires_grad = false;
        const char* op = "";
    };
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    require(a.tape && a.tape == b.tape, ErrorKind::state, "variables recorded on different tapes");
    return *a.tape;
}

inline void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

}  // namespace detail

// c[m,n] = a[m,k] b[k,n]
inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.rank() == 2 && bv.rank() == 2, ErrorKind::dimension, "matmul expects 2-d operands");
    require(av.dim(1) == bv.dim(0), ErrorKind::dimension,
            "matmul inner extents differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor c({m, n});
    gemm::nn(m, n, k, av.data(), bv.data(), c.data());
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(c), rg,
                  [a = a.id, b = b.id, m, k, n](Tape& tp, std::size_t self) {
                      const Tensor& dc = tp.grad(self);
                      if (tp.requires_grad(a)) {
                          gemm::nt(m, k, n, dc.data(), tp.value(b).data(), tp.grad(a).data(), true);
                      }
                      if (tp.requires_grad(b)) {
                          gemm::tn(k, n, m, tp.value(a).data(), dc.data(), tp.grad(b).data(), true);
                      }
                  },
                  "matmul");
}

// y[M,out] = x[M,in] w[out,in]^T
inline Var linear(Var x, Var w) {
    Tape& t = detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require(wv.rank() == 2 && xv.cols() == wv.dim(1), ErrorKind::dimension,
            "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
    const std::size_t rows = xv.rows(), in = wv.dim(1), out = wv.dim(0);
    Shape shape = xv.shape();
    shape.back() = out;
    Tensor y(shape);
    gemm::nt(rows, out, in, xv.data(), wv.data(), y.data());
    const bool rg = t.requires_grad(x.id) || t.requires_grad(w.id);
    return t.push(std::move(y), rg,
                  [x = x.id, w = w.id, rows, in, out](Tape& tp, std::size_t self) {
                      const Tensor& dy = tp.grad(self);
                      if (tp.requires_grad(x)) {
                          gemm::nn(rows, in, out, dy.data(), tp.value(w).data(), tp.grad(x).data(), true);
                      }
                      if (tp.requires_grad(w)) {
                          gemm::tn(out, in, rows, dy.data(), tp.value(x).data(), tp.grad(w).data(), true);
                      }
                  },
                  "linear");
}

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require(a.value().shape() == b.value().shape(), ErrorKind::dimension, "add: shape mismatch");
    Tensor c = a.value();
    detail::add_into(c, b.value());
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(c), rg,
                  [a = a.id, b = b.id](Tape& tp, std::size_t self) {
                      const Tensor& dc = tp.grad(self);
                      if (tp.requires_grad(a)) detail::add_into(tp.grad(a), dc);
                      if (tp.requires_grad(b)) detail::add_into(tp.grad(b), dc);
                  },
                  "add");
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require(a.value().shape() == b.value().shape(), ErrorKind::dimension, "mul: shape mismatch");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor c(av.shape());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = av[i] * bv[i];
    }
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(c), rg,
                  [a = a.id, b = b.id](Tape& tp, std::size_t self) {
                      const Tensor& dc = tp.grad(self);
                      if (tp.requires_grad(a)) {
                          Tensor& da = tp.grad(a);
                          const Tensor& bv = tp.value(b);
                          for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * bv[i];
                      }
                      if (tp.requires_grad(b)) {
                          Tensor& db = tp.grad(b);
                          const Tensor& av = tp.value(a);
                          for (std::size_t i = 0; i < dc.size(); ++i) db[i] += dc[i] * av[i];
                      }
                  },
                  "mul");
}

inline Var silu(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    Tensor c(av.shape());
    std::vector<float> sg(av.size());
    vmath::sigmoid(av.data(), sg.data(), av.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = av[i] * sg[i];
    }
    return t.push(std::move(c), t.requires_grad(a.id),
                  [a = a.id, sg = std::move(sg)](Tape& tp, std::size_t self) {
                      const Tensor& dc = tp.grad(self);
                      const Tensor& av = tp.value(a);
                      Tensor& da = tp.grad(a);
                      for (std::size_t i = 0; i < dc.size(); ++i) {
                          da[i] += dc[i] * sg[i] * (1.0f + av[i] * (1.0f - sg[i]));
                      }
                  },
                  "silu");
}

// y = gain * x / sqrt(mean(x^2) + eps) along the last axis.
inline Var rms_norm(Var x, Var gain, float eps) {
    Tape& t = detail::same_tape(x, gain);
    require(eps >= 0.0f, ErrorKind::domain, "rms_norm eps must be non-negative");
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t d = xv.cols();
    require(gv.size() == d, ErrorKind::dimension, "rms_norm: gain length mismatch");
    const std::size_t rows = xv.rows();
    Tensor y(xv.shape());
    std::vector<float> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * d;
        float ms = 0.0f;
        for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<float>(d);
        const float denom = std::sqrt(ms + eps);
        inv[r] = denom > 0.0f ? 1.0f / denom : 0.0f;
        for (std::size_t j = 0; j < d; ++j) y.at(r, j) = gv[j] * xr[j] * inv[r];
    }
    const bool rg = t.requires_grad(x.id) || t.requires_grad(gain.id);
    return t.push(std::move(y), rg,
                  [x = x.id, g = gain.id, inv = std::move(inv), rows, d](Tape& tp, std::size_t self) {
                      const Tensor& dy = tp.grad(self);
                      const Tensor& xv = tp.value(x);
                      const Tensor& gv = tp.value(g);
                      if (tp.requires_grad(x)) {
                          Tensor& dx = tp.grad(x);
                          for (std::size_t r = 0; r < rows; ++r) {
                              const float* xr = xv.data() + r * d;
                              const float* dyr = dy.data() + r * d;
                              float dot = 0.0f;
                              for (std::size_t j = 0; j < d; ++j) dot += gv[j] * dyr[j] * xr[j];
                              const float ir = inv[r];
                              const float coef = ir * ir * ir * dot / static_cast<float>(d);
                              for (std::size_t j = 0; j < d; ++j) {
                                  dx.at(r, j) += ir * gv[j] * dyr[j] - xr[j] * coef;
                              }
                          }
                      }
                      if (tp.requires_grad(g)) {
                          Tensor& dg = tp.grad(g);
                          for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < d; ++j) {
                                  dg[j] += dy.at(r, j) * xv.at(r, j) * inv[r];
                              }
                          }
                      }
                  },
                  "rms_norm");
}

// Gathers rows of table[V,d] -> [ids.size(), d].
inline Var embedding(Var table, std::span<const std::uint32_t> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = table.value();
    require(tv.rank() == 2, ErrorKind::dimension, "embedding table must be 2-d");
    require(!ids.empty(), ErrorKind::dimension, "embedding: empty id list");
    const std::size_t d = tv.dim(1);
    Tensor y({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] < tv.dim(0), ErrorKind::index, "embedding id " + std::to_string(ids[i]) + " out of range");
        std::copy_n(tv.data() + std::size_t{ids[i]} * d, d, y.data() + i * d);
    }
    std::vector<std::uint32_t> saved(ids.begin(), ids.end());
    return t.push(std::move(y), t.requires_grad(table.id),
                  [tb = table.id, saved = std::move(saved), d](Tape& tp, std::size_t self) {
                      const Tensor& dy = tp.grad(self);
                      Tensor& dt = tp.grad(tb);
                      for (std::size_t i = 0; i < saved.size(); ++i) {
                          float* dst = dt.data() + std::size_t{saved[i]} * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += dy[i * d + j];
                      }
                  },
                  "embedding");
}

// Multi-head causal self-attention over a batch of sequences stacked along
// the row axis: q, k, v are [batch*seq_len, d_model].
inline Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len) {
    Tape& t = detail::same_tape(q, k);
    detail::same_tape(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require(qv.shape() == kv.shape() && qv.shape() == vv.shape(), ErrorKind::dimension,
            "attention: q/k/v shape mismatch");
    const std::size_t d = qv.cols();
    require(n_heads > 0 && d % n_heads == 0, ErrorKind::dimension, "attention: heads must divide d_model");
    require(seq_len > 0 && qv.rows() % seq_len == 0, ErrorKind::dimension,
            "attention: rows not a multiple of sequence length");
    const std::size_t batch = qv.rows() / seq_len;
    const std::size_t hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    Tensor out(qv.shape());
    // probs[b][h] is a seq_len x seq_len lower-triangular row-stochastic matrix.
    std::vector<float> probs(batch * n_heads * seq_len * seq_len, 0.0f);
    std::vector<float> qh(seq_len * hd), kh(seq_len * hd), vh(seq_len * hd), oh(seq_len * hd);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seq_len; ++i) {
                const std::size_t row = (b * seq_len + i) * d + h * hd;
                std::copy_n(qv.data() + row, hd, qh.data() + i * hd);
                std::copy_n(kv.data() + row, hd, kh.data() + i * hd);
                std::copy_n(vv.data() + row, hd, vh.data() + i * hd);
            }
            float* p = probs.data() + (b * n_heads + h) * seq_len * seq_len;
            gemm::nt(seq_len, seq_len, hd, qh.data(), kh.data(), p);
            for (std::size_t i = 0; i < seq_len; ++i) {
                float* pr = p + i * seq_len;
                float mx = -std::numeric_limits<float>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    pr[j] *= scale;
                    mx = std::max(mx, pr[j]);
                }
                vmath::exp(pr, pr, i + 1, -mx);
                float sum = 0.0f;
                for (std::size_t j = 0; j <= i; ++j) sum += pr[j];
                const float is = 1.0f / sum;
                for (std::size_t j = 0; j <= i; ++j) pr[j] *= is;
                for (std::size_t j = i + 1; j < seq_len; ++j) pr[j] = 0.0f;
            }
            gemm::nn(seq_len, hd, seq_len, p, vh.data(), oh.data());
            for (std::size_t i = 0; i < seq_len; ++i) {
                std::copy_n(oh.data() + i * hd, hd, out.data() + (b * seq_len + i) * d + h * hd);
            }
        }
    }
    const bool rg = t.requires_grad(q.id) || t.requires_grad(k.id) || t.requires_grad(v.id);
    return t.push(
        std::move(out), rg,
        [q = q.id, k = k.id, v = v.id, probs = std::move(probs), batch, n_heads, seq_len, hd, d,
         scale](Tape& tp, std::size_t self) {
            const Tensor& dout = tp.grad(self);
            const Tensor& qv = tp.value(q);
            const Tensor& kv = tp.value(k);
            const Tensor& vv = tp.value(v);
            const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
            Tensor* dq = gq ? &tp.grad(q) : nullptr;
            Tensor* dk = gk ? &tp.grad(k) : nullptr;
            Tensor* dv = gv ? &tp.grad(v) : nullptr;
            std::vector<float> qh(seq_len * hd), kh(seq_len * hd), vh(seq_len * hd), doh(seq_len * hd);
            std::vector<float> dp(seq_len * seq_len), tmp(seq_len * hd);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    for (std::size_t i = 0; i < seq_len; ++i) {
                        const std::size_t row = (b * seq_len + i) * d + h * hd;
                        std::copy_n(qv.data() + row, hd, qh.data() + i * hd);
                        std::copy_n(kv.data() + row, hd, kh.data() + i * hd);
                        std::copy_n(vv.data() + row, hd, vh.data() + i * hd);
                        std::copy_n(dout.data() + row, hd, doh.data() + i * hd);
                    }
                    const float* p = probs.data() + (b * n_heads + h) * seq_len * seq_len;
                    auto scatter = [&](Tensor* dst) {
                        for (std::size_t i = 0; i < seq_len; ++i) {
                            float* o = dst->data() + (b * seq_len + i) * d + h * hd;
                            for (std::size_t j = 0; j < hd; ++j) o[j] += tmp[i * hd + j];
                        }
                    };
                    if (gv) {
                        gemm::tn(seq_len, hd, seq_len, p, doh.data(), tmp.data());
                        scatter(dv);
                    }
                    if (!gq && !gk) continue;
                    // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
                    gemm::nt(seq_len, seq_len, hd, doh.data(), vh.data(), dp.data());
                    for (std::size_t i = 0; i < seq_len; ++i) {
                        const float* pr = p + i * seq_len;
                        float* dr = dp.data() + i * seq_len;
                        float dot = 0.0f;
                        for (std::size_t j = 0; j <= i; ++j) dot += dr[j] * pr[j];
                        for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot) * scale;
                        for (std::size_t j = i + 1; j < seq_len; ++j) dr[j] = 0.0f;
                    }
                    if (gq) {
                        gemm::nn(seq_len, hd, seq_len, dp.data(), kh.data(), tmp.data());
                        scatter(dq);
                    }
                    if (gk) {
                        gemm::tn(seq_len, hd, seq_len, dp.data(), qh.data(), tmp.data());
                        scatter(dk);
                    }
                }
            }
        },
        "causal_attention");
}

// Mean over rows of -log softmax(logits)[target]; returns a [1] tensor.
inline Var softmax_ce_loss(Var logits, std::span<const std::uint32_t> targets) {
    Tape& t = *logits.tape;
    const Tensor& lv = logits.value();
    require(!targets.empty(), ErrorKind::dimension, "cross-entropy over an empty batch");
    require(lv.rank() == 2 && lv.dim(0) == targets.size(), ErrorKind::dimension,
            "cross-entropy: logits rows must match target count");
    const std::size_t n = targets.size(), vocab = lv.dim(1);
    Tensor probs(lv.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        require(targets[r] < vocab, ErrorKind::index, "target id " + std::to_string(targets[r]) + " >= vocab");
        const float* lr = lv.data() + r * vocab;
        const float mx = *std::max_element(lr, lr + vocab);
        float* pr = probs.data() + r * vocab;
        vmath::exp(lr, pr, vocab, -mx);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) sum += pr[j];
        const float inv = static_cast<float>(1.0 / sum);
        for (std::size_t j = 0; j < vocab; ++j) pr[j] *= inv;
        total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(lr[targets[r]]);
    }
    Tensor loss({1}, static_cast<float>(total / static_cast<double>(n)));
    std::vector<std::uint32_t> saved(targets.begin(), targets.end());
    return t.push(std::move(loss), t.requires_grad(logits.id),
                  [l = logits.id, probs = std::move(probs), saved = std::move(saved), n,
                   vocab](Tape& tp, std::size_t self) {
                      const float up = tp.grad(self)[0] / static_cast<float>(n);
                      Tensor& dl = tp.grad(l);
                      for (std::size_t r = 0; r < n; ++r) {
                          for (std::size_t j = 0; j < vocab; ++j) {
                              dl.at(r, j) += up * (probs.at(r, j) - (j == saved[r] ? 1.0f : 0.0f));
                          }
                      }
                  },
                  "softmax_ce_loss");
}

// Mean squared error against a constant target; returns a [1] tensor.
inline Var mse_loss(Var pred, const Tensor& target) {
    Tape& t = *pred.tape;
    const Tensor& pv = pred.value();
    require(pv.size() == target.size(), ErrorKind::dimension, "mse: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double e = static_cast<double>(pv[i]) - target[i];
        total += e * e;
    }
    Tensor loss({1}, static_cast<float>(total / static_cast<double>(pv.size())));
    return t.push(std::move(loss), t.requires_grad(pred.id),
                  [p = pred.id, target](Tape& tp, std::size_t self) {
                      const Tensor& pv = tp.value(p);
                      const float up = 2.0f * tp.grad(self)[0] / static_cast<float>(pv.size());
                      Tensor& dp = tp.grad(p);
                      for (std::size_t i = 0; i < pv.size(); ++i) dp[i] += up * (pv[i] - target[i]);
                  },
                  "mse_loss");
}

// Per-row negative log-likelihood of `targets`, in double precision.
inline std::vector<double> token_nll(const Tensor& logits, std::span<const std::uint32_t> targets) {
    require(logits.rank() == 2 && logits.dim(0) == targets.size(), ErrorKind::dimension,
            "token_nll: logits rows must match target count");
    const std::size_t vocab = logits.dim(1);
    std::vector<double> out(targets.size());
    for (std::size_t r = 0; r < targets.size(); ++r) {
        require(targets[r] < vocab, ErrorKind::index, "target id out of range");
        const float* lr = logits.data() + r * vocab;
        const double mx = *std::max_element(lr, lr + vocab);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(lr[j] - mx);
        out[r] = std::log(sum) + mx - lr[targets[r]];
    }
    return out;
}

}  // namespace eqat
