#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqat/autograd.hpp"
#include "eqat/data.hpp"
#include "eqat/error.hpp"
#include "eqat/model.hpp"
#include "eqat/optim.hpp"
#include "eqat/qlinear.hpp"
#include "eqat/quant.hpp"

namespace eqat {

enum class InputSource { quantized_prefix, fp_prefix };

inline InputSource parse_input_source(const std::string& s) {
    if (s == "quantized-prefix" || s == "quantized") return InputSource::quantized_prefix;
    if (s == "fp-prefix" || s == "fp") return InputSource::fp_prefix;
    fail(ErrorKind::domain, "input source must be quantized-prefix or fp-prefix, got '" + s + "'");
}

inline float default_block_lr_w(int bits) { return bits == 2 ? 2e-5f : 1e-5f; }

struct BlockAPPlan {
    QuantSpec spec{2, 64};
    float lr_qp = 1e-4f;
    float lr_w = 2e-5f;
    std::size_t batch = 2;
    std::size_t epochs = 2;
    std::size_t n_samples = 256;
    std::size_t ctx_len = 128;
    Trainable trainable = Trainable::all();
    InputSource input_source = InputSource::quantized_prefix;
    std::size_t eval_samples = 64;  // train / held-out subsets used for the per-epoch MSE record
    std::uint64_t seed = 0;

    static BlockAPPlan defaults_for(QuantSpec spec) {
        BlockAPPlan p;
        p.spec = spec;
        p.lr_w = default_block_lr_w(spec.bits);
        return p;
    }

    void validate() const {
        spec.validate();
        require(lr_qp > 0.0f && lr_w > 0.0f, ErrorKind::domain, "Block-AP learning rates must be positive");
        require(epochs >= 1 && batch >= 1, ErrorKind::domain, "epochs and batch must be at least 1");
        require(!trainable.empty(), ErrorKind::domain, "Block-AP needs a nonempty trainable set");
    }
};

// Block inputs and full-precision targets for every calibration sample,
// stacked as [n_samples * ctx_len, d_model].
struct ActivationCache {
    std::size_t block = 0;
    std::size_t n_samples = 0;
    std::size_t ctx_len = 0;
    Tensor inputs;
    Tensor targets;

    Tensor sample_rows(const Tensor& t, std::span<const std::size_t> idx) const {
        const std::size_t d = t.cols();
        Tensor out({idx.size() * ctx_len, d});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(t.data() + idx[i] * ctx_len * d, ctx_len * d, out.data() + i * ctx_len * d);
        }
        return out;
    }
};

struct BlockEpochLog {
    std::size_t block = 0;
    std::size_t epoch = 0;
    std::size_t steps = 0;
    double train_mse = 0.0;       // running mean over the epoch's steps
    double eval_train_mse = 0.0;  // after the epoch, on up to eval_samples training samples
    double val_mse = 0.0;         // after the epoch, on the held-out samples (0 when none)
    double target_power = 0.0;    // mean squared target value

    nlohmann::json json() const {
        return {{"block", block},
                {"epoch", epoch},
                {"steps", steps},
                {"train_mse", train_mse},
                {"eval_train_mse", eval_train_mse},
                {"val_mse", val_mse},
                {"gap", round_to(val_mse - eval_train_mse, 4) + 0.0},
                {"target_power", target_power}};
    }
};

struct BlockAPResult {
    Model model;
    std::vector<BlockEpochLog> log;
};

namespace detail {

inline Tensor embed_tokens(Model& m, std::span<const std::uint32_t> tokens, std::size_t ctx) {
    Tape t;
    return embed(m, t, tokens, ctx).value();
}

// Runs a block on stacked sequences in chunks, without gradients.
inline Tensor apply_block(TransformerBlock& b, const ModelConfig& cfg, const Tensor& x, std::size_t ctx,
                          std::size_t chunk_seqs = 16) {
    const std::size_t d = x.cols();
    const std::size_t n = x.rows() / ctx;
    Tensor out(x.shape());
    for (std::size_t s0 = 0; s0 < n; s0 += chunk_seqs) {
        const std::size_t ns = std::min(chunk_seqs, n - s0);
        Tape t;
        Tensor part({ns * ctx, d}, std::vector<float>(x.data() + s0 * ctx * d, x.data() + (s0 + ns) * ctx * d));
        const Tensor y = forward_block(b, cfg, t.constant(std::move(part)), ctx).value();
        std::copy(y.vec().begin(), y.vec().end(), out.data() + s0 * ctx * d);
    }
    return out;
}

inline double mse(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a[i]) - b[i];
        s += e * e;
    }
    return s / static_cast<double>(a.size());
}

inline double mean_power(const Tensor& a) {
    double s = 0.0;
    for (float v : a.vec()) s += static_cast<double>(v) * v;
    return s / static_cast<double>(a.size());
}

inline Tensor head_rows(const Tensor& t, std::size_t rows) {
    rows = std::min(rows, t.rows());
    return Tensor({rows, t.cols()}, std::vector<float>(t.data(), t.data() + rows * t.cols()));
}

inline void freeze_block(TransformerBlock& b) {
    for (auto& p : b.proj) {
        if (auto* q = std::get_if<QuantLinear>(&p); q && q->mode() == QuantMode::latent) q->freeze();
    }
}

}  // namespace detail

// Activations entering block `block_index` and the FP block's outputs on them.
// `prefix` supplies blocks [0, block_index) (quantized or FP, per input source);
// `fp` supplies the target block.
inline ActivationCache collect_block_io(Model& prefix, Model& fp, const CalibSet& calib, std::size_t block_index) {
    require(block_index < fp.blocks.size(), ErrorKind::index, "block index out of range");
    ActivationCache c;
    c.block = block_index;
    c.n_samples = calib.size();
    c.ctx_len = calib.ctx_len;
    Tensor x = detail::embed_tokens(prefix, calib.tokens, calib.ctx_len);
    for (std::size_t i = 0; i < block_index; ++i) x = detail::apply_block(prefix.blocks[i], prefix.config, x, c.ctx_len);
    c.targets = detail::apply_block(fp.blocks[block_index], fp.config, x, c.ctx_len);
    c.inputs = std::move(x);
    return c;
}

// Quantizes every transformer block in order, training each against its
// full-precision outputs with MSE; embeddings, norms and the head stay FP.
// Each block is frozen as soon as its training ends.
inline BlockAPResult run_block_ap(const Model& fp_model, const CalibSet& calib, const BlockAPPlan& plan,
                                  const CalibSet* held_out = nullptr, std::ostream* log = nullptr) {
    plan.validate();
    require(calib.size() > 0, ErrorKind::data, "empty calibration set");
    require(calib.size() >= plan.batch, ErrorKind::data,
            "calibration set smaller than one batch (" + std::to_string(calib.size()) + " < " +
                std::to_string(plan.batch) + ")");
    require(calib.ctx_len <= fp_model.config.max_context, ErrorKind::domain, "calibration ctx exceeds max_context");
    if (held_out) require(held_out->ctx_len == calib.ctx_len, ErrorKind::data, "held-out ctx_len mismatch");

    Model fp = fp_model;
    BlockAPResult res;
    res.model = fp_model;
    Model& qm = res.model;
    qm.set_requires_grad(false);
    fp.set_requires_grad(false);
    const ModelConfig& cfg = fp.config;
    const std::size_t L = calib.ctx_len;
    const std::size_t n = calib.size();

    // Activations entering the current block: through the quantized prefix,
    // and (when requested) through the FP prefix.
    Tensor xq = detail::embed_tokens(fp, calib.tokens, L);
    Tensor xf = xq;
    Tensor vq, vf;
    if (held_out && held_out->size()) {
        vq = detail::embed_tokens(fp, held_out->tokens, L);
        vf = vq;
    }
    const std::size_t n_eval = std::min(plan.eval_samples, n);
    std::mt19937_64 rng(plan.seed ^ 0xB10CAull);

    for (std::size_t bi = 0; bi < cfg.n_layers; ++bi) {
        const bool use_fp = plan.input_source == InputSource::fp_prefix;
        ActivationCache cache;
        cache.block = bi;
        cache.n_samples = n;
        cache.ctx_len = L;
        cache.inputs = use_fp ? xf : xq;
        cache.targets = detail::apply_block(fp.blocks[bi], cfg, cache.inputs, L);
        Tensor val_in, val_target;
        if (!vq.empty()) {
            val_in = use_fp ? vf : vq;
            val_target = detail::apply_block(fp.blocks[bi], cfg, val_in, L);
        }
        const double power = detail::mean_power(cache.targets);

        TransformerBlock& qb = qm.blocks[bi];
        Adam opt;
        for (std::size_t s = 0; s < kProjectionCount; ++s) {
            const Tensor w = qb.effective_weight(s);
            qb.proj[s] = QuantLinear::from_dense(w, plan.spec, plan.trainable);
        }
        for (std::size_t s = 0; s < kProjectionCount; ++s) {
            auto& q = std::get<QuantLinear>(qb.proj[s]);
            if (plan.trainable.weight) opt.add(q.weight(), plan.lr_w);
            if (plan.trainable.scale) opt.add(q.scales(), plan.lr_qp);
            if (plan.trainable.zero) opt.add(q.zeros(), plan.lr_qp);
        }

        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        const std::string where = "Block-AP block " + std::to_string(bi);
        for (std::size_t ep = 0; ep < plan.epochs; ++ep) {
            shuffle_in_place(order, rng);
            double running = 0.0;
            std::size_t steps = 0;
            for (std::size_t b0 = 0; b0 + plan.batch <= n; b0 += plan.batch) {
                std::span<const std::size_t> idx(order.data() + b0, plan.batch);
                const Tensor xin = cache.sample_rows(cache.inputs, idx);
                const Tensor tgt = cache.sample_rows(cache.targets, idx);
                double l = 0.0;
                try {
                    Tape tape;
                    Var loss = mse_loss(forward_block(qb, cfg, tape.constant(xin), L), tgt);
                    tape.backward(loss);
                    l = loss.value()[0];
                    opt.step();
                } catch (const Error& e) {
                    if (e.kind() == ErrorKind::numeric) fail(ErrorKind::numeric, where + ": " + e.what());
                    throw;
                }
                opt.zero_grad();
                for (auto& p : qb.proj) {
                    auto& q = std::get<QuantLinear>(p);
                    for (auto& s : q.scales().value.vec()) s = std::max(s, kScaleFloor);
                }
                require(std::isfinite(l), ErrorKind::numeric, where + ": loss is not finite");
                running += l;
                ++steps;
            }
            BlockEpochLog rec;
            rec.block = bi;
            rec.epoch = ep;
            rec.steps = steps;
            rec.train_mse = steps ? running / static_cast<double>(steps) : 0.0;
            rec.target_power = power;
            const Tensor ein = detail::head_rows(cache.inputs, n_eval * L);
            rec.eval_train_mse =
                detail::mse(detail::apply_block(qb, cfg, ein, L), detail::head_rows(cache.targets, n_eval * L));
            if (!val_in.empty()) rec.val_mse = detail::mse(detail::apply_block(qb, cfg, val_in, L), val_target);
            require(std::isfinite(rec.eval_train_mse) && std::isfinite(rec.val_mse), ErrorKind::numeric,
                    where + ": reconstruction error is not finite");
            if (log) *log << rec.json().dump() << std::endl;
            res.log.push_back(rec);
        }
        detail::freeze_block(qb);
        for (auto& p : qb.proj) {
            auto& q = std::get<QuantLinear>(p);
            q.scales().grad = Tensor{};
            q.zeros().grad = Tensor{};
        }

        xq = detail::apply_block(qb, cfg, xq, L);
        if (use_fp) xf = detail::apply_block(fp.blocks[bi], cfg, xf, L);
        if (!vq.empty()) {
            vq = detail::apply_block(qb, cfg, vq, L);
            if (use_fp) vf = detail::apply_block(fp.blocks[bi], cfg, vf, L);
        }
    }
    return res;
}

// Round-to-nearest baseline: min-max initialisation and freeze, no training.
inline Model quantize_rtn(const Model& fp_model, const QuantSpec& spec) {
    Model m = fp_model;
    m.set_requires_grad(false);
    for (auto& b : m.blocks) {
        for (std::size_t s = 0; s < kProjectionCount; ++s) {
            QuantLinear q = QuantLinear::from_dense(b.effective_weight(s), spec, Trainable::scales_only());
            q.freeze();
            b.proj[s] = std::move(q);
        }
    }
    return m;
}

}  // namespace eqat
