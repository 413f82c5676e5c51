#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eqat/autograd.hpp"
#include "eqat/error.hpp"
#include "eqat/quant.hpp"
#include "eqat/tensor.hpp"

namespace eqat {

enum class ClampBranch : std::uint8_t { inside, low, high };

// Partial derivatives of the fake-quantized weight
//   w_hat = (clamp(round(w/s) + z, 0, qmax) - z) * s
// under the straight-through rule for round().
struct StePartials {
    float value = 0.0f;
    float ds = 0.0f;
    float dz = 0.0f;
    float dw = 0.0f;
    ClampBranch branch = ClampBranch::inside;
};

inline StePartials ste_partials(float w, float s, float z, int bits) noexcept {
    const float qmax = static_cast<float>((1 << bits) - 1);
    const double ratio = level_ratio(w, s);
    const float r = static_cast<float>(std::nearbyint(ratio));
    const float u = r + z;
    StePartials p;
    if (u < 0.0f) {
        p.branch = ClampBranch::low;
        p.value = -z * s;
        p.ds = -z;
        p.dz = -s;
    } else if (u > qmax) {
        p.branch = ClampBranch::high;
        p.value = (qmax - z) * s;
        p.ds = qmax - z;
        p.dz = -s;
    } else {
        p.value = r * s;
        p.ds = static_cast<float>(r - ratio);
        p.dw = 1.0f;
    }
    return p;
}

// Which of {W, s, z} receive gradient updates.
struct Trainable {
    bool weight = false;
    bool scale = false;
    bool zero = false;

    static Trainable all() { return {true, true, true}; }
    static Trainable scales_only() { return {false, true, false}; }

    // Comma-separated subset of "W", "s", "z".
    static Trainable parse(std::string_view text) {
        Trainable t;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const std::size_t comma = std::min(text.find(',', pos), text.size());
            const std::string_view tok = text.substr(pos, comma - pos);
            if (tok == "W" || tok == "w") t.weight = true;
            else if (tok == "s") t.scale = true;
            else if (tok == "z") t.zero = true;
            else fail(ErrorKind::domain, "unknown trainable parameter '" + std::string(tok) + "'");
            pos = comma + 1;
        }
        return t;
    }

    std::string str() const {
        std::string out;
        auto put = [&](bool on, const char* name) {
            if (!on) return;
            if (!out.empty()) out += ',';
            out += name;
        };
        put(scale, "s");
        put(zero, "z");
        put(weight, "W");
        return out;
    }

    bool empty() const noexcept { return !weight && !scale && !zero; }
    bool operator==(const Trainable&) const = default;
};

enum class QuantMode { latent, frozen };

// Linear layer y = x W_hat^T with group-wise quantized weights. In latent mode
// W_hat is re-derived from the float weights W every call; in frozen mode the
// integer levels are fixed and only s (and optionally z) stay continuous.
class QuantLinear {
public:
    QuantLinear() = default;

    static QuantLinear from_dense(const Tensor& w, const QuantSpec& spec, Trainable trainable = Trainable::all()) {
        spec.validate();
        require(w.rank() == 2, ErrorKind::dimension, "weight must be [out, in]");
        QuantLinear q;
        q.spec_ = spec;
        q.mode_ = QuantMode::latent;
        q.out_ = w.dim(0);
        q.in_ = w.dim(1);
        q.groups_ = spec.groups_per_row(q.in_);
        q.weight_ = Parameter(w);
        q.scales_ = Parameter(Tensor({q.out_, q.groups_}));
        q.zeros_ = Parameter(Tensor({q.out_, q.groups_}));
        for (std::size_t r = 0; r < q.out_; ++r) {
            for (std::size_t g = 0; g < q.groups_; ++g) {
                const auto [b, e] = q.group_range(g);
                const GroupParams p = init_group_params(w.row(r).subspan(b, e - b), spec);
                q.scales_.value.at(r, g) = p.scale;
                q.zeros_.value.at(r, g) = p.zero;
            }
        }
        q.set_trainable(trainable);
        return q;
    }

    static QuantLinear from_frozen(std::size_t out, std::size_t in, const QuantSpec& spec,
                                   std::vector<std::uint8_t> levels, Tensor scales, Tensor zeros,
                                   ZeroStorage zero_storage = ZeroStorage::packed) {
        spec.validate();
        QuantLinear q;
        q.spec_ = spec;
        q.mode_ = QuantMode::frozen;
        q.out_ = out;
        q.in_ = in;
        q.groups_ = spec.groups_per_row(in);
        require(levels.size() == out * in, ErrorKind::dimension, "integer weight size mismatch");
        require(scales.size() == out * q.groups_ && zeros.size() == out * q.groups_, ErrorKind::dimension,
                "group parameter size mismatch");
        for (auto v : levels) {
            require(v <= spec.qmax(), ErrorKind::domain, "integer level outside [0, 2^N - 1]");
        }
        q.levels_ = std::move(levels);
        q.scales_ = Parameter(scales.reshaped({out, q.groups_}));
        q.zeros_ = Parameter(zeros.reshaped({out, q.groups_}));
        q.zero_storage_ = zero_storage;
        q.set_trainable(Trainable::scales_only());
        return q;
    }

    QuantMode mode() const noexcept { return mode_; }
    const QuantSpec& spec() const noexcept { return spec_; }
    const Trainable& trainable() const noexcept { return trainable_; }
    ZeroStorage zero_storage() const noexcept { return zero_storage_; }
    std::size_t out_features() const noexcept { return out_; }
    std::size_t in_features() const noexcept { return in_; }
    std::size_t groups_per_row() const noexcept { return groups_; }
    std::size_t group_count() const noexcept { return out_ * groups_; }

    Parameter& weight() {
        require(mode_ == QuantMode::latent, ErrorKind::state, "latent weights are discarded after freeze");
        return weight_;
    }
    const Parameter& weight() const {
        require(mode_ == QuantMode::latent, ErrorKind::state, "latent weights are discarded after freeze");
        return weight_;
    }
    const std::vector<std::uint8_t>& levels() const {
        require(mode_ == QuantMode::frozen, ErrorKind::state, "integer weights exist only in frozen mode");
        return levels_;
    }
    Parameter& scales() noexcept { return scales_; }
    const Parameter& scales() const noexcept { return scales_; }
    Parameter& zeros() noexcept { return zeros_; }
    const Parameter& zeros() const noexcept { return zeros_; }

    std::pair<std::size_t, std::size_t> group_range(std::size_t g) const noexcept {
        const std::size_t len = spec_.group_len(in_);
        return {g * len, std::min(in_, (g + 1) * len)};
    }

    void set_trainable(Trainable t) {
        require(!(mode_ == QuantMode::frozen && t.weight), ErrorKind::state,
                "frozen layers cannot train latent weights");
        trainable_ = t;
        weight_.requires_grad = t.weight;
        scales_.requires_grad = t.scale;
        zeros_.requires_grad = t.zero;
        if (mode_ == QuantMode::frozen && t.zero) {
            zero_storage_ = ZeroStorage::float16;
        }
    }

    // All parameters the layer would hand to an optimizer.
    std::vector<Parameter*> trainable_params() {
        std::vector<Parameter*> out;
        if (trainable_.weight && mode_ == QuantMode::latent) out.push_back(&weight_);
        if (trainable_.scale) out.push_back(&scales_);
        if (trainable_.zero) out.push_back(&zeros_);
        return out;
    }

    Tensor dequantized_weight() const {
        Tensor w({out_, in_});
        for (std::size_t r = 0; r < out_; ++r) {
            for (std::size_t g = 0; g < groups_; ++g) {
                const float s = scales_.value.at(r, g);
                const float z = zeros_.value.at(r, g);
                const auto [b, e] = group_range(g);
                for (std::size_t j = b; j < e; ++j) {
                    w.at(r, j) = mode_ == QuantMode::latent
                                     ? ste_partials(weight_.value.at(r, j), s, z, spec_.bits).value
                                     : (static_cast<float>(levels_[r * in_ + j]) - z) * s;
                }
            }
        }
        return w;
    }

    Var forward(Var x) {
        Tape& t = *x.tape;
        const Tensor& xv = x.value();
        require(xv.cols() == in_, ErrorKind::dimension,
                "quantized linear expects " + std::to_string(in_) + " input features");
        check_finite();
        Tensor w_hat({out_, in_});
        std::vector<ClampBranch> branch;
        if (mode_ == QuantMode::latent) {
            branch.resize(out_ * in_);
        }
        for (std::size_t r = 0; r < out_; ++r) {
            for (std::size_t g = 0; g < groups_; ++g) {
                const float s = scales_.value.at(r, g);
                const float z = zeros_.value.at(r, g);
                const auto [b, e] = group_range(g);
                for (std::size_t j = b; j < e; ++j) {
                    const std::size_t idx = r * in_ + j;
                    if (mode_ == QuantMode::latent) {
                        const StePartials p = ste_partials(weight_.value[idx], s, z, spec_.bits);
                        w_hat[idx] = p.value;
                        branch[idx] = p.branch;
                    } else {
                        w_hat[idx] = (static_cast<float>(levels_[idx]) - z) * s;
                    }
                }
            }
        }
        const std::size_t rows = xv.rows();
        Shape shape = xv.shape();
        shape.back() = out_;
        Tensor y(shape);
        gemm::nt(rows, out_, in_, xv.data(), w_hat.data(), y.data());
        const bool params_need = !trainable_params().empty();
        const bool rg = t.requires_grad(x.id) || params_need;
        return t.push(std::move(y), rg,
                      [this, xid = x.id, w_hat = std::move(w_hat), branch = std::move(branch), rows,
                       params_need](Tape& tp, std::size_t self) {
                          const Tensor& dy = tp.grad(self);
                          if (tp.requires_grad(xid)) {
                              gemm::nn(rows, in_, out_, dy.data(), w_hat.data(), tp.grad(xid).data(), true);
                          }
                          if (params_need) {
                              Tensor dw({out_, in_});
                              gemm::tn(out_, in_, rows, dy.data(), tp.value(xid).data(), dw.data());
                              accumulate_param_grads(dw, branch);
                          }
                      },
                      mode_ == QuantMode::latent ? "quant_linear_latent" : "quant_linear_frozen");
    }

    // Chain rule from d(loss)/d(W_hat) to the trainable parameters. Latent mode
    // uses the straight-through partials; frozen mode uses dW_hat/ds = q - z and
    // dW_hat/dz = -s.
    void accumulate_param_grads(const Tensor& dw_hat, const std::vector<ClampBranch>& branch) {
        Tensor* gw = trainable_.weight && mode_ == QuantMode::latent ? &weight_.ensure_grad() : nullptr;
        Tensor* gs = trainable_.scale ? &scales_.ensure_grad() : nullptr;
        Tensor* gz = trainable_.zero ? &zeros_.ensure_grad() : nullptr;
        for (std::size_t r = 0; r < out_; ++r) {
            for (std::size_t g = 0; g < groups_; ++g) {
                const float s = scales_.value.at(r, g);
                const float z = zeros_.value.at(r, g);
                const auto [b, e] = group_range(g);
                float acc_s = 0.0f;
                float acc_z = 0.0f;
                for (std::size_t j = b; j < e; ++j) {
                    const std::size_t idx = r * in_ + j;
                    const float up = dw_hat[idx];
                    if (mode_ == QuantMode::latent) {
                        const float w = weight_.value[idx];
                        switch (branch[idx]) {
                            case ClampBranch::inside: {
                                const double ratio = level_ratio(w, s);
                                acc_s += up * static_cast<float>(std::nearbyint(ratio) - ratio);
                                if (gw) (*gw)[idx] += up;
                                break;
                            }
                            case ClampBranch::low:
                                acc_s += up * -z;
                                acc_z += up * -s;
                                break;
                            case ClampBranch::high:
                                acc_s += up * (static_cast<float>(spec_.qmax()) - z);
                                acc_z += up * -s;
                                break;
                        }
                    } else {
                        acc_s += up * (static_cast<float>(levels_[idx]) - z);
                        acc_z += up * -s;
                    }
                }
                if (gs) gs->at(r, g) += acc_s;
                if (gz) gz->at(r, g) += acc_z;
            }
        }
    }

    // Latent -> frozen: W_int = quantize(W) with z rounded and clamped; the
    // latent weights are dropped and only s stays trainable.
    void freeze() {
        require(mode_ == QuantMode::latent, ErrorKind::state, "layer is already frozen");
        levels_.resize(out_ * in_);
        for (std::size_t r = 0; r < out_; ++r) {
            for (std::size_t g = 0; g < groups_; ++g) {
                GroupParams p{scales_.value.at(r, g), zeros_.value.at(r, g)};
                p.scale = std::max(p.scale, kScaleFloor);
                p.zero = std::clamp(round_even(p.zero), 0.0f, static_cast<float>(spec_.qmax()));
                scales_.value.at(r, g) = p.scale;
                zeros_.value.at(r, g) = p.zero;
                const auto [b, e] = group_range(g);
                for (std::size_t j = b; j < e; ++j) {
                    levels_[r * in_ + j] = quantize_one(weight_.value.at(r, j), p, spec_);
                }
            }
        }
        weight_ = Parameter{};
        mode_ = QuantMode::frozen;
        zero_storage_ = ZeroStorage::packed;
        set_trainable(Trainable::scales_only());
    }

private:
    void check_finite() const {
        require(scales_.value.all_finite() && zeros_.value.all_finite() &&
                    (mode_ == QuantMode::frozen || weight_.value.all_finite()),
                ErrorKind::numeric, "non-finite quantization parameters");
        for (std::size_t i = 0; i < scales_.value.size(); ++i) {
            require(scales_.value[i] > 0.0f, ErrorKind::numeric, "step size must stay positive");
        }
    }

    QuantSpec spec_;
    QuantMode mode_ = QuantMode::latent;
    Trainable trainable_;
    ZeroStorage zero_storage_ = ZeroStorage::packed;
    std::size_t out_ = 0;
    std::size_t in_ = 0;
    std::size_t groups_ = 0;
    Parameter weight_;
    std::vector<std::uint8_t> levels_;
    Parameter scales_;
    Parameter zeros_;
};

}  // namespace eqat
