#pragma once

#include <cmath>
#include <vector>

#include "eqat/error.hpp"
#include "eqat/tensor.hpp"

namespace eqat {

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam with bias correction and no weight decay. Each registered parameter
// carries its own learning rate; parameters without a gradient buffer are
// skipped on step().
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void add(Parameter& p, float lr) {
        require(lr >= 0.0f, ErrorKind::domain, "learning rate must be non-negative");
        slots_.push_back(Slot{&p, lr, Tensor(p.value.shape()), Tensor(p.value.shape())});
        p.zero_grad();
    }

    std::size_t size() const noexcept { return slots_.size(); }
    long steps() const noexcept { return step_; }

    void set_lr_scale(float scale) { lr_scale_ = scale; }

    void zero_grad() {
        for (auto& s : slots_) s.param->zero_grad();
    }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
        for (auto& s : slots_) {
            Tensor& g = s.param->ensure_grad();
            Tensor& w = s.param->value;
            const float lr = s.lr * lr_scale_;
            if (lr == 0.0f) {
                continue;
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0f - cfg_.beta1) * g[i];
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

private:
    struct Slot {
        Parameter* param;
        float lr;
        Tensor m;
        Tensor v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    long step_ = 0;
    float lr_scale_ = 1.0f;
};

}  // namespace eqat
