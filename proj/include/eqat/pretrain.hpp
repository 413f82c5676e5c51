#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

#include "json.hpp"

#include "eqat/autograd.hpp"
#include "eqat/data.hpp"
#include "eqat/error.hpp"
#include "eqat/model.hpp"
#include "eqat/optim.hpp"

namespace eqat {

struct TrainPlan {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    std::size_t ctx_len = 128;
    float lr = 3e-3f;
    std::size_t warmup = 100;
    float min_lr_frac = 0.1f;  // cosine floor, as a fraction of lr
    float grad_clip = 1.0f;
    double val_frac = 0.05;    // tail of the stream held out
    std::size_t eval_windows = 64;
    std::size_t log_every = 50;
    std::uint64_t seed = 0;

    void validate() const {
        require(batch >= 1 && ctx_len >= 2, ErrorKind::domain, "batch >= 1 and ctx_len >= 2 required");
        require(lr >= 0.0f && grad_clip > 0.0f, ErrorKind::domain, "bad learning rate or clip");
        require(val_frac > 0.0 && val_frac < 1.0, ErrorKind::domain, "val_frac must be in (0, 1)");
    }
};

struct PretrainResult {
    Model model;
    double train_loss = 0.0;  // mean of the last logged window of steps
    double val_loss = 0.0;
    double val_ppl = 0.0;
    std::vector<double> loss_log;

    nlohmann::json meta() const {
        return {{"phase", "pretrain"}, {"train_loss", train_loss}, {"val_loss", val_loss}, {"val_ppl", val_ppl}};
    }
};

// Linear warmup, then cosine decay to min_lr_frac.
inline float lr_schedule(const TrainPlan& p, std::size_t step) {
    if (p.warmup && step < p.warmup) return static_cast<float>(step + 1) / static_cast<float>(p.warmup);
    const std::size_t span = p.steps > p.warmup ? p.steps - p.warmup : 1;
    const double t = std::min(1.0, static_cast<double>(step - std::min(step, p.warmup)) / static_cast<double>(span));
    return p.min_lr_frac + (1.0f - p.min_lr_frac) * static_cast<float>(0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

inline std::vector<Parameter*> all_dense_params(Model& m) {
    std::vector<Parameter*> out;
    m.for_each_dense([&](const std::string&, Parameter& p) { out.push_back(&p); });
    m.for_each_projection([&](const std::string&, Projection& p) {
        if (auto* d = std::get_if<DenseLinear>(&p)) out.push_back(&d->weight);
    });
    return out;
}

// Scales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Parameter*>& params, float max_norm) {
    double sq = 0.0;
    for (auto* p : params) {
        if (p->grad.empty()) continue;
        for (float g : p->grad.vec()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const float k = static_cast<float>(max_norm / norm);
        for (auto* p : params) {
            for (float& g : p->grad.vec()) g *= k;
        }
    }
    return norm;
}

// Next-token training on random ctx_len+1 windows of the first (1 - val_frac)
// of the stream; the tail is used for the reported validation loss.
inline PretrainResult pretrain(const ModelConfig& cfg, const TokenStream& corpus, const TrainPlan& plan,
                               std::ostream* log = nullptr) {
    plan.validate();
    cfg.validate();
    require(plan.ctx_len <= cfg.max_context, ErrorKind::domain, "ctx_len exceeds max_context");
    require(corpus.size() >= 10 * plan.ctx_len, ErrorKind::data,
            "corpus has " + std::to_string(corpus.size()) + " tokens, need at least 10 x ctx_len = " +
                std::to_string(10 * plan.ctx_len));
    require(corpus.vocab_size <= cfg.vocab_size, ErrorKind::data, "corpus vocabulary larger than the model's");

    const std::size_t split = corpus.size() - static_cast<std::size_t>(std::ceil(plan.val_frac * corpus.size()));
    const TokenStream train = corpus.slice(0, split);
    const TokenStream val = corpus.slice(split, corpus.size());
    require(train.size() >= plan.ctx_len + 1 && val.size() >= plan.ctx_len + 1, ErrorKind::data,
            "train/validation split too small for ctx_len");

    PretrainResult res;
    res.model = init_model(cfg, plan.seed);
    Model& m = res.model;
    m.set_requires_grad(true);
    const auto params = all_dense_params(m);
    Adam opt;
    for (auto* p : params) opt.add(*p, plan.lr);

    std::mt19937_64 rng(plan.seed ^ 0x5EEDu);
    const std::size_t L = plan.ctx_len;
    std::vector<std::uint32_t> inputs(plan.batch * L), targets(plan.batch * L);
    double window_sum = 0.0;
    std::size_t window_n = 0;
    for (std::size_t step = 0; step < plan.steps; ++step) {
        for (std::size_t b = 0; b < plan.batch; ++b) {
            const auto off = static_cast<std::size_t>(uniform_below(rng, train.size() - L));
            for (std::size_t i = 0; i < L; ++i) {
                inputs[b * L + i] = train.ids[off + i];
                targets[b * L + i] = train.ids[off + i + 1];
            }
        }
        Tape tape;
        Var loss = softmax_ce_loss(forward_model(m, tape, inputs, L), targets);
        tape.backward(loss);
        const double l = loss.value()[0];
        res.loss_log.push_back(l);
        clip_grad_norm(params, plan.grad_clip);
        opt.set_lr_scale(lr_schedule(plan, step));
        opt.step();
        opt.zero_grad();
        window_sum += l;
        ++window_n;
        if (log && plan.log_every && (step + 1) % plan.log_every == 0) {
            *log << nlohmann::json{{"step", step + 1}, {"loss", window_sum / window_n},
                                   {"lr", plan.lr * lr_schedule(plan, step)}}.dump()
                 << std::endl;
            window_sum = 0.0;
            window_n = 0;
        }
    }
    m.set_requires_grad(false);
    for (auto* p : params) p->grad = Tensor{};

    if (!res.loss_log.empty()) {
        const std::size_t k = std::min<std::size_t>(res.loss_log.size(), plan.log_every ? plan.log_every : 50);
        double s = 0.0;
        for (std::size_t i = res.loss_log.size() - k; i < res.loss_log.size(); ++i) s += res.loss_log[i];
        res.train_loss = s / static_cast<double>(k);
    }
    const PerplexityResult ev = evaluate_perplexity(m, val, L, plan.eval_windows);
    res.val_loss = ev.mean_nll;
    res.val_ppl = ev.ppl;
    return res;
}

}  // namespace eqat
