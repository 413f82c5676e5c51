#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqat/autograd.hpp"
#include "eqat/data.hpp"
#include "eqat/error.hpp"
#include "eqat/model.hpp"
#include "eqat/optim.hpp"
#include "eqat/pack.hpp"
#include "eqat/qlinear.hpp"

namespace eqat {

inline float default_e2e_lr(int bits) { return bits == 2 ? 2e-5f : 1e-5f; }

struct E2EQPPlan {
    float lr = 2e-5f;
    std::size_t batch = 32;        // sequences per optimizer step
    std::size_t micro_batch = 8;   // sequences per forward/backward pass
    std::size_t epochs = 1;
    std::size_t n_samples = 4096;  // training sequences drawn from the corpus
    std::size_t ctx_len = 128;
    Trainable trainable = Trainable::scales_only();
    std::uint64_t seed = 0;

    static E2EQPPlan defaults_for(int bits) {
        E2EQPPlan p;
        p.lr = default_e2e_lr(bits);
        return p;
    }

    void validate() const {
        require(lr >= 0.0f, ErrorKind::domain, "learning rate must be non-negative");
        require(batch >= 1 && micro_batch >= 1 && epochs >= 1 && n_samples >= 1, ErrorKind::domain,
                "batch, micro_batch, epochs and n_samples must be at least 1");
        require(ctx_len >= 2, ErrorKind::domain, "ctx_len must be at least 2");
        require(!trainable.weight, ErrorKind::domain, "E2E-QP cannot train integer weights");
        require(trainable.scale || trainable.zero, ErrorKind::domain, "E2E-QP trains s, z or both");
    }
};

struct E2EStepLog {
    std::size_t step = 0;
    double loss = 0.0;
    std::size_t tokens = 0;

    nlohmann::json json() const { return {{"step", step}, {"loss", loss}, {"tokens", tokens}}; }
};

struct E2EQPResult {
    Model model;
    std::vector<E2EStepLog> log;
    std::uint64_t hash_before = 0;
    std::uint64_t hash_after = 0;
};

// FNV-1a over the packed integer weights of every quantized projection.
inline std::uint64_t frozen_weight_hash(Model& m) {
    std::uint64_t h = 1469598103934665603ull;
    m.for_each_projection([&](const std::string&, Projection& p) {
        if (auto* q = std::get_if<QuantLinear>(&p)) h = fnv1a(pack_layer(*q).payload, h);
    });
    return h;
}

inline bool fully_frozen(Model& m) {
    bool ok = true;
    m.for_each_projection([&](const std::string&, Projection& p) {
        const auto* q = std::get_if<QuantLinear>(&p);
        ok = ok && q && q->mode() == QuantMode::frozen;
    });
    return ok;
}

struct ParamCensus {
    std::uint64_t trainable_scales = 0;
    std::uint64_t trainable_zeros = 0;
    std::uint64_t frozen_scales = 0;
    std::uint64_t frozen_zeros = 0;
    std::uint64_t frozen_ints = 0;   // quantized weights
    std::uint64_t frozen_dense = 0;  // embeddings, norms, head, unquantized projections
    std::uint64_t groups = 0;

    std::uint64_t quant_params() const noexcept {
        return trainable_scales + trainable_zeros + frozen_scales + frozen_zeros;
    }
    // Groups per quantized weight: 1/g, the per-parameter overhead of one (s, z) pair.
    double group_fraction() const noexcept {
        return frozen_ints ? static_cast<double>(groups) / static_cast<double>(frozen_ints) : 0.0;
    }
    // (s + z count) / quantized weights = 2/g.
    double quant_param_fraction() const noexcept {
        return frozen_ints ? static_cast<double>(quant_params()) / static_cast<double>(frozen_ints) : 0.0;
    }

    nlohmann::json json() const {
        return {{"trainable_s", trainable_scales}, {"trainable_z", trainable_zeros},
                {"frozen_s", frozen_scales},       {"frozen_z", frozen_zeros},
                {"frozen_int", frozen_ints},       {"frozen_dense", frozen_dense},
                {"groups", groups},                {"group_fraction", group_fraction()},
                {"quant_param_fraction", quant_param_fraction()}};
    }
};

inline ParamCensus trainable_param_census(Model& m, const Trainable& trainable) {
    ParamCensus c;
    m.for_each_dense([&](const std::string&, Parameter& p) { c.frozen_dense += p.value.size(); });
    m.for_each_projection([&](const std::string&, Projection& p) {
        if (auto* d = std::get_if<DenseLinear>(&p)) {
            c.frozen_dense += d->weight.value.size();
            return;
        }
        const auto& q = std::get<QuantLinear>(p);
        const std::uint64_t g = q.group_count();
        c.groups += g;
        c.frozen_ints += static_cast<std::uint64_t>(q.out_features()) * q.in_features();
        (trainable.scale ? c.trainable_scales : c.frozen_scales) += g;
        (trainable.zero ? c.trainable_zeros : c.frozen_zeros) += g;
    });
    return c;
}

// End-to-end next-token training of the quantization parameters with the
// integer weights held fixed. Each step averages the loss over every token
// of `batch` sequences, accumulated micro_batch sequences at a time.
inline E2EQPResult run_e2e_qp(const Model& qmodel, const TokenStream& corpus, const E2EQPPlan& plan,
                              std::ostream* log = nullptr) {
    plan.validate();
    E2EQPResult res;
    res.model = qmodel;
    Model& m = res.model;
    require(fully_frozen(m), ErrorKind::state, "E2E-QP needs every projection quantized and frozen");
    require(corpus.size() >= plan.batch * plan.ctx_len, ErrorKind::data,
            "corpus shorter than batch x ctx_len tokens");
    require(plan.ctx_len <= m.config.max_context, ErrorKind::domain, "ctx_len exceeds max_context");

    m.set_requires_grad(false);
    Adam opt;
    m.for_each_projection([&](const std::string&, Projection& p) {
        auto& q = std::get<QuantLinear>(p);
        q.set_trainable(plan.trainable);
        if (plan.trainable.scale) opt.add(q.scales(), plan.lr);
        if (plan.trainable.zero) opt.add(q.zeros(), plan.lr);
    });
    res.hash_before = frozen_weight_hash(m);

    // Windows of ctx_len + 1 tokens: inputs are the first ctx_len, targets the last.
    const std::size_t L = plan.ctx_len;
    const CalibSet windows = sample_calibration(corpus, plan.n_samples, L + 1, plan.seed);
    const std::size_t n = windows.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(plan.seed ^ 0xE2Eull);

    std::size_t step = 0;
    for (std::size_t ep = 0; ep < plan.epochs; ++ep) {
        shuffle_in_place(order, rng);
        for (std::size_t b0 = 0; b0 < n; b0 += plan.batch) {
            const std::size_t nb = std::min(plan.batch, n - b0);
            double loss_sum = 0.0;
            for (std::size_t m0 = 0; m0 < nb; m0 += plan.micro_batch) {
                const std::size_t nm = std::min(plan.micro_batch, nb - m0);
                std::vector<std::uint32_t> in(nm * L), tgt(nm * L);
                for (std::size_t i = 0; i < nm; ++i) {
                    const auto s = windows.sample(order[b0 + m0 + i]);
                    std::copy_n(s.begin(), L, in.begin() + static_cast<std::ptrdiff_t>(i * L));
                    std::copy_n(s.begin() + 1, L, tgt.begin() + static_cast<std::ptrdiff_t>(i * L));
                }
                Tape tape;
                try {
                    Var loss = softmax_ce_loss(forward_model(m, tape, in, L), tgt);
                    const float w = static_cast<float>(nm) / static_cast<float>(nb);
                    tape.backward(loss, w);
                    loss_sum += static_cast<double>(loss.value()[0]) * w;
                } catch (const Error& e) {
                    if (e.kind() == ErrorKind::numeric) {
                        fail(ErrorKind::numeric, "E2E-QP step " + std::to_string(step) + ": " + e.what());
                    }
                    throw;
                }
            }
            require(std::isfinite(loss_sum), ErrorKind::numeric, "E2E-QP loss is not finite");
            opt.step();
            opt.zero_grad();
            m.for_each_projection([&](const std::string&, Projection& p) {
                auto& q = std::get<QuantLinear>(p);
                for (auto& s : q.scales().value.vec()) s = std::max(s, kScaleFloor);
            });
            E2EStepLog rec{++step, loss_sum, nb * L};
            if (log) *log << rec.json().dump() << std::endl;
            res.log.push_back(rec);
        }
    }
    m.for_each_projection([&](const std::string&, Projection& p) {
        auto& q = std::get<QuantLinear>(p);
        q.scales().grad = Tensor{};
        q.zeros().grad = Tensor{};
    });
    res.hash_after = frozen_weight_hash(m);
    require(res.hash_before == res.hash_after, ErrorKind::invariant, "integer weights changed during E2E-QP");
    return res;
}

}  // namespace eqat
