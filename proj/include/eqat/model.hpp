#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "eqat/autograd.hpp"
#include "eqat/error.hpp"
#include "eqat/qlinear.hpp"
#include "eqat/tensor.hpp"

namespace eqat {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 384;
    std::size_t vocab_size = 256;
    std::size_t max_context = 128;
    float norm_eps = 1e-5f;

    void validate() const {
        require(n_layers > 0 && d_model > 0 && n_heads > 0 && d_ff > 0 && vocab_size > 0, ErrorKind::domain,
                "model extents must be positive");
        require(d_model % n_heads == 0, ErrorKind::domain, "d_model must be divisible by n_heads");
        require(max_context >= 2, ErrorKind::domain, "max_context must be at least 2");
        require(norm_eps > 0.0f, ErrorKind::domain, "norm_eps must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct DenseLinear {
    Parameter weight;  // [out, in]
};

using Projection = std::variant<DenseLinear, QuantLinear>;

inline Var project(Projection& p, Var x) {
    return std::visit(
        [&](auto& layer) -> Var {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, DenseLinear>) {
                return linear(x, x.tape->param(layer.weight));
            } else {
                return layer.forward(x);
            }
        },
        p);
}

inline bool is_quantized(const Projection& p) { return std::holds_alternative<QuantLinear>(p); }

enum ProjectionSlot : std::size_t { kQ, kK, kV, kO, kGate, kUp, kDown, kProjectionCount };

inline constexpr std::array<const char*, kProjectionCount> kProjectionNames = {"q", "k", "v", "o",
                                                                               "gate", "up", "down"};

struct TransformerBlock {
    Parameter attn_norm;
    Parameter mlp_norm;
    std::array<Projection, kProjectionCount> proj;

    // Dense weight of a projection, or the dequantized weight of a quantized one.
    Tensor effective_weight(std::size_t slot) const {
        return std::visit(
            [](const auto& layer) -> Tensor {
                using T = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<T, DenseLinear>) return layer.weight.value;
                else return layer.dequantized_weight();
            },
            proj[slot]);
    }
};

struct Model {
    ModelConfig config;
    Parameter tok_embed;   // [vocab, d]
    Parameter pos_embed;   // [max_context, d]
    std::vector<TransformerBlock> blocks;
    Parameter final_norm;  // [d]
    Parameter head;        // [vocab, d]

    // Every parameter outside the quantizable projections.
    template <class Fn>
    void for_each_dense(Fn&& fn) {
        fn(std::string("tok_embed"), tok_embed);
        fn(std::string("pos_embed"), pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            fn(p + "attn_norm", blocks[i].attn_norm);
            fn(p + "mlp_norm", blocks[i].mlp_norm);
        }
        fn(std::string("final_norm"), final_norm);
        fn(std::string("head"), head);
    }

    template <class Fn>
    void for_each_projection(Fn&& fn) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            for (std::size_t s = 0; s < kProjectionCount; ++s) {
                fn("blocks." + std::to_string(i) + "." + kProjectionNames[s], blocks[i].proj[s]);
            }
        }
    }

    void set_requires_grad(bool on) {
        for_each_dense([on](const std::string&, Parameter& p) { p.requires_grad = on; });
        for_each_projection([on](const std::string&, Projection& p) {
            if (auto* d = std::get_if<DenseLinear>(&p)) d->weight.requires_grad = on;
        });
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for_each_dense([&](const std::string&, Parameter& p) { n += p.value.size(); });
        for_each_projection([&](const std::string&, Projection& p) {
            if (auto* d = std::get_if<DenseLinear>(&p)) n += d->weight.value.size();
            else {
                const auto& q = std::get<QuantLinear>(p);
                n += q.out_features() * q.in_features();
            }
        });
        return n;
    }
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto normal = [&](Shape shape, float stddev) {
        std::normal_distribution<float> dist(0.0f, stddev);
        Tensor t(std::move(shape));
        for (auto& v : t.vec()) v = dist(rng);
        return Parameter(std::move(t));
    };
    const float std_in = 0.02f;
    const float std_out = 0.02f / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
    Model m;
    m.config = cfg;
    m.tok_embed = normal({cfg.vocab_size, cfg.d_model}, std_in);
    m.pos_embed = normal({cfg.max_context, cfg.d_model}, std_in);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        TransformerBlock b;
        b.attn_norm = Parameter(Tensor({cfg.d_model}, 1.0f));
        b.mlp_norm = Parameter(Tensor({cfg.d_model}, 1.0f));
        b.proj[kQ] = DenseLinear{normal({cfg.d_model, cfg.d_model}, std_in)};
        b.proj[kK] = DenseLinear{normal({cfg.d_model, cfg.d_model}, std_in)};
        b.proj[kV] = DenseLinear{normal({cfg.d_model, cfg.d_model}, std_in)};
        b.proj[kO] = DenseLinear{normal({cfg.d_model, cfg.d_model}, std_out)};
        b.proj[kGate] = DenseLinear{normal({cfg.d_ff, cfg.d_model}, std_in)};
        b.proj[kUp] = DenseLinear{normal({cfg.d_ff, cfg.d_model}, std_in)};
        b.proj[kDown] = DenseLinear{normal({cfg.d_model, cfg.d_ff}, std_out)};
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = Parameter(Tensor({cfg.d_model}, 1.0f));
    m.head = normal({cfg.vocab_size, cfg.d_model}, std_in);
    return m;
}

// Pre-norm attention and gated-MLP residual block over a batch of sequences
// stacked as [batch*seq_len, d_model]; attention is causal within each sequence.
inline Var forward_block(TransformerBlock& block, const ModelConfig& cfg, Var x, std::size_t seq_len) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    require(xv.cols() == cfg.d_model, ErrorKind::dimension, "block input width must equal d_model");
    require(seq_len >= 1 && seq_len <= cfg.max_context, ErrorKind::dimension,
            "sequence length " + std::to_string(seq_len) + " exceeds max_context");
    require(xv.rows() % seq_len == 0, ErrorKind::dimension, "rows must be a multiple of sequence length");

    Var h = rms_norm(x, t.param(block.attn_norm), cfg.norm_eps);
    Var q = project(block.proj[kQ], h);
    Var k = project(block.proj[kK], h);
    Var v = project(block.proj[kV], h);
    Var att = causal_attention(q, k, v, cfg.n_heads, seq_len);
    Var x1 = add(x, project(block.proj[kO], att));

    Var h2 = rms_norm(x1, t.param(block.mlp_norm), cfg.norm_eps);
    Var gate = silu(project(block.proj[kGate], h2));
    Var up = project(block.proj[kUp], h2);
    return add(x1, project(block.proj[kDown], mul(gate, up)));
}

// Token + position embeddings for `tokens` laid out as sequences of seq_len.
inline Var embed(Model& m, Tape& t, std::span<const std::uint32_t> tokens, std::size_t seq_len) {
    require(seq_len >= 1 && seq_len <= m.config.max_context, ErrorKind::dimension,
            "sequence length exceeds max_context");
    require(!tokens.empty() && tokens.size() % seq_len == 0, ErrorKind::dimension,
            "token count must be a positive multiple of the sequence length");
    std::vector<std::uint32_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::uint32_t>(i % seq_len);
    return add(embedding(t.param(m.tok_embed), tokens), embedding(t.param(m.pos_embed), pos));
}

inline Var output_head(Model& m, Var x) {
    Tape& t = *x.tape;
    return linear(rms_norm(x, t.param(m.final_norm), m.config.norm_eps), t.param(m.head));
}

// Logits [tokens.size(), vocab] for a batch of sequences of length seq_len.
inline Var forward_model(Model& m, Tape& t, std::span<const std::uint32_t> tokens, std::size_t seq_len) {
    Var x = embed(m, t, tokens, seq_len);
    for (auto& b : m.blocks) x = forward_block(b, m.config, x, seq_len);
    return output_head(m, x);
}

inline Tensor logits(Model& m, std::span<const std::uint32_t> tokens, std::size_t seq_len) {
    Tape t;
    return forward_model(m, t, tokens, seq_len).value();
}

}  // namespace eqat
