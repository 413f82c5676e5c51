#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eqat/error.hpp"

namespace eqat {

// One weight-quantization configuration: N-bit unsigned levels shared by
// groups of `group_size` consecutive input channels (-1 = whole row).
struct QuantSpec {
    int bits = 2;
    int group_size = 64;

    QuantSpec() = default;
    QuantSpec(int b, int g) : bits(b), group_size(g) { validate(); }

    void validate() const {
        require(bits >= 2 && bits <= 8, ErrorKind::domain, "bits must be in [2, 8]");
        require(group_size == -1 || group_size >= 1, ErrorKind::domain, "group size must be -1 or >= 1");
    }

    int qmax() const noexcept { return (1 << bits) - 1; }

    std::size_t group_len(std::size_t in_features) const noexcept {
        return group_size < 0 ? in_features : static_cast<std::size_t>(group_size);
    }

    // Groups per row; the tail group may be shorter than group_len().
    std::size_t groups_per_row(std::size_t in_features) const noexcept {
        const std::size_t g = group_len(in_features);
        return (in_features + g - 1) / g;
    }

    bool operator==(const QuantSpec&) const = default;
};

// Per-group step size and zero point. z is held as a float so it can be
// trained; at export it is rounded and clamped to [0, qmax].
struct GroupParams {
    float scale = 1.0f;
    float zero = 0.0f;
};

inline constexpr float kScaleFloor = 1e-8f;

// Round half to even.
inline float round_even(float x) noexcept { return std::nearbyint(x); }

// w / s in double so the rounding residual keeps full float precision.
inline double level_ratio(float w, float s) noexcept { return static_cast<double>(w) / static_cast<double>(s); }

inline GroupParams init_group_params(std::span<const float> group, const QuantSpec& spec) {
    require(!group.empty(), ErrorKind::dimension, "cannot initialise an empty group");
    const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
    const float qmax = static_cast<float>(spec.qmax());
    const float scale = std::max((*hi - *lo) / qmax, kScaleFloor);
    const float zero = std::clamp(round_even(-*lo / scale), 0.0f, qmax);
    return {scale, zero};
}

inline void check_params(const GroupParams& p, const QuantSpec& spec) {
    require(std::isfinite(p.scale) && p.scale > 0.0f, ErrorKind::numeric, "step size must be finite and positive");
    require(std::isfinite(p.zero) && p.zero >= 0.0f && p.zero <= static_cast<float>(spec.qmax()),
            ErrorKind::domain, "zero point outside [0, 2^N - 1]");
}

inline std::uint8_t quantize_one(float w, const GroupParams& p, const QuantSpec& spec) {
    require(std::isfinite(w), ErrorKind::numeric, "non-finite weight");
    const float u = static_cast<float>(std::nearbyint(level_ratio(w, p.scale))) + round_even(p.zero);
    return static_cast<std::uint8_t>(std::clamp(u, 0.0f, static_cast<float>(spec.qmax())));
}

inline std::vector<std::uint8_t> quantize(std::span<const float> w, const GroupParams& p, const QuantSpec& spec) {
    check_params(p, spec);
    std::vector<std::uint8_t> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = quantize_one(w[i], p, spec);
    return out;
}

inline float dequantize_one(std::uint8_t q, const GroupParams& p) noexcept {
    return (static_cast<float>(q) - p.zero) * p.scale;
}

inline std::vector<float> dequantize(std::span<const std::uint8_t> q, const GroupParams& p, const QuantSpec& spec) {
    std::vector<float> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
        require(q[i] <= spec.qmax(), ErrorKind::domain, "integer level outside [0, 2^N - 1]");
        out[i] = dequantize_one(q[i], p);
    }
    return out;
}

// How the zero points are stored: packed N-bit integers, or binary16 floats
// once they have been trained end to end.
enum class ZeroStorage { packed, float16 };

// N + (N + 16) / g, or N + 32 / g with binary16 zero points.
inline double avg_bits(const QuantSpec& spec, std::size_t in_features = 0,
                       ZeroStorage zeros = ZeroStorage::packed) {
    const double g = static_cast<double>(spec.group_size < 0 ? in_features : spec.group_size);
    require(g > 0, ErrorKind::domain, "channel-wise avg_bits needs the input extent");
    const double zbits = zeros == ZeroStorage::packed ? spec.bits : 16.0;
    return spec.bits + (zbits + 16.0) / g;
}

// Two-decimal display with ties rounded away from zero (4.625 -> "4.63").
inline std::string format_2dp(double v) {
    const double r = std::floor(std::fabs(v) * 100.0 + 0.5) / 100.0;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", std::copysign(r, v));
    return buf;
}

struct LayerDims {
    std::size_t out = 0;
    std::size_t in = 0;
};

struct SizeBreakdown {
    std::uint64_t weight_bits = 0;
    std::uint64_t zero_bits = 0;
    std::uint64_t scale_bits = 0;
    std::uint64_t fp_bits = 0;
    std::uint64_t bytes = 0;
    std::uint64_t quantized_params = 0;

    std::uint64_t total_bits() const noexcept { return weight_bits + zero_bits + scale_bits + fp_bits; }
};

// Storage accounting for the packed layout: each weight row padded to a byte,
// zero points packed contiguously per layer, binary16 step sizes, and 2 bytes
// per unquantized parameter.
inline SizeBreakdown model_size(std::span<const LayerDims> layers, const QuantSpec& spec,
                                std::uint64_t fp_param_count, ZeroStorage zeros = ZeroStorage::packed) {
    SizeBreakdown s;
    const std::uint64_t n = static_cast<std::uint64_t>(spec.bits);
    for (const auto& l : layers) {
        const std::uint64_t groups = l.out * spec.groups_per_row(l.in);
        const std::uint64_t row_bytes = (l.in * n + 7) / 8;
        const std::uint64_t wbits = l.in * n * l.out;
        const std::uint64_t zbits = groups * (zeros == ZeroStorage::packed ? n : 16);
        s.weight_bits += wbits;
        s.zero_bits += zbits;
        s.scale_bits += groups * 16;
        s.quantized_params += static_cast<std::uint64_t>(l.out) * l.in;
        s.bytes += l.out * row_bytes + (zbits + 7) / 8 + groups * 2;
    }
    s.fp_bits = fp_param_count * 16;
    s.bytes += fp_param_count * 2;
    return s;
}

inline std::uint64_t model_size_bytes(std::span<const LayerDims> layers, const QuantSpec& spec,
                                      std::uint64_t fp_param_count, ZeroStorage zeros = ZeroStorage::packed) {
    return model_size(layers, spec, fp_param_count, zeros).bytes;
}

}  // namespace eqat
