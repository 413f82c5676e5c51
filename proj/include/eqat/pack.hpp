#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eqat/error.hpp"
#include "eqat/qlinear.hpp"
#include "eqat/quant.hpp"

namespace eqat {

// IEEE-754 binary16 <-> binary32. Narrowing rounds to nearest, ties to even.
inline std::uint16_t float_to_half(float f) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7FFFFFFFu;
    if (abs >= 0x7F800000u) {
        return sign | (abs > 0x7F800000u ? 0x7E00u : 0x7C00u);
    }
    if (abs >= 0x477FF000u) {  // rounds past 65504
        return sign | 0x7C00u;
    }
    if (abs < 0x38800000u) {  // below 2^-14: subnormal half
        const double scaled = static_cast<double>(std::bit_cast<float>(abs)) * 16777216.0;  // * 2^24
        return sign | static_cast<std::uint16_t>(std::nearbyint(scaled));
    }
    std::uint32_t h = (abs - 0x38000000u) >> 13;
    const std::uint32_t rest = abs & 0x1FFFu;
    if (rest > 0x1000u || (rest == 0x1000u && (h & 1u))) {
        ++h;
    }
    return sign | static_cast<std::uint16_t>(h);
}

inline float half_to_float(std::uint16_t h) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t man = h & 0x3FFu;
    if (exp == 0) {
        const float v = std::ldexp(static_cast<float>(man), -24);
        return sign ? -v : v;
    }
    if (exp == 31) {
        return std::bit_cast<float>(sign | 0x7F800000u | (man << 13));
    }
    return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (man << 13));
}

inline std::size_t packed_bytes(std::size_t count, int bits) noexcept {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

// Value i occupies bits [N*i, N*i + N) counted LSB-first from byte 0.
inline void pack_into(std::span<const std::uint8_t> values, int bits, std::uint8_t* out) {
    require(bits >= 1 && bits <= 8, ErrorKind::domain, "pack width must be in [1, 8]");
    const unsigned limit = 1u << bits;
    std::fill_n(out, packed_bytes(values.size(), bits), std::uint8_t{0});
    std::size_t bit = 0;
    for (auto v : values) {
        require(v < limit, ErrorKind::domain, "value " + std::to_string(v) + " does not fit in " +
                                                  std::to_string(bits) + " bits");
        const std::size_t byte = bit >> 3;
        const unsigned shift = bit & 7u;
        const unsigned word = static_cast<unsigned>(v) << shift;
        out[byte] |= static_cast<std::uint8_t>(word & 0xFFu);
        if (shift + static_cast<unsigned>(bits) > 8) {
            out[byte + 1] |= static_cast<std::uint8_t>(word >> 8);
        }
        bit += static_cast<std::size_t>(bits);
    }
}

inline std::vector<std::uint8_t> pack(std::span<const std::uint8_t> values, int bits) {
    std::vector<std::uint8_t> out(packed_bytes(values.size(), bits));
    pack_into(values, bits, out.data());
    return out;
}

inline std::uint8_t unpack_one(const std::uint8_t* bytes, std::size_t index, int bits) noexcept {
    const std::size_t bit = index * static_cast<std::size_t>(bits);
    const std::size_t byte = bit >> 3;
    const unsigned shift = bit & 7u;
    unsigned word = bytes[byte];
    if (shift + static_cast<unsigned>(bits) > 8) {
        word |= static_cast<unsigned>(bytes[byte + 1]) << 8;
    }
    return static_cast<std::uint8_t>((word >> shift) & ((1u << bits) - 1u));
}

inline std::vector<std::uint8_t> unpack(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
    require(bits >= 1 && bits <= 8, ErrorKind::domain, "pack width must be in [1, 8]");
    require(bytes.size() >= packed_bytes(count, bits), ErrorKind::format,
            "packed buffer holds " + std::to_string(bytes.size()) + " bytes, need " +
                std::to_string(packed_bytes(count, bits)));
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = unpack_one(bytes.data(), i, bits);
    return out;
}

// Deployment layout of one quantized projection: N-bit weights packed per row
// (each row starts on a byte boundary), zero points packed contiguously over
// all groups (or binary16 when trained end to end), binary16 step sizes.
struct PackedTensor {
    int bits = 2;
    int group_size = 64;
    std::size_t out = 0;
    std::size_t in = 0;
    ZeroStorage zero_storage = ZeroStorage::packed;
    std::vector<std::uint8_t> payload;
    std::vector<std::uint8_t> zeros;      // packed N-bit, when zero_storage == packed
    std::vector<std::uint16_t> zeros_f16;  // when zero_storage == float16
    std::vector<std::uint16_t> scales;     // binary16, [out, groups]

    QuantSpec spec() const { return QuantSpec(bits, group_size); }
    std::size_t row_bytes() const noexcept { return packed_bytes(in, bits); }
    std::size_t groups_per_row() const noexcept { return spec().groups_per_row(in); }
    std::size_t group_count() const noexcept { return out * groups_per_row(); }

    float scale(std::size_t r, std::size_t g) const noexcept {
        return half_to_float(scales[r * groups_per_row() + g]);
    }
    float zero(std::size_t r, std::size_t g) const noexcept {
        const std::size_t i = r * groups_per_row() + g;
        return zero_storage == ZeroStorage::packed ? static_cast<float>(unpack_one(zeros.data(), i, bits))
                                                   : half_to_float(zeros_f16[i]);
    }

    void validate() const {
        spec().validate();
        require(payload.size() == out * row_bytes(), ErrorKind::format, "payload length mismatch");
        require(scales.size() == group_count(), ErrorKind::format, "scale count mismatch");
        if (zero_storage == ZeroStorage::packed) {
            require(zeros.size() == packed_bytes(group_count(), bits), ErrorKind::format, "zero buffer length mismatch");
        } else {
            require(zeros_f16.size() == group_count(), ErrorKind::format, "zero count mismatch");
        }
    }
};

// Step sizes below the smallest binary16 subnormal are stored as that
// subnormal, so a floored scale never reloads as zero.
inline std::uint16_t scale_to_half(float s) {
    std::uint16_t h = float_to_half(s);
    if ((h & 0x7FFFu) == 0) h = 1;
    require((h & 0x7C00u) != 0x7C00u, ErrorKind::numeric, "step size does not fit in binary16");
    return h;
}

inline PackedTensor pack_layer(const QuantLinear& q) {
    require(q.mode() == QuantMode::frozen, ErrorKind::state, "only frozen layers can be packed");
    PackedTensor p;
    p.bits = q.spec().bits;
    p.group_size = q.spec().group_size;
    p.out = q.out_features();
    p.in = q.in_features();
    p.zero_storage = q.zero_storage();
    p.payload.resize(p.out * p.row_bytes());
    const auto& lv = q.levels();
    for (std::size_t r = 0; r < p.out; ++r) {
        pack_into(std::span(lv).subspan(r * p.in, p.in), p.bits, p.payload.data() + r * p.row_bytes());
    }
    const std::size_t groups = q.group_count();
    p.scales.resize(groups);
    for (std::size_t i = 0; i < groups; ++i) p.scales[i] = scale_to_half(q.scales().value[i]);
    if (p.zero_storage == ZeroStorage::packed) {
        std::vector<std::uint8_t> z(groups);
        for (std::size_t i = 0; i < groups; ++i) {
            const float v = q.zeros().value[i];
            require(v >= 0.0f && v <= static_cast<float>(q.spec().qmax()) && v == std::nearbyint(v),
                    ErrorKind::domain, "packed zero points must be integral levels");
            z[i] = static_cast<std::uint8_t>(v);
        }
        p.zeros = pack(z, p.bits);
    } else {
        p.zeros_f16.resize(groups);
        for (std::size_t i = 0; i < groups; ++i) p.zeros_f16[i] = float_to_half(q.zeros().value[i]);
    }
    return p;
}

inline QuantLinear unpack_layer(const PackedTensor& p) {
    p.validate();
    std::vector<std::uint8_t> levels(p.out * p.in);
    for (std::size_t r = 0; r < p.out; ++r) {
        const auto row = unpack(std::span(p.payload).subspan(r * p.row_bytes(), p.row_bytes()), p.bits, p.in);
        std::copy(row.begin(), row.end(), levels.begin() + static_cast<std::ptrdiff_t>(r * p.in));
    }
    const std::size_t gpr = p.groups_per_row();
    Tensor scales({p.out, gpr});
    Tensor zeros({p.out, gpr});
    for (std::size_t r = 0; r < p.out; ++r) {
        for (std::size_t g = 0; g < gpr; ++g) {
            scales.at(r, g) = p.scale(r, g);
            zeros.at(r, g) = p.zero(r, g);
        }
    }
    QuantLinear q = QuantLinear::from_frozen(p.out, p.in, p.spec(), std::move(levels), std::move(scales),
                                             std::move(zeros), p.zero_storage);
    if (p.zero_storage == ZeroStorage::float16) {
        q.set_trainable(Trainable::scales_only());
    }
    return q;
}

// FNV-1a over a byte range; used to fingerprint frozen integer weights.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 1469598103934665603ull) {
    for (auto b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace eqat
