#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <string>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "eqat/error.hpp"
#include "eqat/pack.hpp"
#include "eqat/quant.hpp"

namespace eqat {

namespace detail {

// Byte -> the 8/N levels it holds, as floats.
template <int Bits>
struct LevelTable {
    static constexpr int kPerByte = 8 / Bits;
    std::array<std::array<float, kPerByte>, 256> v{};
    LevelTable() {
        for (int b = 0; b < 256; ++b) {
            for (int i = 0; i < kPerByte; ++i) v[b][i] = static_cast<float>((b >> (i * Bits)) & ((1 << Bits) - 1));
        }
    }
};

template <int Bits>
inline const LevelTable<Bits>& level_table() {
    static const LevelTable<Bits> t;
    return t;
}

inline float dot(const float* a, const float* b, std::size_t n) noexcept {
#if defined(__AVX512F__)
    __m512 acc = _mm512_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc);
    if (i < n) {
        const __mmask16 m = static_cast<__mmask16>((1u << (n - i)) - 1u);
        acc = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(m, a + i), _mm512_maskz_loadu_ps(m, b + i), acc);
    }
    return _mm512_reduce_add_ps(acc);
#else
    float s = 0.0f;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
#endif
}

// Decode levels [begin, begin + n) of one packed row into floats.
template <int Bits>
inline void decode_levels(const std::uint8_t* row, std::size_t begin, std::size_t n, float* out) noexcept {
    if constexpr (Bits == 8) {
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(row[begin + i]);
    } else if constexpr (8 % Bits == 0) {
        constexpr std::size_t per = 8 / Bits;
        const auto& t = level_table<Bits>().v;
        std::size_t i = 0;
        for (; i < n && (begin + i) % per; ++i) out[i] = static_cast<float>(unpack_one(row, begin + i, Bits));
        for (; i + per <= n; i += per) {
            const auto& e = t[row[(begin + i) / per]];
            for (std::size_t j = 0; j < per; ++j) out[i + j] = e[j];
        }
        for (; i < n; ++i) out[i] = static_cast<float>(unpack_one(row, begin + i, Bits));
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(unpack_one(row, begin + i, Bits));
    }
}

template <int Bits>
inline void packed_gemv_impl(const PackedTensor& w, const float* x, float* y) {
    const std::size_t gpr = w.groups_per_row();
    const std::size_t glen = w.spec().group_len(w.in);
    const std::size_t rb = w.row_bytes();
    std::vector<float> buf(glen);
    for (std::size_t r = 0; r < w.out; ++r) {
        const std::uint8_t* row = w.payload.data() + r * rb;
        float acc = 0.0f;
        for (std::size_t g = 0; g < gpr; ++g) {
            const std::size_t b = g * glen;
            const std::size_t n = std::min(glen, w.in - b);
            decode_levels<Bits>(row, b, n, buf.data());
            const float z = w.zero(r, g);
            for (std::size_t j = 0; j < n; ++j) buf[j] -= z;
            acc += w.scale(r, g) * dot(buf.data(), x + b, n);
        }
        y[r] = acc;
    }
}

}  // namespace detail

// y = W_hat x with W_hat never materialised: each group is unpacked, shifted by
// its zero point, dotted with x and scaled, in 32-bit floats.
inline std::vector<float> packed_gemv(const PackedTensor& w, std::span<const float> x) {
    require(x.size() == w.in, ErrorKind::dimension,
            "gemv input has " + std::to_string(x.size()) + " entries, layer expects " + std::to_string(w.in));
    std::vector<float> y(w.out);
    switch (w.bits) {
        case 2: detail::packed_gemv_impl<2>(w, x.data(), y.data()); break;
        case 3: detail::packed_gemv_impl<3>(w, x.data(), y.data()); break;
        case 4: detail::packed_gemv_impl<4>(w, x.data(), y.data()); break;
        case 5: detail::packed_gemv_impl<5>(w, x.data(), y.data()); break;
        case 6: detail::packed_gemv_impl<6>(w, x.data(), y.data()); break;
        case 7: detail::packed_gemv_impl<7>(w, x.data(), y.data()); break;
        case 8: detail::packed_gemv_impl<8>(w, x.data(), y.data()); break;
        default: fail(ErrorKind::domain, "unsupported bit width " + std::to_string(w.bits));
    }
    return y;
}

// Reference path: dequantize the whole matrix, then a double-accumulated dense product.
inline std::vector<float> reference_gemv(const PackedTensor& w, std::span<const float> x) {
    require(x.size() == w.in, ErrorKind::dimension, "gemv input length mismatch");
    const QuantLinear q = unpack_layer(w);
    const Tensor wh = q.dequantized_weight();
    std::vector<float> y(w.out);
    for (std::size_t r = 0; r < w.out; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w.in; ++j) acc += static_cast<double>(wh.at(r, j)) * x[j];
        y[r] = static_cast<float>(acc);
    }
    return y;
}

// ||a - b||_inf / ||b||_inf
inline double max_rel_deviation(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), ErrorKind::dimension, "length mismatch");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::fabs(static_cast<double>(a[i]) - b[i]));
        den = std::max(den, std::fabs(static_cast<double>(b[i])));
    }
    return den > 0.0 ? num / den : num;
}

// Dense binary16 weights, the 16-bit baseline.
struct DenseHalf {
    std::size_t out = 0;
    std::size_t in = 0;
    std::vector<std::uint16_t> w;
};

inline std::vector<float> dense_half_gemv(const DenseHalf& w, std::span<const float> x) {
    require(x.size() == w.in, ErrorKind::dimension, "gemv input length mismatch");
    std::vector<float> y(w.out);
    std::vector<float> buf(w.in);
    for (std::size_t r = 0; r < w.out; ++r) {
        const std::uint16_t* row = w.w.data() + r * w.in;
        std::size_t j = 0;
#if defined(__AVX512F__)
        for (; j + 16 <= w.in; j += 16) {
            _mm512_storeu_ps(buf.data() + j,
                             _mm512_cvtph_ps(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(row + j))));
        }
#endif
        for (; j < w.in; ++j) buf[j] = half_to_float(row[j]);
        y[r] = detail::dot(buf.data(), x.data(), w.in);
    }
    return y;
}

// Weight-side bytes read per gemv, from the storage format alone.
inline double bytes_per_op(std::size_t out, std::size_t in, int bits, int group_size) {
    if (bits == 16) return 2.0 * static_cast<double>(out) * static_cast<double>(in);
    return static_cast<double>(out) * static_cast<double>(in) * avg_bits(QuantSpec(bits, group_size), in) / 8.0;
}

struct BenchRow {
    std::size_t out = 0;
    std::size_t in = 0;
    int bits = 16;
    double ns_per_op = 0.0;
    double bytes_per_op = 0.0;
    double gb_per_s = 0.0;
    double speedup_vs_dense = 1.0;
};

struct BenchConfig {
    std::vector<LayerDims> dims;
    std::vector<int> bits = {2, 3, 4, 16};
    int group_size = 64;
    int reps = 7;
    std::uint64_t seed = 0;
};

inline std::vector<LayerDims> bench_preset(const std::string& name) {
    if (name == "paper") return {{4096, 4096}, {11008, 4096}};
    if (name == "toy") return {{128, 128}, {384, 128}, {128, 384}};
    fail(ErrorKind::domain, "unknown bench preset '" + name + "' (paper|toy)");
}

inline PackedTensor random_packed(std::size_t out, std::size_t in, int bits, int group_size, std::mt19937_64& rng) {
    PackedTensor p;
    p.bits = bits;
    p.group_size = group_size;
    p.out = out;
    p.in = in;
    const QuantSpec spec(bits, group_size);
    std::vector<std::uint8_t> lv(in);
    p.payload.resize(out * p.row_bytes());
    for (std::size_t r = 0; r < out; ++r) {
        for (auto& v : lv) v = static_cast<std::uint8_t>(rng() & static_cast<std::uint64_t>(spec.qmax()));
        pack_into(lv, bits, p.payload.data() + r * p.row_bytes());
    }
    std::uniform_real_distribution<float> sd(1e-3f, 2e-2f);
    std::vector<std::uint8_t> z(p.group_count());
    for (auto& v : z) v = static_cast<std::uint8_t>(rng() & static_cast<std::uint64_t>(spec.qmax()));
    p.zeros = pack(z, bits);
    p.scales.resize(p.group_count());
    for (auto& s : p.scales) s = float_to_half(sd(rng));
    return p;
}

namespace detail {

template <class Fn>
inline double median_ns(Fn&& fn, int reps) {
    fn();  // warmup
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
        const auto a = std::chrono::steady_clock::now();
        fn();
        const auto b = std::chrono::steady_clock::now();
        t.push_back(std::chrono::duration<double, std::nano>(b - a).count());
    }
    std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2), t.end());
    return t[t.size() / 2];
}

}  // namespace detail

inline std::vector<BenchRow> bench(const BenchConfig& cfg) {
    require(cfg.reps >= 3, ErrorKind::domain, "bench needs at least 3 repetitions");
    std::mt19937_64 rng(cfg.seed);
    std::vector<BenchRow> rows;
    for (const auto& d : cfg.dims) {
        std::vector<float> x(d.in);
        std::normal_distribution<float> nd(0.0f, 1.0f);
        for (auto& v : x) v = nd(rng);
        DenseHalf dense{d.out, d.in, std::vector<std::uint16_t>(d.out * d.in)};
        for (auto& v : dense.w) v = float_to_half(0.02f * nd(rng));
        volatile float sink = 0.0f;
        const double dense_ns = detail::median_ns([&] { sink = sink + dense_half_gemv(dense, x)[0]; }, cfg.reps);
        for (int bits : cfg.bits) {
            BenchRow row;
            row.out = d.out;
            row.in = d.in;
            row.bits = bits;
            if (bits == 16) {
                row.ns_per_op = detail::median_ns([&] { sink = sink + dense_half_gemv(dense, x)[0]; }, cfg.reps);
            } else {
                const PackedTensor p = random_packed(d.out, d.in, bits, cfg.group_size, rng);
                row.ns_per_op = detail::median_ns([&] { sink = sink + packed_gemv(p, x)[0]; }, cfg.reps);
            }
            row.bytes_per_op = bytes_per_op(d.out, d.in, bits, cfg.group_size);
            row.gb_per_s = row.bytes_per_op / row.ns_per_op;
            row.speedup_vs_dense = dense_ns / row.ns_per_op;
            rows.push_back(row);
        }
    }
    return rows;
}

inline constexpr const char* kBenchCsvHeader = "out,in,bits,ns_per_op,bytes_per_op,speedup_vs_dense";

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string s = std::string(kBenchCsvHeader) + "\n";
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%zu,%zu,%d,%.1f,%.1f,%.3f\n", r.out, r.in, r.bits, r.ns_per_op,
                      r.bytes_per_op, r.speedup_vs_dense);
        s += line;
    }
    return s;
}

}  // namespace eqat
