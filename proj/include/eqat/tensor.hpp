#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "eqat/error.hpp"

namespace eqat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major float32 array. No views or striding.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        require(data_.size() == shape_size(shape_), ErrorKind::dimension,
                "data length does not match shape " + shape_str(shape_));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows) {
        std::vector<float> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            require(r.size() == cols, ErrorKind::dimension, "ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Trailing extent, and the product of all leading extents.
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() ? size() / cols() : 0; }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> span() noexcept { return data_; }
    std::span<const float> span() const noexcept { return data_; }
    std::vector<float>& vec() noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const float> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols(), cols()};
    }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        std::uint32_t bad = 0;
        for (float v : data_) {
            bad |= static_cast<std::uint32_t>((std::bit_cast<std::uint32_t>(v) & 0x7F800000u) == 0x7F800000u);
        }
        return bad == 0;
    }

    Tensor reshaped(Shape shape) const {
        require(shape_size(shape) == size(), ErrorKind::dimension,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    bool operator==(const Tensor&) const = default;

private:
    void check_extents() const {
        for (auto e : shape_) {
            require(e > 0, ErrorKind::dimension, "tensor extents must be positive");
        }
    }

    Shape shape_;
    std::vector<float> data_;
};

// A trainable value with its gradient buffer.
struct Parameter {
    Tensor value;
    Tensor grad;
    bool requires_grad = true;

    Parameter() = default;
    explicit Parameter(Tensor v) : value(std::move(v)) {}

    void zero_grad() {
        if (grad.size() != value.size()) {
            grad = Tensor(value.shape());
        } else {
            grad.fill(0.0f);
        }
    }

    Tensor& ensure_grad() {
        if (grad.size() != value.size()) {
            grad = Tensor(value.shape());
        }
        return grad;
    }
};

namespace gemm {

namespace detail {

#if defined(__AVX512F__)
// Rows x 64 tile of C held in 4*Rows zmm accumulators; columns past `width`
// are masked off. A is [m, k] row-major, or [k, m] when TransA (leading
// dimension lda either way).
template <int Rows, bool TransA>
inline void tile_avx512(std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b, float* c,
                        std::size_t width, bool accumulate) {
    constexpr int kVecs = 4;
    __mmask16 mask[kVecs];
    for (int v = 0; v < kVecs; ++v) {
        const std::ptrdiff_t left = static_cast<std::ptrdiff_t>(width) - 16 * v;
        mask[v] = left >= 16 ? __mmask16(0xFFFF)
                  : left <= 0 ? __mmask16(0)
                              : __mmask16((1u << left) - 1u);
    }
    __m512 acc[Rows][kVecs];
    for (int r = 0; r < Rows; ++r) {
        for (int v = 0; v < kVecs; ++v) {
            acc[r][v] = accumulate ? _mm512_maskz_loadu_ps(mask[v], c + r * n + 16 * v)
                                   : _mm512_setzero_ps();
        }
    }
    for (std::size_t t = 0; t < k; ++t) {
        const float* brow = b + t * n;
        __m512 bv[kVecs];
        for (int v = 0; v < kVecs; ++v) {
            bv[v] = _mm512_maskz_loadu_ps(mask[v], brow + 16 * v);
        }
        for (int r = 0; r < Rows; ++r) {
            const float av = TransA ? a[t * lda + r] : a[r * lda + t];
            const __m512 avv = _mm512_set1_ps(av);
            for (int v = 0; v < kVecs; ++v) {
                acc[r][v] = _mm512_fmadd_ps(avv, bv[v], acc[r][v]);
            }
        }
    }
    for (int r = 0; r < Rows; ++r) {
        for (int v = 0; v < kVecs; ++v) {
            _mm512_mask_storeu_ps(c + r * n + 16 * v, mask[v], acc[r][v]);
        }
    }
}
#endif

template <bool TransA>
inline void gemm_kernel(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
                        bool accumulate) {
    const std::size_t lda = TransA ? m : k;
#if defined(__AVX512F__)
    constexpr std::size_t kRows = 6;
    constexpr std::size_t kCols = 64;
    constexpr std::size_t kDepth = 256;  // keeps the B panel cache-resident
    for (std::size_t t0 = 0; t0 < k; t0 += kDepth) {
        const std::size_t kc = std::min(kDepth, k - t0);
        const bool acc = accumulate || t0 > 0;
        const float* ap = TransA ? a + t0 * lda : a + t0;
        const float* bp = b + t0 * n;
        std::size_t i0 = 0;
        for (; i0 + kRows <= m; i0 += kRows) {
            const float* ai = TransA ? ap + i0 : ap + i0 * lda;
            for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
                tile_avx512<kRows, TransA>(n, kc, ai, lda, bp + j0, c + i0 * n + j0, std::min(kCols, n - j0), acc);
            }
        }
        for (; i0 < m; ++i0) {
            const float* ai = TransA ? ap + i0 : ap + i0 * lda;
            for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
                tile_avx512<1, TransA>(n, kc, ai, lda, bp + j0, c + i0 * n + j0, std::min(kCols, n - j0), acc);
            }
        }
    }
#else
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        if (!accumulate) {
            std::fill_n(crow, n, 0.0f);
        }
        for (std::size_t t = 0; t < k; ++t) {
            const float av = TransA ? a[t * lda + i] : a[i * lda + t];
            const float* brow = b + t * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
#endif
}

}  // namespace detail

// C[m,n] (+)= A[m,k] * B[k,n], all row-major. The accumulation order over k is
// fixed, so results are bit-reproducible for a given build.
inline void nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
               float* c, bool accumulate = false) {
    detail::gemm_kernel<false>(m, n, k, a, b, c, accumulate);
}

inline void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
    constexpr std::size_t kTile = 32;
    for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
        for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
            const std::size_t ie = std::min(rows, i0 + kTile);
            const std::size_t je = std::min(cols, j0 + kTile);
            for (std::size_t i = i0; i < ie; ++i) {
                for (std::size_t j = j0; j < je; ++j) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
inline void nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
               float* c, bool accumulate = false) {
    std::vector<float> bt(n * k);
    transpose(n, k, b, bt.data());
    nn(m, n, k, a, bt.data(), c, accumulate);
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
inline void tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
               float* c, bool accumulate = false) {
    detail::gemm_kernel<true>(m, n, k, a, b, c, accumulate);
}

}  // namespace gemm

namespace vmath {

#if defined(__AVX512F__)
// exp on 16 lanes: range reduction by ln 2, degree-6 polynomial, 2^n via scalef.
// Max relative error is within a few ulp of std::exp.
inline __m512 exp16(__m512 x) noexcept {
    x = _mm512_min_ps(_mm512_max_ps(x, _mm512_set1_ps(-103.0f)), _mm512_set1_ps(88.7f));
    const __m512 n = _mm512_roundscale_ps(_mm512_mul_ps(x, _mm512_set1_ps(1.44269504088896341f)),
                                          _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512 r = _mm512_fnmadd_ps(n, _mm512_set1_ps(0.693359375f), x);
    r = _mm512_fnmadd_ps(n, _mm512_set1_ps(-2.12194440e-4f), r);
    __m512 p = _mm512_set1_ps(1.9875691500e-4f);
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
    p = _mm512_fmadd_ps(p, _mm512_mul_ps(r, r), _mm512_add_ps(r, _mm512_set1_ps(1.0f)));
    return _mm512_scalef_ps(p, n);
}
#endif

// out[i] = exp(in[i] + shift); in and out may alias.
inline void exp(const float* in, float* out, std::size_t n, float shift = 0.0f) noexcept {
    std::size_t i = 0;
#if defined(__AVX512F__)
    const __m512 sh = _mm512_set1_ps(shift);
    for (; i + 16 <= n; i += 16) {
        _mm512_storeu_ps(out + i, exp16(_mm512_add_ps(_mm512_loadu_ps(in + i), sh)));
    }
    if (i < n) {
        const __mmask16 m = static_cast<__mmask16>((1u << (n - i)) - 1u);
        _mm512_mask_storeu_ps(out + i, m, exp16(_mm512_add_ps(_mm512_maskz_loadu_ps(m, in + i), sh)));
        return;
    }
#endif
    for (; i < n; ++i) out[i] = std::exp(in[i] + shift);
}

// out[i] = 1 / (1 + exp(-in[i]))
inline void sigmoid(const float* in, float* out, std::size_t n) noexcept {
    std::size_t i = 0;
#if defined(__AVX512F__)
    const __m512 one = _mm512_set1_ps(1.0f);
    for (; i + 16 <= n; i += 16) {
        const __m512 e = exp16(_mm512_sub_ps(_mm512_setzero_ps(), _mm512_loadu_ps(in + i)));
        _mm512_storeu_ps(out + i, _mm512_div_ps(one, _mm512_add_ps(one, e)));
    }
#endif
    for (; i < n; ++i) out[i] = 1.0f / (1.0f + std::exp(-in[i]));
}

}  // namespace vmath

}  // namespace eqat
