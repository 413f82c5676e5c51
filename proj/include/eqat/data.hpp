#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "eqat/error.hpp"
#include "eqat/model.hpp"
#include "eqat/tensor.hpp"

namespace eqat {

// Uniform integer in [0, n) from raw 64-bit engine output (rejection
// sampling), so sample streams do not depend on the standard library's
// distribution implementation.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
    require(n > 0, ErrorKind::domain, "uniform_below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[uniform_below(rng, i)]);
    }
}

// Token ids with a declared vocabulary. On disk: "EQTK", u32 vocab, u64 count,
// then count little-endian u32 ids.
struct TokenStream {
    std::uint32_t vocab_size = 256;
    std::vector<std::uint32_t> ids;

    std::size_t size() const noexcept { return ids.size(); }

    void validate() const {
        for (auto id : ids) {
            require(id < vocab_size, ErrorKind::data, "token id " + std::to_string(id) + " >= vocab size");
        }
    }

    TokenStream slice(std::size_t begin, std::size_t end) const {
        require(begin <= end && end <= ids.size(), ErrorKind::dimension, "token slice out of range");
        return {vocab_size, std::vector<std::uint32_t>(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                                       ids.begin() + static_cast<std::ptrdiff_t>(end))};
    }
};

inline constexpr char kTokenMagic[4] = {'E', 'Q', 'T', 'K'};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const unsigned char* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::data, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::data, "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::data, "short write to " + path);
}

}  // namespace detail

inline std::string encode_tokens(const TokenStream& s) {
    s.validate();
    std::string out(kTokenMagic, 4);
    detail::put_le<std::uint32_t>(out, s.vocab_size);
    detail::put_le<std::uint64_t>(out, s.ids.size());
    out.reserve(out.size() + 4 * s.ids.size());
    for (auto id : s.ids) detail::put_le<std::uint32_t>(out, id);
    return out;
}

inline TokenStream decode_tokens(std::string_view bytes) {
    require(bytes.size() >= 16, ErrorKind::format, "token stream shorter than its header");
    require(std::memcmp(bytes.data(), kTokenMagic, 4) == 0, ErrorKind::format, "bad token stream magic");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    TokenStream s;
    s.vocab_size = detail::get_le<std::uint32_t>(p + 4);
    const auto count = detail::get_le<std::uint64_t>(p + 8);
    require(bytes.size() - 16 == count * 4, ErrorKind::format, "token count does not match payload length");
    s.ids.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) s.ids[i] = detail::get_le<std::uint32_t>(p + 16 + 4 * i);
    s.validate();
    return s;
}

inline void save_tokens(const TokenStream& s, const std::string& path) { detail::write_file(path, encode_tokens(s)); }
inline TokenStream load_tokens(const std::string& path) { return decode_tokens(detail::read_file(path)); }

// Byte-level tokenization: one token per UTF-8 byte.
inline TokenStream tokenize_bytes(std::string_view text) {
    TokenStream s;
    s.vocab_size = 256;
    s.ids.reserve(text.size());
    for (unsigned char c : text) s.ids.push_back(c);
    return s;
}

struct CalibSet {
    std::size_t ctx_len = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> offsets;
    std::vector<std::uint32_t> tokens;  // offsets.size() * ctx_len
    bool with_replacement = false;

    std::size_t size() const noexcept { return offsets.size(); }
    std::span<const std::uint32_t> sample(std::size_t i) const {
        return {tokens.data() + i * ctx_len, ctx_len};
    }
};

// n contiguous windows at uniformly drawn start offsets; distinct offsets
// when the stream allows it, otherwise drawn with replacement (with a warning).
inline CalibSet sample_calibration(const TokenStream& stream, std::size_t n, std::size_t ctx_len, std::uint64_t seed,
                                   std::ostream* warn = &std::cerr) {
    require(ctx_len >= 1, ErrorKind::data, "context length must be positive");
    require(stream.size() >= ctx_len, ErrorKind::data, "stream shorter than one calibration window");
    const std::size_t choices = stream.size() - ctx_len + 1;
    CalibSet c;
    c.ctx_len = ctx_len;
    c.seed = seed;
    std::mt19937_64 rng(seed);
    if (n <= choices) {
        // Floyd's algorithm, then a shuffle to randomise the order.
        std::unordered_set<std::size_t> seen;
        for (std::size_t j = choices - n; j < choices; ++j) {
            const auto t = static_cast<std::size_t>(uniform_below(rng, j + 1));
            const std::size_t pick = seen.insert(t).second ? t : j;
            if (pick == j) seen.insert(j);
            c.offsets.push_back(pick);
        }
        shuffle_in_place(c.offsets, rng);
    } else {
        c.with_replacement = true;
        if (warn) {
            *warn << "warning: " << n << " calibration samples requested but only " << choices
                  << " distinct offsets exist; sampling with replacement\n";
        }
        for (std::size_t i = 0; i < n; ++i) c.offsets.push_back(static_cast<std::size_t>(uniform_below(rng, choices)));
    }
    c.tokens.reserve(n * ctx_len);
    for (auto off : c.offsets) {
        c.tokens.insert(c.tokens.end(), stream.ids.begin() + static_cast<std::ptrdiff_t>(off),
                        stream.ids.begin() + static_cast<std::ptrdiff_t>(off + ctx_len));
    }
    return c;
}

inline double perplexity_from_nll(std::span<const double> nll) {
    require(!nll.empty(), ErrorKind::data, "no predicted positions");
    double sum = 0.0;
    for (double v : nll) sum += v;
    return std::exp(sum / static_cast<double>(nll.size()));
}

struct PerplexityResult {
    double ppl = 0.0;
    double mean_nll = 0.0;
    std::size_t positions = 0;
    std::size_t windows = 0;
};

// Non-overlapping windows of ctx_len tokens; each window predicts its last
// ctx_len - 1 tokens with no carry across windows; a trailing partial window
// is dropped. `logits_fn(tokens, seq_len)` returns [tokens.size(), vocab].
template <class LogitsFn>
PerplexityResult evaluate_perplexity(LogitsFn&& logits_fn, const TokenStream& stream, std::size_t ctx_len,
                                     std::size_t max_windows = 0, std::size_t windows_per_batch = 8) {
    require(!stream.ids.empty(), ErrorKind::data, "empty evaluation stream");
    require(ctx_len >= 2, ErrorKind::data, "evaluation context must be at least 2");
    require(stream.size() >= ctx_len + 1, ErrorKind::data, "evaluation stream shorter than ctx_len + 1");
    std::size_t windows = stream.size() / ctx_len;
    if (max_windows) windows = std::min(windows, max_windows);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t w0 = 0; w0 < windows; w0 += windows_per_batch) {
        const std::size_t nb = std::min(windows_per_batch, windows - w0);
        std::span<const std::uint32_t> tokens(stream.ids.data() + w0 * ctx_len, nb * ctx_len);
        const Tensor lg = logits_fn(tokens, ctx_len);
        const std::size_t vocab = lg.cols();
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t i = 0; i + 1 < ctx_len; ++i) {
                const std::size_t row = b * ctx_len + i;
                const float* lr = lg.data() + row * vocab;
                const std::uint32_t target = tokens[row + 1];
                require(target < vocab, ErrorKind::index, "target id outside logits");
                const double mx = *std::max_element(lr, lr + vocab);
                double z = 0.0;
                for (std::size_t j = 0; j < vocab; ++j) z += std::exp(lr[j] - mx);
                sum += std::log(z) + mx - lr[target];
                ++count;
            }
        }
    }
    PerplexityResult r;
    r.mean_nll = sum / static_cast<double>(count);
    r.ppl = std::exp(r.mean_nll);
    r.positions = count;
    r.windows = windows;
    return r;
}

inline PerplexityResult evaluate_perplexity(Model& m, const TokenStream& stream, std::size_t ctx_len,
                                            std::size_t max_windows = 0) {
    return evaluate_perplexity([&m](std::span<const std::uint32_t> t, std::size_t L) { return logits(m, t, L); },
                               stream, ctx_len, max_windows);
}

inline double perplexity(Model& m, const TokenStream& stream, std::size_t ctx_len) {
    return evaluate_perplexity(m, stream, ctx_len).ppl;
}

inline double round_to(double v, int decimals) {
    const double f = std::pow(10.0, decimals);
    return std::round(v * f) / f;
}

struct GapReport {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double gap = 0.0;
};

// Validation loss is the mean next-token NLL over the first `held_out_seqs`
// windows of the held-out stream, matching the per-token training loss.
template <class LogitsFn>
GapReport gap_report(std::span<const double> train_loss_log, const TokenStream& held_out, LogitsFn&& logits_fn,
                     std::size_t ctx_len, std::size_t held_out_seqs = 64) {
    require(!train_loss_log.empty(), ErrorKind::data, "empty training loss log");
    GapReport r;
    r.train_loss = train_loss_log.back();
    r.val_loss = evaluate_perplexity(logits_fn, held_out, ctx_len, held_out_seqs).mean_nll;
    r.gap = r.val_loss - r.train_loss;
    return r;
}

}  // namespace eqat
