#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <vector>

#include "test_util.hpp"

using namespace eqat;
using eqat::test::kind_of;
using eqat::test::token_stream;

namespace {

std::vector<std::uint32_t> iota_ids(std::size_t n, std::uint32_t vocab) {
    std::vector<std::uint32_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint32_t>(i % vocab);
    return v;
}

}  // namespace

TEST(TokenStreamFormat, RoundTripAndHeader) {
    const TokenStream s = token_stream({1, 2, 250, 7}, 256);
    const std::string bytes = encode_tokens(s);
    EXPECT_EQ(bytes.substr(0, 4), "EQTK");
    EXPECT_EQ(bytes.size(), 4u + 4u + 8u + 4u * 4u);
    const TokenStream back = decode_tokens(bytes);
    EXPECT_EQ(back.ids, s.ids);
    EXPECT_EQ(back.vocab_size, 256u);
}

TEST(TokenStreamFormat, RejectsBadInput) {
    std::string bytes = encode_tokens(token_stream({1, 2, 3}, 4));
    EXPECT_EQ(kind_of([&] { decode_tokens(bytes.substr(0, bytes.size() - 1)); }), ErrorKind::format);
    std::string magic = bytes;
    magic[1] = 'X';
    EXPECT_EQ(kind_of([&] { decode_tokens(magic); }), ErrorKind::format);
    // id 3 with vocab 3
    std::string vocab = bytes;
    vocab[4] = 3;
    EXPECT_EQ(kind_of([&] { decode_tokens(vocab); }), ErrorKind::data);
}

TEST(Tokenizer, BytesAreTokens) {
    const TokenStream s = tokenize_bytes("h\xc3\xa9");
    EXPECT_EQ(s.vocab_size, 256u);
    EXPECT_EQ(s.ids, (std::vector<std::uint32_t>{'h', 0xC3, 0xA9}));
}

TEST(Calibration, WholeStreamWhenSingleWindow) {
    const TokenStream s = token_stream(iota_ids(16, 32), 32);
    const CalibSet c = sample_calibration(s, 1, 16, 5);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.offsets[0], 0u);
    EXPECT_EQ(std::vector<std::uint32_t>(c.sample(0).begin(), c.sample(0).end()), s.ids);
}

TEST(Calibration, DeterministicDistinctContiguous) {
    const TokenStream s = token_stream(iota_ids(5000, 5000), 5000);
    const CalibSet a = sample_calibration(s, 200, 32, 9), b = sample_calibration(s, 200, 32, 9);
    EXPECT_EQ(a.offsets, b.offsets);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_FALSE(a.with_replacement);
    EXPECT_EQ(std::set<std::size_t>(a.offsets.begin(), a.offsets.end()).size(), 200u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto w = a.sample(i);
        for (std::size_t j = 0; j < 32; ++j) ASSERT_EQ(w[j], a.offsets[i] + j);
    }
    EXPECT_NE(sample_calibration(s, 200, 32, 10).offsets, a.offsets);
}

TEST(Calibration, OffsetsRoughlyUniform) {
    const TokenStream s = token_stream(iota_ids(1100, 1100), 1100);
    std::vector<int> hist(10, 0);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        for (auto off : sample_calibration(s, 20, 101, seed).offsets) ++hist[off / 100];
    }
    for (int h : hist) EXPECT_NEAR(h, 400, 80);
}

TEST(Calibration, WithReplacementWarns) {
    const TokenStream s = token_stream(iota_ids(10, 16), 16);
    std::ostringstream warn;
    const CalibSet c = sample_calibration(s, 20, 8, 1, &warn);
    EXPECT_TRUE(c.with_replacement);
    EXPECT_EQ(c.size(), 20u);
    EXPECT_NE(warn.str().find("with replacement"), std::string::npos);
    for (auto off : c.offsets) EXPECT_LE(off, 2u);
}

TEST(Calibration, TooShortIsDataError) {
    const TokenStream s = token_stream(iota_ids(5, 8), 8);
    EXPECT_EQ(kind_of([&] { sample_calibration(s, 1, 6, 0); }), ErrorKind::data);
}

TEST(Perplexity, GeometricMeanOfNll) {
    const std::vector<double> nll{std::log(2.0), std::log(8.0)};
    EXPECT_NEAR(perplexity_from_nll(nll), 4.0, 1e-12);
    EXPECT_EQ(kind_of([] { perplexity_from_nll({}); }), ErrorKind::data);
}

TEST(Perplexity, UniformLogitsGiveVocab) {
    const TokenStream s = test::patterned_stream(1000, 50, 3);
    auto uniform = [](std::span<const std::uint32_t> t, std::size_t) { return Tensor({t.size(), 50}); };
    const auto r = evaluate_perplexity(uniform, s, 64);
    EXPECT_NEAR(r.ppl, 50.0, 1e-9);
    // 1000 / 64 = 15 full windows, 63 predictions each
    EXPECT_EQ(r.windows, 15u);
    EXPECT_EQ(r.positions, 15u * 63u);
}

TEST(Perplexity, OracleModelApproachesOne) {
    const TokenStream s = test::patterned_stream(2000, 40, 4);
    auto oracle = [&](std::span<const std::uint32_t> t, std::size_t) {
        Tensor lg({t.size(), 40});
        for (std::size_t i = 0; i + 1 < t.size(); ++i) lg.at(i, t[i + 1]) = 30.0f;
        return lg;
    };
    EXPECT_LT(evaluate_perplexity(oracle, s, 32).ppl, 1.0 + 1e-9);
}

TEST(Perplexity, NoCarryAcrossWindows) {
    // every call gets whole windows of exactly ctx_len tokens
    const TokenStream s = token_stream(iota_ids(40, 40), 40);
    std::vector<std::size_t> sizes;
    auto probe = [&](std::span<const std::uint32_t> t, std::size_t L) {
        sizes.push_back(L);
        return Tensor({t.size(), 40});
    };
    const auto r = evaluate_perplexity(probe, s, 8, 0);
    EXPECT_EQ(r.windows, 5u);
    EXPECT_EQ(r.positions, 35u);
    for (auto L : sizes) EXPECT_EQ(L, 8u);
}

TEST(Perplexity, Errors) {
    auto any = [](std::span<const std::uint32_t> t, std::size_t) { return Tensor({t.size(), 4}); };
    EXPECT_EQ(kind_of([&] { evaluate_perplexity(any, token_stream({}, 4), 4); }), ErrorKind::data);
    EXPECT_EQ(kind_of([&] { evaluate_perplexity(any, token_stream({1, 2, 3, 0}, 4), 4); }), ErrorKind::data);
}

TEST(GapReport, IdenticalStreamsGiveZeroGap) {
    const TokenStream s = test::patterned_stream(600, 20, 5);
    auto fixed = [](std::span<const std::uint32_t> t, std::size_t) {
        Tensor lg({t.size(), 20});
        for (std::size_t i = 0; i < t.size(); ++i) lg.at(i, i % 20) = 1.0f;
        return lg;
    };
    const double train = evaluate_perplexity(fixed, s, 32, 64).mean_nll;
    const std::vector<double> log{5.0, train};
    const GapReport g = gap_report(log, s, fixed, 32);
    EXPECT_NEAR(g.gap, 0.0, 1e-12);
    EXPECT_EQ(round_to(0.123456, 4), 0.1235);
}
