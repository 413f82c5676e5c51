#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <vector>

#include "test_util.hpp"

using namespace eqat;
using eqat::test::kind_of;

namespace {

// Decode level j of row r straight from the bit stream.
unsigned level_at(const PackedTensor& p, std::size_t r, std::size_t j) {
    const std::uint8_t* row = p.payload.data() + r * p.row_bytes();
    unsigned v = 0;
    for (int b = 0; b < p.bits; ++b) {
        const std::size_t pos = j * p.bits + b;
        v |= ((row[pos / 8] >> (pos % 8)) & 1u) << b;
    }
    return v;
}

std::vector<double> oracle_gemv(const PackedTensor& p, const std::vector<float>& x) {
    std::vector<double> y(p.out, 0.0);
    const std::size_t g = p.spec().group_len(p.in);
    for (std::size_t r = 0; r < p.out; ++r) {
        for (std::size_t j = 0; j < p.in; ++j) {
            const double s = p.scale(r, j / g), z = p.zero(r, j / g);
            y[r] += (level_at(p, r, j) - z) * s * x[j];
        }
    }
    return y;
}

}  // namespace

TEST(PackedGemv, ZeroPointLevelsGiveZero) {
    auto q = QuantLinear::from_frozen(3, 8, QuantSpec(2, 4), std::vector<std::uint8_t>(24, 1), Tensor({3, 2}, 0.3f),
                                      Tensor({3, 2}, 1.0f));
    const std::vector<float> x(8, 1.5f);
    for (float v : packed_gemv(pack_layer(q), x)) EXPECT_EQ(v, 0.0f);
}

TEST(PackedGemv, FirstBasisVectorPicksDequantizedColumn) {
    const Tensor w = Tensor::matrix({{0.9f, -0.4f, 0.1f, 0.6f},
                                     {0.6f, 0.1f, -0.4f, 0.9f},
                                     {-0.4f, 0.9f, 0.6f, 0.1f},
                                     {0.1f, 0.6f, 0.9f, -0.4f}});
    auto q = QuantLinear::from_dense(w, QuantSpec(2, 4));
    q.freeze();
    const PackedTensor p = pack_layer(q);
    const auto y = packed_gemv(p, std::vector<float>{1, 0, 0, 0});
    const Tensor deq = unpack_layer(p).dequantized_weight();
    for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(y[r], deq.at(r, 0));
    EXPECT_NEAR(y[0], 0.8667f, 1e-3f);
}

TEST(PackedGemv, MatchesReferenceAndBitOracle) {
    std::mt19937_64 rng(12);
    std::normal_distribution<float> nd;
    for (int bits : {2, 3, 4, 5, 8}) {
        for (int g : {32, 64, 100, -1}) {
            const PackedTensor p = random_packed(256, 256, bits, g, rng);
            std::vector<float> x(256);
            for (auto& v : x) v = nd(rng);
            const auto y = packed_gemv(p, x);
            EXPECT_LT(max_rel_deviation(y, reference_gemv(p, x)), 1e-5) << bits << "/" << g;
            const auto o = oracle_gemv(p, x);
            EXPECT_LT(max_rel_deviation(y, std::vector<float>(o.begin(), o.end())), 1e-5) << bits << "/" << g;
        }
    }
}

TEST(PackedGemv, OddShapes) {
    std::mt19937_64 rng(13);
    const PackedTensor p = random_packed(5, 77, 3, 16, rng);
    std::vector<float> x(77, 0.5f);
    const auto o = oracle_gemv(p, x);
    EXPECT_LT(max_rel_deviation(packed_gemv(p, x), std::vector<float>(o.begin(), o.end())), 1e-5);
    EXPECT_EQ(kind_of([&] { packed_gemv(p, std::vector<float>(76)); }), ErrorKind::dimension);
}

TEST(DenseHalfGemv, MatchesScalar) {
    std::mt19937_64 rng(14);
    std::normal_distribution<float> nd;
    DenseHalf d{9, 70, std::vector<std::uint16_t>(9 * 70)};
    for (auto& v : d.w) v = float_to_half(nd(rng));
    std::vector<float> x(70);
    for (auto& v : x) v = nd(rng);
    const auto y = dense_half_gemv(d, x);
    std::vector<float> ref(9);
    for (std::size_t r = 0; r < 9; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 70; ++j) acc += half_to_float(d.w[r * 70 + j]) * double(x[j]);
        ref[r] = static_cast<float>(acc);
    }
    EXPECT_LT(max_rel_deviation(y, ref), 1e-5);
}

TEST(Traffic, TwoBitIsFractionOfDense) {
    for (int g : {32, 64, 128}) {
        const double dense = bytes_per_op(4096, 4096, 16, g);
        EXPECT_EQ(dense, 2.0 * 4096 * 4096);
        EXPECT_EQ(bytes_per_op(4096, 4096, 2, g), dense * (2.0 + 18.0 / g) / 16.0);
    }
    EXPECT_NEAR(bytes_per_op(11008, 4096, 2, 64) / bytes_per_op(11008, 4096, 16, 64), 1.0 / 8.0, 0.02);
}

TEST(Bench, PresetsAndCsv) {
    const auto large = bench_preset("paper");
    ASSERT_EQ(large.size(), 2u);
    EXPECT_EQ(large[0].out, 4096u);
    EXPECT_EQ(large[0].in, 4096u);
    EXPECT_EQ(large[1].out, 11008u);
    EXPECT_EQ(large[1].in, 4096u);
    EXPECT_EQ(kind_of([] { bench_preset("huge"); }), ErrorKind::domain);

    BenchConfig cfg;
    cfg.dims = {{64, 128}};
    cfg.reps = 3;
    const auto rows = bench(cfg);
    ASSERT_EQ(rows.size(), 4u);
    for (const auto& r : rows) {
        EXPECT_GT(r.ns_per_op, 0.0);
        if (r.bits == 16) {
            EXPECT_NEAR(r.speedup_vs_dense, 1.0, 0.5);
        }
    }
    const std::string csv = bench_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "out,in,bits,ns_per_op,bytes_per_op,speedup_vs_dense");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    cfg.reps = 2;
    EXPECT_EQ(kind_of([&] { bench(cfg); }), ErrorKind::domain);
}
