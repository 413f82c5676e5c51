#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <vector>

#include "test_util.hpp"

using namespace eqat;
using eqat::test::kind_of;

namespace {

// Bit-by-bit LSB-first writer, independent of the packer.
std::vector<std::uint8_t> pack_bits_oracle(const std::vector<std::uint8_t>& v, int bits) {
    std::vector<std::uint8_t> out((v.size() * bits + 7) / 8, 0);
    std::size_t pos = 0;
    for (auto x : v) {
        for (int b = 0; b < bits; ++b, ++pos) {
            if ((x >> b) & 1) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
        }
    }
    return out;
}

Model small_quantized(int bits, int group, std::uint64_t seed) {
    ModelConfig c = test::tiny_config();
    c.d_model = 32;
    c.d_ff = 64;
    Model fp = init_model(c, seed);
    return quantize_rtn(fp, QuantSpec(bits, group));
}

}  // namespace

TEST(Pack, TwoBitWorkedVector) {
    const std::vector<std::uint8_t> v{3, 0, 1, 2};
    EXPECT_EQ(pack(v, 2), (std::vector<std::uint8_t>{0x93}));
}

TEST(Pack, ThreeBitWorkedVector) {
    const std::vector<std::uint8_t> v{5, 1, 7, 0, 2, 6, 3, 4};
    EXPECT_EQ(pack(v, 3), (std::vector<std::uint8_t>{0xCD, 0x21, 0x8F}));
}

TEST(Pack, NibbleOrder) {
    const std::vector<std::uint8_t> v{0xA, 0xB};
    EXPECT_EQ(pack(v, 4), (std::vector<std::uint8_t>{0xBA}));
}

TEST(Pack, RejectsOutOfRangeValues) {
    const std::vector<std::uint8_t> v{4};
    EXPECT_EQ(kind_of([&] { pack(v, 2); }), ErrorKind::domain);
}

TEST(Pack, MatchesBitOracleAndRoundTrips) {
    std::mt19937_64 rng(1);
    for (int bits = 2; bits <= 8; ++bits) {
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<std::uint8_t> v(rng() % 70);
            for (auto& x : v) x = static_cast<std::uint8_t>(rng() & ((1u << bits) - 1));
            const auto bytes = pack(v, bits);
            ASSERT_EQ(bytes, pack_bits_oracle(v, bits));
            ASSERT_EQ(unpack(bytes, bits, v.size()), v);
        }
    }
}

TEST(Unpack, EmptyAndPadBits) {
    EXPECT_TRUE(unpack({}, 3, 0).empty());
    // 3 values x 2 bits leaves 2 pad bits; set them
    std::vector<std::uint8_t> b = pack(std::vector<std::uint8_t>{1, 2, 3}, 2);
    b[0] |= 0xC0;
    EXPECT_EQ(unpack(b, 2, 3), (std::vector<std::uint8_t>{1, 2, 3}));
    EXPECT_EQ(kind_of([&] { unpack(b, 2, 5); }), ErrorKind::format);
}

TEST(Half, KnownValues) {
    EXPECT_EQ(float_to_half(1.0f), 0x3C00);
    EXPECT_EQ(float_to_half(-2.0f), 0xC000);
    EXPECT_EQ(float_to_half(65504.0f), 0x7BFF);
    EXPECT_EQ(float_to_half(1e6f), 0x7C00);
    EXPECT_EQ(float_to_half(5.9604645e-8f), 0x0001);
    // 1 + 2^-11 is a tie between 0x3C00 and 0x3C01: even wins
    EXPECT_EQ(float_to_half(1.0f + 0.00048828125f), 0x3C00);
    EXPECT_EQ(float_to_half(1.0f + 3 * 0.00048828125f), 0x3C02);
    for (std::uint32_t h = 0; h < 0x7C00; ++h) {
        ASSERT_EQ(float_to_half(half_to_float(static_cast<std::uint16_t>(h))), h);
    }
}

TEST(PackedLayer, PayloadLengthAndRoundTrip) {
    std::mt19937_64 rng(2);
    for (int bits : {2, 3, 4, 8}) {
        auto q = QuantLinear::from_dense(test::random_tensor({7, 37}, rng), QuantSpec(bits, 16));
        q.freeze();
        const PackedTensor p = pack_layer(q);
        EXPECT_EQ(p.payload.size(), 7 * ((37 * bits + 7) / 8));
        EXPECT_EQ(p.groups_per_row(), 3u);
        const QuantLinear back = unpack_layer(p);
        EXPECT_EQ(back.levels(), q.levels());
        for (std::size_t i = 0; i < q.group_count(); ++i) {
            EXPECT_EQ(back.zeros().value[i], q.zeros().value[i]);
            EXPECT_EQ(back.scales().value[i], half_to_float(float_to_half(q.scales().value[i])));
        }
        for (auto v : back.levels()) EXPECT_LT(v, 1 << bits);
    }
}

TEST(PackedLayer, FlooredScaleSurvivesExport) {
    auto q = QuantLinear::from_dense(Tensor({2, 8}), QuantSpec(2, 8));
    q.freeze();
    EXPECT_EQ(q.scales().value[0], kScaleFloor);
    const QuantLinear back = unpack_layer(pack_layer(q));
    EXPECT_GT(back.scales().value[0], 0.0f);
    Tape t;
    const Tensor y = const_cast<QuantLinear&>(back).forward(t.constant(Tensor({1, 8}, 1.0f))).value();
    EXPECT_EQ(y[0], 0.0f);
}

TEST(Checkpoint, SaveLoadSaveBitIdentical) {
    for (int bits : {2, 3, 4, 8}) {
        Model m = small_quantized(bits, 16, 3);
        const std::string a = encode_checkpoint(m, {{"note", "x"}});
        Checkpoint ck = decode_checkpoint(a);
        const std::string b = encode_checkpoint(ck.model, ck.meta);
        EXPECT_EQ(a, b);
        EXPECT_EQ(ck.meta.at("note"), "x");
    }
    ModelConfig c = test::tiny_config();
    Model fp = init_model(c, 4);
    const std::string a = encode_checkpoint(fp);
    Checkpoint ck = decode_checkpoint(a);
    EXPECT_EQ(encode_checkpoint(ck.model), a);
    // f32 dense storage is value-identical
    std::vector<std::uint32_t> ids{1, 2, 3, 4};
    EXPECT_EQ(logits(fp, ids, 4), logits(ck.model, ids, 4));
}

TEST(Checkpoint, SectionsAlignedAndNonOverlapping) {
    Model m = small_quantized(3, 16, 5);
    const std::string bytes = encode_checkpoint(m);
    const ContainerHeader h = parse_container_header(bytes);
    EXPECT_EQ(h.version, 1u);
    EXPECT_EQ(h.data_offset % 64, 0u);
    std::uint64_t prev_end = 0;
    for (const auto& r : h.json.at("tensors")) {
        const auto off = r.at("offset").get<std::uint64_t>(), len = r.at("length").get<std::uint64_t>();
        EXPECT_EQ(off % 64, 0u);
        EXPECT_GE(off, prev_end);
        prev_end = off + len;
    }
    EXPECT_LE(h.data_offset + prev_end, bytes.size());
}

TEST(Checkpoint, CorruptionRejected) {
    Model m = small_quantized(2, 16, 6);
    const std::string good = encode_checkpoint(m);
    std::string bad = good;
    bad[0] = 'X';
    EXPECT_EQ(kind_of([&] { decode_checkpoint(bad); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { decode_checkpoint(good.substr(0, good.size() / 2)); }), ErrorKind::format);
    std::string ver = good;
    ver[4] = 9;
    EXPECT_EQ(kind_of([&] { decode_checkpoint(ver); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { decode_checkpoint(""); }), ErrorKind::format);
}

TEST(SizeReport, DenseModelHasZeroRatio) {
    Model fp = init_model(test::tiny_config(), 7);
    const SizeReport r = report_size(encode_checkpoint(fp));
    EXPECT_EQ(r.quantized_params, 0u);
    EXPECT_EQ(r.compression_ratio, 0.0);
    EXPECT_EQ(r.total_params, fp.param_count());
}

TEST(SizeReport, BitsPerParamColumn) {
    ModelConfig c;
    c.n_layers = 1;
    Model fp = init_model(c, 8);
    const std::vector<std::tuple<int, int, const char*>> cases{{2, 64, "2.28"}, {3, 128, "3.15"}, {4, 32, "4.63"}};
    for (const auto& [bits, g, text] : cases) {
        Model q = quantize_rtn(fp, QuantSpec(bits, g));
        const SizeReport r = report_size(encode_checkpoint(q));
        EXPECT_EQ(format_2dp(r.quantized_bits_per_param), text);
        for (const auto& row : r.rows) {
            if (row.role == "quantized") {
                EXPECT_EQ(format_2dp(row.bits_per_param), text) << row.name;
            }
        }
        EXPECT_GT(r.compression_ratio, 0.0);
    }
}

TEST(SizeReport, FileSizeMatchesModelSize) {
    ModelConfig c;  // reference shape: 4 layers, d = 128
    Model q = quantize_rtn(init_model(c, 9), QuantSpec(2, 64));
    const std::string bytes = encode_checkpoint(q);
    const ContainerHeader h = parse_container_header(bytes);

    std::vector<LayerDims> dims;
    std::uint64_t fp_params = 0;
    q.for_each_projection([&](const std::string&, Projection& p) {
        const auto& l = std::get<QuantLinear>(p);
        dims.push_back({l.out_features(), l.in_features()});
    });
    q.for_each_dense([&](const std::string&, Parameter& p) { fp_params += p.value.size(); });
    const std::uint64_t expect = model_size_bytes(dims, QuantSpec(2, 64), fp_params);
    const std::size_t n_sections = h.json.at("tensors").size();
    // file = header + payload + at most 63 bytes of alignment per section
    EXPECT_GE(bytes.size(), h.data_offset + expect);
    EXPECT_LE(bytes.size(), h.data_offset + expect + 63 * n_sections);
    EXPECT_EQ(report_size(bytes).total_bytes, expect);
}
