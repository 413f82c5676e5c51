#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "dual.hpp"
#include "test_util.hpp"

using namespace eqat;
using eqat::test::Dual;
using eqat::test::kind_of;
using eqat::test::random_tensor;
using eqat::test::ste_surrogate;

namespace {

Tensor run_forward(QuantLinear& q, const Tensor& x) {
    Tape t;
    return q.forward(t.constant(x)).value();
}

Tensor run_linear(const Tensor& w, const Tensor& x) {
    Tape t;
    return linear(t.constant(x), t.constant(w)).value();
}

// sum(y * r) for a fixed random r; returns the loss and fills parameter grads.
float weighted_sum(QuantLinear& q, const Tensor& x, const Tensor& r, bool grad) {
    Tape t;
    Var y = q.forward(t.constant(x));
    Tensor yr = y.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < yr.size(); ++i) acc += static_cast<double>(yr[i]) * r[i];
    if (grad) {
        Tensor& g = t.grad(y.id);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = r[i];
        // seed the chain below the output directly
        Var dummy = t.constant(Tensor({1}));
        t.backward(dummy, 0.0f);
    }
    return static_cast<float>(acc);
}

}  // namespace

TEST(ForwardLatent, IdentityQuantizationMatchesLinear) {
    Tensor w = Tensor::matrix({{0, 1, 2, 3}, {3, 2, 1, 0}});
    auto q = QuantLinear::from_dense(w, QuantSpec(2, 4));
    q.scales().value.fill(1.0f);
    q.zeros().value.fill(0.0f);
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({3, 4}, rng);
    EXPECT_EQ(run_forward(q, x), run_linear(w, x));
}

TEST(ForwardLatent, WorkedPerRowGroups) {
    const Tensor w = Tensor::matrix({{0.9f, -0.4f}, {0.1f, 0.6f}});
    const QuantSpec spec(2, 2);
    auto q = QuantLinear::from_dense(w, spec);
    const Tensor y = run_forward(q, Tensor::matrix({{1, 0}}));
    for (std::size_t r = 0; r < 2; ++r) {
        const auto p = init_group_params(w.row(r), spec);
        const auto deq = dequantize(quantize(w.row(r), p, spec), p, spec);
        EXPECT_FLOAT_EQ(y[r], deq[0]);
    }
    EXPECT_NEAR(y[0], 0.8667f, 1e-4f);
    EXPECT_NEAR(y[1], 0.1667f, 1e-4f);
}

TEST(ForwardLatent, EightBitCloseToDense) {
    std::mt19937_64 rng(2);
    const Tensor w = random_tensor({32, 64}, rng);
    const Tensor x = random_tensor({4, 64}, rng, 0.0f, 0.0625f);
    auto q = QuantLinear::from_dense(w, QuantSpec(8, 32));
    const Tensor a = run_forward(q, x), b = run_linear(w, x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-2f);
}

TEST(ForwardLatent, OutputEqualsDequantizedMatmul) {
    std::mt19937_64 rng(3);
    auto q = QuantLinear::from_dense(random_tensor({8, 20}, rng), QuantSpec(3, 8));
    const Tensor x = random_tensor({5, 20}, rng);
    EXPECT_EQ(run_forward(q, x), run_linear(q.dequantized_weight(), x));
}

TEST(BackwardSte, GradientsMatchDualOracle) {
    std::mt19937_64 rng(4);
    const QuantSpec spec(2, 4);
    const Tensor w = random_tensor({3, 8}, rng);
    auto q = QuantLinear::from_dense(w, spec);
    // push some weights outside the range and make z non-integral
    q.scales().value.vec() = std::vector<float>(6, 0.3f);
    q.zeros().value.vec() = {0.4f, 1.0f, 2.6f, 3.0f, 0.0f, 1.5f};
    const Tensor x = random_tensor({5, 8}, rng), r = random_tensor({5, 3}, rng);
    weighted_sum(q, x, r, true);

    // dL/dw_hat[o, j] = sum_b r[b, o] x[b, j]
    Tensor up({3, 8});
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t j = 0; j < 8; ++j)
            for (std::size_t b = 0; b < 5; ++b) up.at(o, j) += r.at(b, o) * x.at(b, j);
    for (std::size_t o = 0; o < 3; ++o) {
        for (std::size_t g = 0; g < 2; ++g) {
            double ds = 0.0, dz = 0.0;
            const double s = q.scales().value.at(o, g), z = q.zeros().value.at(o, g);
            for (std::size_t j = g * 4; j < g * 4 + 4; ++j) {
                const double wv = w.at(o, j);
                ds += up.at(o, j) * ste_surrogate({wv, 0}, {s, 1}, {z, 0}, 2).d;
                dz += up.at(o, j) * ste_surrogate({wv, 0}, {s, 0}, {z, 1}, 2).d;
                const double dw = up.at(o, j) * ste_surrogate({wv, 1}, {s, 0}, {z, 0}, 2).d;
                EXPECT_NEAR(q.weight().grad.at(o, j), dw, 1e-5);
            }
            EXPECT_NEAR(q.scales().grad.at(o, g), ds, 1e-4);
            EXPECT_NEAR(q.zeros().grad.at(o, g), dz, 1e-4);
        }
    }
}

TEST(BackwardSte, InputGradientUsesDequantizedWeight) {
    std::mt19937_64 rng(5);
    auto q = QuantLinear::from_dense(random_tensor({4, 6}, rng), QuantSpec(2, 3));
    Parameter xp(random_tensor({2, 6}, rng));
    Tape t2;
    Var xv = t2.param(xp);
    Var loss = mse_loss(q.forward(xv), Tensor({2, 4}));
    t2.backward(loss);
    Tape t3;
    Parameter xp2(xp.value);
    Var loss2 = mse_loss(linear(t3.param(xp2), t3.constant(q.dequantized_weight())), Tensor({2, 4}));
    t3.backward(loss2);
    for (std::size_t i = 0; i < xp.grad.size(); ++i) EXPECT_FLOAT_EQ(xp.grad[i], xp2.grad[i]);
}

TEST(ForwardFrozen, ZeroPointWeightsGiveZeroOutput) {
    const QuantSpec spec(2, 4);
    auto q = QuantLinear::from_frozen(2, 4, spec, std::vector<std::uint8_t>(8, 2), Tensor({2, 1}, 0.7f),
                                      Tensor({2, 1}, 2.0f));
    std::mt19937_64 rng(6);
    const Tensor y = run_forward(q, random_tensor({3, 4}, rng));
    for (float v : y.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(ForwardFrozen, LinearInScale) {
    std::mt19937_64 rng(7);
    const QuantSpec spec(3, 4);
    std::vector<std::uint8_t> lv(16);
    for (auto& v : lv) v = static_cast<std::uint8_t>(rng() % 8);
    auto q = QuantLinear::from_frozen(4, 4, spec, lv, Tensor({4, 1}, 0.25f), Tensor({4, 1}, 3.0f));
    const Tensor x = random_tensor({2, 4}, rng);
    const Tensor y1 = run_forward(q, x);
    q.scales().value.fill(0.5f);
    const Tensor y2 = run_forward(q, x);
    for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_FLOAT_EQ(y2[i], 2.0f * y1[i]);
}

TEST(ForwardFrozen, EqualsLatentAtDequantizedWeights) {
    std::mt19937_64 rng(8);
    const QuantSpec spec(2, 4);
    std::vector<std::uint8_t> lv(24);
    for (auto& v : lv) v = static_cast<std::uint8_t>(rng() % 4);
    Tensor s = random_tensor({3, 2}, rng, 0.1f, 0.5f), z({3, 2}, 1.0f);
    auto frozen = QuantLinear::from_frozen(3, 8, spec, lv, s, z);
    auto latent = QuantLinear::from_dense(frozen.dequantized_weight(), spec);
    latent.scales().value = s;
    latent.zeros().value = z;
    const Tensor x = random_tensor({4, 8}, rng);
    const Tensor a = run_forward(frozen, x), b = run_forward(latent, x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6f);
}

TEST(BackwardFrozen, WorkedScaleGradient) {
    // one weight, W_int = 3, z = 1: dw_hat/ds = 2
    auto q = QuantLinear::from_frozen(1, 1, QuantSpec(2, 1), {3}, Tensor({1, 1}, 0.5f), Tensor({1, 1}, 1.0f));
    weighted_sum(q, Tensor::matrix({{1}}), Tensor::matrix({{1}}), true);
    EXPECT_EQ(q.scales().grad[0], 2.0f);
    auto q0 = QuantLinear::from_frozen(1, 1, QuantSpec(2, 1), {1}, Tensor({1, 1}, 0.5f), Tensor({1, 1}, 1.0f));
    weighted_sum(q0, Tensor::matrix({{1}}), Tensor::matrix({{1}}), true);
    EXPECT_EQ(q0.scales().grad[0], 0.0f);
}

TEST(BackwardFrozen, MatchesCentralDifference) {
    std::mt19937_64 rng(9);
    const QuantSpec spec(2, 8);
    std::vector<std::uint8_t> lv(4 * 16);
    for (auto& v : lv) v = static_cast<std::uint8_t>(rng() % 4);
    auto q = QuantLinear::from_frozen(4, 16, spec, lv, random_tensor({4, 2}, rng, 0.1f, 0.4f),
                                      Tensor({4, 2}, 1.0f));
    q.set_trainable({false, true, true});
    const Tensor x = random_tensor({3, 16}, rng), r = random_tensor({3, 4}, rng);
    weighted_sum(q, x, r, true);
    const Tensor gs = q.scales().grad, gz = q.zeros().grad;
    EXPECT_LT(eqat::test::grad_check(q.scales(), [&] { return weighted_sum(q, x, r, false); }, gs, 1e-3f), 1e-3);
    EXPECT_LT(eqat::test::grad_check(q.zeros(), [&] { return weighted_sum(q, x, r, false); }, gz, 1e-3f), 1e-3);
}

TEST(Freeze, PathEqualityAndDefaults) {
    std::mt19937_64 rng(10);
    auto q = QuantLinear::from_dense(random_tensor({6, 16}, rng), QuantSpec(2, 8));
    const Tensor x = random_tensor({3, 16}, rng);
    const Tensor before = run_forward(q, x);
    q.freeze();
    EXPECT_EQ(q.mode(), QuantMode::frozen);
    EXPECT_EQ(q.trainable(), Trainable::scales_only());
    EXPECT_EQ(kind_of([&] { q.weight(); }), ErrorKind::state);
    EXPECT_EQ(kind_of([&] { q.freeze(); }), ErrorKind::state);
    EXPECT_EQ(kind_of([&] { q.set_trainable(Trainable::all()); }), ErrorKind::state);
    EXPECT_EQ(run_forward(q, x), before);

    // exported-and-reloaded layer already holds integers: nothing left to freeze
    auto back = unpack_layer(pack_layer(q));
    EXPECT_EQ(back.mode(), QuantMode::frozen);
    EXPECT_EQ(back.levels(), q.levels());
    for (auto& v : q.scales().value.vec()) v = half_to_float(float_to_half(v));
    EXPECT_EQ(run_forward(back, x), run_forward(q, x));
}

TEST(Freeze, RoundsFractionalZeroPoint) {
    auto q = QuantLinear::from_dense(Tensor::matrix({{0.2f, -0.3f, 0.5f, 0.0f}}), QuantSpec(2, 4));
    q.zeros().value[0] = 1.4f;
    q.freeze();
    EXPECT_EQ(q.zeros().value[0], 1.0f);
}

TEST(TrainableSet, Parse) {
    EXPECT_EQ(Trainable::parse("s,z,W"), Trainable::all());
    EXPECT_EQ(Trainable::parse("s"), Trainable::scales_only());
    EXPECT_EQ(Trainable::parse("W").str(), "W");
    EXPECT_EQ(kind_of([] { Trainable::parse("s,q"); }), ErrorKind::domain);
}
