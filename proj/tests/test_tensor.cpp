#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "depthprune/grad_check.hpp"
#include "depthprune/ops.hpp"
#include "depthprune/optim.hpp"
#include "depthprune/rng.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

using namespace depthprune;
using namespace gradient_cases;

namespace {

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferencesAtTenPoints) {
    const OpCase c = op_cases()[GetParam()];
    Rng rng(1000 + GetParam());
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = randn(c.shape, rng, c.sd, c.mean);
        const double err = tape_vs_fd(c.f, x);
        EXPECT_LT(err, 1e-5) << c.name << " trial " << trial;
        // the library's own checker must agree with the oracle
        EXPECT_TRUE(grad_check(c.f, x).passed(1e-5)) << c.name << " trial " << trial;
    }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(Softmax, SumsToOneAlongAxis) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = randn({3, 5, 7}, rng, trial < 25 ? 1.0 : 300.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            const Tensor p = softmax(x, axis);
            const auto& s = x.shape();
            std::size_t outer = 1, inner = 1;
            for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
            for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t q = 0; q < inner; ++q) {
                    double tot = 0;
                    for (std::size_t k = 0; k < s[axis]; ++k) tot += p.data()[(o * s[axis] + k) * inner + q];
                    EXPECT_NEAR(tot, 1.0, 1e-12);
                }
        }
    }
}

TEST(Softmax, MatchesNaiveReference) {
    const Tensor x = Tensor::from({1, 3}, {1.0, 0.0, -1.0});
    const auto p = softmax(x, 1);
    const auto ref = oracle::softmax({1.0, 0.0, -1.0});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-15);
}

TEST(Backward, AccumulationIsAdditive) {
    Rng rng(9);
    const Tensor v = randn({6}, rng);
    const Tensor w1 = randn({6}, rng);
    const Tensor w2 = randn({6}, rng);
    Tensor x = v.clone();
    x.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(add(sum(mul(x, w1)), sum(mul(x, w2))));
    }
    Tensor y = v.clone();
    y.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum(mul(y, add(w1, w2))));
    }
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(x.grad()[i], w1[i] + w2[i], 1e-15);
        EXPECT_NEAR(x.grad()[i], y.grad()[i], 1e-15);
    }
}

TEST(Backward, GradientsAccumulateAcrossBackwardCallsUntilZeroed) {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    for (int k = 0; k < 3; ++k) {
        Tape tape;
        tape.backward(sum(square(x)));
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 12.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NoGradRecordsNothing) {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tape tape;
    {
        NoGradGuard ng;
        sum(square(x));
    }
    EXPECT_EQ(tape.size(), 0u);
}

TEST(StraightThrough, ForwardIsHardBackwardIsIdentity) {
    Tensor soft = Tensor::from({3}, {0.2, 0.5, 0.3}, true);
    const Tensor up = Tensor::from({3}, {1.5, -2.0, 0.25});
    Tape tape;
    const Tensor y = straight_through({0.0, 1.0, 0.0}, soft);
    EXPECT_EQ(y.values(), (std::vector<double>{0.0, 1.0, 0.0}));
    tape.backward(sum(mul(y, up)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(soft.grad()[i], up[i]);
}

TEST(Gate, ZeroGateReturnsSkipBitwise) {
    Rng rng(3);
    const Tensor b = randn({4, 5}, rng);
    const Tensor s = randn({4, 5}, rng, 1e3);
    const Tensor y = gate(b, s, Tensor::scalar(0.0), 0.0);
    EXPECT_EQ(y.values(), s.values());
    const Tensor z = gate(b, s, Tensor::scalar(1.0), 1.0);
    EXPECT_EQ(z.values(), b.values());
}

TEST(Gate, BranchGradientScaleOverridesGateValue) {
    Tensor b = Tensor::from({2}, {1.0, 2.0}, true);
    const Tensor s = Tensor::from({2}, {0.0, 0.0});
    Tape tape;
    tape.backward(sum(gate(b, s, Tensor::scalar(0.0), 0.7)));
    EXPECT_DOUBLE_EQ(b.grad()[0], 0.7);
    EXPECT_DOUBLE_EQ(b.grad()[1], 0.7);
}

TEST(Shapes, BroadcastOnlyOnTrailingDimensions) {
    const Tensor a = Tensor::zeros({3, 4});
    EXPECT_NO_THROW(add(a, Tensor::zeros({4})));
    EXPECT_THROW(add(a, Tensor::zeros({3})), DimensionError);
    EXPECT_THROW(add(a, Tensor::zeros({1, 4})), DimensionError);
    EXPECT_THROW(sub(a, Tensor::zeros({4})), DimensionError);
    EXPECT_THROW(matmul(a, Tensor::zeros({3, 4})), DimensionError);
    EXPECT_THROW(softmax(a, 2), DimensionError);
    EXPECT_THROW(reshape(a, {5, 2}), DimensionError);
}

TEST(Log, NonPositiveInputRaisesDomainError) {
    EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
    EXPECT_THROW(log(Tensor::from({1}, {-1.0})), DomainError);
}

TEST(GradCheck, FlagsWrongGradient) {
    // d/dx of x^2 taped as straight-through of x^2 onto x: gradient 1 instead of 2x
    auto wrong = [](const Tensor& x) {
        std::vector<double> sq;
        for (double v : x.data()) sq.push_back(v * v);
        return sum(straight_through(sq, x));
    };
    const auto r = grad_check(wrong, Tensor::from({2}, {1.5, -0.7}));
    EXPECT_FALSE(r.passed(1e-5));
    EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(GradCheck, ReportsNonFiniteFunction) {
    auto f = [](const Tensor& x) { return sum(exp(x)); };
    EXPECT_FALSE(grad_check(f, Tensor::from({1}, {710.0})).finite);
}

TEST(Optim, HalvingScheduleHasEvenlySpacedMilestones) {
    EXPECT_DOUBLE_EQ(halving_lr(1.0, 1, 100, 4), 1.0);
    EXPECT_DOUBLE_EQ(halving_lr(1.0, 20, 100, 4), 1.0);
    EXPECT_DOUBLE_EQ(halving_lr(1.0, 21, 100, 4), 0.5);
    EXPECT_DOUBLE_EQ(halving_lr(1.0, 100, 100, 4), 0.0625);
    EXPECT_DOUBLE_EQ(halving_lr(1.0, 100, 100, 0), 1.0);
}

TEST(Optim, ClipScalesToMaxNorm) {
    Tensor a = Tensor::from({2}, {0.0, 0.0}, true);
    a.grad()[0] = 3.0;
    a.grad()[1] = 4.0;
    std::vector<Tensor> ps = {a};
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(std::hypot(a.grad()[0], a.grad()[1]), 1.0, 1e-9);
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
    Tensor a = Tensor::from({2}, {1.0, -1.0}, true);
    AdamW opt({a}, AdamConfig{.lr = 0.1});
    a.grad()[0] = 3.0;
    a.grad()[1] = -1e-3;
    opt.step();
    // bias-corrected first Adam step is lr * g / (|g| + eps')
    EXPECT_NEAR(a[0], 0.9, 1e-6);
    EXPECT_NEAR(a[1], -0.9, 1e-4);
}

}  // namespace
