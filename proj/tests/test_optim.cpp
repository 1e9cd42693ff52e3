#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "askbuild/optim.hpp"
#include "testing.hpp"

using namespace askbuild;

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParamMap p{{"w", Tensor::vector({0.5, -1.25, 3.0})}};
    ParamMap before = p;
    AdamState st;
    for (int i = 0; i < 3; ++i) adam_step(p, {{"w", Tensor({3}, 0.0)}}, st, {});
    EXPECT_EQ(p.at("w"), before.at("w"));
}

TEST(Adam, MatchesHandRecurrence) {
    AdamConfig cfg{0.1, 0.9, 0.99, 1e-8};
    ParamMap p{{"w", Tensor::scalar(2.0)}};
    AdamState st;
    adam_step(p, {{"w", Tensor::scalar(1.0)}}, st, cfg);
    // m = 0.1, v = 0.01, m̂ = 1, v̂ = 1, step = 0.1 / (1 + 1e-8)
    EXPECT_NEAR(p.at("w")[0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);

    // Second step with g = 0.5 against the recurrence written out.
    adam_step(p, {{"w", Tensor::scalar(0.5)}}, st, cfg);
    double m = 0.9 * 0.1 + 0.1 * 0.5, v = 0.99 * 0.01 + 0.01 * 0.25;
    double mhat = m / (1 - 0.81), vhat = v / (1 - 0.9801);
    double expect = 2.0 - 0.1 / (1.0 + 1e-8) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(p.at("w")[0], expect, 1e-14);
    EXPECT_EQ(st.step, 2u);
}

TEST(Adam, DeterministicAcrossRuns) {
    auto run = [] {
        std::mt19937_64 rng(9);
        ParamMap p{{"a", askbuild::testing::random_tensor({4, 3}, rng)}, {"b", askbuild::testing::random_tensor({5}, rng)}};
        AdamState st;
        for (int i = 0; i < 20; ++i) {
            ParamMap g{{"a", askbuild::testing::random_tensor({4, 3}, rng)}, {"b", askbuild::testing::random_tensor({5}, rng)}};
            adam_step(p, g, st, {});
        }
        return p;
    };
    ParamMap a = run(), b = run();
    EXPECT_EQ(a.at("a"), b.at("a"));
    EXPECT_EQ(a.at("b"), b.at("b"));
}

TEST(Adam, ShapeMismatchThrows) {
    ParamMap p{{"w", Tensor({2})}};
    AdamState st;
    EXPECT_THROW(adam_step(p, {{"w", Tensor({3})}}, st, {}), DimensionError);
}

TEST(Adam, ParameterWithoutGradientIsUntouched) {
    ParamMap p{{"w", Tensor::scalar(1.0)}, {"frozen", Tensor::scalar(7.0)}};
    AdamState st;
    adam_step(p, {{"w", Tensor::scalar(1.0)}}, st, {});
    EXPECT_EQ(p.at("frozen")[0], 7.0);
    EXPECT_NE(p.at("w")[0], 1.0);
}

TEST(ClipGlobalNorm, ScalesOnlyAboveThreshold) {
    ParamMap g{{"a", Tensor::vector({3, 0})}, {"b", Tensor::vector({4})}};
    EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
    EXPECT_EQ(g.at("a")[0], 3.0);
    EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
    EXPECT_NEAR(g.at("a")[0], 0.6, 1e-15);
    EXPECT_NEAR(g.at("b")[0], 0.8, 1e-15);
}
