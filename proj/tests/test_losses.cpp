#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lmk/losses.hpp"
#include "oracles.hpp"

using namespace lmk;

namespace {

double kd_oracle(const Tensor& t, const Tensor& s) {
    const std::size_t n = t.dim(0), plane = t.numel() / n;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0;
        for (std::size_t k = 0; k < plane; ++k) {
            const double d = static_cast<double>(t[i * plane + k]) - s[i * plane + k];
            sq += d * d;
        }
        total += std::sqrt(sq);
    }
    return total;
}

LandmarkSet random_landmarks(std::size_t n, std::mt19937_64& rng, float lo = 0, float hi = 256) {
    std::uniform_real_distribution<float> u(lo, hi);
    LandmarkSet s;
    for (std::size_t i = 0; i < n; ++i) s.points.push_back({u(rng), u(rng)});
    return s;
}

} // namespace

TEST(KdLoss, IdenticalStacksGiveZero) {
    std::mt19937_64 rng(1);
    const Tensor t = oracle::random_tensor({51, 64, 64}, rng, 0, 1);
    EXPECT_EQ(kd_loss(t, t), 0.0f);
    EXPECT_EQ(kd_loss(t, t, KdMode::per_cell_abs), 0.0f);
}

TEST(KdLoss, ConstantOffsetOnOneLandmark) {
    for (float c : {0.5f, -0.25f, 3.0f}) {
        const Tensor t({1, 64, 64}, 0.0f);
        const Tensor s({1, 64, 64}, c);
        EXPECT_FLOAT_EQ(kd_loss(t, s), 64.0f * std::abs(c));
    }
}

TEST(KdLoss, MatchesDoubleOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor t = oracle::random_tensor({51, 64, 64}, rng, 0, 1);
        const Tensor s = oracle::random_tensor({51, 64, 64}, rng, 0, 1);
        const double expected = kd_oracle(t, s);
        EXPECT_NEAR(kd_loss(t, s), expected, 1e-5 * expected);
    }
}

TEST(KdLoss, SymmetricAndPositivelyHomogeneous) {
    std::mt19937_64 rng(3);
    const Tensor t = oracle::random_tensor({5, 16, 16}, rng);
    const Tensor s = oracle::random_tensor({5, 16, 16}, rng);
    const float base = kd_loss(t, s);
    EXPECT_NEAR(kd_loss(s, t), base, 1e-6 * base);
    Tensor t2 = t, s2 = s;
    for (auto& v : t2.mutable_values()) v *= 2.0f;
    for (auto& v : s2.mutable_values()) v *= 2.0f;
    EXPECT_NEAR(kd_loss(t2, s2), 2.0f * base, 1e-5 * base);
}

TEST(KdLoss, PerCellMode) {
    const Tensor t({2, 3, 3}, 1.0f);
    Tensor s({2, 3, 3}, 1.0f);
    s.mutable_values()[0] = 0.0f;
    s.mutable_values()[17] = 3.5f;
    EXPECT_FLOAT_EQ(kd_loss(t, s, KdMode::per_cell_abs), 3.5f);
    EXPECT_FLOAT_EQ(kd_loss(t, s), 3.5f);  // one differing cell per landmark: L2 == |d|
}

TEST(KdLoss, ShapeMismatchRejected) {
    EXPECT_THROW(kd_loss(Tensor({2, 4, 4}), Tensor({2, 4, 5})), ShapeError);
    EXPECT_THROW(kd_loss(Tensor({4}), Tensor({4})), ShapeError);
}

TEST(L2Loss, ThreeFourFive) {
    const LandmarkSet p{{{3, 4}}}, g{{{0, 0}}};
    EXPECT_EQ(l2_regression_loss(p, g), 25.0f);
}

TEST(L2Loss, MeanOverLandmarks) {
    std::mt19937_64 rng(4);
    const LandmarkSet p = random_landmarks(51, rng), g = random_landmarks(51, rng);
    double acc = 0;
    for (std::size_t i = 0; i < 51; ++i) {
        const double dx = p.points[i].x - g.points[i].x, dy = p.points[i].y - g.points[i].y;
        acc += dx * dx + dy * dy;
    }
    EXPECT_NEAR(l2_regression_loss(p, g), acc / 51, 1e-5 * acc / 51);
    EXPECT_THROW(l2_regression_loss(p, LandmarkSet{}), ShapeError);
}

TEST(Nme, OnePercentOfDiagonal) {
    // Ground truth spans a 60x80 box (diagonal 100); every prediction is off by 1 px.
    const LandmarkSet g{{{0, 0}, {60, 80}, {30, 40}}};
    LandmarkSet p = g;
    for (auto& q : p.points) q.x += 1.0f;
    EXPECT_NEAR(nme(p, g), 1.0f, 1e-6);
    EXPECT_NEAR(nme(p, g, NmeNorm::constant(50)), 2.0f, 1e-6);
    EXPECT_NEAR(nme(p, g, NmeNorm::interocular(0, 1)), 1.0f, 1e-6);
}

TEST(Nme, MatchesOracleAndIsTranslationInvariant) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const LandmarkSet g = random_landmarks(51, rng), p = random_landmarks(51, rng);
        double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9, acc = 0;
        for (std::size_t i = 0; i < 51; ++i) {
            x0 = std::min<double>(x0, g.points[i].x);
            x1 = std::max<double>(x1, g.points[i].x);
            y0 = std::min<double>(y0, g.points[i].y);
            y1 = std::max<double>(y1, g.points[i].y);
            acc += std::hypot(double(p.points[i].x) - g.points[i].x, double(p.points[i].y) - g.points[i].y);
        }
        const double expected = 100.0 * acc / 51 / std::hypot(x1 - x0, y1 - y0);
        EXPECT_NEAR(nme(p, g), expected, 1e-5 * expected);
        LandmarkSet gs = g, ps = p;
        for (auto& q : gs.points) q.x += 17.0f, q.y -= 9.0f;
        for (auto& q : ps.points) q.x += 17.0f, q.y -= 9.0f;
        EXPECT_NEAR(nme(ps, gs), nme(p, g), 1e-4 * expected);
    }
}

TEST(Nme, RejectsDegenerateNormalizer) {
    const LandmarkSet g{{{5, 5}, {5, 5}}};
    EXPECT_THROW(nme(g, g), ArgumentError);
    EXPECT_THROW(nme(g, g, NmeNorm::interocular(0, 7)), ArgumentError);
}

TEST(Combine, WeightedSum) {
    const LossReport r = combine(2.0f, 10.0f, {1.0f, 0.01f});
    EXPECT_EQ(r.kd, 2.0f);
    EXPECT_EQ(r.reg, 10.0f);
    EXPECT_FLOAT_EQ(r.total, 2.1f);
    EXPECT_EQ(combine(3.0f, 4.0f).total, 7.0f);
}
