#include <gtest/gtest.h>

#include "ndae/lipschitz.hpp"
#include "test_support.hpp"

namespace ndae {
namespace {

using testing_support::case9_model;

BoxBounds cube(int n, double lo, double hi) { return {Vec::Constant(n, lo), Vec::Constant(n, hi)}; }

TEST(EstimateG, LinearSlope) {
  Nonlinearity nl{[](const Vec& x) { return Vec(2.0 * x); },
                  [](const Vec& x) { return Mat(2.0 * Mat::Identity(x.size(), x.size())); }};
  LipschitzMatrix L = estimate_G(nl, cube(1, -1, 1), 1000, 1.0, 1);
  EXPECT_DOUBLE_EQ(L.g(0), 2.0);
}

TEST(EstimateG, ZeroField) {
  Nonlinearity nl{[](const Vec&) { return Vec(Vec::Zero(2)); },
                  [](const Vec&) { return Mat(Mat::Zero(2, 3)); }};
  EXPECT_TRUE(estimate_G(nl, cube(3, 0, 1), 1000, 1.2, 1).g.isZero(0.0));
}

TEST(EstimateG, DegenerateBoxRejected) {
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  b.hi(0) = b.lo(0);
  EXPECT_THROW(estimate_G(m.sys, b, 1000, 1.2, 1), ValidationError);
  EXPECT_THROW(estimate_G(m.sys, default_box(m.sys, m.eq.x), 10, 1.2, 1), ValidationError);
}

// f = v sin(delta - theta) over x = (v, delta, theta)
Nonlinearity stator_sin() {
  return {[](const Vec& x) { return Vec::Constant(1, x(0) * std::sin(x(1) - x(2))).eval(); },
          [](const Vec& x) {
            Mat J(1, 3);
            double s = std::sin(x(1) - x(2)), c = std::cos(x(1) - x(2));
            J << s, x(0) * c, -x(0) * c;
            return J;
          }};
}

TEST(EstimateG, SinNonlinearityMatchesDenseGrid) {
  BoxBounds b{Vec(3), Vec(3)};
  b.lo << 0.9, -kPi / 4, -kPi / 4;
  b.hi << 1.1, kPi / 4, kPi / 4;
  Nonlinearity nl = stator_sin();
  Vec oracle = Vec::Zero(3);
  const int N = 100;  // 10^6 grid points
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      for (int k = 0; k < N; ++k) {
        Vec x(3);
        x << b.lo(0) + (b.hi(0) - b.lo(0)) * i / (N - 1), b.lo(1) + (b.hi(1) - b.lo(1)) * j / (N - 1),
            b.lo(2) + (b.hi(2) - b.lo(2)) * k / (N - 1);
        oracle = oracle.cwiseMax(nl.jac(x).row(0).transpose().cwiseAbs());
      }
  LipschitzMatrix L = estimate_G(nl, b, 2000, 1.0, 4, LipschitzMode::Column);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(L.g(j), oracle(j), 0.05 * oracle(j)) << j;
}

TEST(ValidateG, Case9PassesAcrossSeeds) {
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  LipschitzMatrix L = estimate_G(m.sys, b, 2000, 1.2, 1);
  for (uint64_t seed = 100; seed < 105; ++seed) {
    LipschitzReport r = validate_G(m.sys, b, L.g, 100000, seed);
    EXPECT_TRUE(r.pass()) << "seed " << seed << " worst " << r.worst_ratio;
  }
}

TEST(ValidateG, ColumnBoundIsNotEnoughForCoupledRows) {
  // the plain column bound undershoots on case9 once several columns feed one row;
  // the coupled weighting dominates it and holds
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  Vec gc = estimate_G(m.sys, b, 2000, 1.0, 1, LipschitzMode::Column).g;
  Vec gk = estimate_G(m.sys, b, 2000, 1.0, 1, LipschitzMode::Coupled).g;
  EXPECT_TRUE((gk.array() >= gc.array() - 1e-12).all());
  EXPECT_GT(validate_G(m.sys, b, gc, 20000, 5).worst_ratio, 1.0);
  EXPECT_TRUE(validate_G(m.sys, b, gk, 20000, 5).pass());
}

TEST(ValidateG, ZeroBoundFailsAndScalingHalves) {
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  LipschitzReport z = validate_G(m.sys, b, Vec::Zero(m.sys.dims.n), 1000, 3);
  EXPECT_FALSE(z.pass());
  EXPECT_GT(z.worst_ratio, 1.0);
  LipschitzMatrix L = estimate_G(m.sys, b, 1000, 1.2, 1);
  double r1 = validate_G(m.sys, b, L.g, 2000, 9).worst_ratio;
  double r2 = validate_G(m.sys, b, 2.0 * L.g, 2000, 9).worst_ratio;
  EXPECT_NEAR(r2, r1 / 2, 1e-12);
}

TEST(LipschitzProperties, NestedBoxesMonotone) {
  auto m = case9_model();
  BoxBounds big = default_box(m.sys, m.eq.x);
  BoxBounds small = scale_box(big, m.eq.x, 0.5);
  Vec gs = estimate_G(m.sys, small, 2000, 1.0, 1).g;
  Vec gb = estimate_G(m.sys, big, 2000, 1.0, 1).g;
  for (int j = 0; j < gs.size(); ++j) EXPECT_GE(gb(j), gs(j) * (1 - 1e-3)) << j;
}

TEST(LipschitzProperties, ScalesWithField) {
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  const NdaeSystem& s = m.sys;
  Nonlinearity tripled{[&s](const Vec& x) { return Vec(3.0 * s.eval_f(x)); },
                       [&s](const Vec& x) { return Mat(3.0 * s.jac_f(x)); }};
  Vec g1 = estimate_G(s, b, 1000, 1.0, 2).g;
  Vec g3 = estimate_G(tripled, b, 1000, 1.0, 2).g;
  // ties in the hill climb can break differently after rescaling
  EXPECT_LT((g3 - 3.0 * g1).cwiseAbs().maxCoeff(), 1e-3 * g3.maxCoeff());
}

TEST(LipschitzProperties, ContinuityOfF) {
  auto m = case9_model();
  BoxBounds b = default_box(m.sys, m.eq.x);
  Vec g = estimate_G(m.sys, b, 1000, 1.2, 1).g;
  NoiseStream s(77);
  for (int k = 0; k < 200; ++k) {
    Vec x = scale_box(b, m.eq.x, 0.9).sample(s, 2 * k);
    Vec h = cube(x.size(), -1, 1).sample(s, 2 * k + 1);
    h *= 1e-6 / h.norm();
    EXPECT_LE((m.sys.eval_f(x + h) - m.sys.eval_f(x)).norm(), g.maxCoeff() * std::sqrt(g.size()) * h.norm());
  }
}

}  // namespace
}  // namespace ndae
