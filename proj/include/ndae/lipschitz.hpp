#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "ndae/common.hpp"
#include "ndae/ndae_model.hpp"

namespace ndae {

struct BoxBounds {
  Vec lo, hi;

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vec& x, double tol = 0.0) const {
    return ((x.array() >= lo.array() - tol) && (x.array() <= hi.array() + tol)).all();
  }
  Vec center() const { return 0.5 * (lo + hi); }
  Vec sample(const NoiseStream& s, uint64_t k) const {
    Vec x(dim());
    for (int j = 0; j < dim(); ++j) x(j) = lo(j) + (hi(j) - lo(j)) * s.uniform(k * dim() + j);
    return x;
  }
  Vec clamp(const Vec& x) const { return x.cwiseMax(lo).cwiseMin(hi); }
};

inline void validate_box(const BoxBounds& b) {
  require(b.lo.size() == b.hi.size() && b.lo.size() > 0, "box bounds have mismatched length");
  require(b.lo.allFinite() && b.hi.allFinite(), "box bounds must be finite");
  require((b.lo.array() <= b.hi.array()).all(), "box lower bound exceeds upper bound");
  require((b.hi.array() > b.lo.array()).all(), "box has zero width in some coordinate");
}

// Operating region around an equilibrium x0. E' bounds get a 0.05 pu floor so a
// machine with zero transient EMF (xq = xq') still has a nonzero-width interval.
inline BoxBounds default_box(const NdaeSystem& sys, const Vec& x0) {
  const Dims& d = sys.dims;
  BoxBounds b{x0, x0};
  for (int k = 0; k < d.ng; ++k) {
    b.lo(d.delta(k)) -= 0.5;
    b.hi(d.delta(k)) += 0.5;
    b.lo(d.omega(k)) -= 4 * kPi;
    b.hi(d.omega(k)) += 4 * kPi;
    for (int i : {d.eq(k), d.ed(k)}) {
      double w = std::max(0.3 * std::abs(x0(i)), 0.05);
      b.lo(i) -= w;
      b.hi(i) += w;
    }
    for (int i : {d.pg(k), d.qg(k)}) {
      b.lo(i) -= 1.0;
      b.hi(i) += 1.0;
    }
  }
  for (int i = 0; i < d.nb; ++i) {
    b.lo(d.v(i)) = 0.8;
    b.hi(d.v(i)) = 1.2;
    b.lo(d.theta(i)) -= 0.5;
    b.hi(d.theta(i)) += 0.5;
  }
  return b;
}

// Shrink or grow a box about a fixed point (usually the equilibrium).
inline BoxBounds scale_box(const BoxBounds& b, const Vec& x0, double s) {
  require(s > 0, "box scale must be positive");
  return BoxBounds{x0 + s * (b.lo - x0), x0 + s * (b.hi - x0)};
}

struct LipschitzMatrix {
  Vec g;  // diagonal of G
  int samples = 0;
  uint64_t seed = 0;
  double margin = 1.0;
  double max_quotient = 0.0;

  Mat G() const { return g.asDiagonal(); }
};

// A vector field with its Jacobian, so the estimator works for f itself and for the
// shifted remainder used in synthesis.
struct Nonlinearity {
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> jac;
};

inline Nonlinearity nonlinearity_of(const NdaeSystem& sys) {
  return {[&sys](const Vec& x) { return sys.eval_f(x); },
          [&sys](const Vec& x) { return sys.jac_f(x); }};
}

enum class LipschitzMode {
  Column,   // G_jj = max ||df/dx_j||_2, the plain per-coordinate gradient bound
  Coupled,  // G_jj^2 = sum_i Jbar_ij * sum_k Jbar_ik, valid in the ||G dx||_2 form
};

inline LipschitzMode parse_lipschitz_mode(const std::string& s) {
  if (s == "column") return LipschitzMode::Column;
  if (s == "coupled") return LipschitzMode::Coupled;
  throw ValidationError("unknown Lipschitz mode '" + s + "'");
}

// From the entrywise bound Jbar >= |J| over the box. For the coupled weighting,
// Cauchy-Schwarz on each row gives ||Jbar |dx| ||^2 <= sum_j dx_j^2 sum_i Jbar_ij r_i
// with r the row sums, so the diagonal bound holds for every pair in the (convex) box.
inline Vec lipschitz_from_bound(const Mat& Jbar, LipschitzMode mode) {
  if (mode == LipschitzMode::Column) return Jbar.colwise().norm().transpose();
  Vec r = Jbar.rowwise().sum();
  return (Jbar.transpose() * r).cwiseSqrt();
}

namespace detail {

// Hill climb on the column-j objective, folding every Jacobian seen into Jbar.
// The step shrinks after each miss.
inline void refine_column(const Nonlinearity& nl, const BoxBounds& box, Vec x, int j,
                          const NoiseStream& s, uint64_t base, int iters, Mat& Jbar) {
  auto score = [&](const Vec& z) {
    Mat J = nl.jac(z).cwiseAbs();
    Jbar = Jbar.cwiseMax(J);
    return J.col(j).norm();
  };
  double best = score(x);
  double step = 0.25;
  const int n = box.dim();
  for (int it = 0; it < iters && step > 1e-3; ++it) {
    Vec cand = x;
    for (int i = 0; i < n; ++i)
      cand(i) += step * (box.hi(i) - box.lo(i)) * (2 * s.uniform((base + it) * n + i) - 1);
    cand = box.clamp(cand);
    double v = score(cand);
    if (v > best) {
      best = v;
      x = cand;
    } else {
      step *= 0.85;
    }
  }
}

}  // namespace detail

// Uniform sampling of the Jacobian over the box, then a local climb from the best
// sample of each column; G = margin * (bound built from the entrywise max).
inline LipschitzMatrix estimate_G(const Nonlinearity& nl, const BoxBounds& box, int samples,
                                  double margin, uint64_t seed,
                                  LipschitzMode mode = LipschitzMode::Coupled,
                                  int refine_iters = 60) {
  validate_box(box);
  require(samples >= 1000, "Lipschitz estimation needs at least 1000 samples");
  require(margin >= 1.0, "Lipschitz margin must be >= 1");
  const int n = box.dim();
  NoiseStream s(seed, 5);
  Vec colmax = Vec::Zero(n);
  std::vector<Vec> argmax(n, box.center());
  Mat Jbar;
  for (int k = 0; k < samples; ++k) {
    Vec x = box.sample(s, k);
    Mat J = nl.jac(x).cwiseAbs();
    require(J.cols() == n, "Jacobian width does not match the box dimension");
    Jbar = k == 0 ? J : Jbar.cwiseMax(J);
    for (int j = 0; j < n; ++j) {
      double c = J.col(j).norm();
      if (c > colmax(j)) {
        colmax(j) = c;
        argmax[j] = x;
      }
    }
  }
  NoiseStream r(seed, 6);
  for (int j = 0; j < n; ++j) {
    if (colmax(j) == 0.0) continue;
    detail::refine_column(nl, box, argmax[j], j, r, static_cast<uint64_t>(j) * 100000,
                          refine_iters, Jbar);
  }
  LipschitzMatrix L;
  L.g = margin * lipschitz_from_bound(Jbar, mode);
  L.samples = samples;
  L.seed = seed;
  L.margin = margin;
  L.max_quotient = Jbar.colwise().norm().maxCoeff();
  return L;
}

inline LipschitzMatrix estimate_G(const NdaeSystem& sys, const BoxBounds& box, int samples,
                                  double margin, uint64_t seed,
                                  LipschitzMode mode = LipschitzMode::Coupled) {
  return estimate_G(nonlinearity_of(sys), box, samples, margin, seed, mode);
}

struct LipschitzReport {
  int pairs = 0;
  int violations = 0;
  double worst_ratio = 0.0;
  bool pass() const { return worst_ratio <= 1.0; }
};

// Fresh pairs: half drawn independently over the whole box, half as short hops
// (1% of the box width) from a random point, where the local slope dominates.
inline LipschitzReport validate_G(const Nonlinearity& nl, const BoxBounds& box, const Vec& g,
                                  int pairs, uint64_t seed) {
  validate_box(box);
  NoiseStream s(seed, 7);
  LipschitzReport rep;
  rep.pairs = pairs;
  for (int k = 0; k < pairs; ++k) {
    Vec a = box.sample(s, 2 * k);
    Vec b = box.sample(s, 2 * k + 1);
    if (k % 2) b = box.clamp(a + 0.01 * (b - box.center()));
    Vec dx = a - b;
    double num = (nl.f(a) - nl.f(b)).norm();
    double den = g.cwiseProduct(dx).norm();
    double ratio = den > 0 ? num / den : (num > 0 ? INFINITY : 0.0);
    if (ratio > 1.0) ++rep.violations;
    rep.worst_ratio = std::max(rep.worst_ratio, ratio);
  }
  return rep;
}

inline LipschitzReport validate_G(const NdaeSystem& sys, const BoxBounds& box, const Vec& g,
                                  int pairs, uint64_t seed) {
  return validate_G(nonlinearity_of(sys), box, g, pairs, seed);
}

}  // namespace ndae
