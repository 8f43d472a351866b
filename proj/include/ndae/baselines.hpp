#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>

#include "ndae/common.hpp"
#include "ndae/daesim.hpp"
#include "ndae/ndae_model.hpp"
#include "ndae/pmu.hpp"

namespace ndae {

// ---------------------------------------------------------------------------------------
// Stage 1: least absolute value phasor estimation, min ||y - C z||_1.

struct LavResult {
  Vec x;
  Vec residual;
  double l1 = 0;
  int pivots = 0;
  std::vector<int> unobservable;  // coordinates left at zero in the null space
  std::string warning;
};

namespace detail {

// Dense tableau simplex for  min c^T x  s.t.  A x = b, x >= 0, starting from a given
// feasible basis whose columns form the identity in A (b >= 0).
inline int simplex(Mat& T, std::vector<int>& basis, int max_pivots) {
  const int m = static_cast<int>(T.rows()) - 1;
  const int N = static_cast<int>(T.cols()) - 1;
  int pivots = 0;
  int degenerate = 0;
  while (pivots < max_pivots) {
    // entering column: most negative reduced cost, Bland's rule after a degenerate run
    int e = -1;
    const bool bland = degenerate > 50;
    double best = -1e-11;
    for (int j = 0; j < N; ++j) {
      double rc = T(m, j);
      if (rc < best) {
        e = j;
        if (bland) break;
        best = rc;
      }
    }
    if (e < 0) return pivots;
    int l = -1;
    double ratio = INFINITY;
    for (int i = 0; i < m; ++i) {
      double a = T(i, e);
      if (a > 1e-12) {
        double r = T(i, N) / a;
        if (r < ratio - 1e-14 || (r <= ratio + 1e-14 && l >= 0 && basis[i] < basis[l])) {
          ratio = r;
          l = i;
        }
      }
    }
    if (l < 0) throw NumericalError("LP unbounded (cannot happen for an l1 objective)");
    degenerate = ratio < 1e-14 ? degenerate + 1 : 0;
    T.row(l) /= T(l, e);
    for (int i = 0; i <= m; ++i)
      if (i != l && T(i, e) != 0.0) T.row(i) -= T(i, e) * T.row(l);
    basis[l] = e;
    ++pivots;
  }
  throw NumericalError("simplex pivot limit reached");
}

}  // namespace detail

// y = C z + w,  w = w+ - w-,  z = z+ - z-.
inline LavResult lav_estimate(const Mat& C, const Vec& y, const std::vector<std::string>& names = {}) {
  const int p = static_cast<int>(C.rows()), m = static_cast<int>(C.cols());
  require(y.size() == p, "measurement length does not match the output matrix");
  require(p > 0 && m > 0, "empty LAV problem");
  LavResult res;

  // columns: z+ (m), z- (m), w+ (p), w- (p); rhs
  const int N = 2 * m + 2 * p;
  Mat T = Mat::Zero(p + 1, N + 1);
  std::vector<int> basis(p);
  for (int i = 0; i < p; ++i) {
    double s = y(i) >= 0 ? 1.0 : -1.0;
    T.block(i, 0, 1, m) = s * C.row(i);
    T.block(i, m, 1, m) = -s * C.row(i);
    T(i, 2 * m + i) = s;
    T(i, 2 * m + p + i) = -s;
    T(i, N) = s * y(i);
    basis[i] = y(i) >= 0 ? 2 * m + i : 2 * m + p + i;
  }
  // reduced costs c - c_B^T B^-1 A with c = 1 on the residual columns
  for (int j = 2 * m; j < N; ++j) T(p, j) = 1.0;
  for (int i = 0; i < p; ++i) T.row(p) -= T.row(i);
  res.pivots = detail::simplex(T, basis, 50 * (p + m) + 100);

  Vec xs = Vec::Zero(N);
  for (int i = 0; i < p; ++i) xs(basis[i]) = T(i, N);
  res.x = xs.head(m) - xs.segment(m, m);

  Eigen::ColPivHouseholderQR<Mat> qr(C);
  qr.setThreshold(1e-10);
  if (qr.rank() < m) {
    Eigen::FullPivLU<Mat> lu(C);
    lu.setThreshold(1e-10);
    Mat K = lu.kernel();
    Eigen::HouseholderQR<Mat> kq(K);
    Mat Nb = kq.householderQ() * Mat::Identity(m, K.cols());
    res.x -= Nb * (Nb.transpose() * res.x);
    std::string list;
    for (int j = 0; j < m; ++j)
      if (Nb.row(j).norm() > 1e-8) {
        res.unobservable.push_back(j);
        if (!list.empty()) list += ", ";
        list += j < static_cast<int>(names.size()) ? names[j] : "z" + std::to_string(j);
      }
    res.warning = "rank-deficient measurement set (rank " + std::to_string(qr.rank()) + " of " +
                  std::to_string(m) + "); partial estimate, unobservable: " + list;
  }
  res.residual = y - C * res.x;
  res.l1 = res.residual.lpNorm<1>();
  return res;
}

// Columns of the PMU map acting on the rectangular bus voltages [v_R; v_I].
inline Mat lav_matrix(const MeasurementModel& m) {
  const int ng = m.dims.ng, nb = m.dims.nb;
  return m.Ct.block(0, 2 * ng, m.p, 2 * nb);
}

inline std::vector<std::string> lav_names(const NdaeSystem& sys) {
  std::vector<std::string> n;
  for (int id : sys.bus_id) n.push_back("vR_bus" + std::to_string(id));
  for (int id : sys.bus_id) n.push_back("vI_bus" + std::to_string(id));
  return n;
}

// ---------------------------------------------------------------------------------------
// Stage 2: per-machine discrete model (first-order Taylor) and filters.

// Machine k of the NDAE with its terminal voltage (v, theta) as an exogenous input.
// Coefficients are read out of the assembled A, F, B_u, H so that the filter model is
// the plant's own generator model.
class DiscreteGenModel {
 public:
  DiscreteGenModel(const NdaeSystem& sys, int k, double dt) : k_(k), dt_(dt) {
    require(dt > 0 && dt <= 1e-2, "discretization step must lie in (0, 1e-2]");
    const Dims& d = sys.dims;
    require(k >= 0 && k < d.ng, "machine index out of range");
    const int ng = d.ng, b = sys.gen_bus[k], o = d.nfd;
    rows_ = {d.delta(k), d.omega(k), d.eq(k), d.ed(k), d.nd + k, d.nd + ng + k};
    cols_ = {d.delta(k), d.omega(k), d.eq(k), d.ed(k), d.pg(k), d.qg(k), d.v(b), d.theta(b)};
    fidx_ = {k, ng + k, 2 * ng + k, o + k, o + ng + k, o + 2 * ng + k, o + 3 * ng + k, o + 4 * ng + k};
    A_.resize(6, 8);
    F_.resize(6, 8);
    Bu_.resize(6, 2);
    H_.resize(6);
    for (int r = 0; r < 6; ++r) {
      double rest = 0;
      for (int c = 0; c < d.n; ++c) rest += std::abs(sys.A(rows_[r], c));
      for (int c = 0; c < 8; ++c) {
        A_(r, c) = sys.A(rows_[r], cols_[c]);
        rest -= std::abs(A_(r, c));
      }
      double frest = 0;
      for (int c = 0; c < sys.F.cols(); ++c) frest += std::abs(sys.F(rows_[r], c));
      for (int c = 0; c < 8; ++c) {
        F_(r, c) = sys.F(rows_[r], fidx_[c]);
        frest -= std::abs(F_(r, c));
      }
      if (std::abs(rest) > 1e-12 || std::abs(frest) > 1e-12)
        throw ValidationError("generator rows couple to states outside machine " + std::to_string(k));
      Bu_(r, 0) = sys.Bu(rows_[r], k);
      Bu_(r, 1) = sys.Bu(rows_[r], ng + k);
      H_(r) = sys.H(rows_[r]);
    }
    omega0_ = sys.omega0;
    require(std::abs(A_(4, 4)) > 0 && std::abs(A_(5, 5)) > 0 && F_(4, 0) == 0 && F_(5, 0) == 0,
            "stator rows are not explicit in PG/QG");
  }

  int machine() const { return k_; }
  double dt() const { return dt_; }

  // (PG, QG) from the stator rows
  Eigen::Vector2d pq(const Vec& z, double v, double th) const {
    Vec xl = local(z, 0.0, 0.0, v, th);
    Vec fl = floc(xl);
    double rp = A_.row(4).dot(xl) + F_.row(4).dot(fl) + H_(4) * omega0_;
    double rq = A_.row(5).dot(xl) + F_.row(5).dot(fl) + H_(5) * omega0_;
    return {-rp / A_(4, 4), -rq / A_(5, 5)};
  }

  // d(PG, QG)/dz
  Mat pq_jacobian(const Vec& z, double v, double th) const {
    Vec xl = local(z, 0.0, 0.0, v, th);
    Mat J = A_.topRows(6) + F_ * fjac(xl);
    Mat out(2, 4);
    out.row(0) = -J.block(4, 0, 1, 4) / A_(4, 4);
    out.row(1) = -J.block(5, 0, 1, 4) / A_(5, 5);
    return out;
  }

  Vec derivative(const Vec& z, const Eigen::Vector2d& u, double v, double th) const {
    Eigen::Vector2d s = pq(z, v, th);
    Vec xl = local(z, s(0), s(1), v, th);
    Vec fl = floc(xl);
    return (A_.topRows(4) * xl + F_.topRows(4) * fl + Bu_.topRows(4) * u + H_.head(4) * omega0_).eval();
  }

  Mat derivative_jacobian(const Vec& z, const Eigen::Vector2d& u, double v, double th) const {
    (void)u;
    Eigen::Vector2d s = pq(z, v, th);
    Vec xl = local(z, s(0), s(1), v, th);
    Mat J = A_.topRows(4) + F_.topRows(4) * fjac(xl);
    Mat dpq = pq_jacobian(z, v, th);
    return (J.leftCols(4) + J.col(4) * dpq.row(0) + J.col(5) * dpq.row(1)).eval();
  }

  // x+ = x + dt f_gen(x, u, v, theta)
  Vec step(const Vec& z, const Eigen::Vector2d& u, double v, double th) const {
    return z + dt_ * derivative(z, u, v, th);
  }
  Mat step_jacobian(const Vec& z, const Eigen::Vector2d& u, double v, double th) const {
    return Mat::Identity(4, 4) + dt_ * derivative_jacobian(z, u, v, th);
  }

 private:
  static Vec local(const Vec& z, double pg, double qg, double v, double th) {
    Vec xl(8);
    xl << z(0), z(1), z(2), z(3), pg, qg, v, th;
    return xl;
  }
  static Vec floc(const Vec& xl) {
    const double a = xl(0) - xl(7), v = xl(6), Eq = xl(2);
    const double ca = std::cos(a), sa = std::sin(a);
    Vec f(8);
    f << xl(4), v * ca, v * sa, Eq * v * sa, v * v * std::sin(2 * a), Eq * v * ca, v * v, v * v * std::cos(2 * a);
    return f;
  }
  // d floc / d xl, exogenous (v, theta) columns left at zero
  static Mat fjac(const Vec& xl) {
    const double a = xl(0) - xl(7), v = xl(6), Eq = xl(2);
    const double ca = std::cos(a), sa = std::sin(a);
    Mat J = Mat::Zero(8, 8);
    J(0, 4) = 1.0;
    J(1, 0) = -v * sa;
    J(2, 0) = v * ca;
    J(3, 0) = Eq * v * ca;
    J(3, 2) = v * sa;
    J(4, 0) = 2 * v * v * std::cos(2 * a);
    J(5, 0) = -Eq * v * sa;
    J(5, 2) = v * ca;
    J(7, 0) = -2 * v * v * std::sin(2 * a);
    return J;
  }

  int k_;
  double dt_;
  std::vector<int> rows_, cols_, fidx_;
  Mat A_, F_, Bu_;
  Vec H_;
  double omega0_ = kOmega0;
};

// One filter step's model: transition, output and their Jacobians, and covariances.
struct FilterModel {
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> F;
  std::function<Vec(const Vec&)> h;
  std::function<Mat(const Vec&)> H;
  Mat Q, R;
};

struct FilterState {
  Vec x;
  Mat P;
  Vec innovation;
};

inline Mat symmetrize(const Mat& P) { return 0.5 * (P + P.transpose()); }

namespace detail {

inline Mat gain(const Mat& PHt, const Mat& S) {
  Eigen::LDLT<Mat> ldlt(S);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 1e-300).all())
    throw NumericalError("innovation covariance is singular");
  return ldlt.solve(PHt.transpose()).transpose();
}

}  // namespace detail

// EKF: analytic-Jacobian predict, Joseph-form update.
inline FilterState ekf_step(const FilterModel& m, const FilterState& s, const Vec& y) {
  FilterState o;
  Mat Fk = m.F(s.x);
  Vec xp = m.f(s.x);
  Mat Pp = symmetrize(Fk * s.P * Fk.transpose() + m.Q);
  Mat Hk = m.H(xp);
  o.innovation = y - m.h(xp);
  Mat S = symmetrize(Hk * Pp * Hk.transpose() + m.R);
  Mat K = detail::gain(Pp * Hk.transpose(), S);
  o.x = xp + K * o.innovation;
  Mat IKH = Mat::Identity(xp.size(), xp.size()) - K * Hk;
  o.P = symmetrize(IKH * Pp * IKH.transpose() + K * m.R * K.transpose());
  return o;
}

struct UkfParams {
  double alpha = 1.0, beta = 2.0, kappa = 0.0;
};

// Symmetric square root by eigendecomposition, negative eigenvalues clipped.
inline Mat psd_sqrt(const Mat& P) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(P));
  Vec l = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

struct SigmaSet {
  std::vector<Vec> X;
  Vec wm, wc;
};

inline SigmaSet sigma_points(const Vec& x, const Mat& P, const UkfParams& u) {
  const int n = static_cast<int>(x.size());
  const double lam = u.alpha * u.alpha * (n + u.kappa) - n;
  require(n + lam > 0, "sigma-point spread must be positive");
  Mat S = psd_sqrt((n + lam) * P);
  SigmaSet s;
  s.X.push_back(x);
  for (int i = 0; i < n; ++i) s.X.push_back(x + S.col(i));
  for (int i = 0; i < n; ++i) s.X.push_back(x - S.col(i));
  s.wm = Vec::Constant(2 * n + 1, 0.5 / (n + lam));
  s.wc = s.wm;
  s.wm(0) = lam / (n + lam);
  s.wc(0) = lam / (n + lam) + (1 - u.alpha * u.alpha + u.beta);
  return s;
}

// Mean and covariance of g(x) for x ~ N(mean, P).
inline std::pair<Vec, Mat> unscented_transform(const Vec& mean, const Mat& P, const std::function<Vec(const Vec&)>& g,
                                               const UkfParams& u = {}) {
  SigmaSet s = sigma_points(mean, P, u);
  std::vector<Vec> Y;
  for (const Vec& x : s.X) Y.push_back(g(x));
  Vec ym = Vec::Zero(Y[0].size());
  for (size_t i = 0; i < Y.size(); ++i) ym += s.wm(i) * Y[i];
  Mat Py = Mat::Zero(ym.size(), ym.size());
  for (size_t i = 0; i < Y.size(); ++i) Py += s.wc(i) * (Y[i] - ym) * (Y[i] - ym).transpose();
  return {ym, symmetrize(Py)};
}

inline FilterState ukf_step(const FilterModel& m, const FilterState& s, const Vec& y, const UkfParams& u = {}) {
  const int n = static_cast<int>(s.x.size());
  SigmaSet a = sigma_points(s.x, s.P, u);
  std::vector<Vec> Xp;
  Vec xp = Vec::Zero(n);
  for (size_t i = 0; i < a.X.size(); ++i) {
    Xp.push_back(m.f(a.X[i]));
    xp += a.wm(i) * Xp.back();
  }
  Mat Pp = m.Q;
  for (size_t i = 0; i < Xp.size(); ++i) Pp += a.wc(i) * (Xp[i] - xp) * (Xp[i] - xp).transpose();
  Pp = symmetrize(Pp);
  // redraw around the predicted moments
  SigmaSet b = sigma_points(xp, Pp, u);
  std::vector<Vec> Yp;
  Vec yp = Vec::Zero(y.size());
  for (size_t i = 0; i < b.X.size(); ++i) {
    Yp.push_back(m.h(b.X[i]));
    yp += b.wm(i) * Yp.back();
  }
  Mat S = m.R;
  Mat Pxy = Mat::Zero(n, y.size());
  for (size_t i = 0; i < b.X.size(); ++i) {
    S += b.wc(i) * (Yp[i] - yp) * (Yp[i] - yp).transpose();
    Pxy += b.wc(i) * (b.X[i] - xp) * (Yp[i] - yp).transpose();
  }
  S = symmetrize(S);
  Mat K = detail::gain(Pxy, S);
  FilterState o;
  o.innovation = y - yp;
  o.x = xp + K * o.innovation;
  o.P = symmetrize(Pp - K * S * K.transpose());
  return o;
}

// ---------------------------------------------------------------------------------------
// Two-stage run

enum class FilterKind { Ekf, Ukf };

inline FilterKind parse_filter_kind(const std::string& s) {
  if (s == "ekf") return FilterKind::Ekf;
  if (s == "ukf") return FilterKind::Ukf;
  throw ValidationError("unknown filter '" + s + "' (expected ekf or ukf)");
}

struct TwoStageOptions {
  FilterKind filter = FilterKind::Ekf;
  UkfParams ukf;
  double dt = 1e-3;
};

struct TwoStageResult {
  Trajectory est;
  double seconds = 0, lav_seconds = 0, filter_seconds = 0;
  std::string warning;
};

namespace detail {

// Noise variance of one channel under the configured distribution.
inline double channel_variance(const NoiseConfig& cfg, int i) {
  switch (cfg.kind) {
    case NoiseKind::None: return 0.0;
    case NoiseKind::Gaussian: return cfg.channel_variance.size() ? cfg.channel_variance(i) : cfg.variance;
    case NoiseKind::Cauchy: return std::pow(cfg.cauchy_b * kPi, 2) / 12.0;
    case NoiseKind::CauchyTan: return std::pow(cfg.cauchy_b, 2);  // no variance; scale^2 as a proxy
  }
  return 0.0;
}

// Covariance of (P_b, Q_b) at the generator bus implied by the LAV voltage error,
// LAV taken at its Gaussian efficiency pi/2 relative to weighted least squares.
inline Mat pseudo_measurement_cov(const NdaeSystem& sys, const Mat& Cl, const NoiseConfig& noise, const Vec& x0, int bus) {
  const int nb = sys.dims.nb, p = static_cast<int>(Cl.rows());
  Vec w(p);
  for (int i = 0; i < p; ++i) w(i) = 1.0 / std::max(channel_variance(noise, i), 1e-30);
  Mat info = Cl.transpose() * w.asDiagonal() * Cl;
  Mat SigV = (kPi / 2.0) * info.completeOrthogonalDecomposition().pseudoInverse();
  CVec V(nb);
  for (int i = 0; i < nb; ++i) V(i) = std::polar(x0(sys.dims.v(i)), x0(sys.dims.theta(i)));
  CVec I = sys.Y * V;
  Mat J = Mat::Zero(2, 2 * nb);
  for (int j = 0; j < nb; ++j) {
    cplx dre = (j == bus ? std::conj(I(bus)) : 0.0) + V(bus) * std::conj(sys.Y(bus, j));
    cplx dim = (j == bus ? cplx(0, 1) * std::conj(I(bus)) : 0.0) - cplx(0, 1) * V(bus) * std::conj(sys.Y(bus, j));
    J(0, j) = dre.real();
    J(1, j) = dre.imag();
    J(0, nb + j) = dim.real();
    J(1, nb + j) = dim.imag();
  }
  Mat R = J * SigV * J.transpose();
  R.diagonal().array() += 1e-12;
  return symmetrize(R);
}

}  // namespace detail

// Per sample: LAV on y_k gives the bus voltages; each machine filter then runs on
// (P_G, Q_G) pseudo-measurements with (v, theta) of its bus as exogenous input.
inline TwoStageResult two_stage_run(const PlantModel& pm, const Trajectory& plant, const Scenario& sc,
                                    const TwoStageOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const NdaeSystem& sys = pm.sys;
  const Dims& d = sys.dims;
  const int nb = d.nb, ng = d.ng, K = plant.samples() - 1;
  require(std::abs(opt.dt - sc.dt) <= 1e-15, "two-stage step must equal the scenario step");
  const Mat Cl = lav_matrix(pm.meas);
  const std::vector<std::string> names = lav_names(sys);

  TwoStageResult res;
  Trajectory& tr = res.est;
  tr.names = sys.state_names();
  tr.t = plant.t;
  tr.X = Mat::Zero(d.n, K + 1);
  tr.Y = Mat::Zero(pm.meas.p, K + 1);

  std::vector<DiscreteGenModel> gens;
  for (int k = 0; k < ng; ++k) gens.emplace_back(sys, k, opt.dt);

  // filter covariances from the true noise configuration
  std::vector<Mat> Q(ng), R(ng);
  for (int k = 0; k < ng; ++k) {
    Q[k] = Mat::Zero(4, 4);
    if (sc.noise.process_std.size())
      for (int j = 0; j < 4; ++j) {
        int idx = (j == 0 ? d.delta(k) : j == 1 ? d.omega(k) : j == 2 ? d.eq(k) : d.ed(k));
        Q[k](j, j) = std::pow(opt.dt * sc.noise.process_std(idx), 2);
      }
    Q[k].diagonal().array() += 1e-14;
    R[k] = detail::pseudo_measurement_cov(sys, Cl, sc.noise, pm.eq.x, sys.gen_bus[k]);
  }

  // initial state: the observer's rule, variance of a uniform +-dev
  Vec xi = observer_initial_state(pm.eq.x, d, sc);
  std::vector<FilterState> fs(ng);
  for (int k = 0; k < ng; ++k) {
    fs[k].x = Vec(4);
    fs[k].x << xi(d.delta(k)), xi(d.omega(k)), xi(d.eq(k)), xi(d.ed(k));
    fs[k].P = Mat::Zero(4, 4);
    Vec ref(4);
    ref << pm.eq.x(d.delta(k)), pm.eq.x(d.omega(k)), pm.eq.x(d.eq(k)), pm.eq.x(d.ed(k));
    for (int j = 0; j < 4; ++j) fs[k].P(j, j) = std::max(std::pow(sc.init_deviation * ref(j), 2) / 3.0, 1e-8);
    if (sc.pin_omega) fs[k].P(1, 1) = 1e-8;
  }

  Vec xfull = pm.eq.x;
  auto lav_stage = [&](int k) {
    auto a = std::chrono::steady_clock::now();
    LavResult L = lav_estimate(Cl, plant.Y.col(k), names);
    if (!L.warning.empty() && res.warning.empty()) res.warning = L.warning;
    for (int i = 0; i < nb; ++i) {
      xfull(d.v(i)) = std::hypot(L.x(i), L.x(nb + i));
      xfull(d.theta(i)) = std::atan2(L.x(nb + i), L.x(i));
    }
    res.lav_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
  };
  auto record = [&](int k) {
    for (int g = 0; g < ng; ++g) {
      const Vec& z = fs[g].x;
      xfull(d.delta(g)) = z(0);
      xfull(d.omega(g)) = z(1);
      xfull(d.eq(g)) = z(2);
      xfull(d.ed(g)) = z(3);
      int b = sys.gen_bus[g];
      Eigen::Vector2d s = gens[g].pq(z, xfull(d.v(b)), xfull(d.theta(b)));
      xfull(d.pg(g)) = s(0);
      xfull(d.qg(g)) = s(1);
    }
    tr.X.col(k) = xfull;
    tr.Y.col(k) = pm.meas.h(xfull);
  };

  lav_stage(0);
  record(0);
  Vec vprev = xfull.segment(d.v(0), nb), thprev = xfull.segment(d.theta(0), nb);
  Vec Pb, Qb;
  for (int k = 1; k <= K; ++k) {
    const double t = (k - 1) * sc.dt;
    lav_stage(k);
    auto a = std::chrono::steady_clock::now();
    sys.flows(xfull, Pb, Qb);
    Vec u = sc.observer_knows_inputs ? detail::input_at(pm.eq, sc, t) : pm.eq.u;
    for (int g = 0; g < ng; ++g) {
      const int b = sys.gen_bus[g];
      // generator injection = network injection + known load - known renewables
      Vec y(2);
      y << Pb(b) + pm.eq.q(2 * nb + b) - pm.eq.q(b), Qb(b) + pm.eq.q(3 * nb + b) - pm.eq.q(nb + b);
      const double vp = vprev(b), tp = thprev(b), vn = xfull(d.v(b)), tn = xfull(d.theta(b));
      const DiscreteGenModel& G = gens[g];
      Eigen::Vector2d ug(u(g), u(ng + g));
      FilterModel m;
      m.f = [&](const Vec& z) { return G.step(z, ug, vp, tp); };
      m.F = [&](const Vec& z) { return G.step_jacobian(z, ug, vp, tp); };
      m.h = [&](const Vec& z) { return Vec(G.pq(z, vn, tn)); };
      m.H = [&](const Vec& z) { return G.pq_jacobian(z, vn, tn); };
      m.Q = Q[g];
      m.R = R[g];
      fs[g] = opt.filter == FilterKind::Ekf ? ekf_step(m, fs[g], y) : ukf_step(m, fs[g], y, opt.ukf);
    }
    res.filter_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
    vprev = xfull.segment(d.v(0), nb);
    thprev = xfull.segment(d.theta(0), nb);
    record(k);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  tr.seconds = res.seconds;
  return res;
}

}  // namespace ndae
