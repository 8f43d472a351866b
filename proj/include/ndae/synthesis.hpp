#pragma once

#include <Eigen/LU>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "ndae/lipschitz.hpp"
#include "ndae/ndae_model.hpp"
#include "ndae/pmu.hpp"
#include "ndae/sdp.hpp"

namespace ndae {

// Columns span ker(Z^T); for Z = blkdiag(I, 0) this is the exact selector [0; I].
inline Mat orth_complement(const Mat& Z) {
  require(Z.rows() == Z.cols(), "Z must be square");
  const int n = static_cast<int>(Z.rows());
  const double tol = 1e-10 * std::max(1.0, Z.cwiseAbs().maxCoeff());
  require((Z - Z.transpose()).cwiseAbs().maxCoeff() <= tol, "Z is not symmetric");
  require((Z * Z - Z).cwiseAbs().maxCoeff() <= tol, "Z is not an orthogonal projector");
  bool zero_one_diag = Z.isDiagonal(0.0);
  for (int i = 0; i < n && zero_one_diag; ++i) zero_one_diag = (Z(i, i) == 0.0 || Z(i, i) == 1.0);
  if (zero_one_diag) {
    int na = 0;
    for (int i = 0; i < n; ++i) na += Z(i, i) == 0.0;
    Mat N = Mat::Zero(n, na);
    for (int i = 0, k = 0; i < n; ++i)
      if (Z(i, i) == 0.0) N(i, k++) = 1.0;
    return N;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(Z);
  int na = 0;
  while (na < n && es.eigenvalues()(na) < 0.5) ++na;
  return es.eigenvectors().leftCols(na);
}

// Everything the LMI sees. For synthesis, A is the shifted matrix A + F J_f(x0) and g
// bounds the projected remainder Pi (f(x) - J_f(x0) x), so A x + F f(x) is rewritten exactly.
struct SynthesisModel {
  Mat Z, A, F, Bw, C, Dw;
  Vec g;
  Vec x0;
  int nu = 0;          // PI: trailing integral states
  bool pi = false;
  BoxBounds box;       // synthesis region the Lipschitz bound holds on
  LipschitzMatrix lipschitz;
  int n() const { return static_cast<int>(A.rows()); }
  int p() const { return static_cast<int>(C.rows()); }
  int nf() const { return static_cast<int>(F.cols()); }
  int q() const { return static_cast<int>(Bw.cols()); }
};

struct SynthesisOptions {
  double box_scale = 0.03;       // fraction of the default operating box
  int lipschitz_samples = 2000;
  double lipschitz_margin = 1.2;
  uint64_t lipschitz_seed = 1;
  LipschitzMode lipschitz_mode = LipschitzMode::Coupled;
};

inline Mat range_projector(const Mat& F) {
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(F);
  return cod.pseudoInverse() * F;
}

inline SynthesisModel make_synthesis_model(const NdaeSystem& sys, const MeasurementModel& meas,
                                           const Vec& x0, const SynthesisOptions& opt = {}) {
  require(x0.size() == sys.dims.n, "operating point has the wrong dimension");
  SynthesisModel m;
  m.x0 = x0;
  const Mat J0 = sys.jac_f(x0);
  const Mat Pi = range_projector(sys.F);
  m.Z = sys.Z;
  m.A = sys.A + sys.F * J0;
  m.F = sys.F;
  m.Bw = sys.Bw(meas.p);
  m.C = meas.h_jacobian(x0);
  m.Dw = noise_injection(meas, sys);
  m.box = scale_box(default_box(sys, x0), x0, opt.box_scale);
  Nonlinearity rem{[&sys, Pi, J0](const Vec& x) { return Vec(Pi * (sys.eval_f(x) - J0 * x)); },
                   [&sys, Pi, J0](const Vec& x) { return Mat(Pi * (sys.jac_f(x) - J0)); }};
  m.lipschitz = estimate_G(rem, m.box, opt.lipschitz_samples, opt.lipschitz_margin, opt.lipschitz_seed,
                           opt.lipschitz_mode);
  m.g = m.lipschitz.g;
  return m;
}

// rho = [x; du], psi = 0: Z_r = blkdiag(Z, I), A_r = [[A, B_u], [0, 0]], everything else
// padded with zero rows / columns. G extends with zeros since f does not see du.
struct AugmentedSystem {
  Mat Z, A, F, Bu, Bq, Bw, C;
  Vec H;
  int n = 0, nu = 0;
};

inline AugmentedSystem augment_pi(const NdaeSystem& sys, const MeasurementModel& meas) {
  const int n = sys.dims.n, nu = sys.dims.nu;
  AugmentedSystem a;
  a.n = n + nu;
  a.nu = nu;
  a.Z = blkdiag(sys.Z, Mat::Identity(nu, nu));
  a.A = Mat::Zero(n + nu, n + nu);
  a.A.topLeftCorner(n, n) = sys.A;
  a.A.topRightCorner(n, nu) = sys.Bu;
  auto pad = [&](const Mat& M) {
    Mat out = Mat::Zero(n + nu, M.cols());
    out.topRows(n) = M;
    return out;
  };
  a.F = pad(sys.F);
  a.Bu = pad(sys.Bu);
  a.Bq = pad(sys.Bq);
  a.Bw = pad(sys.Bw(meas.p));
  a.H = Vec::Zero(n + nu);
  a.H.head(n) = sys.H;
  a.C = Mat::Zero(meas.p, n + nu);
  a.C.leftCols(n) = meas.C;
  return a;
}

inline SynthesisModel augment_pi(const SynthesisModel& m, const Mat& Bu) {
  require(!m.pi, "model is already augmented");
  const int n = m.n(), nu = static_cast<int>(Bu.cols());
  SynthesisModel a = m;
  a.pi = true;
  a.nu = nu;
  a.Z = blkdiag(m.Z, Mat::Identity(nu, nu));
  a.A = Mat::Zero(n + nu, n + nu);
  a.A.topLeftCorner(n, n) = m.A;
  a.A.topRightCorner(n, nu) = Bu;
  a.F = Mat::Zero(n + nu, m.nf());
  a.F.topRows(n) = m.F;
  a.Bw = Mat::Zero(n + nu, m.q());
  a.Bw.topRows(n) = m.Bw;
  a.C = Mat::Zero(m.p(), n + nu);
  a.C.leftCols(n) = m.C;
  a.g = Vec::Zero(n + nu);
  a.g.head(n) = m.g;
  a.x0 = Vec::Zero(n + nu);
  a.x0.head(n) = m.x0;
  return a;
}

// GammaOnly: minimize gamma alone. Weighted: c1 kappa + c2 gamma + c3 t, with the kappa and norm blocks.
enum class Objective { GammaOnly, Weighted };

struct SynthesisConfig {
  Mat Gamma;  // empty = identity
  double c1 = 1.0, c2 = 1.0, c3 = 1.0 / 3.0;
  double mu = 1e-6;
  double mu_X = 0.1;  // X >= mu_X I fixes the scale of the homogeneous LMI
  Objective objective = Objective::Weighted;
  double cond_limit = 1e10;
  SdpSettings sdp;
  bool diagnose_infeasible = true;
};

struct ObserverLmiProblem {
  SdpProblem sdp;
  SymVar X;
  MatVar Y, R;
  int eps = -1, gamma = -1, kappa = -1, t = -1;
  int lmi_block = -1;
  Mat N;  // Z-perp^T of the proof, n x n_a
};

inline ObserverLmiProblem assemble_observer_lmi(const SynthesisModel& m, const SynthesisConfig& cfg) {
  const int n = m.n(), p = m.p(), nf = m.nf(), q = m.q();
  require(m.Z.rows() == n && m.F.rows() == n && m.Bw.rows() == n && m.C.cols() == n,
          "synthesis matrices have inconsistent row counts");
  require(m.Dw.rows() == p && m.Dw.cols() == q, "D_w must be p x q");
  require(m.g.size() == n, "Lipschitz vector must have one entry per state");
  require(cfg.c1 > 0 && cfg.c2 > 0 && cfg.c3 > 0, "objective weights must be positive");
  Mat Gamma = cfg.Gamma.size() ? cfg.Gamma : Mat::Identity(n, n);
  require(Gamma.cols() == n, "Gamma must have n columns");

  ObserverLmiProblem t;
  t.N = orth_complement(m.Z);
  const int na = static_cast<int>(t.N.cols());
  SdpProblem& s = t.sdp;
  t.X = add_sym_var(s, "X", n);
  t.Y = add_mat_var(s, "Y", na, n);
  t.R = add_mat_var(s, "R", p, n);
  const bool weighted = cfg.objective == Objective::Weighted;
  t.eps = s.add_var("eps");
  t.gamma = s.add_var("gamma", weighted ? cfg.c2 : cfg.c1);
  if (weighted) {
    t.kappa = s.add_var("kappa", cfg.c1);
    t.t = s.add_var("t", cfg.c3);
  }
  const Mat In = Mat::Identity(n, n);
  const Mat ZT = m.Z.transpose();

  // -M >= mu I with M the 3x3 block matrix; written as H + H^T
  const int b = t.lmi_block = s.add_block("observer_lmi", n + nf + q, cfg.mu);
  // Omega: A^T P + P^T A - C^T R - R^T C + eps G^2 + Gamma^T Gamma, P = X Z + N Y
  add_product(s, b, 0, 0, ZT, t.X, false, m.A, -1.0);                   // -(XZ)^T A = -Z^T X A
  add_product(s, b, 0, 0, In, t.Y, true, t.N.transpose() * m.A, -1.0);  // -Y^T N^T A
  add_product(s, b, 0, 0, In, t.R, true, m.C, 1.0);                     // +R^T C
  for (int i = 0; i < n; ++i) s.add(b, i, i, t.eps, -0.5 * m.g(i) * m.g(i));
  add_constant(s, b, 0, 0, Gamma.transpose() * Gamma, -0.5);
  // (2,1): F^T P
  add_product(s, b, n, 0, m.F.transpose(), t.X, false, m.Z, -1.0);
  add_product(s, b, n, 0, m.F.transpose() * t.N, t.Y, false, In, -1.0);
  // (3,1): B_w^T P - D_w^T R
  add_product(s, b, n + nf, 0, m.Bw.transpose(), t.X, false, m.Z, -1.0);
  add_product(s, b, n + nf, 0, m.Bw.transpose() * t.N, t.Y, false, In, -1.0);
  add_product(s, b, n + nf, 0, m.Dw.transpose(), t.R, false, In, 1.0);
  for (int i = 0; i < nf; ++i) s.add(b, n + i, n + i, t.eps, 0.5);
  for (int i = 0; i < q; ++i) s.add(b, n + nf + i, n + nf + i, t.gamma, 0.5);

  int bx = s.add_block("X", n, cfg.mu_X);
  add_product(s, bx, 0, 0, In, t.X, false, In, 0.5);
  int be = s.add_block("eps", 1, cfg.mu);
  s.add_sym(be, 0, 0, t.eps, 1.0);
  int bg = s.add_block("gamma", 1, cfg.mu);
  s.add_sym(bg, 0, 0, t.gamma, 1.0);
  if (weighted) {
    int bk = s.add_block("kappa", n, cfg.mu);  // kappa I - Z^T X Z
    for (int i = 0; i < n; ++i) s.add(bk, i, i, t.kappa, 0.5);
    add_product(s, bk, 0, 0, ZT, t.X, false, m.Z, -0.5);
    int bt = s.add_block("norm_R", n + p);  // [[t I, R^T], [R, t I]]
    for (int i = 0; i < n + p; ++i) s.add(bt, i, i, t.t, 0.5);
    add_product(s, bt, n, 0, Mat::Identity(p, p), t.R, false, In, 1.0);
  }
  return t;
}

struct ObserverGain {
  Mat L;           // n x p (PI: stacked [L_P; L_I])
  Mat L_P, L_I;
  Mat X, Y, R, P;
  double eps = 0, gamma = 0, kappa = 0, t = 0, objective = 0;
  double worst_eig = 0;        // of the LMI, already shifted by mu (>= -tol passes)
  double prelinear_max_eig = 0;  // of M with P^T L substituted for R^T
  double cond_P = 0;
  double symmetry_error = 0;   // ||Z^T P - P^T Z||
  double zp_min_eig = 0;       // min eig of the symmetric part of Z^T P
  bool pi = false;
  SdpSolution sdp;
  Vec g;
  int lmi_dim = 0;
};

// The matrix inequality before the change of variables, with P^T L in place of R^T.
inline Mat prelinear_matrix(const SynthesisModel& m, const Mat& P, const Mat& L, double eps,
                            double gamma, const Mat& Gamma) {
  const int n = m.n(), nf = m.nf(), q = m.q();
  Mat PL = P.transpose() * L;
  Mat Om = m.A.transpose() * P + P.transpose() * m.A - m.C.transpose() * PL.transpose() - PL * m.C +
           eps * Mat(m.g.cwiseProduct(m.g).asDiagonal()) + Gamma.transpose() * Gamma;
  Mat M = Mat::Zero(n + nf + q, n + nf + q);
  M.topLeftCorner(n, n) = Om;
  M.block(n, 0, nf, n) = m.F.transpose() * P;
  M.block(n + nf, 0, q, n) = m.Bw.transpose() * P - m.Dw.transpose() * PL.transpose();
  M.block(0, n, n, nf) = M.block(n, 0, nf, n).transpose();
  M.block(0, n + nf, n, q) = M.block(n + nf, 0, q, n).transpose();
  M.block(n, n, nf, nf) = -eps * Mat::Identity(nf, nf);
  M.block(n + nf, n + nf, q, q) = -gamma * Mat::Identity(q, q);
  return M;
}

inline double max_eig(const Mat& S) {
  return Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly)
      .eigenvalues()
      .maxCoeff();
}

inline ObserverGain synthesize(const SynthesisModel& m, const SynthesisConfig& cfg) {
  ObserverLmiProblem t = assemble_observer_lmi(m, cfg);
  SdpSolution sol = solve_sdp(t.sdp, cfg.sdp);
  if (sol.status == SdpStatus::Infeasible || sol.status == SdpStatus::MaxIter) {
    std::string why = "synthesis SDP " + status_name(sol.status) + " (" + sol.message + ")";
    if (cfg.diagnose_infeasible && m.q() > 0) {
      // drop the disturbance channel (gamma unbounded): if that is solvable, the
      // robustness level is what binds, otherwise the Lyapunov / Lipschitz part does
      SynthesisModel relaxed = m;
      relaxed.Bw = Mat::Zero(m.n(), 0);
      relaxed.Dw = Mat::Zero(m.p(), 0);
      SynthesisConfig c2 = cfg;
      c2.diagnose_infeasible = false;
      SdpSolution r = solve_sdp(assemble_observer_lmi(relaxed, c2).sdp, cfg.sdp);
      bool ok = r.status == SdpStatus::Optimal || r.status == SdpStatus::Feasible;
      why += ok ? "; binding block: disturbance attenuation (gamma)"
                : "; binding block: Lyapunov/Lipschitz part of the observer LMI (no gain for this PMU set)";
    } else {
      why += "; binding block: " + sol.certificate.worst_block;
    }
    throw NumericalError(why);
  }
  ObserverGain g;
  g.sdp = sol;
  g.pi = m.pi;
  g.g = m.g;
  g.lmi_dim = m.n() + m.nf() + m.q();
  const Vec& x = sol.x;
  g.X = value(t.X, x);
  g.Y = value(t.Y, x);
  g.R = value(t.R, x);
  g.eps = x(t.eps);
  g.gamma = x(t.gamma);
  if (t.kappa >= 0) g.kappa = x(t.kappa);
  if (t.t >= 0) g.t = x(t.t);
  g.objective = sol.objective;
  g.worst_eig = sol.worst_eig;
  g.P = g.X * m.Z + t.N * g.Y;
  Eigen::JacobiSVD<Mat> svd(g.P);
  const Vec& sv = svd.singularValues();
  g.cond_P = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : INFINITY;
  if (!(g.cond_P <= cfg.cond_limit))
    throw NumericalError("P = XZ + Z_perp Y is ill-conditioned (cond " + std::to_string(g.cond_P) +
                         "); try a different PMU placement");
  g.L = g.P.transpose().partialPivLu().solve(g.R.transpose());
  Mat ZP = m.Z.transpose() * g.P;
  g.symmetry_error = (ZP - ZP.transpose()).cwiseAbs().maxCoeff();
  g.zp_min_eig = Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (ZP + ZP.transpose())).eigenvalues().minCoeff();
  Mat Gamma = cfg.Gamma.size() ? cfg.Gamma : Mat::Identity(m.n(), m.n());
  g.prelinear_max_eig = max_eig(prelinear_matrix(m, g.P, g.L, g.eps, g.gamma, Gamma));
  if (m.pi) {
    g.L_P = g.L.topRows(m.n() - m.nu);
    g.L_I = g.L.bottomRows(m.nu);
  } else {
    g.L_P = g.L;
  }
  return g;
}

}  // namespace ndae
