#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "ndae/common.hpp"

namespace ndae {

// Conic form handled here:
//   minimize c^T x  subject to  F_k(x) = F_k0 + sum_j x_j F_kj  >=  mu_k I   (each block k).
// Negative-definite requirements are written by the caller with flipped signs.
// Coefficients are collected as entries of a (not necessarily symmetric) matrix H_k and the
// block is H_k + H_k^T, which is how the observer LMI naturally appears (A^T P + P^T A).

inline int svec_size(int m) { return m * (m + 1) / 2; }

// column-major lower triangle, i >= j
inline int svec_index(int m, int i, int j) {
  if (i < j) std::swap(i, j);
  return j * m - j * (j - 1) / 2 + (i - j);
}

inline Vec svec(const Mat& S) {
  const int m = static_cast<int>(S.rows());
  Vec v(svec_size(m));
  const double r2 = std::sqrt(2.0);
  for (int j = 0; j < m; ++j)
    for (int i = j; i < m; ++i) v(svec_index(m, i, j)) = (i == j) ? S(i, i) : r2 * S(i, j);
  return v;
}

inline Mat smat(const Eigen::Ref<const Vec>& v, int m) {
  Mat S(m, m);
  const double r2 = 1.0 / std::sqrt(2.0);
  for (int j = 0; j < m; ++j)
    for (int i = j; i < m; ++i) {
      double s = v(svec_index(m, i, j));
      if (i == j) S(i, i) = s;
      else S(i, j) = S(j, i) = r2 * s;
    }
  return S;
}

struct SdpBlock {
  std::string name;
  int size = 0;
  double mu = 0.0;  // required F(x) >= mu I
  struct Entry {
    int r, c, var;  // var = -1 for the constant term
    double val;
  };
  std::vector<Entry> entries;  // entries of H, block = H + H^T
};

struct SdpProblem {
  std::vector<std::string> var_names;
  std::vector<double> cost;
  std::vector<SdpBlock> blocks;

  int add_var(const std::string& name, double cost_coeff = 0.0) {
    var_names.push_back(name);
    cost.push_back(cost_coeff);
    return static_cast<int>(var_names.size()) - 1;
  }
  int num_vars() const { return static_cast<int>(var_names.size()); }

  int add_block(const std::string& name, int size, double mu = 0.0) {
    require(size > 0, "LMI block must be non-empty");
    blocks.push_back(SdpBlock{name, size, mu, {}});
    return static_cast<int>(blocks.size()) - 1;
  }

  // H(r, c) += val * x_var (var = -1: constant).
  void add(int block, int r, int c, int var, double val) {
    if (val == 0.0) return;
    SdpBlock& b = blocks.at(block);
    require(r >= 0 && c >= 0 && r < b.size && c < b.size, "LMI entry out of range in " + b.name);
    require(var >= -1 && var < num_vars(), "unknown SDP variable");
    b.entries.push_back({r, c, var, val});
  }
  // Symmetric contribution: F(r, c) = F(c, r) += val * x_var.
  void add_sym(int block, int r, int c, int var, double val) {
    add(block, r, c, var, r == c ? 0.5 * val : val);
  }

  Vec objective() const { return Eigen::Map<const Vec>(cost.data(), cost.size()); }

  Mat evaluate(int k, const Vec& x) const {
    const SdpBlock& b = blocks[k];
    Mat H = Mat::Zero(b.size, b.size);
    for (const auto& e : b.entries) H(e.r, e.c) += e.val * (e.var < 0 ? 1.0 : x(e.var));
    return H + H.transpose();
  }
};

// Symmetric matrix variable packed as scalars, lower-triangle order.
struct SymVar {
  int n = 0, offset = 0;
  int operator()(int i, int j) const { return offset + svec_index(n, i, j); }
};
struct MatVar {
  int rows = 0, cols = 0, offset = 0;
  int operator()(int i, int j) const { return offset + i * cols + j; }
};

inline SymVar add_sym_var(SdpProblem& p, const std::string& name, int n) {
  SymVar v{n, p.num_vars()};
  for (int j = 0; j < n; ++j)
    for (int i = j; i < n; ++i) p.add_var(name + "(" + std::to_string(i) + "," + std::to_string(j) + ")");
  return v;
}
inline MatVar add_mat_var(SdpProblem& p, const std::string& name, int r, int c) {
  MatVar v{r, c, p.num_vars()};
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) p.add_var(name + "(" + std::to_string(i) + "," + std::to_string(j) + ")");
  return v;
}
inline Mat value(const SymVar& v, const Vec& x) {
  Mat S(v.n, v.n);
  for (int i = 0; i < v.n; ++i)
    for (int j = 0; j < v.n; ++j) S(i, j) = x(v(i, j));
  return S;
}
inline Mat value(const MatVar& v, const Vec& x) {
  Mat M(v.rows, v.cols);
  for (int i = 0; i < v.rows; ++i)
    for (int j = 0; j < v.cols; ++j) M(i, j) = x(v(i, j));
  return M;
}

// H(roff + r, coff + c) += scale * (Lm * V * Rm)(r, c) for a variable matrix V (or V^T).
// Only nonzeros of Lm and Rm are visited, so sparse coefficient matrices stay cheap.
template <class VarT>
void add_product(SdpProblem& p, int block, int roff, int coff, const Mat& Lm, const VarT& V,
                 bool transpose, const Mat& Rm, double scale) {
  std::vector<std::vector<std::pair<int, double>>> lcol(Lm.cols()), rrow(Rm.rows());
  for (int i = 0; i < Lm.cols(); ++i)
    for (int r = 0; r < Lm.rows(); ++r)
      if (Lm(r, i) != 0.0) lcol[i].emplace_back(r, Lm(r, i));
  for (int j = 0; j < Rm.rows(); ++j)
    for (int c = 0; c < Rm.cols(); ++c)
      if (Rm(j, c) != 0.0) rrow[j].emplace_back(c, Rm(j, c));
  for (int i = 0; i < Lm.cols(); ++i) {
    if (lcol[i].empty()) continue;
    for (int j = 0; j < Rm.rows(); ++j) {
      if (rrow[j].empty()) continue;
      int var = transpose ? V(j, i) : V(i, j);
      for (const auto& [r, lv] : lcol[i])
        for (const auto& [c, rv] : rrow[j]) p.add(block, roff + r, coff + c, var, scale * lv * rv);
    }
  }
}

// H(roff + r, coff + c) += scale * M(r, c) as a constant.
inline void add_constant(SdpProblem& p, int block, int roff, int coff, const Mat& M, double scale) {
  for (int r = 0; r < M.rows(); ++r)
    for (int c = 0; c < M.cols(); ++c)
      if (M(r, c) != 0.0) p.add(block, roff + r, coff + c, -1, scale * M(r, c));
}

enum class SdpStatus { Optimal, Feasible, Infeasible, MaxIter };

inline std::string status_name(SdpStatus s) {
  switch (s) {
    case SdpStatus::Optimal: return "optimal";
    case SdpStatus::Feasible: return "feasible";
    case SdpStatus::Infeasible: return "infeasible";
    case SdpStatus::MaxIter: return "max_iter";
  }
  return "?";
}

struct BlockCheck {
  std::string name;
  double min_eig = 0.0;  // of F(x) - mu I
  bool pass = true;
};

struct CertificateReport {
  std::vector<BlockCheck> blocks;
  double worst = 0.0;  // most negative min eigenvalue of F(x) - mu I
  bool pass = true;
  std::string worst_block;
};

// Dense recomputation from raw problem data and the returned x only.
inline CertificateReport check_certificate(const SdpProblem& p, const Vec& x, double tol) {
  CertificateReport rep;
  rep.worst = INFINITY;
  for (size_t k = 0; k < p.blocks.size(); ++k) {
    Mat F = p.evaluate(static_cast<int>(k), x);
    F.diagonal().array() -= p.blocks[k].mu;
    double e = F.rows() == 1 ? F(0, 0) : Eigen::SelfAdjointEigenSolver<Mat>(F, Eigen::EigenvaluesOnly).eigenvalues()(0);
    BlockCheck b{p.blocks[k].name, e, e >= -tol};
    rep.pass = rep.pass && b.pass;
    if (e < rep.worst) {
      rep.worst = e;
      rep.worst_block = b.name;
    }
    rep.blocks.push_back(b);
  }
  if (p.blocks.empty()) rep.worst = 0.0;
  return rep;
}

enum class SdpMethod { InteriorPoint, Admm };

struct SdpSettings {
  SdpMethod method = SdpMethod::InteriorPoint;
  double ipm_tol = 1e-7;
  int ipm_max_iter = 100;
  int ipm_refine = 2;  // refinement sweeps per Newton solve
  double eps_abs = 1e-6, eps_rel = 1e-6;
  double eps_infeas = 1e-7;
  int max_iter = 50000;
  double alpha = 1.6;   // over-relaxation
  double sigma = 1e-6;
  double rho = 0.1;
  bool adaptive_rho = true;
  int check_every = 25;
  int scaling_iters = 15;
  double cert_tol = 1e-6;
  double margin = 0.0;  // extra shift used while iterating, removed for the certificate
  int margin_rounds = 6;  // times the shift may grow after a converged but uncertified point
  int anderson_memory = 10;  // 0 = plain ADMM
  double anderson_safeguard = 1.0;
  int log_every = 40;  // in units of check_every
  double time_limit_s = 0.0;  // 0 = none
  double cost_scale = 1.0;    // objective weight relative to the equilibrated constraints
  std::function<void(const std::string&)> log;
};

struct SdpSolution {
  SdpStatus status = SdpStatus::MaxIter;
  Vec x;
  double objective = 0.0;
  double worst_eig = 0.0;
  int iterations = 0;
  double primal_res = 0.0, dual_res = 0.0, gap = 0.0;
  double seconds = 0.0;
  CertificateReport certificate;
  std::string message;
};

namespace detail {

struct ConicData {
  SpMat A;  // rows: stacked svec of every block
  Vec b;    // stacked svec of F0 - (mu + margin) I
  std::vector<int> size, offset;
  int rows = 0;
};

inline ConicData build_conic(const SdpProblem& p, double margin) {
  ConicData d;
  const int nx = p.num_vars();
  for (const auto& blk : p.blocks) {
    d.size.push_back(blk.size);
    d.offset.push_back(d.rows);
    d.rows += svec_size(blk.size);
  }
  d.b = Vec::Zero(d.rows);
  std::vector<Triplet> trip;
  const double r2 = std::sqrt(2.0);
  for (size_t k = 0; k < p.blocks.size(); ++k) {
    const SdpBlock& blk = p.blocks[k];
    for (const auto& e : blk.entries) {
      int idx = d.offset[k] + svec_index(blk.size, e.r, e.c);
      double v = (e.r == e.c) ? 2.0 * e.val : r2 * e.val;
      if (e.var < 0) d.b(idx) += v;
      else trip.emplace_back(idx, e.var, v);
    }
    for (int i = 0; i < blk.size; ++i) d.b(d.offset[k] + svec_index(blk.size, i, i)) -= blk.mu + margin;
  }
  d.A.resize(d.rows, nx);
  d.A.setFromTriplets(trip.begin(), trip.end());
  d.A.makeCompressed();
  return d;
}

// Projection of v onto the product of PSD cones (svec coordinates).
inline void project_psd(const ConicData& d, Eigen::Ref<Vec> v) {
  for (size_t k = 0; k < d.size.size(); ++k) {
    const int m = d.size[k], off = d.offset[k];
    if (m == 1) {
      v(off) = std::max(v(off), 0.0);
      continue;
    }
    Mat S = smat(v.segment(off, svec_size(m)), m);
    Eigen::SelfAdjointEigenSolver<Mat> es(S);
    const Vec& ev = es.eigenvalues();
    if (ev(0) >= 0) continue;
    if (ev(m - 1) <= 0) {
      v.segment(off, svec_size(m)).setZero();
      continue;
    }
    int neg = 0;
    while (ev(neg) < 0) ++neg;
    const Mat& Q = es.eigenvectors();
    Mat P;
    if (neg < m / 2) {
      // subtract the negative part
      Mat Qn = Q.leftCols(neg) * ev.head(neg).cwiseAbs().cwiseSqrt().asDiagonal();
      P = S;
      P.noalias() += Qn * Qn.transpose();
    } else {
      Mat Qp = Q.rightCols(m - neg) * ev.tail(m - neg).cwiseSqrt().asDiagonal();
      P.noalias() = Qp * Qp.transpose();
    }
    v.segment(off, svec_size(m)) = svec(P);
  }
}

inline double inf_norm(const Vec& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; }

}  // namespace detail
// OSQP-style ADMM on  min c^T x  s.t.  A x in K - b,  K a product of PSD cones, written
// as a fixed-point map on u = (x, v) with v the point handed to the cone projection, and
// sped up by safeguarded type-II Anderson acceleration on u.
// Rows are equilibrated with one factor per cone block (so the cone is preserved) and
// columns individually.
inline SdpSolution solve_sdp_admm(const SdpProblem& prob, const SdpSettings& st = {}) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  const int nx = prob.num_vars();
  SdpSolution sol;
  sol.x = Vec::Zero(nx);
  detail::ConicData d = detail::build_conic(prob, 0.0);
  Vec c = prob.objective();
  const int m = d.rows;
  const int nb = static_cast<int>(d.size.size());
  if (m == 0) {
    require(c.isZero(0.0), "unbounded SDP: objective without constraints");
    sol.status = SdpStatus::Optimal;
    sol.certificate = check_certificate(prob, sol.x, st.cert_tol);
    return sol;
  }

  // Ruiz equilibration
  Vec E = Vec::Ones(nx), Dblk = Vec::Ones(nb);
  SpMat As = d.A;
  for (int it = 0; it < st.scaling_iters; ++it) {
    Vec colmax = Vec::Zero(nx), rowmax = Vec::Zero(m);
    for (int j = 0; j < As.outerSize(); ++j)
      for (SpMat::InnerIterator itA(As, j); itA; ++itA) {
        double a = std::abs(itA.value());
        colmax(j) = std::max(colmax(j), a);
        rowmax(itA.row()) = std::max(rowmax(itA.row()), a);
      }
    Vec ce = Vec::Ones(nx), rd = Vec::Ones(m);
    for (int j = 0; j < nx; ++j)
      if (colmax(j) > 0) ce(j) = 1.0 / std::sqrt(colmax(j));
    for (int k = 0; k < nb; ++k) {
      double mx = rowmax.segment(d.offset[k], svec_size(d.size[k])).maxCoeff();
      double f = mx > 0 ? 1.0 / std::sqrt(mx) : 1.0;
      rd.segment(d.offset[k], svec_size(d.size[k])).setConstant(f);
      Dblk(k) *= f;
    }
    As = rd.asDiagonal() * As * ce.asDiagonal();
    E = E.cwiseProduct(ce);
  }
  Vec Drow(m);
  for (int k = 0; k < nb; ++k) Drow.segment(d.offset[k], svec_size(d.size[k])).setConstant(Dblk(k));
  Vec ident = Vec::Zero(m);
  for (int k = 0; k < nb; ++k)
    for (int i = 0; i < d.size[k]; ++i) ident(d.offset[k] + svec_index(d.size[k], i, i)) = 1.0;
  double margin = st.margin;
  int rounds = 0;
  Vec bs = Drow.cwiseProduct(d.b - margin * ident);
  Vec cs = E.cwiseProduct(c);
  double cscale = detail::inf_norm(cs) > 0 ? 1.0 / std::max(detail::inf_norm(cs), 1e-4) : 1.0;
  cscale *= st.cost_scale;
  cs *= cscale;

  SpMat AsT = As.transpose();
  Mat AtA = Mat(AsT * As);
  double rho = st.rho;
  Eigen::LLT<Mat> llt;
  auto factor = [&]() {
    Mat M = rho * AtA;
    M.diagonal().array() += st.sigma;
    llt.compute(M);
    if (llt.info() != Eigen::Success) throw NumericalError("SDP KKT factorization failed");
  };
  factor();

  const int nu = nx + m;
  // state u = (x, v); z = P_C(v), y = rho (v - z)
  auto split = [&](const Vec& u, Vec& z, Vec& y) {
    z = u.tail(m) + bs;
    detail::project_psd(d, z);
    z -= bs;
    y = rho * (u.tail(m) - z);
  };
  auto step = [&](const Vec& u, Vec& z, Vec& y) {
    split(u, z, y);
    Vec xt = llt.solve(st.sigma * u.head(nx) - cs + AsT * (rho * z - y));
    Vec zt = As * xt;
    Vec out(nu);
    out.head(nx) = st.alpha * xt + (1 - st.alpha) * u.head(nx);
    out.tail(m) = st.alpha * zt + (1 - st.alpha) * z + y / rho;
    return out;
  };

  Vec u = Vec::Zero(nu), z(m), y(m), yprev = Vec::Zero(m), Ax(m), ATy(nx), dy(m);
  const int mem = st.anderson_memory;
  Mat dU(nu, std::max(mem, 1)), dF(nu, std::max(mem, 1));
  int aa_cols = 0, aa_next = 0, aa_rejects = 0;
  Vec u_prev, f_prev, Tu_safe;
  double fnorm_safe = INFINITY;
  bool last_was_aa = false;
  int iter = 0;
  bool converged = false, infeasible = false;
  int refactors = 0;
  auto reset_aa = [&]() {
    aa_cols = aa_next = 0;
    u_prev.resize(0);
    last_was_aa = false;
    fnorm_safe = INFINITY;
  };
  for (iter = 1; iter <= st.max_iter; ++iter) {
    Vec Tu = step(u, z, y);
    Vec f = Tu - u;
    double fn = f.norm();
    if (mem > 0 && last_was_aa && fn > st.anderson_safeguard * fnorm_safe) {
      // extrapolated point made things worse: fall back to the plain step
      ++aa_rejects;
      u = Tu_safe;
      reset_aa();
      Tu = step(u, z, y);
      f = Tu - u;
      fn = f.norm();
    }
    Vec unew = Tu;
    last_was_aa = false;
    if (mem > 0) {
      if (u_prev.size()) {
        dU.col(aa_next) = u - u_prev;
        dF.col(aa_next) = f - f_prev;
        aa_next = (aa_next + 1) % mem;
        aa_cols = std::min(aa_cols + 1, mem);
      }
      u_prev = u;
      f_prev = f;
      if (aa_cols > 0) {
        Mat Fm = dF.leftCols(aa_cols), Um = dU.leftCols(aa_cols);
        Mat FtF = Fm.transpose() * Fm;
        FtF.diagonal().array() += 1e-10 * std::max(FtF.diagonal().maxCoeff(), 1e-300);
        Vec g = FtF.ldlt().solve(Fm.transpose() * f);
        if (g.allFinite()) {
          Tu_safe = Tu;
          fnorm_safe = fn;
          unew = Tu - (Um + Fm) * g;
          last_was_aa = true;
        }
      }
    }

    bool check = iter % st.check_every == 0 || iter == st.max_iter;
    if (check) {
      // residuals in original units at the current state
      const Vec x = u.head(nx);
      Ax = As * x;
      ATy = AsT * y;
      Vec rp = (Ax - z).cwiseQuotient(Drow);
      Vec rd = (cs + ATy).cwiseQuotient(E) / cscale;
      double axn = detail::inf_norm(Ax.cwiseQuotient(Drow)), zn = detail::inf_norm(z.cwiseQuotient(Drow));
      double atyn = detail::inf_norm(ATy.cwiseQuotient(E) / cscale), cn = detail::inf_norm(c);
      sol.primal_res = detail::inf_norm(rp);
      sol.dual_res = detail::inf_norm(rd);
      double pobj = c.dot(E.cwiseProduct(x));
      double dobj = bs.dot(y) / cscale;  // dual value, the multiplier of the cone is -y
      sol.gap = std::abs(pobj - dobj);
      double eps_p = st.eps_abs + st.eps_rel * std::max(axn, zn);
      double eps_d = st.eps_abs + st.eps_rel * std::max(atyn, cn);
      double eps_g = st.eps_abs + st.eps_rel * std::max({std::abs(pobj), std::abs(dobj), 1.0});
      if (st.log && iter % (st.check_every * st.log_every) == 0) {
        std::ostringstream os;
        os << std::setw(7) << iter << std::scientific << std::setprecision(3) << "  rp " << sol.primal_res
           << "  rd " << sol.dual_res << "  gap " << sol.gap << "  obj " << pobj << "  rho " << rho
           << "  aa_rej " << aa_rejects;
        st.log(os.str());
      }
      if (sol.primal_res <= eps_p && sol.dual_res <= eps_d && sol.gap <= eps_g) {
        // a boundary optimum can sit just outside the cone; tighten the shift and continue
        CertificateReport cr = check_certificate(prob, E.cwiseProduct(x), st.cert_tol);
        if (cr.pass || rounds >= st.margin_rounds) {
          converged = true;
          break;
        }
        margin = std::max(4 * margin, 2 * (-cr.worst) + st.cert_tol);
        bs = Drow.cwiseProduct(d.b - margin * ident);
        ++rounds;
        reset_aa();
        if (st.log) st.log("certificate short by " + std::to_string(-cr.worst) + ", margin now " + std::to_string(margin));
        u = Tu;
        continue;
      }
      // primal infeasibility: A^T dy ~ 0, dy in -K, b^T dy > 0
      dy = y - yprev;
      double dyn = detail::inf_norm(dy.cwiseProduct(Drow));
      if (dyn > 1e-14) {
        Vec atdy = (AsT * dy).cwiseQuotient(E);
        Vec pos = dy;
        detail::project_psd(d, pos);
        double bdy = -bs.dot(dy);
        if (detail::inf_norm(atdy) <= st.eps_infeas * dyn &&
            detail::inf_norm(pos.cwiseProduct(Drow)) <= st.eps_infeas * dyn && bdy < -st.eps_infeas * dyn) {
          infeasible = true;
          break;
        }
      }
      if (st.time_limit_s > 0 && std::chrono::duration<double>(clock::now() - t0).count() > st.time_limit_s)
        break;
      if (st.adaptive_rho && iter % (st.check_every * 4) == 0) {
        double num = sol.primal_res / std::max(std::max(axn, zn), 1e-12);
        double den = sol.dual_res / std::max(std::max(atyn, cn), 1e-12);
        double ratio = std::sqrt(num / std::max(den, 1e-30));
        double nr = std::clamp(rho * std::clamp(ratio, 0.1, 10.0), 1e-6, 1e6);
        if (nr > 5 * rho || nr < rho / 5) {
          // keep z and y, re-express v for the new rho
          Vec vv = z + y / nr;
          rho = nr;
          factor();
          ++refactors;
          unew = u;
          unew.tail(m) = vv;
          reset_aa();
        }
      }
    }
    yprev = y;
    u = unew;
  }
  sol.iterations = std::min(iter, st.max_iter);
  sol.x = E.cwiseProduct(u.head(nx));
  sol.objective = c.dot(sol.x);
  sol.certificate = check_certificate(prob, sol.x, st.cert_tol);
  sol.worst_eig = sol.certificate.worst;
  sol.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  std::ostringstream msg;
  if (infeasible) {
    sol.status = SdpStatus::Infeasible;
    msg << "primal infeasible after " << sol.iterations << " iterations";
  } else if (sol.certificate.pass) {
    sol.status = converged ? SdpStatus::Optimal : SdpStatus::Feasible;
    msg << (converged ? "converged" : "certificate holds without full convergence") << " in "
        << sol.iterations << " iterations";
  } else {
    sol.status = SdpStatus::MaxIter;
    msg << (converged ? "converged but certificate fails on block " : "no convergence; worst block ")
        << sol.certificate.worst_block << " (" << sol.certificate.worst << ")";
  }
  msg << ", " << refactors << " refactorizations, margin " << margin;
  sol.message = msg.str();
  return sol;
}

namespace detail {

// one block of the interior-point data: F_k(x) - mu I = C + sum_j x_j F_j, F_j stored as
// canonical lower entries (r >= c) of H with F_j = H + H^T
struct IpmBlock {
  int n = 0;
  Mat C;
  std::vector<int> vars;  // sorted global indices
  std::vector<std::vector<std::tuple<int, int, double>>> ent;  // parallel to vars
};

// <F_j, U> for a symmetric U
inline double ipm_inner(const std::vector<std::tuple<int, int, double>>& e, const Mat& U) {
  double s = 0.0;
  for (const auto& [r, c, v] : e) s += 2.0 * v * U(r, c);
  return s;
}

// largest step a with S + a dS >= 0 (inf if unbounded)
inline double ipm_max_step(const Eigen::LLT<Mat>& chol, const Mat& dS) {
  Mat T = chol.matrixL().solve(dS);
  T = chol.matrixL().solve(T.transpose().eval());
  double lmin = T.rows() == 1 ? T(0, 0)
                              : Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (T + T.transpose()), Eigen::EigenvaluesOnly)
                                    .eigenvalues()(0);
  return lmin >= 0 ? INFINITY : -1.0 / lmin;
}

inline Mat sym(const Mat& M) { return 0.5 * (M + M.transpose()); }

}  // namespace detail

// Infeasible-start primal-dual path following with the HKM direction and a Mehrotra
// predictor-corrector. The dense Schur complement is nx x nx, which is fine at desk scale.
// Dual multipliers W_k >= 0 pair with the slacks S_k = F_k(x) - mu_k I.
inline SdpSolution solve_sdp_ipm(const SdpProblem& prob, const SdpSettings& st = {}) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  const int nx = prob.num_vars();
  const int nb = static_cast<int>(prob.blocks.size());
  SdpSolution sol;
  sol.x = Vec::Zero(nx);
  Vec c = prob.objective();
  if (nb == 0) {
    require(c.isZero(0.0), "unbounded SDP: objective without constraints");
    sol.status = SdpStatus::Optimal;
    sol.certificate = check_certificate(prob, sol.x, st.cert_tol);
    sol.message = "no constraints";
    return sol;
  }

  std::vector<detail::IpmBlock> B(nb);
  Vec colnorm2 = Vec::Zero(nx);
  int N = 0;
  for (int k = 0; k < nb; ++k) {
    const SdpBlock& sb = prob.blocks[k];
    detail::IpmBlock& b = B[k];
    b.n = sb.size;
    N += b.n;
    Mat H = Mat::Zero(b.n, b.n);
    std::map<std::tuple<int, int, int>, double> acc;  // (var, r, c)
    for (const auto& e : sb.entries) {
      if (e.var < 0) {
        H(e.r, e.c) += e.val;
        continue;
      }
      acc[{e.var, std::max(e.r, e.c), std::min(e.r, e.c)}] += e.val;
    }
    b.C = H + H.transpose();
    b.C.diagonal().array() -= sb.mu;
    for (const auto& [key, v] : acc) {
      if (v == 0.0) continue;
      auto [j, r, cc] = key;
      if (b.vars.empty() || b.vars.back() != j) {
        b.vars.push_back(j);
        b.ent.emplace_back();
      }
      b.ent.back().emplace_back(r, cc, v);
      colnorm2(j) += (r == cc ? 4.0 : 2.0) * v * v;
    }
  }
  // variable scaling to unit Frobenius norm, cost to unit max norm
  Vec d(nx);
  for (int j = 0; j < nx; ++j) {
    if (colnorm2(j) == 0.0) require(c(j) == 0.0, "unbounded SDP: variable " + prob.var_names[j] + " is unconstrained");
    d(j) = colnorm2(j) > 0 ? 1.0 / std::sqrt(colnorm2(j)) : 1.0;
  }
  for (auto& b : B)
    for (size_t q = 0; q < b.vars.size(); ++q)
      for (auto& [r, cc, v] : b.ent[q]) v *= d(b.vars[q]);
  Vec cs = c.cwiseProduct(d);
  double cscale = detail::inf_norm(cs) > 0 ? 1.0 / detail::inf_norm(cs) : 1.0;
  cs *= cscale;

  auto Fx = [&](int k, const Vec& x) {
    Mat M = B[k].C;
    for (size_t q = 0; q < B[k].vars.size(); ++q) {
      double xv = x(B[k].vars[q]);
      if (xv == 0.0) continue;
      for (const auto& [r, cc, v] : B[k].ent[q]) {
        M(r, cc) += v * xv;
        M(cc, r) += v * xv;
      }
    }
    return M;
  };
  auto Aop = [&](const std::vector<Mat>& U) {
    Vec out = Vec::Zero(nx);
    for (int k = 0; k < nb; ++k)
      for (size_t q = 0; q < B[k].vars.size(); ++q) out(B[k].vars[q]) += detail::ipm_inner(B[k].ent[q], U[k]);
    return out;
  };

  // starting point
  double cnorm = 0.0;
  for (const auto& b : B) cnorm = std::max(cnorm, b.C.norm());
  double xi = 0, eta = 0;
  for (int k = 0; k < nb; ++k) {
    double sn = std::sqrt(double(B[k].n));
    xi = std::max({xi, 10.0, sn, B[k].n * (1.0 + detail::inf_norm(cs))});
    eta = std::max({eta, 10.0, sn, 1.0 + cnorm});
  }
  Vec x = Vec::Zero(nx);
  std::vector<Mat> S(nb), W(nb), Sinv(nb), Rd(nb), dSa(nb), dWa(nb), dS(nb), dW(nb);
  for (int k = 0; k < nb; ++k) {
    S[k] = eta * Mat::Identity(B[k].n, B[k].n);
    W[k] = xi * Mat::Identity(B[k].n, B[k].n);
  }

  Mat M(nx, nx);
  Eigen::LLT<Mat> Mchol;
  Eigen::LDLT<Mat> Mldlt;
  bool use_ldlt = false;
  std::vector<Eigen::LLT<Mat>> Schol(nb), Wchol(nb);
  const double tol = st.ipm_tol;
  bool converged = false, infeasible = false, unbounded = false;
  int iter = 0;
  Vec x_best = x;
  double merit_best = INFINITY;
  bool lost = false;
  for (iter = 0; iter <= st.ipm_max_iter; ++iter) {
    for (int k = 0; k < nb && !lost; ++k) {
      Rd[k] = Fx(k, x) - S[k];
      Schol[k].compute(S[k]);
      if (Schol[k].info() != Eigen::Success) lost = true;
      Sinv[k] = Schol[k].solve(Mat::Identity(B[k].n, B[k].n));
      Sinv[k] = detail::sym(Sinv[k]);
    }
    if (lost) break;
    Vec rp = cs - Aop(W);
    double wmax = 0.0;
    for (const auto& w : W) wmax = std::max(wmax, w.norm());
    double pobj = cs.dot(x), dobj = 0.0, gap = 0.0, rdn = 0.0;
    for (int k = 0; k < nb; ++k) {
      dobj -= (W[k].cwiseProduct(B[k].C)).sum();
      gap += (W[k].cwiseProduct(S[k])).sum();
      rdn = std::max(rdn, Rd[k].norm());
    }
    double mu = gap / N;
    double prel = rdn / (1.0 + cnorm), drel = detail::inf_norm(rp) / (1.0 + std::max(detail::inf_norm(cs), wmax));
    double grel = std::abs(pobj - dobj) / (1.0 + std::abs(pobj) + std::abs(dobj));
    sol.primal_res = prel;
    sol.dual_res = drel;
    sol.gap = grel;
    if (st.log) {
      std::ostringstream os;
      os << std::setw(4) << iter << std::scientific << std::setprecision(3) << "  pinf " << prel << "  dinf "
         << drel << "  gap " << grel << "  pobj " << pobj / cscale << "  dobj " << dobj / cscale << "  mu " << mu;
      st.log(os.str());
    }
    double merit = std::max({prel, drel, std::min(grel, gap / (1.0 + std::abs(pobj)))});
    if (merit < merit_best) {
      merit_best = merit;
      x_best = x;
    }
    if (merit <= tol) {
      converged = true;
      break;
    }
    // certificate of infeasibility: W >= 0 with Aop(W) ~ 0 and -<W, C> > 0
    if (dobj > 0 && (cs - rp).lpNorm<Eigen::Infinity>() <= st.eps_infeas * dobj && iter > 2) {
      infeasible = true;
      break;
    }
    if (pobj < -1.0 / st.eps_infeas && prel <= tol) {
      unbounded = true;
      break;
    }
    if (iter == st.ipm_max_iter) break;
    if (st.time_limit_s > 0 && std::chrono::duration<double>(clock::now() - t0).count() > st.time_limit_s) break;

    // Schur complement M_ij = <F_i, W F_j S^-1>, lower triangle
    M.setZero();
    for (int k = 0; k < nb; ++k) {
      const auto& b = B[k];
      const int nk = b.n;
      for (size_t qj = 0; qj < b.vars.size(); ++qj) {
        // compact rows of F_j S^-1
        std::vector<int> rows;
        for (const auto& [r, cc, v] : b.ent[qj]) {
          rows.push_back(r);
          rows.push_back(cc);
        }
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
        std::vector<int> pos(nk, -1);
        for (size_t a = 0; a < rows.size(); ++a) pos[rows[a]] = static_cast<int>(a);
        Mat Q = Mat::Zero(rows.size(), nk);
        for (const auto& [r, cc, v] : b.ent[qj]) {
          Q.row(pos[r]) += v * Sinv[k].row(cc);
          Q.row(pos[cc]) += v * Sinv[k].row(r);
        }
        Mat Wc(nk, rows.size());
        for (size_t a = 0; a < rows.size(); ++a) Wc.col(a) = W[k].col(rows[a]);
        Mat G = Wc * Q;
        const int j = b.vars[qj];
        for (size_t qi = qj; qi < b.vars.size(); ++qi) {
          double s = 0.0;
          for (const auto& [r, cc, v] : b.ent[qi]) s += v * (G(r, cc) + G(cc, r));
          M(b.vars[qi], j) += s;
        }
      }
    }
    Mchol.compute(M);
    use_ldlt = Mchol.info() != Eigen::Success;
    if (use_ldlt) {
      M.diagonal().array() += 1e-14 * M.diagonal().maxCoeff();
      Mldlt.compute(M);
      if (Mldlt.info() != Eigen::Success) throw NumericalError("interior point Schur complement is singular");
    }

    // direction for a target T (per block), returns dx and fills dS, dW
    auto direction = [&](const std::vector<Mat>& T, std::vector<Mat>& oS, std::vector<Mat>& oW) {
      std::vector<Mat> U(nb);
      for (int k = 0; k < nb; ++k) U[k] = T[k] - detail::sym(W[k] * Rd[k] * Sinv[k]);
      Vec rhs = Aop(U) - rp;
      auto msolve = [&](const Vec& r) { return use_ldlt ? Vec(Mldlt.solve(r)) : Vec(Mchol.solve(r)); };
      Vec dx = msolve(rhs);
      // refine against the operator actually used for dW, so that Aop(dW) = rp to rounding
      for (int it = 0;; ++it) {
        for (int k = 0; k < nb; ++k) {
          oS[k] = Fx(k, dx) - B[k].C + Rd[k];
          oW[k] = T[k] - detail::sym(W[k] * oS[k] * Sinv[k]);
        }
        if (it == st.ipm_refine) break;
        dx += msolve(Aop(oW) - rp);
      }
      return dx;
    };
    auto steps = [&](const std::vector<Mat>& oS, const std::vector<Mat>& oW, double& ap, double& ad) {
      ap = ad = INFINITY;
      for (int k = 0; k < nb; ++k) {
        Wchol[k].compute(W[k]);
        if (Wchol[k].info() != Eigen::Success) {
          lost = true;
          return;
        }
        ap = std::min(ap, detail::ipm_max_step(Schol[k], oS[k]));
        ad = std::min(ad, detail::ipm_max_step(Wchol[k], oW[k]));
      }
    };

    std::vector<Mat> T(nb);
    for (int k = 0; k < nb; ++k) T[k] = -W[k];
    Vec dxa = direction(T, dSa, dWa);
    double ap, ad;
    steps(dSa, dWa, ap, ad);
    if (lost) break;
    ap = std::min(1.0, ap);
    ad = std::min(1.0, ad);
    double mu_aff = 0.0;
    for (int k = 0; k < nb; ++k) mu_aff += ((W[k] + ad * dWa[k]).cwiseProduct(S[k] + ap * dSa[k])).sum();
    mu_aff /= N;
    double sigma = std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);
    for (int k = 0; k < nb; ++k) T[k] = sigma * mu * Sinv[k] - W[k] - detail::sym(dWa[k] * dSa[k] * Sinv[k]);
    Vec dx = direction(T, dS, dW);
    steps(dS, dW, ap, ad);
    if (lost) break;
    double tau = std::min(0.995, 0.9 + 0.09 * std::min({1.0, ap, ad}));
    ap = std::min(1.0, tau * ap);
    ad = std::min(1.0, tau * ad);
    x += ap * dx;
    for (int k = 0; k < nb; ++k) {
      S[k] = detail::sym(S[k] + ap * dS[k]);
      W[k] = detail::sym(W[k] + ad * dW[k]);
    }
  }
  sol.iterations = iter;
  // at the precision floor the last iterates can wander; report the best one seen
  sol.x = (converged ? x : x_best).cwiseProduct(d);
  sol.objective = c.dot(sol.x);
  sol.certificate = check_certificate(prob, sol.x, st.cert_tol);
  sol.worst_eig = sol.certificate.worst;
  sol.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  std::ostringstream msg;
  if (infeasible) {
    sol.status = SdpStatus::Infeasible;
    msg << "primal infeasible after " << iter << " interior-point iterations";
  } else if (sol.certificate.pass && !unbounded) {
    sol.status = converged ? SdpStatus::Optimal : SdpStatus::Feasible;
    msg << (converged ? "converged" : "certificate holds without full convergence") << " in " << iter
        << " interior-point iterations";
  } else {
    sol.status = SdpStatus::MaxIter;
    if (unbounded)
      msg << "objective unbounded below";
    else
      msg << (converged ? "converged but certificate fails on block " : "no convergence; worst block ")
          << sol.certificate.worst_block << " (" << sol.certificate.worst << ")";
  }
  sol.message = msg.str();
  return sol;
}

inline SdpSolution solve_sdp(const SdpProblem& prob, const SdpSettings& st = {}) {
  return st.method == SdpMethod::Admm ? solve_sdp_admm(prob, st) : solve_sdp_ipm(prob, st);
}

// Sparse SDPA (.dat-s). SDPA form: minimize c^T x s.t. sum_i x_i F_i - F_0 >= 0.
// Our block F0 + sum x_j F_j >= mu I maps to F_j = F_j and F_0 = mu I - F0.
// All 1x1 blocks are collected into one trailing diagonal block.
inline std::string export_sdpa(const SdpProblem& p) {
  std::vector<int> mats, scalars;
  for (size_t k = 0; k < p.blocks.size(); ++k)
    (p.blocks[k].size == 1 ? scalars : mats).push_back(static_cast<int>(k));
  std::ostringstream os;
  os << std::setprecision(17);
  os << "\"ndae LMI export: " << p.num_vars() << " variables, " << p.blocks.size() << " constraint blocks\n";
  os << p.num_vars() << "\n";
  const int nblk = static_cast<int>(mats.size()) + (scalars.empty() ? 0 : 1);
  os << nblk << "\n";
  for (int k : mats) os << p.blocks[k].size << " ";
  if (!scalars.empty()) os << -static_cast<int>(scalars.size());
  os << "\n";
  Vec c = p.objective();
  for (int j = 0; j < p.num_vars(); ++j) os << (j ? " " : "") << c(j);
  os << "\n";
  struct Key {
    int mat, blk, i, j;
    bool operator<(const Key& o) const {
      return std::tie(mat, blk, i, j) < std::tie(o.mat, o.blk, o.i, o.j);
    }
  };
  std::map<Key, double> acc;
  auto put = [&](int blkno, int r, int cc, int var, double v) {
    int i = std::min(r, cc) + 1, j = std::max(r, cc) + 1;
    acc[{var < 0 ? 0 : var + 1, blkno, i, j}] += var < 0 ? -v : v;
  };
  for (size_t b = 0; b < mats.size(); ++b) {
    const SdpBlock& blk = p.blocks[mats[b]];
    for (const auto& e : blk.entries) put(static_cast<int>(b) + 1, e.r, e.c, e.var, e.r == e.c ? 2 * e.val : e.val);
    for (int i = 0; i < blk.size; ++i) acc[{0, static_cast<int>(b) + 1, i + 1, i + 1}] += blk.mu;
  }
  if (!scalars.empty()) {
    const int blkno = static_cast<int>(mats.size()) + 1;
    for (size_t s = 0; s < scalars.size(); ++s) {
      const SdpBlock& blk = p.blocks[scalars[s]];
      for (const auto& e : blk.entries) {
        int mat = e.var < 0 ? 0 : e.var + 1;
        acc[{mat, blkno, static_cast<int>(s) + 1, static_cast<int>(s) + 1}] += (e.var < 0 ? -2 : 2) * e.val;
      }
      acc[{0, blkno, static_cast<int>(s) + 1, static_cast<int>(s) + 1}] += blk.mu;
    }
  }
  for (const auto& [k, v] : acc)
    if (v != 0.0) os << k.mat << " " << k.blk << " " << k.i << " " << k.j << " " << v << "\n";
  return os.str();
}

struct SdpaHeader {
  int m = 0;
  std::vector<int> block_struct;
  int entries = 0;
};

inline SdpaHeader parse_sdpa_header(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> body;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '"' || line[0] == '*') continue;
    body.push_back(line);
  }
  require(body.size() >= 4, "SDPA file too short");
  auto clean = [](std::string s) {
    for (char& ch : s)
      if (ch == ',' || ch == '{' || ch == '}' || ch == '(' || ch == ')') ch = ' ';
    return s;
  };
  SdpaHeader h;
  std::istringstream(clean(body[0])) >> h.m;
  int nblk = 0;
  std::istringstream(clean(body[1])) >> nblk;
  std::istringstream bs(clean(body[2]));
  for (int k = 0; k < nblk; ++k) {
    int s = 0;
    require(static_cast<bool>(bs >> s), "SDPA block structure line is short");
    h.block_struct.push_back(s);
  }
  h.entries = static_cast<int>(body.size()) - 4;
  return h;
}

}  // namespace ndae
