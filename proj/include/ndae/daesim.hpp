#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/LU>

#include "ndae/common.hpp"
#include "ndae/ndae_model.hpp"
#include "ndae/pmu.hpp"
#include "ndae/synthesis.hpp"

namespace ndae {

// Semi-explicit DAE  Z x' = r(x, t, step).  `step` is the index of the step being taken,
// for terms held constant over a step (process noise, load jitter).
struct DaeResidual {
  Mat Z;
  std::function<Vec(const Vec&, double, int)> r;
  std::function<Mat(const Vec&, double, int)> jac;
};

struct IntegratorSettings {
  double newton_tol = 1e-10;  // on the residual
  // also converged once the Newton update is this small relative to the state; large
  // observer gains put the algebraic-row residual floor near 1e-11
  double step_tol = 1e-13;
  int max_newton = 12;
  int max_bisect = 4;
};

struct IntegratorStats {
  long newton_iters = 0;
  long jacobians = 0;
  long bisections = 0;
  double max_residual = 0;
  double max_algebraic_residual = 0;
};

inline std::vector<int> algebraic_rows(const Mat& Z) {
  std::vector<int> a;
  for (int i = 0; i < Z.rows(); ++i)
    if (Z(i, i) == 0.0) a.push_back(i);
  return a;
}

// Newton on the algebraic rows with the dynamic part of x frozen.
inline Vec reinit_algebraic(const DaeResidual& f, const Vec& x, double t, int step,
                            const std::vector<std::string>& names = {}, double tol = 1e-10,
                            int max_iter = 50) {
  const std::vector<int> a = algebraic_rows(f.Z);
  Vec z = x;
  if (a.empty()) return z;
  const int na = static_cast<int>(a.size());
  double res = INFINITY;
  int worst = 0;
  for (int it = 0; it < max_iter; ++it) {
    Vec r = f.r(z, t, step);
    Vec ra(na);
    for (int i = 0; i < na; ++i) ra(i) = r(a[i]);
    res = ra.cwiseAbs().maxCoeff(&worst);
    if (!std::isfinite(res)) break;
    if (res <= tol) return z;
    Mat J = f.jac(z, t, step);
    Mat Jaa(na, na);
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < na; ++j) Jaa(i, j) = J(a[i], a[j]);
    Eigen::PartialPivLU<Mat> lu(Jaa);
    Vec dz = lu.solve(-ra);
    if (!dz.allFinite()) break;
    // crude damping keeps voltages away from the singular side of the nose
    double lam = 1.0;
    for (int k = 0; k < 8; ++k) {
      Vec trial = z;
      for (int i = 0; i < na; ++i) trial(a[i]) += lam * dz(i);
      Vec rt = f.r(trial, t, step);
      double rn = 0;
      for (int i = 0; i < na; ++i) rn = std::max(rn, std::abs(rt(a[i])));
      if (rn < res || k == 7) {
        z = trial;
        break;
      }
      lam *= 0.5;
    }
  }
  const int row = a[worst];
  std::string label = row < static_cast<int>(names.size()) ? names[row] : "row " + std::to_string(row);
  throw NumericalError("algebraic re-initialization failed at t = " + std::to_string(t) +
                       ": worst residual " + std::to_string(res) + " in the equation of " + label);
}

namespace detail {

inline bool trapezoid_try(const DaeResidual& f, const Vec& x, const Vec& r0, double t, double h, int step,
                          const IntegratorSettings& st, IntegratorStats& stats, Vec& out) {
  const int n = static_cast<int>(x.size());
  const Mat& Z = f.Z;
  Vec zd = Z.diagonal();
  // G(x+) = Z (x+ - x) - h/2 Z (r(x+) + r0) - (I - Z) r(x+)
  auto G = [&](const Vec& xn, const Vec& rn) {
    Vec g(n);
    for (int i = 0; i < n; ++i)
      g(i) = zd(i) != 0.0 ? (xn(i) - x(i)) - 0.5 * h * (rn(i) + r0(i)) : rn(i);
    return g;
  };
  Vec xn = x;
  Vec rn = f.r(xn, t + h, step);
  Vec g = G(xn, rn);
  Eigen::PartialPivLU<Mat> lu;
  bool fresh = false;
  double prev = INFINITY;
  for (int it = 0; it < st.max_newton; ++it) {
    double gn = g.cwiseAbs().maxCoeff();
    if (!std::isfinite(gn)) return false;
    if (gn <= st.newton_tol) {
      out = xn;
      stats.max_residual = std::max(stats.max_residual, gn);
      return true;
    }
    if (it == 0 || (gn > 0.25 * prev && !fresh)) {
      Mat J = f.jac(xn, t + h, step);
      Mat K = J;
      for (int i = 0; i < n; ++i)
        if (zd(i) != 0.0) {
          K.row(i) *= -0.5 * h;
          K(i, i) += 1.0;
        }
      lu.compute(K);
      ++stats.jacobians;
      fresh = true;
    } else {
      fresh = false;
    }
    prev = gn;
    Vec dx = lu.solve(g);
    xn -= dx;
    rn = f.r(xn, t + h, step);
    g = G(xn, rn);
    ++stats.newton_iters;
    if (dx.cwiseAbs().maxCoeff() <= st.step_tol * (1.0 + xn.cwiseAbs().maxCoeff()) &&
        g.cwiseAbs().maxCoeff() <= 1e3 * st.newton_tol) {
      out = xn;
      stats.max_residual = std::max(stats.max_residual, g.cwiseAbs().maxCoeff());
      return true;
    }
  }
  double gn = g.cwiseAbs().maxCoeff();
  if (gn <= st.newton_tol) {
    out = xn;
    return true;
  }
  return false;
}

}  // namespace detail

// One trapezoidal step on the dynamic rows with the algebraic rows collocated at t + h.
// A failed Newton solve is retried on halved substeps, at most max_bisect times deep.
inline Vec trapezoid_step(const DaeResidual& f, const Vec& x, double t, double h, int step,
                          const IntegratorSettings& st, IntegratorStats& stats, int depth = 0) {
  Vec r0 = f.r(x, t, step);
  Vec out;
  if (detail::trapezoid_try(f, x, r0, t, h, step, st, stats, out)) return out;
  if (depth >= st.max_bisect)
    throw NumericalError("Newton failed to converge at t = " + std::to_string(t) + " with step " +
                         std::to_string(h) + " after " + std::to_string(depth) + " bisections");
  ++stats.bisections;
  Vec mid = trapezoid_step(f, x, t, 0.5 * h, step, st, stats, depth + 1);
  return trapezoid_step(f, mid, t + 0.5 * h, 0.5 * h, step, st, stats, depth + 1);
}

// ---------------------------------------------------------------------------------------
// Scenarios

// A branch status change, or a fault shunt placed at (or cleared from, y = 0) a bus.
struct TopologyEvent {
  double t = 0;
  int branch = -1;
  BranchStatus status = BranchStatus::On;
  int bus = -1;
  cplx shunt{0.0, 0.0};
};

enum class FaultKind { LineOutage, ShuntFault };

// LineOutage: line out at t_on, energized from the near (from) end after t_near, fully back
// after t_remote. ShuntFault: a fault reactance x_f at the near-end bus until t_near, then
// fed from the remote-end bus until t_remote, then cleared with the line intact.
struct FaultSpec {
  int from = 0, to = 0;
  double t_on = 0, t_near = 0.05, t_remote = 0.2;
  FaultKind kind = FaultKind::LineOutage;
  double x_fault = 0.5;
};

inline std::vector<TopologyEvent> staged_fault(const NetworkCase& c, const FaultSpec& f) {
  require(f.t_remote > f.t_near && f.t_near > 0, "fault clearing times must satisfy 0 < near < remote");
  int l = c.branch_index(f.from, f.to);
  const Branch& br = c.branches[l];
  if (f.kind == FaultKind::ShuntFault) {
    require(f.x_fault > 0, "fault reactance must be positive");
    const cplx y(0.0, -1.0 / f.x_fault);
    int a = c.bus_index(f.from), b = c.bus_index(f.to);
    return {{f.t_on, -1, BranchStatus::On, a, y},
            {f.t_on + f.t_near, -1, BranchStatus::On, a, 0.0},
            {f.t_on + f.t_near, -1, BranchStatus::On, b, y},
            {f.t_on + f.t_remote, -1, BranchStatus::On, b, 0.0}};
  }
  BranchStatus partial = br.from == f.from ? BranchStatus::FromOnly : BranchStatus::ToOnly;
  return {{f.t_on, l, BranchStatus::Off}, {f.t_on + f.t_near, l, partial}, {f.t_on + f.t_remote, l, br.status}};
}

struct Scenario {
  std::string name = "scenario";
  double T = 50.0, dt = 1e-3;
  std::vector<TopologyEvent> events;
  // plant-only input deviation du for t >= du_time (empty = none)
  Vec du;
  double du_time = 0.0;
  // step in renewable / load active power right after t = 0, as fractions of the base values
  double renewable_step = 0.0, load_step = 0.0;
  double jitter = 0.0;  // variance of the step noise, as a multiple of the step size
  NoiseConfig noise;
  // observer side
  bool observer_knows_inputs = true;  // real-time u, else only u-bar
  bool observer_knows_loads = true;   // real-time q, else only q-bar
  double init_deviation = 0.1;
  bool pin_omega = true;
  uint64_t seed = 0;
  IntegratorSettings integrator;
};

inline int scenario_steps(const Scenario& sc) {
  double k = sc.T / sc.dt;
  return static_cast<int>(std::llround(k));
}

inline void validate_scenario(const Scenario& sc, const NdaeSystem& sys, const NetworkCase& c) {
  require(sc.dt > 0 && sc.dt <= 1e-3 + 1e-15, "dt must lie in (0, 1e-3]");
  require(sc.T > 0, "duration must be positive");
  require(std::abs(scenario_steps(sc) * sc.dt - sc.T) <= 1e-9 * sc.T, "duration must be a multiple of dt");
  for (const auto& e : sc.events) {
    require(e.t >= 0 && e.t <= sc.T, "event outside [0, T]");
    require(std::abs(std::round(e.t / sc.dt) * sc.dt - e.t) <= 1e-9, "event times must fall on the time grid");
    require(e.branch < static_cast<int>(c.branches.size()), "event names an unknown branch");
    require(e.bus < static_cast<int>(c.buses.size()), "event names an unknown bus");
    require(e.branch >= 0 || e.bus >= 0, "event changes nothing");
  }
  require(sc.renewable_step >= 0 && sc.load_step >= 0 && sc.jitter >= 0, "disturbance fractions must be >= 0");
  require(sc.init_deviation >= 0, "initial deviation must be >= 0");
  require(sc.du.size() == 0 || sc.du.size() == sys.dims.nu, "du must have one entry per input");
  validate_noise(sc.noise);
  if (sc.noise.process_std.size())
    require(sc.noise.process_std.size() == sys.dims.nd, "process_std needs one entry per dynamic state");
}

struct Trajectory {
  Vec t;
  Mat X;  // n x K
  Mat Y;  // p x K (plant: noisy measurements; observer: y-hat)
  Mat W;  // q x K disturbance record [w_p; w_m; dP_R; dP_L] (plant only)
  Mat DU; // n_u x K (PI observer: du-hat)
  IntegratorStats stats;
  double seconds = 0;
  std::vector<std::string> names;
  int samples() const { return static_cast<int>(t.size()); }
};

// All the pieces a plant run needs, built once from the case.
struct PlantModel {
  NetworkCase net;
  NdaeSystem sys;
  MeasurementModel meas;
  Equilibrium eq;
};

inline PlantModel make_plant(const NetworkCase& net, const std::vector<int>& pmu_buses) {
  PlantModel p;
  p.net = net;
  p.sys = assemble_ndae(net);
  p.meas = build_output_matrix(net, p.sys, pmu_buses);
  p.eq = init_equilibrium(p.sys, net, solve_power_flow(net));
  return p;
}

// Row labels for residual diagnostics (rows are equations, not states).
inline std::vector<std::string> equation_labels(const NdaeSystem& sys) {
  const Dims& d = sys.dims;
  std::vector<std::string> names = sys.state_names();
  std::vector<std::string> out(d.n);
  for (int i = 0; i < d.nd; ++i) out[i] = "d/dt " + names[i];
  for (int k = 0; k < d.ng; ++k) {
    out[d.nd + k] = "stator P of generator " + std::to_string(sys.gen_id[k]);
    out[d.nd + d.ng + k] = "stator Q of generator " + std::to_string(sys.gen_id[k]);
  }
  for (int i = 0; i < d.nb; ++i) {
    out[sys.p_row(i)] = "P balance at bus " + std::to_string(sys.bus_id[i]);
    out[sys.q_row(i)] = "Q balance at bus " + std::to_string(sys.bus_id[i]);
  }
  return out;
}

namespace detail {

struct LoadDrive {
  Vec dq_step;  // deterministic part of dq
  std::vector<int> rbus, lbus;  // disturbance buses
  Vec rbase, lbase;
};

inline Vec load_deviation(const PlantModel& pm, const Scenario& sc, int step, Vec* wq) {
  const int nb = pm.sys.dims.nb;
  Vec dq = Vec::Zero(4 * nb);
  const auto& db = pm.sys.disturbance_bus;
  const int nr = static_cast<int>(db.size());
  if (wq) *wq = Vec::Zero(2 * nr);
  if (step < 0 || (sc.renewable_step == 0 && sc.load_step == 0)) return dq;
  NoiseStream s(sc.seed, stream::kLoad);
  for (int k = 0; k < nr; ++k) {
    int b = db[k];
    double PR0 = pm.eq.q(b), PL0 = pm.eq.q(2 * nb + b);
    double dR = sc.renewable_step * PR0, dL = sc.load_step * PL0;
    double jr = sc.jitter > 0 && dR > 0 ? std::sqrt(sc.jitter * dR) * s.gaussian(uint64_t(step) * 2 * nr + k) : 0.0;
    double jl = sc.jitter > 0 && dL > 0 ? std::sqrt(sc.jitter * dL) * s.gaussian(uint64_t(step) * 2 * nr + nr + k) : 0.0;
    dq(b) = dR + jr;
    dq(2 * nb + b) = -dL + jl;
    if (wq) {
      (*wq)(k) = dq(b);
      (*wq)(nr + k) = dq(2 * nb + b);
    }
  }
  return dq;
}

inline Vec input_at(const Equilibrium& eq, const Scenario& sc, double t) {
  Vec u = eq.u;
  if (sc.du.size() && t >= sc.du_time - 1e-12) u += sc.du;
  return u;
}

}  // namespace detail

// Mechanical-power change that cancels the deterministic part of a load/renewable step,
// shared by inertia. Without governors any net surplus leaves a standing frequency offset
// and the network angles drift without bound.
inline Vec balancing_input(const PlantModel& pm, const Scenario& sc) {
  const Dims& d = pm.sys.dims;
  Scenario quiet = sc;
  quiet.jitter = 0.0;
  Vec dq = detail::load_deviation(pm, quiet, 0, nullptr);
  double surplus = dq.head(d.nb).sum() - dq.segment(2 * d.nb, d.nb).sum();
  double Mtot = 0;
  for (const auto& m : pm.sys.machines) Mtot += m.M;
  Vec du = Vec::Zero(d.nu);
  for (int k = 0; k < d.ng; ++k) du(k) = -surplus * pm.sys.machines[k].M / Mtot;
  return du;
}

// Plant: trapezoid through the topology stages; measurements sampled on the grid.
// x0 (optional) replaces the equilibrium start; its algebraic part is re-solved.
inline Trajectory integrate_plant(const PlantModel& pm, const Scenario& sc, const Vec* x0 = nullptr) {
  validate_scenario(sc, pm.sys, pm.net);
  auto t0 = std::chrono::steady_clock::now();
  const Dims& d = pm.sys.dims;
  const int K = scenario_steps(sc);
  const int p = pm.meas.p;
  const int q = pm.sys.disturbance_dim(p);
  const int nr = static_cast<int>(pm.sys.disturbance_bus.size());
  Trajectory tr;
  tr.names = pm.sys.state_names();
  tr.t = Vec::LinSpaced(K + 1, 0.0, K * sc.dt);
  tr.X.resize(d.n, K + 1);
  tr.Y.resize(p, K + 1);
  tr.W = Mat::Zero(q, K + 1);

  // topology schedule, sorted by time
  std::vector<TopologyEvent> ev = sc.events;
  std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
  NetworkCase net = pm.net;
  NdaeSystem sys = pm.sys;
  MeasurementModel meas = pm.meas;
  size_t next_ev = 0;
  CVec fault_y = CVec::Zero(pm.sys.dims.nb);

  Vec wp = Vec::Zero(d.nd);
  Vec dq = Vec::Zero(d.nq);
  DaeResidual f;
  f.Z = sys.Z;
  f.r = [&](const Vec& x, double t, int) {
    Vec r = sys.A * x + sys.F * sys.eval_f(x) + sys.Bu * detail::input_at(pm.eq, sc, t) +
            sys.Bq * (pm.eq.q + dq) + sys.H * sys.omega0;
    r.head(d.nd) += wp;
    return r;
  };
  f.jac = [&](const Vec& x, double, int) { return Mat(sys.A + sys.F * sys.jac_f(x)); };

  const std::vector<std::string> labels = equation_labels(pm.sys);
  Vec x = pm.eq.x;
  if (x0) {
    require(x0->size() == d.n, "initial state has the wrong length");
    x = reinit_algebraic(f, *x0, 0.0, 0, labels);
  } else {
    Vec r = f.r(x, 0.0, 0);
    double worst = 0;
    for (int i : algebraic_rows(sys.Z)) worst = std::max(worst, std::abs(r(i)));
    if (worst > 1e-8) throw ValidationError("inconsistent initial condition: algebraic residual " + std::to_string(worst));
  }
  auto apply_events = [&](double t, int k) {
    bool changed = false;
    while (next_ev < ev.size() && ev[next_ev].t <= t + 1e-9) {
      const TopologyEvent& e = ev[next_ev];
      if (e.branch >= 0) net.branches[e.branch].status = e.status;
      if (e.bus >= 0) fault_y(e.bus) = e.shunt;
      ++next_ev;
      changed = true;
    }
    if (changed) {
      sys = with_topology(pm.sys, net);
      for (int i = 0; i < fault_y.size(); ++i) sys.Y(i, i) += fault_y(i);
      meas = with_topology(pm.meas, net);
      x = reinit_algebraic(f, x, t, k, labels);
    }
  };
  apply_events(0.0, 0);
  auto record = [&](int k) {
    tr.X.col(k) = x;
    tr.Y.col(k) = measure(meas, x, sc.noise, static_cast<uint64_t>(k));
    tr.W.block(d.nd, k, p, 1) = tr.Y.col(k) - meas.h(x);
  };
  record(0);
  for (int k = 0; k < K; ++k) {
    const double t = k * sc.dt;
    wp = draw_process_noise(sc.noise, d.nd, static_cast<uint64_t>(k));
    Vec wq;
    dq = detail::load_deviation(pm, sc, k, &wq);
    x = trapezoid_step(f, x, t, sc.dt, k, sc.integrator, tr.stats);
    const double t1 = (k + 1) * sc.dt;
    tr.W.block(0, k + 1, d.nd, 1) = wp;
    if (nr) tr.W.block(d.nd + p, k + 1, 2 * nr, 1) = wq;
    apply_events(t1, k);
    Vec r = f.r(x, t1, k);
    for (int i : algebraic_rows(sys.Z))
      tr.stats.max_algebraic_residual = std::max(tr.stats.max_algebraic_residual, std::abs(r(i)));
    record(k + 1);
  }
  tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tr;
}

// Per-state std = frac * largest excursion of the dynamic states on a noise-free run.
inline Vec process_std_from_nominal(const Trajectory& nominal, int nd, double frac = 0.05) {
  Vec s(nd);
  for (int i = 0; i < nd; ++i)
    s(i) = frac * (nominal.X.row(i).array() - nominal.X(i, 0)).abs().maxCoeff();
  return s;
}

// ---------------------------------------------------------------------------------------
// Observer

inline Vec observer_initial_state(const Vec& x0, const Dims& d, const Scenario& sc) {
  NoiseStream s(sc.seed, stream::kInit);
  Vec x = x0;
  for (int i = 0; i < x.size(); ++i) x(i) *= 1.0 + sc.init_deviation * (2.0 * s.uniform(i) - 1.0);
  if (sc.pin_omega)
    for (int k = 0; k < d.ng; ++k) x(d.omega(k)) = x0(d.omega(k));
  return x;
}

struct ObserverOptions {
  bool zero_integral = false;  // ablation: L_I rows forced to zero
  bool exact_start = false;    // start from the plant's initial state (zero initial error)
};

// Z x' = A x + F f(x) + B_u u_obs + B_q q_obs + H w0 + L (y - h(x)), PI: with B_u du-hat
// and du-hat' = L_I (y - h(x)). Measurements are read at the trapezoid end points.
inline Trajectory run_observer(const PlantModel& pm, const ObserverGain& gain, const Trajectory& plant,
                               const Scenario& sc, const ObserverOptions& opt = {}) {
  auto t0 = std::chrono::steady_clock::now();
  const NdaeSystem& sys = pm.sys;
  const MeasurementModel& meas = pm.meas;
  const Dims& d = sys.dims;
  const int n = d.n, nu = d.nu, p = meas.p;
  const bool pi = gain.pi;
  require(gain.L_P.rows() == n && gain.L_P.cols() == p, "observer gain does not match the system");
  if (pi) require(gain.L_I.rows() == nu && gain.L_I.cols() == p, "integral gain does not match the inputs");
  const Mat LP = gain.L_P;
  const Mat LI = pi ? (opt.zero_integral ? Mat(Mat::Zero(nu, p)) : gain.L_I) : Mat(Mat::Zero(0, p));
  const int N = pi ? n + nu : n;
  const int K = plant.samples() - 1;

  Trajectory tr;
  tr.names = sys.state_names();
  tr.t = plant.t;
  tr.X.resize(n, K + 1);
  tr.Y.resize(p, K + 1);
  if (pi) tr.DU.resize(nu, K + 1);

  auto sample = [&](double t) {
    double s = t / sc.dt;
    int k = static_cast<int>(std::floor(s + 1e-9));
    if (k >= K) return Vec(plant.Y.col(K));
    double a = s - k;
    if (a < 1e-9) return Vec(plant.Y.col(k));
    return Vec((1 - a) * plant.Y.col(k) + a * plant.Y.col(k + 1));
  };
  Vec qobs = pm.eq.q;
  DaeResidual f;
  f.Z = pi ? blkdiag(sys.Z, Mat::Identity(nu, nu)) : sys.Z;
  f.r = [&](const Vec& z, double t, int) {
    Vec x = z.head(n);
    Vec u = sc.observer_knows_inputs ? detail::input_at(pm.eq, sc, t) : pm.eq.u;
    Vec innov = sample(t) - meas.h(x);
    Vec r(N);
    r.head(n) = sys.A * x + sys.F * sys.eval_f(x) + sys.Bu * u + sys.Bq * qobs + sys.H * sys.omega0 + LP * innov;
    if (pi) {
      r.head(n) += sys.Bu * z.tail(nu);
      r.tail(nu) = LI * innov;
    }
    return r;
  };
  f.jac = [&](const Vec& z, double, int) {
    Vec x = z.head(n);
    Mat J = Mat::Zero(N, N);
    Mat Hx = meas.h_jacobian(x);
    J.topLeftCorner(n, n) = sys.A + sys.F * sys.jac_f(x) - LP * Hx;
    if (pi) {
      J.topRightCorner(n, nu) = sys.Bu;
      J.bottomLeftCorner(nu, n) = -LI * Hx;
    }
    return J;
  };

  Vec z = Vec::Zero(N);
  z.head(n) = opt.exact_start ? Vec(plant.X.col(0)) : observer_initial_state(pm.eq.x, d, sc);
  if (sc.observer_knows_loads) qobs = pm.eq.q + detail::load_deviation(pm, sc, -1, nullptr);
  z = reinit_algebraic(f, z, 0.0, 0, equation_labels(sys));
  auto record = [&](int k) {
    tr.X.col(k) = z.head(n);
    tr.Y.col(k) = meas.h(z.head(n));
    if (pi) tr.DU.col(k) = z.tail(nu);
  };
  record(0);
  for (int k = 0; k < K; ++k) {
    if (sc.observer_knows_loads) qobs = pm.eq.q + detail::load_deviation(pm, sc, k, nullptr);
    z = trapezoid_step(f, z, k * sc.dt, sc.dt, k, sc.integrator, tr.stats);
    record(k + 1);
  }
  tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tr;
}

// ---------------------------------------------------------------------------------------
// Metrics

struct ErrorMetrics {
  Vec norm;       // ||e(t)||_2 per sample
  Vec per_state;  // sqrt(mean_t e_i^2)
  double rmse = 0;  // sum over the selected states
};

// Sum over states of the per-state RMS error, samples t = 1..t_f.
inline ErrorMetrics error_metrics(const Trajectory& plant, const Trajectory& obs, const std::vector<int>& states = {}) {
  require(plant.X.rows() == obs.X.rows() && plant.X.cols() == obs.X.cols(), "trajectory shapes differ");
  require((plant.t - obs.t).cwiseAbs().maxCoeff() <= 1e-12, "time grids differ");
  ErrorMetrics m;
  Mat E = plant.X - obs.X;
  m.norm = E.colwise().norm().transpose();
  const int K = static_cast<int>(E.cols()) - 1;
  const int n = static_cast<int>(E.rows());
  m.per_state = Vec::Zero(n);
  if (K > 0)
    for (int i = 0; i < n; ++i) m.per_state(i) = std::sqrt(E.row(i).tail(K).squaredNorm() / K);
  if (states.empty())
    m.rmse = m.per_state.sum();
  else
    for (int i : states) m.rmse += m.per_state(i);
  return m;
}

struct HinfReport {
  double error_energy = 0, disturbance_energy = 0, ratio = 0, gamma = 0, slack = 0.1;
  bool pass = false;
};

inline double trapz(const Vec& t, const Vec& v) {
  double s = 0;
  for (int k = 0; k + 1 < t.size(); ++k) s += 0.5 * (t(k + 1) - t(k)) * (v(k) + v(k + 1));
  return s;
}

inline HinfReport hinf_check(const Trajectory& plant, const Trajectory& obs, const Mat& Gamma, double gamma,
                             double slack = 0.1) {
  HinfReport r;
  r.gamma = gamma;
  r.slack = slack;
  Mat E = plant.X - obs.X;
  Mat GE = Gamma.size() ? Mat(Gamma * E) : E;
  Vec e2 = GE.colwise().squaredNorm().transpose();
  Vec w2 = plant.W.colwise().squaredNorm().transpose();
  r.error_energy = trapz(plant.t, e2);
  r.disturbance_energy = trapz(plant.t, w2);
  r.ratio = r.disturbance_energy > 0 ? r.error_energy / r.disturbance_energy : (r.error_energy > 0 ? INFINITY : 0.0);
  r.pass = r.error_energy <= gamma * r.disturbance_energy * (1 + slack) || r.error_energy == 0.0;
  return r;
}

// ---------------------------------------------------------------------------------------
// Export

inline std::vector<int> decimated_indices(int samples, int every) {
  require(every >= 1, "decimation must be >= 1");
  std::vector<int> idx;
  for (int k = 0; k < samples; k += every) idx.push_back(k);
  if (idx.empty() || idx.back() != samples - 1) idx.push_back(samples - 1);
  return idx;
}

// Wide CSV: t, then the selected state rows, then the measurement rows.
inline std::string trajectory_csv(const Trajectory& tr, const std::vector<std::string>& channels,
                                  const std::vector<int>& states, bool with_y, int every = 1,
                                  const std::string& header_comment = "") {
  std::ostringstream os;
  os << std::setprecision(12);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "t";
  for (int i : states) os << "," << (i < static_cast<int>(tr.names.size()) ? tr.names[i] : "x" + std::to_string(i));
  if (with_y)
    for (int i = 0; i < tr.Y.rows(); ++i)
      os << "," << (i < static_cast<int>(channels.size()) ? channels[i] : "y" + std::to_string(i));
  os << "\n";
  for (int k : decimated_indices(tr.samples(), every)) {
    os << tr.t(k);
    for (int i : states) os << "," << tr.X(i, k);
    if (with_y)
      for (int i = 0; i < tr.Y.rows(); ++i) os << "," << tr.Y(i, k);
    os << "\n";
  }
  return os.str();
}

// Binary frames: "NDTF" | u32 version | u32 n | u32 p | f64 dt | u64 count | char[64] tag
// (config hash, NUL padded), then per sample f64 t, n f64 states, p f64 outputs.
// Little-endian.
inline constexpr char kFrameMagic[4] = {'N', 'D', 'T', 'F'};
inline constexpr uint32_t kFrameVersion = 1;

struct FrameHeader {
  uint32_t version = kFrameVersion, n = 0, p = 0;
  double dt = 0;
  uint64_t count = 0;
  std::string tag;
};

inline constexpr size_t kFrameTagBytes = 64;

inline std::string trajectory_frames(const Trajectory& tr, double dt, int every = 1, const std::string& tag = "") {
  require(tag.size() <= kFrameTagBytes, "frame tag longer than 64 bytes");
  std::string out;
  auto put = [&out](const void* data, size_t len) { out.append(static_cast<const char*>(data), len); };
  std::vector<int> idx = decimated_indices(tr.samples(), every);
  FrameHeader h{kFrameVersion, static_cast<uint32_t>(tr.X.rows()), static_cast<uint32_t>(tr.Y.rows()),
                dt * every, idx.size()};
  put(kFrameMagic, 4);
  put(&h.version, 4);
  put(&h.n, 4);
  put(&h.p, 4);
  put(&h.dt, 8);
  put(&h.count, 8);
  std::string padded = tag;
  padded.resize(kFrameTagBytes, '\0');
  put(padded.data(), kFrameTagBytes);
  for (int k : idx) {
    double t = tr.t(k);
    put(&t, 8);
    for (int i = 0; i < tr.X.rows(); ++i) put(&tr.X(i, k), 8);
    for (int i = 0; i < tr.Y.rows(); ++i) put(&tr.Y(i, k), 8);
  }
  return out;
}

inline Trajectory read_frames(const std::string& data, FrameHeader* header = nullptr) {
  require(data.size() >= 32 + kFrameTagBytes && std::memcmp(data.data(), kFrameMagic, 4) == 0, "not a trajectory frame file");
  FrameHeader h;
  size_t off = 4;
  auto get = [&](void* dst, size_t len) {
    require(off + len <= data.size(), "truncated trajectory frame file");
    std::memcpy(dst, data.data() + off, len);
    off += len;
  };
  get(&h.version, 4);
  require(h.version == kFrameVersion, "unsupported frame version " + std::to_string(h.version));
  get(&h.n, 4);
  get(&h.p, 4);
  get(&h.dt, 8);
  get(&h.count, 8);
  char tag[kFrameTagBytes];
  get(tag, kFrameTagBytes);
  h.tag.assign(tag, strnlen(tag, kFrameTagBytes));
  require(h.count <= (data.size() - off) / 8, "truncated trajectory frame file");
  Trajectory tr;
  tr.t.resize(h.count);
  tr.X.resize(h.n, h.count);
  tr.Y.resize(h.p, h.count);
  for (uint64_t k = 0; k < h.count; ++k) {
    get(&tr.t(k), 8);
    for (uint32_t i = 0; i < h.n; ++i) get(&tr.X(i, k), 8);
    for (uint32_t i = 0; i < h.p; ++i) get(&tr.Y(i, k), 8);
  }
  require(off == data.size(), "trailing bytes in trajectory frame file");
  if (header) *header = h;
  return tr;
}

}  // namespace ndae
