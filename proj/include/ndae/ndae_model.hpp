#pragma once

#include <string>
#include <vector>

#include "ndae/common.hpp"
#include "ndae/network_case.hpp"
#include "ndae/power_flow.hpp"

namespace ndae {

// Index bookkeeping for x = [delta, omega, E'q, E'd | PG, QG, v, theta] and
// f = [PG, v cos a, v sin a | E'q v sin a, v^2 sin 2a, E'q v cos a, v^2, v^2 cos 2a,
//      P@G, Q@G, P@N\G, Q@N\G] with a = delta - theta at the machine bus.
struct Dims {
  int ng = 0, nb = 0;
  int nd = 0, na = 0, n = 0, nu = 0, nq = 0, nfd = 0, nfa = 0, nf = 0;

  static Dims make(int ng, int nb) {
    Dims d;
    d.ng = ng;
    d.nb = nb;
    d.nd = 4 * ng;
    d.na = 2 * ng + 2 * nb;
    d.n = d.nd + d.na;
    d.nu = 2 * ng;
    d.nq = 4 * nb;
    d.nfd = 3 * ng;
    d.nfa = 5 * ng + 2 * nb;
    d.nf = d.nfd + d.nfa;
    return d;
  }
  int delta(int k) const { return k; }
  int omega(int k) const { return ng + k; }
  int eq(int k) const { return 2 * ng + k; }
  int ed(int k) const { return 3 * ng + k; }
  int pg(int k) const { return nd + k; }
  int qg(int k) const { return nd + ng + k; }
  int v(int i) const { return nd + 2 * ng + i; }
  int theta(int i) const { return nd + 2 * ng + nb + i; }
};

struct NdaeSystem {
  Dims dims;
  Mat Z, A, F, Bu, Bq;
  Vec H;
  double omega0 = kOmega0;

  CMat Y;                        // bus admittance of the current topology
  std::vector<int> gen_bus;      // bus index of machine k
  std::vector<int> gen_id;       // bus id of machine k
  std::vector<int> non_gen_bus;  // bus indices without a machine
  std::vector<int> bus_id;
  std::vector<int> disturbance_bus;  // buses carrying the load/renewable channels of w
  std::vector<GeneratorParams> machines;

  int process_noise_dim() const { return dims.nd; }
  int disturbance_dim(int p) const {
    return dims.nd + p + 2 * static_cast<int>(disturbance_bus.size());
  }

  // w = [w_p (process, n_d) ; w_m (measurement, p) ; dP_R ; dP_L] on disturbance buses.
  Mat Bw(int p) const {
    const int nr = static_cast<int>(disturbance_bus.size());
    Mat B = Mat::Zero(dims.n, disturbance_dim(p));
    B.topLeftCorner(dims.nd, dims.nd).setIdentity();
    for (int k = 0; k < nr; ++k) {
      int b = disturbance_bus[k];
      B.col(dims.nd + p + k) = Bq.col(b);
      B.col(dims.nd + p + nr + k) = Bq.col(2 * dims.nb + b);
    }
    return B;
  }

  int p_row(int bus) const { return balance_row(bus, false); }
  int q_row(int bus) const { return balance_row(bus, true); }

  int balance_row(int bus, bool reactive) const {
    const int base = dims.nd + 2 * dims.ng;
    const int nng = dims.nb - dims.ng;
    for (int k = 0; k < dims.ng; ++k)
      if (gen_bus[k] == bus) return base + (reactive ? dims.ng : 0) + k;
    for (int k = 0; k < nng; ++k)
      if (non_gen_bus[k] == bus) return base + 2 * dims.ng + (reactive ? nng : 0) + k;
    throw ValidationError("bus index out of range");
  }

  void flows(const Vec& x, Vec& P, Vec& Q) const {
    const int nb = dims.nb;
    CVec V(nb);
    for (int i = 0; i < nb; ++i) V(i) = std::polar(x(dims.v(i)), x(dims.theta(i)));
    CVec S = (V.array() * (Y * V).conjugate().array()).matrix();
    P = S.real();
    Q = S.imag();
  }

  Vec eval_f(const Vec& x) const {
    const Dims& d = dims;
    const int ng = d.ng;
    const int nng = d.nb - ng;
    Vec f(d.nf);
    Vec P, Q;
    flows(x, P, Q);
    for (int k = 0; k < ng; ++k) {
      const int b = gen_bus[k];
      const double v = x(d.v(b));
      const double a = x(d.delta(k)) - x(d.theta(b));
      const double Eq = x(d.eq(k));
      const double ca = std::cos(a), sa = std::sin(a);
      f(k) = x(d.pg(k));
      f(ng + k) = v * ca;
      f(2 * ng + k) = v * sa;
      const int o = d.nfd;
      f(o + k) = Eq * v * sa;
      f(o + ng + k) = v * v * std::sin(2 * a);
      f(o + 2 * ng + k) = Eq * v * ca;
      f(o + 3 * ng + k) = v * v;
      f(o + 4 * ng + k) = v * v * std::cos(2 * a);
      f(o + 5 * ng + k) = P(b);
      f(o + 6 * ng + k) = Q(b);
    }
    for (int k = 0; k < nng; ++k) {
      f(d.nfd + 7 * ng + k) = P(non_gen_bus[k]);
      f(d.nfd + 7 * ng + nng + k) = Q(non_gen_bus[k]);
    }
    return f;
  }

  Mat jac_f(const Vec& x) const {
    const Dims& d = dims;
    const int ng = d.ng, nb = d.nb;
    const int nng = nb - ng;
    Mat J = Mat::Zero(d.nf, d.n);
    for (int k = 0; k < ng; ++k) {
      const int b = gen_bus[k];
      const double v = x(d.v(b));
      const double a = x(d.delta(k)) - x(d.theta(b));
      const double Eq = x(d.eq(k));
      const double ca = std::cos(a), sa = std::sin(a);
      const double c2 = std::cos(2 * a), s2 = std::sin(2 * a);
      const int iv = d.v(b), it = d.theta(b), id = d.delta(k), ie = d.eq(k);
      auto put_angle = [&](int row, double dda) {
        J(row, id) += dda;
        J(row, it) -= dda;
      };
      J(k, d.pg(k)) = 1.0;
      J(ng + k, iv) = ca;
      put_angle(ng + k, -v * sa);
      J(2 * ng + k, iv) = sa;
      put_angle(2 * ng + k, v * ca);
      const int o = d.nfd;
      J(o + k, ie) = v * sa;
      J(o + k, iv) = Eq * sa;
      put_angle(o + k, Eq * v * ca);
      J(o + ng + k, iv) = 2 * v * s2;
      put_angle(o + ng + k, 2 * v * v * c2);
      J(o + 2 * ng + k, ie) = v * ca;
      J(o + 2 * ng + k, iv) = Eq * ca;
      put_angle(o + 2 * ng + k, -Eq * v * sa);
      J(o + 3 * ng + k, iv) = 2 * v;
      J(o + 4 * ng + k, iv) = 2 * v * c2;
      put_angle(o + 4 * ng + k, -2 * v * v * s2);
    }
    CVec V(nb), Vn(nb);
    for (int i = 0; i < nb; ++i) {
      V(i) = std::polar(x(d.v(i)), x(d.theta(i)));
      Vn(i) = std::polar(1.0, x(d.theta(i)));
    }
    CVec I = Y * V;
    CMat dVa = cplx(0, 1) * V.asDiagonal() *
               (CMat(I.asDiagonal()) - Y * CMat(V.asDiagonal())).conjugate();
    CMat dVm = V.asDiagonal() * (Y * CMat(Vn.asDiagonal())).conjugate() +
               CMat(I.conjugate().asDiagonal()) * CMat(Vn.asDiagonal());
    auto put_flow = [&](int row, int bus, bool reactive) {
      for (int j = 0; j < nb; ++j) {
        J(row, d.v(j)) = reactive ? dVm(bus, j).imag() : dVm(bus, j).real();
        J(row, d.theta(j)) = reactive ? dVa(bus, j).imag() : dVa(bus, j).real();
      }
    };
    for (int k = 0; k < ng; ++k) {
      put_flow(d.nfd + 5 * ng + k, gen_bus[k], false);
      put_flow(d.nfd + 6 * ng + k, gen_bus[k], true);
    }
    for (int k = 0; k < nng; ++k) {
      put_flow(d.nfd + 7 * ng + k, non_gen_bus[k], false);
      put_flow(d.nfd + 7 * ng + nng + k, non_gen_bus[k], true);
    }
    return J;
  }

  Vec rhs(const Vec& x, const Vec& u, const Vec& q) const {
    return A * x + F * eval_f(x) + Bu * u + Bq * q + H * omega0;
  }

  std::vector<std::string> state_names() const {
    std::vector<std::string> s;
    for (const char* p : {"delta", "omega", "Eqp", "Edp"})
      for (int id : gen_id) s.push_back(std::string(p) + "_" + std::to_string(id));
    for (const char* p : {"PG", "QG"})
      for (int id : gen_id) s.push_back(std::string(p) + "_" + std::to_string(id));
    for (const char* p : {"v", "theta"})
      for (int id : bus_id) s.push_back(std::string(p) + "_" + std::to_string(id));
    return s;
  }
};

// Swap the network admittance (topology events); matrices are unaffected since the
// power-flow terms live inside f.
inline NdaeSystem with_topology(const NdaeSystem& sys, const NetworkCase& c) {
  NdaeSystem out = sys;
  out.Y = bus_admittance(c);
  return out;
}

inline NdaeSystem assemble_ndae(const NetworkCase& c) {
  validate_case(c);
  NdaeSystem s;
  const int nb = static_cast<int>(c.buses.size());
  for (const auto& b : c.buses) s.bus_id.push_back(b.id);
  std::vector<bool> is_gen(nb, false);
  for (const auto& g : c.generators) {
    if (!g.in_service) continue;
    require(g.has_dynamics, "generator at bus " + std::to_string(g.bus) +
                                " has no dynamic parameters (attach a machine data file)");
    int bi = c.bus_index(g.bus);
    s.gen_bus.push_back(bi);
    s.gen_id.push_back(g.bus);
    s.machines.push_back(g.dyn);
    is_gen[bi] = true;
  }
  require(!s.gen_bus.empty(), "case has no in-service generators");
  for (int i = 0; i < nb; ++i)
    if (!is_gen[i]) s.non_gen_bus.push_back(i);
  for (int i = 0; i < nb; ++i)
    if (c.buses[i].Pd > 0 || c.buses[i].PR != 0) s.disturbance_bus.push_back(i);

  const int ng = static_cast<int>(s.gen_bus.size());
  s.dims = Dims::make(ng, nb);
  const Dims& d = s.dims;
  s.Y = bus_admittance(c);

  Vec M(ng), D(ng), xd(ng), xdp(ng), xq(ng), xqp(ng), Td0(ng), Tq0(ng);
  for (int k = 0; k < ng; ++k) {
    const auto& p = s.machines[k];
    M(k) = p.M;
    D(k) = p.D;
    xd(k) = p.xd;
    xdp(k) = p.xdp;
    xq(k) = p.xq;
    xqp(k) = p.xqp;
    Td0(k) = p.Td0;
    Tq0(k) = p.Tq0;
  }

  s.Z = Mat::Zero(d.n, d.n);
  s.Z.topLeftCorner(d.nd, d.nd).setIdentity();

  s.A = Mat::Zero(d.n, d.n);
  s.F = Mat::Zero(d.n, d.nf);
  s.Bu = Mat::Zero(d.n, d.nu);
  s.H = Vec::Zero(d.n);
  for (int k = 0; k < ng; ++k) {
    s.A(d.delta(k), d.omega(k)) = 1.0;
    s.A(d.omega(k), d.omega(k)) = -D(k) / M(k);
    s.A(d.eq(k), d.eq(k)) = -xd(k) / (xdp(k) * Td0(k));
    s.A(d.ed(k), d.ed(k)) = -1.0 / Tq0(k);

    s.F(d.omega(k), k) = -1.0 / M(k);
    s.F(d.eq(k), ng + k) = (xd(k) - xdp(k)) / (xdp(k) * Td0(k));
    s.F(d.ed(k), 2 * ng + k) = (xq(k) - xqp(k)) / (xqp(k) * Tq0(k));

    s.Bu(d.omega(k), k) = 1.0 / M(k);
    s.Bu(d.eq(k), ng + k) = 1.0 / Td0(k);

    s.H(d.delta(k)) = -1.0;
    s.H(d.omega(k)) = D(k) / M(k);

    // stator rows
    const int rp = d.nd + k, rq = d.nd + ng + k, o = d.nfd;
    const double F12 = (xdp(k) - xq(k)) / (2 * xdp(k) * xq(k));
    const double F24 = (xdp(k) + xq(k)) / (2 * xdp(k) * xq(k));
    s.A(rp, d.pg(k)) = -1.0;
    s.A(rq, d.qg(k)) = -1.0;
    s.F(rp, o + k) = 1.0 / xdp(k);
    s.F(rp, o + ng + k) = F12;
    s.F(rq, o + 2 * ng + k) = 1.0 / xdp(k);
    s.F(rq, o + 3 * ng + k) = -F24;
    s.F(rq, o + 4 * ng + k) = F12;

    // machine injections in the bus balance rows
    s.A(d.nd + 2 * ng + k, d.pg(k)) = -1.0;
    s.A(d.nd + 3 * ng + k, d.qg(k)) = -1.0;
  }
  for (int r = 0; r < 2 * nb; ++r) s.F(d.nd + 2 * ng + r, d.nfd + 5 * ng + r) = 1.0;

  s.Bq = Mat::Zero(d.n, d.nq);
  for (int i = 0; i < nb; ++i) {
    s.Bq(s.p_row(i), i) = -1.0;
    s.Bq(s.q_row(i), nb + i) = -1.0;
    s.Bq(s.p_row(i), 2 * nb + i) = 1.0;
    s.Bq(s.q_row(i), 3 * nb + i) = 1.0;
  }
  return s;
}

struct Equilibrium {
  Vec x;  // full state
  Vec u;  // [T_M ; E_fd]
  Vec q;  // [P_R ; Q_R ; P_L ; Q_L]
  double residual = 0;
};

inline Vec injection_vector(const NetworkCase& c) {
  const int nb = static_cast<int>(c.buses.size());
  Vec q(4 * nb);
  for (int i = 0; i < nb; ++i) {
    q(i) = c.buses[i].PR;
    q(nb + i) = c.buses[i].QR;
    q(2 * nb + i) = c.buses[i].Pd;
    q(3 * nb + i) = c.buses[i].Qd;
  }
  return q;
}

// Two-axis machine back-solve from the power-flow phasors.
inline Equilibrium init_equilibrium(const NdaeSystem& sys, const NetworkCase& c,
                                    const PowerFlowSolution& pf, double tol = 1e-8) {
  const Dims& d = sys.dims;
  Equilibrium eq;
  eq.x = Vec::Zero(d.n);
  eq.u = Vec::Zero(d.nu);
  eq.q = injection_vector(c);
  for (int i = 0; i < d.nb; ++i) {
    eq.x(d.v(i)) = pf.v(i);
    eq.x(d.theta(i)) = pf.theta(i);
  }
  for (int k = 0; k < d.ng; ++k) {
    const auto& p = sys.machines[k];
    const int b = sys.gen_bus[k];
    int gi = -1;
    for (size_t g = 0; g < c.generators.size(); ++g)
      if (c.generators[g].in_service && c.generators[g].bus == sys.gen_id[k]) gi = static_cast<int>(g);
    const cplx S(pf.Pg(gi), pf.Qg(gi));
    const cplx V = std::polar(pf.v(b), pf.theta(b));
    const cplx I = std::conj(S / V);
    const double delta = std::arg(V + cplx(0, p.xq) * I);
    const double id = (I * std::polar(1.0, -(delta - kPi / 2))).real();
    const double a = delta - pf.theta(b);
    const double vca = pf.v(b) * std::cos(a), vsa = pf.v(b) * std::sin(a);
    const double Eq = vca + p.xdp * id;
    eq.x(d.delta(k)) = delta;
    eq.x(d.omega(k)) = sys.omega0;
    eq.x(d.eq(k)) = Eq;
    eq.x(d.ed(k)) = (p.xq - p.xqp) / p.xqp * vsa;
    eq.x(d.pg(k)) = S.real();
    eq.x(d.qg(k)) = S.imag();
    eq.u(k) = S.real();
    eq.u(d.ng + k) = p.xd / p.xdp * Eq - (p.xd - p.xdp) / p.xdp * vca;
  }
  eq.residual = sys.rhs(eq.x, eq.u, eq.q).lpNorm<Eigen::Infinity>();
  if (!(eq.residual <= tol))
    throw NumericalError("inconsistent equilibrium: residual " + std::to_string(eq.residual));
  return eq;
}

}  // namespace ndae
