#pragma once

#include <vector>

#include "ndae/common.hpp"
#include "ndae/network_case.hpp"

namespace ndae {

inline cplx series_admittance(const Branch& br) { return 1.0 / cplx(br.r, br.x); }

// Shunt seen at the energized end when the far breaker is open.
inline cplx open_end_shunt(const Branch& br) {
  cplx y = series_admittance(br);
  cplx half(0.0, br.b / 2.0);
  if (br.b == 0.0) return 0.0;
  return half + y * half / (y + half);
}

inline CMat bus_admittance(const NetworkCase& c) {
  const int nb = static_cast<int>(c.buses.size());
  CMat Y = CMat::Zero(nb, nb);
  for (int i = 0; i < nb; ++i) Y(i, i) += cplx(c.buses[i].Gs, c.buses[i].Bs);
  for (const auto& br : c.branches) {
    int f = c.bus_index(br.from), t = c.bus_index(br.to);
    switch (br.status) {
      case BranchStatus::Off: break;
      case BranchStatus::On: {
        cplx y = series_admittance(br), half(0.0, br.b / 2.0);
        Y(f, f) += y + half;
        Y(t, t) += y + half;
        Y(f, t) -= y;
        Y(t, f) -= y;
        break;
      }
      case BranchStatus::FromOnly: Y(f, f) += open_end_shunt(br); break;
      case BranchStatus::ToOnly: Y(t, t) += open_end_shunt(br); break;
    }
  }
  return Y;
}

struct PowerFlowSolution {
  Vec v, theta;    // per bus, in case order
  Vec P, Q;        // net injections per bus
  Vec Pg, Qg;      // per generator (case order, out-of-service = 0)
  int iterations = 0;
  double mismatch = 0;
};

inline Vec scheduled_net_p(const NetworkCase& c) {
  Vec p(c.buses.size());
  for (size_t i = 0; i < c.buses.size(); ++i) p(i) = c.buses[i].PR - c.buses[i].Pd;
  for (const auto& g : c.generators)
    if (g.in_service) p(c.bus_index(g.bus)) += g.Pg;
  return p;
}

inline Vec scheduled_net_q(const NetworkCase& c) {
  Vec q(c.buses.size());
  for (size_t i = 0; i < c.buses.size(); ++i) q(i) = c.buses[i].QR - c.buses[i].Qd;
  for (const auto& g : c.generators)
    if (g.in_service && c.buses[c.bus_index(g.bus)].type == BusType::PQ)
      q(c.bus_index(g.bus)) += g.Qg;
  return q;
}

// Newton-Raphson in polar coordinates from a flat start (PV/slack magnitudes at setpoint).
inline PowerFlowSolution solve_power_flow(const NetworkCase& c, double tol = 1e-8,
                                          int max_iter = 50) {
  validate_case(c);
  const int nb = static_cast<int>(c.buses.size());
  CMat Y = bus_admittance(c);
  Vec vm = Vec::Ones(nb), va = Vec::Zero(nb);
  for (const auto& g : c.generators) {
    if (!g.in_service) continue;
    int i = c.bus_index(g.bus);
    if (c.buses[i].type != BusType::PQ) vm(i) = g.Vg;
  }
  std::vector<int> pv_pq, pq;
  for (int i = 0; i < nb; ++i) {
    if (c.buses[i].type != BusType::Slack) pv_pq.push_back(i);
    if (c.buses[i].type == BusType::PQ) pq.push_back(i);
  }
  const int na = static_cast<int>(pv_pq.size()), nm = static_cast<int>(pq.size());
  Vec Psch = scheduled_net_p(c), Qsch = scheduled_net_q(c);

  auto injections = [&](CVec& V, CVec& S) {
    V = (vm.array() * (cplx(0, 1) * va.array()).exp()).matrix();
    S = (V.array() * (Y * V).conjugate().array()).matrix();
  };
  auto mismatch_vec = [&](const CVec& S) {
    Vec f(na + nm);
    for (int k = 0; k < na; ++k) f(k) = S(pv_pq[k]).real() - Psch(pv_pq[k]);
    for (int k = 0; k < nm; ++k) f(na + k) = S(pq[k]).imag() - Qsch(pq[k]);
    return f;
  };

  CVec V, S;
  injections(V, S);
  Vec f = mismatch_vec(S);
  PowerFlowSolution sol;
  int it = 0;
  while (f.lpNorm<Eigen::Infinity>() > tol) {
    if (it == max_iter || !f.allFinite())
      throw NumericalError("power flow did not converge after " + std::to_string(it) +
                           " iterations, mismatch " +
                           std::to_string(f.lpNorm<Eigen::Infinity>()));
    CVec I = Y * V;
    CMat dVa = cplx(0, 1) * V.asDiagonal() *
               (CMat(I.asDiagonal()) - Y * CMat(V.asDiagonal())).conjugate();
    CVec Vn = (V.array() / vm.array().cast<cplx>()).matrix();
    CMat dVm = V.asDiagonal() * (Y * CMat(Vn.asDiagonal())).conjugate() +
               CMat(I.conjugate().asDiagonal()) * CMat(Vn.asDiagonal());
    Mat J(na + nm, na + nm);
    for (int r = 0; r < na; ++r) {
      for (int k = 0; k < na; ++k) J(r, k) = dVa(pv_pq[r], pv_pq[k]).real();
      for (int k = 0; k < nm; ++k) J(r, na + k) = dVm(pv_pq[r], pq[k]).real();
    }
    for (int r = 0; r < nm; ++r) {
      for (int k = 0; k < na; ++k) J(na + r, k) = dVa(pq[r], pv_pq[k]).imag();
      for (int k = 0; k < nm; ++k) J(na + r, na + k) = dVm(pq[r], pq[k]).imag();
    }
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible())
      throw NumericalError("singular power-flow Jacobian at iteration " + std::to_string(it));
    Vec dx = lu.solve(-f);
    for (int k = 0; k < na; ++k) va(pv_pq[k]) += dx(k);
    for (int k = 0; k < nm; ++k) vm(pq[k]) += dx(na + k);
    ++it;
    if ((vm.array() <= 0).any()) {
      throw NumericalError("power flow voltage collapsed at iteration " + std::to_string(it));
    }
    injections(V, S);
    f = mismatch_vec(S);
  }
  sol.v = vm;
  sol.theta = va;
  sol.P = S.real();
  sol.Q = S.imag();
  sol.iterations = it;
  sol.mismatch = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
  sol.Pg = Vec::Zero(c.generators.size());
  sol.Qg = Vec::Zero(c.generators.size());
  for (size_t k = 0; k < c.generators.size(); ++k) {
    const auto& g = c.generators[k];
    if (!g.in_service) continue;
    int i = c.bus_index(g.bus);
    double pl = c.buses[i].Pd - c.buses[i].PR, ql = c.buses[i].Qd - c.buses[i].QR;
    sol.Pg(k) = c.buses[i].type == BusType::Slack ? sol.P(i) + pl : g.Pg;
    sol.Qg(k) = c.buses[i].type == BusType::PQ ? g.Qg : sol.Q(i) + ql;
  }
  return sol;
}

}  // namespace ndae
