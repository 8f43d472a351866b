#pragma once

#include <string>

#include "ndae/ndae_model.hpp"

namespace ndae::testing_support {

inline std::string path(const std::string& rel) { return std::string(NDAE_SOURCE_DIR) + "/" + rel; }

inline std::string read(const std::string& rel) { return read_text_file(path(rel)); }

inline NetworkCase case9() {
  return load_case(path("data/case9.m"), path("data/case9_machines.json"));
}

struct Model {
  NetworkCase net;
  NdaeSystem sys;
  PowerFlowSolution pf;
  Equilibrium eq;
};

inline Model case9_model() {
  Model m;
  m.net = case9();
  m.sys = assemble_ndae(m.net);
  m.pf = solve_power_flow(m.net);
  m.eq = init_equilibrium(m.sys, m.net, m.pf);
  return m;
}

// case9 power flow solved independently (scipy fsolve on the polar mismatch equations,
// xtol 1e-14); agrees with the published MATPOWER runpf report to its printed digits.
struct PowerFlowOracle {
  double v[9];
  double theta_deg[9];
  double pg[3];
  double qg[3];
};

inline constexpr PowerFlowOracle kCase9PowerFlow = {
    {1.0, 1.0, 1.0, 0.9870068524, 0.9754721771, 1.0033754365, 0.9856448817, 0.9961852458,
     0.9576210404},
    {0.0, 9.6687411266, 4.7710732372, -2.4066439195, -4.0172643267, 1.9256016868, 0.6215445554,
     3.7991201927, -4.3499335766},
    {0.7195470159, 1.63, 0.85},
    {0.2406895777, 0.1446011953, -0.0364902553},
};

}  // namespace ndae::testing_support
