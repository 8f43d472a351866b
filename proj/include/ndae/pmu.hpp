#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ndae/common.hpp"
#include "ndae/ndae_model.hpp"
#include "ndae/network_case.hpp"
#include "ndae/power_flow.hpp"

namespace ndae {

// Y_ft = [Y_f ; -Y_t]: row l gives the from-end current of branch l, row E + l the
// negated to-end current (flow direction from -> to on both ends).
inline CMat branch_admittance(const NetworkCase& c) {
  const int E = static_cast<int>(c.branches.size());
  const int nb = static_cast<int>(c.buses.size());
  CMat Yft = CMat::Zero(2 * E, nb);
  for (int l = 0; l < E; ++l) {
    const Branch& br = c.branches[l];
    int f = c.bus_index(br.from), t = c.bus_index(br.to);
    switch (br.status) {
      case BranchStatus::Off: break;
      case BranchStatus::On: {
        cplx y = series_admittance(br), half(0.0, br.b / 2.0);
        Yft(l, f) = y + half;
        Yft(l, t) = -y;
        Yft(E + l, f) = y;
        Yft(E + l, t) = -(y + half);
        break;
      }
      case BranchStatus::FromOnly: Yft(l, f) = open_end_shunt(br); break;
      case BranchStatus::ToOnly: Yft(E + l, t) = -open_end_shunt(br); break;
    }
  }
  return Yft;
}

// polar (v, theta) slots -> rectangular (v_R, v_I) slots, everything else untouched
inline Vec polar_to_rect(const Vec& x, const Dims& d) {
  Vec r = x;
  for (int i = 0; i < d.nb; ++i) {
    double v = x(d.v(i)), th = x(d.theta(i));
    r(d.v(i)) = v * std::cos(th);
    r(d.theta(i)) = v * std::sin(th);
  }
  return r;
}

inline Vec rect_to_polar(const Vec& r, const Dims& d) {
  Vec x = r;
  for (int i = 0; i < d.nb; ++i) {
    double a = r(d.v(i)), b = r(d.theta(i));
    x(d.v(i)) = std::hypot(a, b);
    x(d.theta(i)) = std::atan2(b, a);
  }
  return x;
}

inline Mat polar_to_rect_jacobian(const Vec& x, const Dims& d) {
  Mat J = Mat::Identity(d.n, d.n);
  for (int i = 0; i < d.nb; ++i) {
    double v = x(d.v(i)), th = x(d.theta(i));
    int iv = d.v(i), it = d.theta(i);
    J(iv, iv) = std::cos(th);
    J(iv, it) = -v * std::sin(th);
    J(it, iv) = std::sin(th);
    J(it, it) = v * std::cos(th);
  }
  return J;
}

struct MeasurementModel {
  std::vector<int> pmu_buses;  // bus ids
  std::vector<int> pmu_index;  // bus indices
  std::vector<int> rows;       // selected rows of Y_ft
  CMat Yft;
  Vec s_n;   // |N| selection vector
  Mat S_n;   // line selection, rows.size() x 2|E|
  Mat Ct;    // p x n_a, acting on [PG, QG, v_R, v_I]
  Mat C;     // p x n, acting on the rectangular state
  int p = 0;
  Dims dims;
  std::vector<std::string> channels;

  // Output map on the polar state: y = C * rect(x).
  Vec h(const Vec& x) const { return C * polar_to_rect(x, dims); }
  Mat h_jacobian(const Vec& x) const { return C * polar_to_rect_jacobian(x, dims); }
};

inline Mat assemble_ct(const MeasurementModel& m, int ng, int nb) {
  const int np = static_cast<int>(m.pmu_index.size());
  const int nl = static_cast<int>(m.rows.size());
  Mat Ct = Mat::Zero(2 * np + 2 * nl, 2 * ng + 2 * nb);
  for (int k = 0; k < np; ++k) {
    Ct(k, 2 * ng + m.pmu_index[k]) = 1.0;
    Ct(np + k, 2 * ng + nb + m.pmu_index[k]) = 1.0;
  }
  Mat G = m.S_n * m.Yft.real(), B = m.S_n * m.Yft.imag();
  Ct.block(2 * np, 2 * ng, nl, nb) = G;
  Ct.block(2 * np, 2 * ng + nb, nl, nb) = -B;
  Ct.block(2 * np + nl, 2 * ng, nl, nb) = B;
  Ct.block(2 * np + nl, 2 * ng + nb, nl, nb) = G;
  return Ct;
}

// PMU at bus j reads its voltage and the current on every incident branch.
inline MeasurementModel build_output_matrix(const NetworkCase& c, const NdaeSystem& sys,
                                            const std::vector<int>& pmu_buses) {
  require(!pmu_buses.empty(), "PMU bus list is empty");
  MeasurementModel m;
  m.dims = sys.dims;
  const int nb = sys.dims.nb, E = static_cast<int>(c.branches.size());
  m.pmu_buses = pmu_buses;
  m.s_n = Vec::Zero(nb);
  for (int id : pmu_buses) {
    require(c.has_bus(id), "PMU bus " + std::to_string(id) + " is not in the network");
    int i = c.bus_index(id);
    require(m.s_n(i) == 0, "PMU bus " + std::to_string(id) + " listed twice");
    m.pmu_index.push_back(i);
    m.s_n(i) = 1;
  }
  std::vector<std::string> cur;
  for (int id : pmu_buses) {
    for (int l = 0; l < E; ++l) {
      const Branch& br = c.branches[l];
      if (br.status == BranchStatus::Off) continue;
      if (br.from == id) {
        m.rows.push_back(l);
        cur.push_back("line" + std::to_string(id) + "_" + std::to_string(br.to));
      } else if (br.to == id) {
        m.rows.push_back(E + l);
        cur.push_back("line" + std::to_string(id) + "_" + std::to_string(br.from));
      }
    }
  }
  m.Yft = branch_admittance(c);
  m.S_n = Mat::Zero(m.rows.size(), 2 * E);
  for (size_t r = 0; r < m.rows.size(); ++r) m.S_n(r, m.rows[r]) = 1.0;
  m.Ct = assemble_ct(m, sys.dims.ng, nb);
  m.p = static_cast<int>(m.Ct.rows());
  m.C = Mat::Zero(m.p, sys.dims.n);
  m.C.rightCols(sys.dims.na) = m.Ct;
  for (int id : pmu_buses) m.channels.push_back("vR_bus" + std::to_string(id));
  for (int id : pmu_buses) m.channels.push_back("vI_bus" + std::to_string(id));
  for (const auto& s : cur) m.channels.push_back("iR_" + s);
  for (const auto& s : cur) m.channels.push_back("iI_" + s);
  return m;
}

// Same channel selection, admittances of another topology (the plant side of a fault).
inline MeasurementModel with_topology(const MeasurementModel& m, const NetworkCase& c) {
  MeasurementModel out = m;
  out.Yft = branch_admittance(c);
  out.Ct = assemble_ct(out, m.dims.ng, m.dims.nb);
  out.C.rightCols(m.dims.na) = out.Ct;
  return out;
}

// D_w routes only the measurement-noise block of w.
inline Mat noise_injection(const MeasurementModel& m, const NdaeSystem& sys) {
  Mat D = Mat::Zero(m.p, sys.disturbance_dim(m.p));
  D.block(0, sys.dims.nd, m.p, m.p).setIdentity();
  return D;
}

enum class NoiseKind { None, Gaussian, Cauchy, CauchyTan };

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "none") return NoiseKind::None;
  if (s == "gaussian") return NoiseKind::Gaussian;
  if (s == "cauchy") return NoiseKind::Cauchy;
  if (s == "cauchy_tan") return NoiseKind::CauchyTan;
  throw ValidationError("unknown noise kind '" + s + "'");
}

struct NoiseConfig {
  NoiseKind kind = NoiseKind::None;
  double variance = 1e-6;  // per measurement channel
  Vec channel_variance;    // optional per-channel override
  double cauchy_a = 0.0, cauchy_b = 1e-7;
  Vec process_std;         // per dynamic state, empty = no process noise
  uint64_t seed = 0;
};

namespace stream {
inline constexpr uint64_t kMeasurement = 1, kProcess = 2, kLoad = 3, kInit = 4;
}

inline void validate_noise(const NoiseConfig& cfg) {
  require(cfg.variance >= 0, "noise variance must be non-negative");
  require(cfg.cauchy_b >= 0, "Cauchy scale must be non-negative");
  if (cfg.channel_variance.size())
    require((cfg.channel_variance.array() >= 0).all(), "channel variances must be non-negative");
  if (cfg.process_std.size())
    require((cfg.process_std.array() >= 0).all(), "process std must be non-negative");
}

// Measurement noise for sample k. "cauchy" follows w = a + b*pi*(R - 0.5) exactly as
// the experiment prescribes; "cauchy_tan" is the heavy-tailed a + b*tan(pi*(R - 0.5)).
inline Vec measurement_noise(const NoiseConfig& cfg, int p, uint64_t k) {
  Vec w = Vec::Zero(p);
  NoiseStream s(cfg.seed, stream::kMeasurement);
  for (int i = 0; i < p; ++i) {
    uint64_t idx = k * static_cast<uint64_t>(p) + static_cast<uint64_t>(i);
    switch (cfg.kind) {
      case NoiseKind::None: break;
      case NoiseKind::Gaussian: {
        double var = cfg.channel_variance.size() ? cfg.channel_variance(i) : cfg.variance;
        w(i) = std::sqrt(var) * s.gaussian(idx);
        break;
      }
      case NoiseKind::Cauchy: w(i) = cfg.cauchy_a + cfg.cauchy_b * (kPi * (s.uniform(idx) - 0.5)); break;
      case NoiseKind::CauchyTan:
        w(i) = cfg.cauchy_a + cfg.cauchy_b * std::tan(kPi * (s.uniform(idx) - 0.5));
        break;
    }
  }
  return w;
}

inline Vec measure(const MeasurementModel& m, const Vec& x, const NoiseConfig& cfg, uint64_t k) {
  return m.h(x) + measurement_noise(cfg, m.p, k);
}

inline Vec draw_process_noise(const NoiseConfig& cfg, int nd, uint64_t k) {
  Vec w = Vec::Zero(nd);
  if (cfg.process_std.size() == 0) return w;
  require(cfg.process_std.size() == nd, "process_std length must equal the dynamic state count");
  NoiseStream s(cfg.seed, stream::kProcess);
  for (int i = 0; i < nd; ++i)
    w(i) = cfg.process_std(i) * s.gaussian(k * static_cast<uint64_t>(nd) + static_cast<uint64_t>(i));
  return w;
}

}  // namespace ndae
