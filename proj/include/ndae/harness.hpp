#pragma once

// Experiment configuration, synthesis artifacts, orchestration of the case studies,
// reports, thresholds and static SVG plots.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "ndae/baselines.hpp"
#include "ndae/daesim.hpp"
#include "ndae/synthesis.hpp"

namespace ndae {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------
// hashing

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericalError("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// object keys are kept sorted by nlohmann::json, so dump() is canonical
inline std::string json_hash(const json& j) { return sha256_hex(j.dump()); }

inline std::string system_hash(const NetworkCase& net, const std::vector<int>& pmu) {
  json j = {{"case", case_to_json(net)}, {"pmu", pmu}};
  return json_hash(j);
}

// ---------------------------------------------------------------------------------------
// configuration

namespace detail {

inline void merge_into(json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

inline void resolve_paths(json& j, const fs::path& dir) {
  for (const char* k : {"case", "machines", "thresholds_file"})
    if (j.contains(k) && j[k].is_string()) {
      fs::path p = j[k].get<std::string>();
      if (p.is_relative()) j[k] = (dir / p).lexically_normal().string();
    }
  if (j.contains("artifacts") && j["artifacts"].is_object())
    for (auto& [k, v] : j["artifacts"].items())
      if (v.is_string() && fs::path(v.get<std::string>()).is_relative())
        v = (dir / v.get<std::string>()).lexically_normal().string();
}

inline json load_config_rec(const fs::path& path, int depth) {
  require(depth < 16, "config include depth exceeded at " + path.string());
  json j = read_json_file(path.string());
  require(j.is_object(), "config " + path.string() + " must be a JSON object");
  const fs::path dir = path.parent_path();
  resolve_paths(j, dir);
  json out = json::object();
  if (j.contains("include")) {
    json inc = j["include"];
    if (inc.is_string()) inc = json::array({inc});
    require(inc.is_array(), "\"include\" must be a path or a list of paths");
    for (const auto& p : inc) {
      require(p.is_string(), "\"include\" entries must be strings");
      fs::path ip = p.get<std::string>();
      if (ip.is_relative()) ip = dir / ip;
      require(fs::exists(ip), "included config not found: " + ip.string());
      merge_into(out, load_config_rec(ip, depth + 1));
    }
    j.erase("include");
  }
  merge_into(out, j);
  return out;
}

template <class T>
T get_or(const json& j, const char* key, T def) {
  if (!j.contains(key) || j[key].is_null()) return def;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config field \"") + key + "\" has the wrong type");
  }
}

}  // namespace detail

// Resolved config document: includes merged, relative paths made absolute.
inline json load_config_json(const std::string& path) {
  require(fs::exists(path), "config not found: " + path);
  return detail::load_config_rec(fs::absolute(path), 0);
}

struct FaultConfig {
  int from = 0, to = 0;
  double t = 0;
  FaultKind kind = FaultKind::ShuntFault;
  double x_fault = 0.5, t_near = 0.05, t_remote = 0.2;
};

struct ExperimentConfig {
  json doc;  // resolved document the hash is taken over
  std::string hash;
  std::string name = "experiment";
  std::string case_path, machines_path;
  std::vector<int> pmu = {4, 6, 8};
  double renewable_fraction = 0.0;
  // synthesis
  double c1 = 1.0, c2 = 1.0, c3 = 1.0 / 3.0;
  SynthesisOptions synth;
  double mu_X = 0.1;
  // scenario
  double T = 50.0, dt = 1e-3;
  std::vector<FaultConfig> faults;
  NoiseKind noise = NoiseKind::None;
  double variance = 1e-6, cauchy_a = 0.0, cauchy_b = 1e-7;
  std::string process = "nominal";  // nominal | none
  double process_fraction = 0.05;
  double input_step = 0.0, input_step_time = 5.0;
  bool inputs_known = true, loads_known = true;
  double renewable_step = 0.0, load_step = 0.0, jitter = 0.0;
  bool balance = false;
  double init_deviation = 0.1;
  bool hinf = false;
  std::vector<double> sweep;   // disturbance levels; empty = single run
  double sweep_load_ratio = 1.0 / 3.0;
  // runs
  std::vector<std::string> estimators = {"ndae"};
  uint64_t seed = 1;
  int repetitions = 1;
  std::map<std::string, std::string> artifacts;
  bool allow_ablation = false;
  // outputs
  std::string thresholds_file, thresholds_key;
  int csv_every = 10, frames_every = 1;
  std::vector<std::string> plot_states;
  bool frames = true, svg = true;
};

inline bool is_ndae(const std::string& e) { return e == "ndae" || e == "ndae_pi"; }

inline void validate_estimator(const std::string& e) {
  require(e == "ndae" || e == "ndae_pi" || e == "lav_ekf" || e == "lav_ukf",
          "unknown estimator '" + e + "' (expected ndae, ndae_pi, lav_ekf or lav_ukf)");
}

inline FaultKind parse_fault_kind(const std::string& s) {
  if (s == "shunt") return FaultKind::ShuntFault;
  if (s == "line_outage") return FaultKind::LineOutage;
  throw ValidationError("unknown fault kind '" + s + "' (expected shunt or line_outage)");
}

inline ExperimentConfig parse_config(const json& doc) {
  using detail::get_or;
  ExperimentConfig c;
  c.doc = doc;
  c.hash = json_hash(doc);
  try {
    c.name = get_or<std::string>(doc, "name", c.name);
    require(doc.contains("case"), "config needs a \"case\" path");
    c.case_path = doc["case"].get<std::string>();
    c.machines_path = get_or<std::string>(doc, "machines", "");
    c.pmu = get_or<std::vector<int>>(doc, "pmu", c.pmu);
    c.renewable_fraction = get_or(doc, "renewable_fraction", 0.0);
    require(c.renewable_fraction >= 0, "renewable_fraction must be >= 0");
    if (doc.contains("synthesis")) {
      const json& s = doc["synthesis"];
      if (s.contains("weights")) {
        auto w = s["weights"].get<std::vector<double>>();
        require(w.size() == 3, "synthesis weights need exactly three entries");
        c.c1 = w[0];
        c.c2 = w[1];
        c.c3 = w[2];
      }
      c.synth.box_scale = get_or(s, "box_scale", c.synth.box_scale);
      c.synth.lipschitz_samples = get_or(s, "lipschitz_samples", c.synth.lipschitz_samples);
      c.synth.lipschitz_margin = get_or(s, "lipschitz_margin", c.synth.lipschitz_margin);
      c.synth.lipschitz_seed = get_or<uint64_t>(s, "lipschitz_seed", c.synth.lipschitz_seed);
      c.synth.lipschitz_mode = parse_lipschitz_mode(get_or<std::string>(s, "lipschitz_mode", "coupled"));
      c.mu_X = get_or(s, "mu_X", c.mu_X);
    }
    require(c.c1 > 0 && c.c2 > 0 && c.c3 > 0, "synthesis weights must be positive");
    if (doc.contains("scenario")) {
      const json& s = doc["scenario"];
      c.T = get_or(s, "T", c.T);
      c.dt = get_or(s, "dt", c.dt);
      if (s.contains("faults"))
        for (const json& f : s["faults"]) {
          FaultConfig fc;
          fc.from = f.at("from").get<int>();
          fc.to = f.at("to").get<int>();
          fc.t = f.at("t").get<double>();
          fc.kind = parse_fault_kind(get_or<std::string>(f, "kind", "shunt"));
          fc.x_fault = get_or(f, "x_fault", fc.x_fault);
          fc.t_near = get_or(f, "t_near", fc.t_near);
          fc.t_remote = get_or(f, "t_remote", fc.t_remote);
          c.faults.push_back(fc);
        }
      if (s.contains("noise")) {
        const json& n = s["noise"];
        c.noise = parse_noise_kind(get_or<std::string>(n, "kind", "none"));
        c.variance = get_or(n, "variance", c.variance);
        c.cauchy_a = get_or(n, "cauchy_a", c.cauchy_a);
        c.cauchy_b = get_or(n, "cauchy_b", c.cauchy_b);
        c.process = get_or<std::string>(n, "process", c.process);
        require(c.process == "nominal" || c.process == "none", "noise.process must be nominal or none");
        c.process_fraction = get_or(n, "process_fraction", c.process_fraction);
      }
      if (s.contains("input_step")) {
        c.input_step = get_or(s["input_step"], "fraction", 0.05);
        c.input_step_time = get_or(s["input_step"], "time", c.input_step_time);
      }
      c.inputs_known = get_or(s, "inputs_known", c.inputs_known);
      c.loads_known = get_or(s, "loads_known", c.loads_known);
      c.renewable_step = get_or(s, "renewable_step", c.renewable_step);
      c.load_step = get_or(s, "load_step", c.load_step);
      c.jitter = get_or(s, "jitter", c.jitter);
      c.balance = get_or(s, "balance", c.balance);
      c.init_deviation = get_or(s, "init_deviation", c.init_deviation);
      c.hinf = get_or(s, "hinf_check", c.hinf);
    }
    if (doc.contains("sweep")) {
      c.sweep = get_or<std::vector<double>>(doc["sweep"], "levels", {});
      c.sweep_load_ratio = get_or(doc["sweep"], "load_ratio", c.sweep_load_ratio);
      for (double l : c.sweep) require(l >= 0, "sweep levels must be >= 0");
    }
    c.estimators = get_or<std::vector<std::string>>(doc, "estimators", c.estimators);
    c.seed = get_or<uint64_t>(doc, "seed", c.seed);
    c.repetitions = get_or(doc, "repetitions", c.repetitions);
    c.allow_ablation = get_or(doc, "allow_ablation", c.allow_ablation);
    if (doc.contains("artifacts"))
      for (auto& [k, v] : doc["artifacts"].items()) c.artifacts[k] = v.get<std::string>();
    c.thresholds_file = get_or<std::string>(doc, "thresholds_file", "");
    c.thresholds_key = get_or<std::string>(doc, "thresholds", "");
    if (doc.contains("outputs")) {
      const json& o = doc["outputs"];
      c.csv_every = get_or(o, "csv_every", c.csv_every);
      c.frames_every = get_or(o, "frames_every", c.frames_every);
      c.plot_states = get_or<std::vector<std::string>>(o, "plot_states", {});
      c.frames = get_or(o, "frames", c.frames);
      c.svg = get_or(o, "svg", c.svg);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  require(c.repetitions >= 1, "repetitions must be >= 1");
  require(c.csv_every >= 1 && c.frames_every >= 1, "output decimation must be >= 1");
  require(!c.estimators.empty(), "no estimator selected");
  for (const auto& e : c.estimators) validate_estimator(e);
  if (!c.inputs_known && !c.allow_ablation)
    for (const auto& e : c.estimators)
      require(e != "ndae", "unknown-input scenario needs ndae_pi or a baseline (plain ndae only as an ablation)");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(load_config_json(path)); }

inline NetworkCase load_network(const ExperimentConfig& c) {
  NetworkCase net = load_case(c.case_path, c.machines_path);
  if (c.renewable_fraction > 0) add_renewables_proportional(net, c.renewable_fraction);
  return net;
}

inline PlantModel prepare_plant(const ExperimentConfig& c) { return make_plant(load_network(c), c.pmu); }

// ---------------------------------------------------------------------------------------
// synthesis artifact

inline constexpr int kArtifactVersion = 1;

inline json matrix_to_json(const Mat& M) {
  std::vector<double> data(M.size());
  for (int i = 0; i < M.rows(); ++i)
    for (int j = 0; j < M.cols(); ++j) data[i * M.cols() + j] = M(i, j);
  return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", data}};
}

inline Mat matrix_from_json(const json& j) {
  const int r = j.at("rows").get<int>(), c = j.at("cols").get<int>();
  auto data = j.at("data").get<std::vector<double>>();
  require(r >= 0 && c >= 0 && data.size() == static_cast<size_t>(r) * c, "matrix payload has the wrong size");
  Mat M(r, c);
  for (int i = 0; i < r; ++i)
    for (int k = 0; k < c; ++k) M(i, k) = data[i * c + k];
  return M;
}

struct SynthesisArtifact {
  std::string system_hash, config_hash;
  std::vector<int> pmu;
  bool pi = false;
  double c1 = 1, c2 = 1, c3 = 1.0 / 3.0;
  Vec g;
  ObserverGain gain;
  double seconds = 0;
};

inline json artifact_to_json(const SynthesisArtifact& a) {
  const ObserverGain& g = a.gain;
  json blocks = json::array();
  for (const auto& b : g.sdp.certificate.blocks) blocks.push_back({{"name", b.name}, {"min_eig", b.min_eig}});
  json j;
  j["format"] = "ndae-synthesis";
  j["version"] = kArtifactVersion;
  j["system_hash"] = a.system_hash;
  j["config_hash"] = a.config_hash;
  j["pmu"] = a.pmu;
  j["observer"] = a.pi ? "pi" : "plain";
  j["weights"] = {a.c1, a.c2, a.c3};
  j["G"] = std::vector<double>(a.g.data(), a.g.data() + a.g.size());
  j["gamma"] = g.gamma;
  j["eps"] = g.eps;
  j["kappa"] = g.kappa;
  j["objective"] = g.objective;
  j["certificate"] = {{"pass", g.sdp.certificate.pass},
                      {"worst_eig", g.sdp.certificate.worst},
                      {"worst_block", g.sdp.certificate.worst_block},
                      {"blocks", blocks},
                      {"zp_symmetry_error", g.symmetry_error},
                      {"zp_min_eig", g.zp_min_eig},
                      {"prelinear_max_eig", g.prelinear_max_eig},
                      {"cond_P", g.cond_P},
                      {"solver_status", status_name(g.sdp.status)},
                      {"solver_iterations", g.sdp.iterations}};
  j["L"] = matrix_to_json(g.L);
  j["synthesis_seconds"] = a.seconds;
  return j;
}

inline SynthesisArtifact artifact_from_json(const json& j) {
  SynthesisArtifact a;
  try {
    require(j.value("format", "") == "ndae-synthesis", "not a synthesis artifact");
    require(j.at("version").get<int>() == kArtifactVersion,
            "unsupported artifact version " + std::to_string(j.at("version").get<int>()));
    a.system_hash = j.at("system_hash").get<std::string>();
    a.config_hash = j.value("config_hash", "");
    a.pmu = j.at("pmu").get<std::vector<int>>();
    a.pi = j.at("observer").get<std::string>() == "pi";
    auto w = j.at("weights").get<std::vector<double>>();
    require(w.size() == 3, "artifact weights need three entries");
    a.c1 = w[0];
    a.c2 = w[1];
    a.c3 = w[2];
    auto g = j.at("G").get<std::vector<double>>();
    a.g = Eigen::Map<Vec>(g.data(), g.size());
    a.gain.g = a.g;
    a.gain.pi = a.pi;
    a.gain.gamma = j.at("gamma").get<double>();
    a.gain.eps = j.value("eps", 0.0);
    a.gain.kappa = j.value("kappa", 0.0);
    a.gain.objective = j.value("objective", 0.0);
    const json& c = j.at("certificate");
    a.gain.sdp.certificate.pass = c.at("pass").get<bool>();
    a.gain.sdp.certificate.worst = c.at("worst_eig").get<double>();
    a.gain.sdp.certificate.worst_block = c.value("worst_block", "");
    a.gain.symmetry_error = c.value("zp_symmetry_error", 0.0);
    a.gain.zp_min_eig = c.value("zp_min_eig", 0.0);
    a.gain.worst_eig = a.gain.sdp.certificate.worst;
    a.gain.L = matrix_from_json(j.at("L"));
    a.seconds = j.value("synthesis_seconds", 0.0);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed synthesis artifact: ") + e.what());
  }
  return a;
}

// L_P / L_I split for a known state dimension.
inline ObserverGain gain_for(const SynthesisArtifact& a, const PlantModel& pm) {
  ObserverGain g = a.gain;
  const int n = pm.sys.dims.n, nu = pm.sys.dims.nu, p = pm.meas.p;
  require(g.L.cols() == p && g.L.rows() == (a.pi ? n + nu : n), "artifact gain does not fit this system");
  g.L_P = g.L.topRows(n);
  if (a.pi) g.L_I = g.L.bottomRows(nu);
  return g;
}

inline void check_artifact(const SynthesisArtifact& a, const PlantModel& pm, bool pi) {
  if (a.system_hash != system_hash(pm.net, pm.meas.pmu_buses))
    throw ValidationError("artifact was synthesized for a different system (hash mismatch)");
  require(a.pi == pi, std::string("artifact holds a ") + (a.pi ? "PI" : "plain") + " gain, expected " +
                          (pi ? "PI" : "plain"));
}

inline void write_text_file(const std::string& path, const std::string& content) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw ValidationError("cannot write " + path);
  o << content;
  if (!o) throw ValidationError("write failed: " + path);
}

inline void write_artifact(const std::string& path, const SynthesisArtifact& a) {
  write_text_file(path, artifact_to_json(a).dump(1) + "\n");
}

inline SynthesisArtifact read_artifact(const std::string& path) { return artifact_from_json(read_json_file(path)); }

inline SynthesisConfig synthesis_config(const ExperimentConfig& c) {
  SynthesisConfig s;
  s.c1 = c.c1;
  s.c2 = c.c2;
  s.c3 = c.c3;
  s.mu_X = c.mu_X;
  return s;
}

inline SynthesisArtifact run_synthesis(const PlantModel& pm, const ExperimentConfig& c, bool pi) {
  auto t0 = std::chrono::steady_clock::now();
  SynthesisModel m = make_synthesis_model(pm.sys, pm.meas, pm.eq.x, c.synth);
  if (pi) m = augment_pi(m, pm.sys.Bu);
  SynthesisArtifact a;
  a.gain = synthesize(m, synthesis_config(c));
  a.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  a.system_hash = system_hash(pm.net, pm.meas.pmu_buses);
  a.config_hash = c.hash;
  a.pmu = pm.meas.pmu_buses;
  a.pi = pi;
  a.c1 = c.c1;
  a.c2 = c.c2;
  a.c3 = c.c3;
  a.g = m.g;
  return a;
}

// ---------------------------------------------------------------------------------------
// scenarios

// T_M moved between machines with zero sum plus the same fraction on every field voltage
inline Vec zero_sum_input_step(const PlantModel& pm, double frac) {
  const int ng = pm.sys.dims.ng;
  Vec du = frac * pm.eq.u;
  const double mean = pm.eq.u.head(ng).mean();
  for (int k = 0; k < ng; ++k) du(k) = frac * (pm.eq.u(k) - mean);
  return du;
}

// level < 0: the configured steps; otherwise a sweep level
inline Scenario build_scenario(const ExperimentConfig& c, const PlantModel& pm, uint64_t seed, double level = -1) {
  Scenario sc;
  sc.name = c.name;
  sc.T = c.T;
  sc.dt = c.dt;
  sc.seed = seed;
  for (const FaultConfig& f : c.faults) {
    auto ev = staged_fault(pm.net, {f.from, f.to, f.t, f.t_near, f.t_remote, f.kind, f.x_fault});
    sc.events.insert(sc.events.end(), ev.begin(), ev.end());
  }
  if (c.input_step > 0) {
    sc.du = zero_sum_input_step(pm, c.input_step);
    sc.du_time = c.input_step_time;
  }
  sc.renewable_step = level >= 0 ? level : c.renewable_step;
  sc.load_step = level >= 0 ? level * c.sweep_load_ratio : c.load_step;
  sc.jitter = c.jitter;
  if (c.balance) {
    require(c.input_step == 0, "balance and input_step cannot be combined");
    sc.du = balancing_input(pm, sc);
    sc.du_time = 0;
  }
  sc.observer_knows_inputs = c.inputs_known;
  sc.observer_knows_loads = c.loads_known;
  sc.init_deviation = c.init_deviation;
  validate_scenario(sc, pm.sys, pm.net);
  // process noise scale from the noise-free run of the same scenario
  if (c.noise != NoiseKind::None && c.process == "nominal") {
    Scenario quiet = sc;
    quiet.jitter = 0;
    Trajectory nom = integrate_plant(pm, quiet);
    sc.noise.process_std = process_std_from_nominal(nom, pm.sys.dims.nd, c.process_fraction);
  }
  sc.noise.kind = c.noise;
  sc.noise.variance = c.variance;
  sc.noise.cauchy_a = c.cauchy_a;
  sc.noise.cauchy_b = c.cauchy_b;
  sc.noise.seed = seed;
  validate_scenario(sc, pm.sys, pm.net);
  return sc;
}

// ---------------------------------------------------------------------------------------
// runs

struct EstimateRun {
  std::string estimator;
  uint64_t seed = 0;
  double level = -1;
  Trajectory est;
  ErrorMetrics metrics;
  double rmse = 0, rmse_dynamic = 0, final_error = 0, initial_error = 0;
  double peak_after = 0;  // max ||e|| from the first event or input step on
  double online_seconds = 0;
  Vec du_hat;             // PI: last integral state
  std::string warning;
  bool has_hinf = false;
  HinfReport hinf;
};

inline double first_disturbance_time(const Scenario& sc) {
  double t = sc.T;
  for (const auto& e : sc.events) t = std::min(t, e.t);
  if (sc.du.size() && sc.du_time > 0) t = std::min(t, sc.du_time);
  return t;
}

inline EstimateRun run_estimator(const PlantModel& pm, const std::string& est, const ObserverGain* gain,
                                 const Trajectory& plant, const Scenario& sc, bool hinf = false) {
  validate_estimator(est);
  EstimateRun r;
  r.estimator = est;
  r.seed = sc.seed;
  if (is_ndae(est)) {
    require(gain != nullptr, "estimator " + est + " needs a synthesized gain");
    require(gain->pi == (est == "ndae_pi"), "gain type does not match estimator " + est);
    r.est = run_observer(pm, *gain, plant, sc);
    r.online_seconds = r.est.seconds;
    if (gain->pi && r.est.DU.cols()) r.du_hat = r.est.DU.col(r.est.DU.cols() - 1);
    if (hinf) {
      ObserverOptions o;
      o.exact_start = true;
      Trajectory z = run_observer(pm, *gain, plant, sc, o);
      r.hinf = hinf_check(plant, z, Mat(), gain->gamma);
      r.has_hinf = true;
    }
  } else {
    TwoStageOptions o;
    o.filter = est == "lav_ekf" ? FilterKind::Ekf : FilterKind::Ukf;
    o.dt = sc.dt;
    TwoStageResult t = two_stage_run(pm, plant, sc, o);
    r.est = std::move(t.est);
    r.online_seconds = t.seconds;
    r.warning = t.warning;
  }
  r.metrics = error_metrics(plant, r.est);
  r.rmse = r.metrics.rmse;
  r.rmse_dynamic = r.metrics.per_state.head(pm.sys.dims.nd).sum();
  r.initial_error = r.metrics.norm(0);
  r.final_error = r.metrics.norm(r.metrics.norm.size() - 1);
  const int k0 = static_cast<int>(std::llround(first_disturbance_time(sc) / sc.dt));
  for (int k = k0; k < r.metrics.norm.size(); ++k) r.peak_after = std::max(r.peak_after, r.metrics.norm(k));
  return r;
}

inline json run_to_json(const EstimateRun& r) {
  json j = {{"estimator", r.estimator},       {"seed", r.seed},
            {"rmse", r.rmse},                 {"rmse_dynamic", r.rmse_dynamic},
            {"initial_error", r.initial_error}, {"final_error", r.final_error},
            {"peak_error_after_disturbance", r.peak_after}, {"online_seconds", r.online_seconds}};
  if (r.level >= 0) j["level"] = r.level;
  if (r.du_hat.size()) j["du_hat"] = std::vector<double>(r.du_hat.data(), r.du_hat.data() + r.du_hat.size());
  if (!r.warning.empty()) j["warning"] = r.warning;
  if (r.has_hinf)
    j["hinf"] = {{"error_energy", r.hinf.error_energy}, {"disturbance_energy", r.hinf.disturbance_energy},
                 {"ratio", r.hinf.ratio},               {"gamma", r.hinf.gamma},
                 {"slack", r.hinf.slack},               {"pass", r.hinf.pass}};
  return j;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline json aggregate(const std::vector<EstimateRun>& runs) {
  std::map<std::string, std::vector<double>> by;
  for (const auto& r : runs) by[r.estimator + (r.level >= 0 ? "@" + std::to_string(r.level) : "")].push_back(r.rmse);
  json out = json::object();
  for (auto& [k, v] : by) {
    double mean = 0, var = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
    out[k] = {{"runs", v.size()}, {"rmse_mean", mean}, {"rmse_std", sd}, {"rmse_median", median(v)}};
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// thresholds

struct ThresholdCheck {
  std::string name;
  double value = 0, lo = -INFINITY, hi = INFINITY;
  bool pass = false;
};

inline json load_thresholds(const std::string& path) {
  json t = read_json_file(path);
  require(t.is_object() && t.value("version", 0) == 1, "thresholds file " + path + " is not version 1");
  return t;
}

// Checks the aggregate of a report against one named entry of the thresholds file.
inline std::vector<ThresholdCheck> evaluate_thresholds(const json& report, const json& thresholds,
                                                       const std::string& key) {
  std::vector<ThresholdCheck> out;
  require(thresholds.contains(key), "thresholds file has no entry '" + key + "'");
  const json& t = thresholds[key];
  const std::string est = t.value("estimator", "ndae");
  const std::string stat = t.value("statistic", "rmse_median");
  const json& agg = report.at("aggregate");
  bool found = false;
  for (auto& [k, v] : agg.items()) {
    if (k != est && k.rfind(est + "@", 0) != 0) continue;
    found = true;
    ThresholdCheck c;
    c.name = k + " " + stat;
    c.value = v.at(stat).get<double>();
    if (t.contains("rmse_min")) c.lo = t["rmse_min"].get<double>();
    if (t.contains("rmse_max")) c.hi = t["rmse_max"].get<double>();
    c.pass = c.value >= c.lo && c.value <= c.hi;
    out.push_back(c);
  }
  require(found, "report has no runs of estimator '" + est + "' for threshold '" + key + "'");
  return out;
}

// ---------------------------------------------------------------------------------------
// SVG

struct Series {
  std::string name;
  Vec y;
};

namespace detail {

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    switch (ch) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += ch;
    }
  }
  return o;
}

}  // namespace detail

// Static line plot; no timestamps so reruns give identical files.
inline std::string svg_plot(const std::string& title, const Vec& t, const std::vector<Series>& series,
                            const std::string& tag, bool log_y = false, int max_points = 1500) {
  require(!series.empty(), "nothing to plot");
  for (const auto& s : series) require(s.y.size() == t.size(), "series '" + s.name + "' does not match the time grid");
  const double W = 800, H = 420, L = 70, R = 170, Tm = 40, B = 50;
  const double pw = W - L - R, ph = H - Tm - B;
  auto tr = [&](double v) { return log_y ? std::log10(std::max(v, 1e-300)) : v; };
  double x0 = t(0), x1 = t(t.size() - 1);
  if (x1 <= x0) x1 = x0 + 1;
  double y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (int k = 0; k < s.y.size(); ++k)
      if (std::isfinite(s.y(k)) && (!log_y || s.y(k) > 0)) {
        y0 = std::min(y0, tr(s.y(k)));
        y1 = std::max(y1, tr(s.y(k)));
      }
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + pw * (x - x0) / (x1 - x0); };
  auto py = [&](double y) { return Tm + ph * (1.0 - (tr(y) - y0) / (y1 - y0)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << " " << H << "\">\n";
  os << "<desc>config " << detail::xml_escape(tag) << "</desc>\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << detail::xml_escape(title)
     << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << Tm << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
    double X = px(xv), Y = Tm + ph * (1.0 - i / 5.0);
    os << "<line x1=\"" << X << "\" y1=\"" << Tm + ph << "\" x2=\"" << X << "\" y2=\"" << Tm + ph + 5
       << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << X << "\" y=\"" << Tm + ph + 20 << "\" font-family=\"sans-serif\" font-size=\"11\" "
       << "text-anchor=\"middle\">" << detail::fmt(xv) << "</text>\n";
    os << "<line x1=\"" << L - 5 << "\" y1=\"" << Y << "\" x2=\"" << L << "\" y2=\"" << Y << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << Y + 4 << "\" font-family=\"sans-serif\" font-size=\"11\" "
       << "text-anchor=\"end\">" << (log_y ? "1e" + detail::fmt(yv, 3) : detail::fmt(yv)) << "</text>\n";
  }
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10 << "\" font-family=\"sans-serif\" font-size=\"12\" "
     << "text-anchor=\"middle\">t [s]</text>\n";
  const int stride = std::max<int>(1, static_cast<int>((t.size() + max_points - 1) / max_points));
  for (size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 8];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.2\" points=\"";
    bool first = true;
    for (int k = 0; k < t.size(); k += stride) {
      double v = series[s].y(k);
      if (!std::isfinite(v) || (log_y && v <= 0)) continue;
      os << (first ? "" : " ") << px(t(k)) << "," << py(v);
      first = false;
    }
    os << "\"/>\n";
    double ly = Tm + 14 + 18.0 * s;
    os << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << L + pw + 32 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << L + pw + 38 << "\" y=\"" << ly << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << detail::xml_escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------------------
// experiment orchestration

struct ExperimentResult {
  json report;
  std::vector<EstimateRun> runs;
  std::vector<std::string> files;
};

inline std::string output_root(const std::string& override_dir = "") {
  if (!override_dir.empty()) return override_dir;
  if (const char* e = std::getenv("NDAE_OUTPUT_ROOT"); e && *e) return e;
  return "ndae_out";
}

inline std::vector<int> state_indices(const NdaeSystem& sys, const std::vector<std::string>& names) {
  std::vector<std::string> all = sys.state_names();
  std::vector<int> out;
  for (const auto& n : names) {
    auto it = std::find(all.begin(), all.end(), n);
    require(it != all.end(), "unknown state name '" + n + "'");
    out.push_back(static_cast<int>(it - all.begin()));
  }
  return out;
}

inline std::vector<int> all_states(const NdaeSystem& sys) {
  std::vector<int> v(sys.dims.n);
  for (int i = 0; i < sys.dims.n; ++i) v[i] = i;
  return v;
}

// Gains for the NDAE estimators of a config: from the listed or given artifact files,
// otherwise synthesized here (and written next to the outputs).
inline std::map<std::string, SynthesisArtifact> obtain_artifacts(const ExperimentConfig& c, const PlantModel& pm,
                                                                 const std::string& out_dir,
                                                                 const std::string& artifact_override = "") {
  std::map<std::string, SynthesisArtifact> out;
  for (const auto& e : c.estimators) {
    if (!is_ndae(e) || out.count(e)) continue;
    const bool pi = e == "ndae_pi";
    std::string path;
    if (!artifact_override.empty()) {
      SynthesisArtifact a = read_artifact(artifact_override);
      if (a.pi == pi) path = artifact_override;
    }
    if (path.empty() && c.artifacts.count(e)) path = c.artifacts.at(e);
    SynthesisArtifact a;
    if (!path.empty()) {
      a = read_artifact(path);
    } else {
      a = run_synthesis(pm, c, pi);
      if (!out_dir.empty()) write_artifact(out_dir + "/artifact_" + e + ".json", a);
    }
    check_artifact(a, pm, pi);
    out[e] = a;
  }
  return out;
}

inline json report_header(const ExperimentConfig& c, const PlantModel& pm) {
  return {{"config_hash", c.hash},
          {"config_name", c.name},
          {"system_hash", system_hash(pm.net, pm.meas.pmu_buses)},
          {"pmu", pm.meas.pmu_buses},
          {"estimators", c.estimators},
          {"timing_note",
           "seconds are wall-clock on this machine; synthesis is offline and listed separately from the online "
           "estimator time; only the ordering is meaningful across machines"}};
}

// Runs plant and estimators for every seed (and sweep level); writes trajectories, plots
// and report.json under out_dir when it is non-empty.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::string& out_dir,
                                       const std::string& artifact_override = "") {
  ExperimentResult res;
  PlantModel pm = prepare_plant(c);
  auto arts = obtain_artifacts(c, pm, out_dir, artifact_override);
  json timing = json::object();
  for (auto& [e, a] : arts) timing["synthesis_seconds_" + e] = a.seconds;
  double plant_seconds = 0;

  std::vector<double> levels = c.sweep.empty() ? std::vector<double>{-1.0} : c.sweep;
  const std::vector<int> states = all_states(pm.sys);
  const std::vector<int> plot = c.plot_states.empty() ? std::vector<int>{pm.sys.dims.delta(0), pm.sys.dims.omega(0)}
                                                      : state_indices(pm.sys, c.plot_states);
  auto emit = [&](const std::string& rel, const std::string& content) {
    if (out_dir.empty()) return;
    write_text_file(out_dir + "/" + rel, content);
    res.files.push_back(rel);
  };
  const std::string tag = "config " + c.hash;

  for (double level : levels)
    for (int rep = 0; rep < c.repetitions; ++rep) {
      const uint64_t seed = c.seed + rep;
      Scenario sc = build_scenario(c, pm, seed, level);
      Trajectory plant = integrate_plant(pm, sc);
      plant_seconds += plant.seconds;
      std::string dir = "seed" + std::to_string(seed);
      if (level >= 0) dir = "level" + detail::fmt(100 * level, 6) + "/" + dir;
      emit(dir + "/plant.csv", trajectory_csv(plant, pm.meas.channels, states, true, c.csv_every, tag));
      if (c.frames) emit(dir + "/plant.ndtf", trajectory_frames(plant, sc.dt, c.frames_every, c.hash));
      std::vector<Series> err;
      for (const auto& e : c.estimators) {
        const ObserverGain* gp = nullptr;
        ObserverGain g;
        if (is_ndae(e)) {
          g = gain_for(arts.at(e), pm);
          gp = &g;
        }
        EstimateRun r = run_estimator(pm, e, gp, plant, sc, c.hinf && is_ndae(e));
        r.level = level;
        emit(dir + "/estimate_" + e + ".csv", trajectory_csv(r.est, {}, states, false, c.csv_every, tag));
        if (c.svg) {
          std::vector<Series> ch;
          for (int i : plot) {
            ch.push_back({plant.names[i] + " plant", plant.X.row(i).transpose()});
            ch.push_back({plant.names[i] + " " + e, r.est.X.row(i).transpose()});
          }
          emit(dir + "/states_" + e + ".svg", svg_plot(c.name + ": states, " + e, plant.t, ch, c.hash));
        }
        err.push_back({e, r.metrics.norm});
        res.runs.push_back(std::move(r));
      }
      if (c.svg) emit(dir + "/error_norm.svg", svg_plot(c.name + ": ||e(t)||", plant.t, err, c.hash, true));
    }

  json runs = json::array();
  for (const auto& r : res.runs) runs.push_back(run_to_json(r));
  json rep = report_header(c, pm);
  timing["plant_seconds_total"] = plant_seconds;
  rep["timing"] = timing;
  rep["runs"] = runs;
  rep["aggregate"] = aggregate(res.runs);
  if (!c.thresholds_key.empty() && !c.thresholds_file.empty()) {
    json th = load_thresholds(c.thresholds_file);
    json checks = json::array();
    bool all = true;
    for (const auto& k : evaluate_thresholds(rep, th, c.thresholds_key)) {
      checks.push_back({{"name", k.name}, {"value", k.value}, {"min", k.lo}, {"max", k.hi}, {"pass", k.pass}});
      all = all && k.pass;
    }
    rep["thresholds"] = {{"key", c.thresholds_key}, {"checks", checks}, {"pass", all}};
  }
  res.report = rep;
  emit("report.json", rep.dump(2) + "\n");
  return res;
}

// One row per estimator, mean over seeds.
inline std::string comparison_csv(const ExperimentResult& r, const std::map<std::string, double>& synthesis_seconds,
                                  const std::string& hash) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "# config " << hash << "\n";
  os << "estimator,runs,rmse_mean,rmse_dynamic_mean,peak_error_after_disturbance,online_seconds_mean,"
        "offline_synthesis_seconds\n";
  std::vector<std::string> order;
  for (const auto& x : r.runs)
    if (std::find(order.begin(), order.end(), x.estimator) == order.end()) order.push_back(x.estimator);
  for (const auto& e : order) {
    double rm = 0, rd = 0, pk = 0, on = 0;
    int n = 0;
    for (const auto& x : r.runs)
      if (x.estimator == e) {
        rm += x.rmse;
        rd += x.rmse_dynamic;
        pk += x.peak_after;
        on += x.online_seconds;
        ++n;
      }
    os << e << "," << n << "," << rm / n << "," << rd / n << "," << pk / n << "," << on / n << ","
       << (synthesis_seconds.count(e) ? synthesis_seconds.at(e) : 0.0) << "\n";
  }
  return os.str();
}

inline std::string comparison_text(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  std::vector<size_t> w;
  for (const auto& r : rows)
    for (size_t i = 0; i < r.size(); ++i) {
      if (w.size() <= i) w.push_back(0);
      w[i] = std::max(w[i], r[i].size());
    }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) os << std::left << std::setw(static_cast<int>(w[i]) + 2) << r[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace ndae
