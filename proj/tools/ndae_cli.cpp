// ndae: command-line front end for synthesis, simulation, estimation and reports.
//
// exit codes: 0 ok, 1 numerical failure, 2 validation error

#include <iostream>

#include <CLI11.hpp>

#include "ndae/harness.hpp"

using namespace ndae;

namespace {

// A config assembled from flags when no --config file is given.
json config_from_flags(const std::string& case_path, const std::string& machines, const std::vector<int>& pmu,
                       const std::vector<double>& weights, double renewables) {
  json j;
  j["name"] = fs::path(case_path).stem().string();
  j["case"] = fs::absolute(case_path).lexically_normal().string();
  std::string m = machines;
  if (m.empty()) {
    fs::path guess = fs::path(case_path).parent_path() / (fs::path(case_path).stem().string() + "_machines.json");
    if (fs::exists(guess)) m = guess.string();
  }
  if (!m.empty()) j["machines"] = fs::absolute(m).lexically_normal().string();
  if (!pmu.empty()) j["pmu"] = pmu;
  if (!weights.empty()) j["synthesis"]["weights"] = weights;
  if (renewables > 0) j["renewable_fraction"] = renewables;
  return j;
}

struct Common {
  std::string config, case_path, machines, out, artifact;
  std::vector<int> pmu;
  std::vector<double> weights;
  std::vector<std::string> estimators;
  double renewables = 0;
  int repetitions = 0;
  int64_t seed = -1;
};

ExperimentConfig resolve(const Common& o) {
  json doc;
  if (!o.config.empty()) {
    doc = load_config_json(o.config);
  } else {
    if (o.case_path.empty()) throw ValidationError("either --config or --case is required");
    doc = config_from_flags(o.case_path, o.machines, o.pmu, o.weights, o.renewables);
  }
  if (!o.config.empty()) {
    if (!o.pmu.empty()) doc["pmu"] = o.pmu;
    if (!o.weights.empty()) doc["synthesis"]["weights"] = o.weights;
  }
  if (!o.estimators.empty()) doc["estimators"] = o.estimators;
  if (o.repetitions > 0) doc["repetitions"] = o.repetitions;
  if (o.seed >= 0) doc["seed"] = o.seed;
  return parse_config(doc);
}

std::string out_dir(const Common& o, const ExperimentConfig& c) {
  return o.out.empty() ? output_root() + "/" + c.name : o.out;
}

void print_runs(const ExperimentResult& r) {
  for (const auto& x : r.runs) {
    std::cout << std::left << std::setw(9) << x.estimator << " seed " << x.seed;
    if (x.level >= 0) std::cout << " level " << 100 * x.level << "%";
    std::cout << "  rmse " << x.rmse << "  final |e| " << x.final_error << "  online " << std::setprecision(3)
              << x.online_seconds << " s" << std::setprecision(6);
    if (x.has_hinf) std::cout << "  hinf ratio " << x.hinf.ratio << (x.hinf.pass ? " (pass)" : " (FAIL)");
    std::cout << "\n";
    if (!x.warning.empty()) std::cout << "  warning: " << x.warning << "\n";
  }
}

int cmd_synthesize(const Common& o, bool pi) {
  ExperimentConfig c = resolve(o);
  PlantModel pm = prepare_plant(c);
  SynthesisArtifact a = run_synthesis(pm, c, pi);
  std::string path = o.out.empty() ? output_root() + "/" + c.name + "/artifact_" + (pi ? "ndae_pi" : "ndae") + ".json"
                                   : o.out;
  write_artifact(path, a);
  const ObserverGain& g = a.gain;
  std::cout << "observer        " << (pi ? "PI" : "plain") << "\n"
            << "gamma           " << g.gamma << "\n"
            << "certificate     " << (g.sdp.certificate.pass ? "pass" : "FAIL") << " (worst eig "
            << g.sdp.certificate.worst << ", " << g.sdp.certificate.worst_block << ")\n"
            << "Z^T P symmetry  " << g.symmetry_error << ", min eig " << g.zp_min_eig << "\n"
            << "|L|_F           " << g.L.norm() << "\n"
            << "seconds         " << a.seconds << "\n"
            << "artifact        " << path << "\n";
  if (!g.sdp.certificate.pass) throw NumericalError("certificate check failed");
  return 0;
}

int cmd_simulate(const Common& o) {
  ExperimentConfig c = resolve(o);
  std::string dir = out_dir(o, c);
  ExperimentResult r = run_experiment(c, dir, o.artifact);
  print_runs(r);
  std::cout << "report          " << dir << "/report.json\n";
  if (r.report.contains("thresholds"))
    std::cout << "thresholds      " << (r.report["thresholds"]["pass"].get<bool>() ? "pass" : "FAIL") << "\n";
  return 0;
}

int cmd_estimate(const Common& o, const std::string& traj) {
  ExperimentConfig c = resolve(o);
  PlantModel pm = prepare_plant(c);
  FrameHeader h;
  Trajectory plant = read_frames(read_text_file(traj), &h);
  require(static_cast<int>(h.n) == pm.sys.dims.n && static_cast<int>(h.p) == pm.meas.p,
          "trajectory dimensions do not match the configured system");
  require(std::abs(h.dt - c.dt) <= 1e-12, "trajectory must be recorded at the scenario step (frames_every = 1)");
  plant.names = pm.sys.state_names();
  Scenario sc = build_scenario(c, pm, c.seed);
  require(plant.samples() == scenario_steps(sc) + 1, "trajectory length does not match the scenario duration");
  if (h.tag != c.hash) std::cerr << "note: trajectory was recorded under config " << h.tag << "\n";
  auto arts = obtain_artifacts(c, pm, "", o.artifact);
  std::string dir = out_dir(o, c);
  json runs = json::array();
  std::vector<EstimateRun> all;
  for (const auto& e : c.estimators) {
    ObserverGain g;
    if (is_ndae(e)) g = gain_for(arts.at(e), pm);
    EstimateRun r = run_estimator(pm, e, is_ndae(e) ? &g : nullptr, plant, sc);
    write_text_file(dir + "/estimate_" + e + ".csv",
                    trajectory_csv(r.est, {}, all_states(pm.sys), false, c.csv_every, "config " + c.hash));
    runs.push_back(run_to_json(r));
    all.push_back(std::move(r));
  }
  json rep = report_header(c, pm);
  rep["runs"] = runs;
  rep["aggregate"] = aggregate(all);
  rep["trajectory"] = traj;
  write_text_file(dir + "/estimate_report.json", rep.dump(2) + "\n");
  ExperimentResult shown;
  shown.runs = std::move(all);
  print_runs(shown);
  return 0;
}

int cmd_compare(const Common& o) {
  ExperimentConfig c = resolve(o);
  std::string dir = out_dir(o, c);
  ExperimentResult r = run_experiment(c, dir, o.artifact);
  std::map<std::string, double> syn;
  for (const auto& e : c.estimators)
    if (r.report["timing"].contains("synthesis_seconds_" + e)) syn[e] = r.report["timing"]["synthesis_seconds_" + e];
  std::string csv = comparison_csv(r, syn, c.hash);
  std::string txt = comparison_text(csv);
  write_text_file(dir + "/comparison.csv", csv);
  write_text_file(dir + "/comparison.txt", "config " + c.hash + "\n" + txt);
  std::cout << txt;
  std::cout << "timings are wall-clock on this machine; synthesis is offline and not part of the online time\n";
  return 0;
}

int cmd_report(const std::string& input, const std::string& thresholds, const std::string& key, bool strict) {
  json rep = read_json_file(input);
  require(rep.contains("aggregate") && rep.contains("config_hash"), input + " is not an ndae report");
  std::cout << "config  " << rep["config_hash"].get<std::string>() << "\n";
  std::cout << "system  " << rep.value("system_hash", "?") << "\n";
  for (auto& [k, v] : rep["aggregate"].items())
    std::cout << std::left << std::setw(16) << k << " runs " << v["runs"] << "  rmse mean " << v["rmse_mean"]
              << "  std " << v["rmse_std"] << "  median " << v["rmse_median"] << "\n";
  if (rep.contains("timing"))
    for (auto& [k, v] : rep["timing"].items()) std::cout << std::left << std::setw(28) << k << " " << v << "\n";
  bool pass = true;
  if (!thresholds.empty()) {
    require(!key.empty(), "--key is required with --thresholds");
    for (const auto& c : evaluate_thresholds(rep, load_thresholds(thresholds), key)) {
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " = " << c.value << " in [" << c.lo << ", " << c.hi
                << "]\n";
      pass = pass && c.pass;
    }
  } else if (rep.contains("thresholds")) {
    for (const auto& c : rep["thresholds"]["checks"])
      std::cout << (c["pass"].get<bool>() ? "PASS " : "FAIL ") << c["name"].get<std::string>() << " = "
                << c["value"] << "\n";
    pass = rep["thresholds"]["pass"].get<bool>();
  }
  return strict && !pass ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NDAE observer synthesis and dynamic state estimation for power networks"};
  app.require_subcommand(1);
  app.footer("exit codes: 0 ok, 1 numerical failure, 2 validation error\n"
             "output root: $NDAE_OUTPUT_ROOT (default ./ndae_out) unless --out is given");
  Common o;
  bool pi = false, strict = false;
  std::string traj, input, thresholds, key;

  auto add_common = [&](CLI::App* s, bool scenario_flags) {
    s->add_option("--config", o.config, "experiment config (JSON, may include others)");
    s->add_option("--case", o.case_path, "network case (MATPOWER .m or JSON) when no config is given");
    s->add_option("--machines", o.machines, "machine data JSON for a MATPOWER case");
    s->add_option("--pmu", o.pmu, "PMU bus ids, comma separated")->delimiter(',');
    s->add_option("--weights", o.weights, "objective weights c1,c2,c3")->delimiter(',')->expected(3);
    s->add_option("--renewables", o.renewables, "renewable share of each load (fraction)");
    s->add_option("--out", o.out, "output path");
    s->add_option("--artifact", o.artifact, "synthesis artifact to use instead of synthesizing");
    if (scenario_flags) {
      s->add_option("--estimator", o.estimators, "estimators: ndae, ndae_pi, lav_ekf, lav_ukf")->delimiter(',');
      s->add_option("--repetitions", o.repetitions, "number of seeds");
      s->add_option("--seed", o.seed, "first seed");
    }
  };
  auto* syn = app.add_subcommand("synthesize", "solve the observer synthesis SDP and write an artifact");
  add_common(syn, false);
  syn->add_flag("--pi", pi, "PI observer (augmented with the input-deviation integral)");
  auto* sim = app.add_subcommand("simulate", "simulate the plant and run the configured estimators");
  add_common(sim, true);
  auto* est = app.add_subcommand("estimate", "run estimators on a recorded plant trajectory (.ndtf)");
  add_common(est, true);
  est->add_option("--trajectory", traj, "binary frame file from simulate")->required();
  auto* cmp = app.add_subcommand("compare", "side-by-side RMSE and timing table");
  add_common(cmp, true);
  auto* rep = app.add_subcommand("report", "summarize a report and check it against thresholds");
  rep->add_option("--input", input, "report.json")->required();
  rep->add_option("--thresholds", thresholds, "thresholds file");
  rep->add_option("--key", key, "entry of the thresholds file");
  rep->add_flag("--strict", strict, "exit 1 when a threshold fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*syn) return cmd_synthesize(o, pi);
    if (*sim) return cmd_simulate(o);
    if (*est) return cmd_estimate(o, traj);
    if (*cmp) return cmd_compare(o);
    if (*rep) return cmd_report(input, thresholds, key, strict);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
