#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndae/common.hpp"

namespace ndae {

enum class BusType { PQ = 1, PV = 2, Slack = 3 };

// from_only / to_only model a line energized from one end with the other breaker open.
enum class BranchStatus { On, Off, FromOnly, ToOnly };

struct Bus {
  int id = 0;
  BusType type = BusType::PQ;
  double Pd = 0, Qd = 0;  // load, pu
  double Gs = 0, Bs = 0;  // shunt at 1 pu voltage, pu
  double Vm = 1, Va = 0;  // initial guess (Va in rad)
  double PR = 0, QR = 0;  // renewable injection, pu
};

struct Branch {
  int from = 0, to = 0;
  double r = 0, x = 0, b = 0;
  BranchStatus status = BranchStatus::On;
};

struct GeneratorParams {
  double M = 0, D = 0;
  double xd = 0, xdp = 0, xq = 0, xqp = 0;
  double Td0 = 0, Tq0 = 0;
};

struct Generator {
  int bus = 0;
  double Pg = 0, Qg = 0;  // pu
  double Vg = 1;
  bool in_service = true;
  bool has_dynamics = false;
  GeneratorParams dyn;
};

struct NetworkCase {
  std::string name;
  double base_mva = 100;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;

  int bus_index(int id) const {
    for (size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return static_cast<int>(i);
    throw ValidationError("unknown bus id " + std::to_string(id));
  }
  bool has_bus(int id) const {
    return std::any_of(buses.begin(), buses.end(), [&](const Bus& b) { return b.id == id; });
  }
  int branch_index(int a, int b) const {
    for (size_t l = 0; l < branches.size(); ++l)
      if ((branches[l].from == a && branches[l].to == b) ||
          (branches[l].from == b && branches[l].to == a))
        return static_cast<int>(l);
    throw ValidationError("no branch between buses " + std::to_string(a) + " and " +
                          std::to_string(b));
  }
  int slack_index() const {
    for (size_t i = 0; i < buses.size(); ++i)
      if (buses[i].type == BusType::Slack) return static_cast<int>(i);
    throw ValidationError("case has no slack bus");
  }
  std::vector<const Generator*> active_generators() const {
    std::vector<const Generator*> out;
    for (const auto& g : generators)
      if (g.in_service) out.push_back(&g);
    return out;
  }
};

inline void validate_generator_params(const GeneratorParams& p, int bus) {
  std::string at = " (generator at bus " + std::to_string(bus) + ")";
  require(p.M > 0, "M must be positive" + at);
  require(p.D >= 0, "D must be non-negative" + at);
  require(p.Td0 > 0 && p.Tq0 > 0, "open-circuit time constants must be positive" + at);
  require(p.xdp > 0 && p.xd >= p.xdp, "need xd >= xd' > 0" + at);
  require(p.xqp > 0 && p.xq >= p.xqp, "need xq >= xq' > 0" + at);
}

inline void validate_case(const NetworkCase& c) {
  require(c.base_mva > 0, "baseMVA must be positive");
  require(!c.buses.empty(), "case has no buses");
  std::set<int> ids;
  int slack = 0;
  for (const auto& b : c.buses) {
    require(ids.insert(b.id).second, "duplicate bus id " + std::to_string(b.id));
    if (b.type == BusType::Slack) ++slack;
  }
  require(slack == 1, "case must have exactly one slack bus, found " + std::to_string(slack));
  for (const auto& br : c.branches) {
    require(ids.count(br.from) && ids.count(br.to),
            "branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                " references an unknown bus");
    require(br.from != br.to, "branch endpoints coincide at bus " + std::to_string(br.from));
    if (br.status != BranchStatus::Off)
      require(std::hypot(br.r, br.x) > 0, "zero series impedance on in-service branch " +
                                               std::to_string(br.from) + "-" +
                                               std::to_string(br.to));
  }
  std::set<int> gen_buses;
  for (const auto& g : c.generators) {
    require(ids.count(g.bus), "generator references unknown bus " + std::to_string(g.bus));
    if (g.in_service)
      require(gen_buses.insert(g.bus).second,
              "more than one in-service generator at bus " + std::to_string(g.bus));
    if (g.has_dynamics) validate_generator_params(g.dyn, g.bus);
  }
}

namespace detail {

inline std::string strip_comment(const std::string& s) {
  auto p = s.find('%');
  return p == std::string::npos ? s : s.substr(0, p);
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct MatRow {
  std::vector<double> v;
  int line;
};

inline double parse_number(const std::string& tok, int line) {
  try {
    size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError("malformed number '" + tok + "'", line);
  }
}

}  // namespace detail

// Reads the bus / gen / branch / baseMVA subset of a MATPOWER case file.
// Other assignments (gencost, version, areas) are skipped.
inline NetworkCase parse_matpower(const std::string& text) {
  using namespace detail;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  std::map<std::string, std::vector<MatRow>> mats;
  std::string current;
  bool have_base = false;
  double base = 100;
  NetworkCase out;

  auto push_row = [&](const std::string& chunk, int ln) {
    std::string t = trim(chunk);
    if (t.empty()) return;
    std::istringstream ts(t);
    std::string tok;
    MatRow row{{}, ln};
    while (ts >> tok) {
      // MATPOWER allows comma separators.
      std::stringstream parts(tok);
      std::string piece;
      while (std::getline(parts, piece, ','))
        if (!piece.empty()) row.v.push_back(parse_number(piece, ln));
    }
    if (!row.v.empty()) mats[current].push_back(row);
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (current.empty()) {
      if (s.rfind("function", 0) == 0) {
        auto eq = s.find('=');
        if (eq != std::string::npos) out.name = trim(s.substr(eq + 1));
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos) throw ParseError("expected an assignment", line_no);
      std::string lhs = trim(s.substr(0, eq));
      std::string rhs = trim(s.substr(eq + 1));
      if (lhs.rfind("mpc.", 0) != 0) throw ParseError("expected 'mpc.<field> = ...'", line_no);
      std::string field = lhs.substr(4);
      if (field == "baseMVA") {
        if (!rhs.empty() && rhs.back() == ';') rhs.pop_back();
        base = parse_number(trim(rhs), line_no);
        have_base = true;
      } else if (!rhs.empty() && rhs.front() == '[') {
        current = field;
        mats[current];
        std::string body = rhs.substr(1);
        auto close = body.find(']');
        bool done = close != std::string::npos;
        if (done) body = body.substr(0, close);
        std::stringstream rows(body);
        std::string chunk;
        while (std::getline(rows, chunk, ';')) push_row(chunk, line_no);
        if (done) current.clear();
      } else if (!rhs.empty() && rhs.front() == '{') {
        // cell arrays (bus_name etc.) are skipped
        if (rhs.find('}') == std::string::npos) current = "__skip__";
      }
      continue;
    }
    auto close = s.find(current == "__skip__" ? '}' : ']');
    std::string body = close == std::string::npos ? s : s.substr(0, close);
    if (current != "__skip__") {
      std::stringstream rows(body);
      std::string chunk;
      while (std::getline(rows, chunk, ';')) push_row(chunk, line_no);
    }
    if (close != std::string::npos) current.clear();
  }
  if (!current.empty()) throw ParseError("unterminated matrix 'mpc." + current + "'", line_no);
  if (!have_base) throw ParseError("missing mpc.baseMVA", line_no);
  for (const char* need : {"bus", "gen", "branch"})
    if (!mats.count(need)) throw ParseError(std::string("missing mpc.") + need, line_no);

  out.base_mva = base;
  for (const auto& r : mats["bus"]) {
    if (r.v.size() < 9) throw ParseError("bus row needs at least 9 columns", r.line);
    Bus b;
    b.id = static_cast<int>(r.v[0]);
    int type = static_cast<int>(r.v[1]);
    if (type < 1 || type > 3) throw ParseError("unsupported bus type " + std::to_string(type), r.line);
    b.type = static_cast<BusType>(type);
    b.Pd = r.v[2] / base;
    b.Qd = r.v[3] / base;
    b.Gs = r.v[4] / base;
    b.Bs = r.v[5] / base;
    b.Vm = r.v[7];
    b.Va = r.v[8] * kPi / 180.0;
    out.buses.push_back(b);
  }
  for (const auto& r : mats["gen"]) {
    if (r.v.size() < 8) throw ParseError("gen row needs at least 8 columns", r.line);
    Generator g;
    g.bus = static_cast<int>(r.v[0]);
    g.Pg = r.v[1] / base;
    g.Qg = r.v[2] / base;
    g.Vg = r.v[5];
    g.in_service = r.v[7] > 0;
    out.generators.push_back(g);
  }
  for (const auto& r : mats["branch"]) {
    if (r.v.size() < 11) throw ParseError("branch row needs at least 11 columns", r.line);
    Branch br;
    br.from = static_cast<int>(r.v[0]);
    br.to = static_cast<int>(r.v[1]);
    br.r = r.v[2];
    br.x = r.v[3];
    br.b = r.v[4];
    double ratio = r.v[8];
    if (ratio != 0.0 && ratio != 1.0)
      throw ParseError("off-nominal transformer taps are not supported", r.line);
    if (r.v.size() > 9 && r.v[9] != 0.0)
      throw ParseError("phase-shifting transformers are not supported", r.line);
    br.status = r.v[10] > 0 ? BranchStatus::On : BranchStatus::Off;
    out.branches.push_back(br);
  }
  validate_case(out);
  return out;
}

inline GeneratorParams machine_from_json(const nlohmann::json& m, double omega0 = kOmega0) {
  GeneratorParams p;
  if (m.contains("M"))
    p.M = m.at("M").get<double>();
  else
    p.M = 2.0 * m.at("H").get<double>() / omega0;
  if (m.contains("D"))
    p.D = m.at("D").get<double>();
  else
    p.D = m.value("damping_per_s", 0.0) * p.M;
  p.xd = m.at("xd").get<double>();
  p.xdp = m.at("xd_prime").get<double>();
  p.xq = m.at("xq").get<double>();
  p.xqp = m.at("xq_prime").get<double>();
  p.Td0 = m.at("Td0_prime").get<double>();
  p.Tq0 = m.at("Tq0_prime").get<double>();
  return p;
}

inline nlohmann::json machine_to_json(const GeneratorParams& p) {
  return {{"M", p.M},         {"D", p.D},       {"xd", p.xd},
          {"xd_prime", p.xdp}, {"xq", p.xq},     {"xq_prime", p.xqp},
          {"Td0_prime", p.Td0}, {"Tq0_prime", p.Tq0}};
}

// Machine data file: {"machines": [{"bus": 1, "H": ..., "D": ..., ...}, ...]}
inline void attach_machine_data(NetworkCase& c, const nlohmann::json& data) {
  require(data.contains("machines") && data["machines"].is_array(),
          "machine data needs a 'machines' array");
  std::map<int, GeneratorParams> by_bus;
  for (const auto& m : data["machines"]) {
    int bus = m.at("bus").get<int>();
    require(!by_bus.count(bus), "duplicate machine record for bus " + std::to_string(bus));
    by_bus[bus] = machine_from_json(m);
  }
  for (auto& g : c.generators) {
    auto it = by_bus.find(g.bus);
    if (it == by_bus.end()) continue;
    g.dyn = it->second;
    g.has_dynamics = true;
    validate_generator_params(g.dyn, g.bus);
  }
  for (const auto& [bus, p] : by_bus) {
    bool found = std::any_of(c.generators.begin(), c.generators.end(),
                             [&](const Generator& g) { return g.bus == bus; });
    require(found, "machine record for bus " + std::to_string(bus) + " has no generator");
  }
}

inline std::string bus_type_name(BusType t) {
  switch (t) {
    case BusType::Slack: return "slack";
    case BusType::PV: return "PV";
    default: return "PQ";
  }
}

inline std::string branch_status_name(BranchStatus s) {
  switch (s) {
    case BranchStatus::On: return "on";
    case BranchStatus::Off: return "off";
    case BranchStatus::FromOnly: return "from_only";
    default: return "to_only";
  }
}

inline BranchStatus parse_branch_status(const std::string& s) {
  if (s == "on") return BranchStatus::On;
  if (s == "off") return BranchStatus::Off;
  if (s == "from_only") return BranchStatus::FromOnly;
  if (s == "to_only") return BranchStatus::ToOnly;
  throw ValidationError("unknown branch status '" + s + "'");
}

// Native JSON schema (docs/case_format.md). Powers in MW / MVAr, impedances in pu.
inline NetworkCase parse_case_json(const nlohmann::json& j) {
  NetworkCase c;
  try {
    c.name = j.value("name", "");
    c.base_mva = j.value("base_mva", 100.0);
    double base = c.base_mva;
    for (const auto& b : j.at("buses")) {
      Bus bus;
      bus.id = b.at("id").get<int>();
      std::string t = b.value("type", "PQ");
      if (t == "slack") bus.type = BusType::Slack;
      else if (t == "PV") bus.type = BusType::PV;
      else if (t == "PQ") bus.type = BusType::PQ;
      else throw ValidationError("unknown bus type '" + t + "'");
      bus.Pd = b.value("pd_mw", 0.0) / base;
      bus.Qd = b.value("qd_mvar", 0.0) / base;
      bus.Gs = b.value("gs_mw", 0.0) / base;
      bus.Bs = b.value("bs_mvar", 0.0) / base;
      bus.PR = b.value("pr_mw", 0.0) / base;
      bus.QR = b.value("qr_mvar", 0.0) / base;
      bus.Vm = b.value("vm", 1.0);
      bus.Va = b.value("va_deg", 0.0) * kPi / 180.0;
      c.buses.push_back(bus);
    }
    for (const auto& g : j.at("generators")) {
      Generator gen;
      gen.bus = g.at("bus").get<int>();
      gen.Pg = g.value("pg_mw", 0.0) / base;
      gen.Qg = g.value("qg_mvar", 0.0) / base;
      gen.Vg = g.value("vg", 1.0);
      gen.in_service = g.value("in_service", true);
      if (g.contains("machine")) {
        gen.dyn = machine_from_json(g["machine"]);
        gen.has_dynamics = true;
      }
      c.generators.push_back(gen);
    }
    for (const auto& b : j.at("branches")) {
      Branch br;
      br.from = b.at("from").get<int>();
      br.to = b.at("to").get<int>();
      br.r = b.value("r", 0.0);
      br.x = b.value("x", 0.0);
      br.b = b.value("b", 0.0);
      br.status = parse_branch_status(b.value("status", "on"));
      c.branches.push_back(br);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("case JSON: ") + e.what());
  }
  validate_case(c);
  return c;
}

inline nlohmann::json case_to_json(const NetworkCase& c) {
  nlohmann::json j;
  double base = c.base_mva;
  j["name"] = c.name;
  j["base_mva"] = base;
  j["buses"] = nlohmann::json::array();
  for (const auto& b : c.buses)
    j["buses"].push_back({{"id", b.id},
                          {"type", bus_type_name(b.type)},
                          {"pd_mw", b.Pd * base},
                          {"qd_mvar", b.Qd * base},
                          {"gs_mw", b.Gs * base},
                          {"bs_mvar", b.Bs * base},
                          {"pr_mw", b.PR * base},
                          {"qr_mvar", b.QR * base},
                          {"vm", b.Vm},
                          {"va_deg", b.Va * 180.0 / kPi}});
  j["generators"] = nlohmann::json::array();
  for (const auto& g : c.generators) {
    nlohmann::json jg = {{"bus", g.bus},
                         {"pg_mw", g.Pg * base},
                         {"qg_mvar", g.Qg * base},
                         {"vg", g.Vg},
                         {"in_service", g.in_service}};
    if (g.has_dynamics) jg["machine"] = machine_to_json(g.dyn);
    j["generators"].push_back(jg);
  }
  j["branches"] = nlohmann::json::array();
  for (const auto& br : c.branches)
    j["branches"].push_back({{"from", br.from},
                             {"to", br.to},
                             {"r", br.r},
                             {"x", br.x},
                             {"b", br.b},
                             {"status", branch_status_name(br.status)}});
  return j;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

// .m files go through the MATPOWER reader, anything else is read as JSON.
inline NetworkCase load_case(const std::string& path, const std::string& machine_file = "") {
  NetworkCase c;
  if (path.size() > 2 && path.substr(path.size() - 2) == ".m")
    c = parse_matpower(read_text_file(path));
  else
    c = parse_case_json(read_json_file(path));
  if (!machine_file.empty()) attach_machine_data(c, read_json_file(machine_file));
  return c;
}

// Renewables as a fraction of local active load, attached at every load bus.
inline void add_renewables_proportional(NetworkCase& c, double fraction) {
  for (auto& b : c.buses)
    if (b.Pd > 0) b.PR = fraction * b.Pd;
}

}  // namespace ndae
