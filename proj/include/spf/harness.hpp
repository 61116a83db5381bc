#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "spf/diagnostics.hpp"
#include "spf/initial.hpp"

namespace spf {

inline constexpr const char* code_version = "spf 0.3.0";

// Schema or value problem in a run configuration; the message starts with the key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------------
// Hashing

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file(p)); }

// ---------------------------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  // [model]
  std::string model = "abs";
  Params model_params;
  double constant_amplitude = -1.0;  // < 0: the preset's own amplitude
  // [grid]
  int dim = 2;
  int points = 64;
  // [noise]
  NoiseSpec noise{0.1, 2.0, 8, 1, 0};
  // [solver]
  double dt = 1e-4;
  double T = 0.5;
  std::size_t record_every = 100;
  bool dealias = true;
  bool clip_c = false;
  bool freeze_phi = false;
  double blowup_factor = 10.0;
  double noise_base_dt = 0.0;
  std::string singular_form = "quotient";
  // [regularization]
  double tau = infinity;
  double epsilon = 1e-2;
  double eta_width = 0.05;
  bool release_cap_when_positive = false;
  // [initial]
  std::string phase = "bump";
  std::vector<double> center{0.5, 0.5, 0.5};
  double radius = 0.3;
  double width = 0.2;
  double floor = 0.05;
  double height = 0.95;
  double mean = 0.5;
  double amplitude = 0.3;
  double value = 0.5;
  std::uint64_t phase_seed = 7;
  int phase_modes = 3;
  std::string concentration = "midpoint";
  std::vector<double> c_values;
  std::uint64_t c_seed = 11;
  // [diagnostics]
  std::vector<std::string> weights{"phi_power"};
  double weight_exponent = 0.25;
  std::vector<double> guards{1e-6, 1e-12};
  bool admissibility = true;
  bool weak_form = true;
  bool ito = true;
  bool energy = true;
  bool positivity = true;
  std::uint64_t test_seed = 1;
  double tolerance = 0.05;
  // [ensemble]
  std::size_t paths = 20;
  std::uint64_t first_seed = 1000;
  // [cascade]
  std::vector<double> taus{1.0, 2.0, 4.0, infinity};
  std::vector<double> epsilons{1e-1, 3e-2, 1e-2, 3e-3};
  std::vector<double> alphas{0.4, 0.2, 0.1, 0.05};
  std::string pairing = "paper_ordered";
  // [output]
  bool snapshots = true;
  bool ledger = false;
  bool plots = true;
};

namespace config_io {

inline std::string num(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || std::isnan(v)) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

inline long long to_integer(const std::string& key, const std::string& s) {
  const double v = to_double(key, s);
  if (v != std::floor(v) || std::abs(v) > 9e15) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return static_cast<long long>(v);
}

inline std::uint64_t to_unsigned(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": expected a nonnegative integer, got '" + s + "'");
  return std::stoull(t);
}

inline bool to_bool(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split(s)) out.push_back(to_double(key, item));
  return out;
}

inline std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + num(v[i]);
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct Field {
  std::string section, key;
  std::function<void(const std::string& path, const std::string&)> set;
  std::function<std::string()> get;
};

inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  auto real = [&](const char* s, const char* k, double& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = to_double(p, v); }, [&x] { return num(x); }});
  };
  auto integer = [&](const char* s, const char* k, int& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = static_cast<int>(to_integer(p, v)); },
                 [&x] { return std::to_string(x); }});
  };
  auto count = [&](const char* s, const char* k, std::size_t& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = to_unsigned(p, v); }, [&x] { return std::to_string(x); }});
  };
  auto seed = [&](const char* s, const char* k, std::uint64_t& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = to_unsigned(p, v); }, [&x] { return std::to_string(x); }});
  };
  auto flag = [&](const char* s, const char* k, bool& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = to_bool(p, v); }, [&x] { return std::string(x ? "true" : "false"); }});
  };
  auto text = [&](const char* s, const char* k, std::string& x) {
    f.push_back({s, k, [&x](const std::string&, const std::string& v) { x = trim(v); }, [&x] { return x; }});
  };
  auto reals = [&](const char* s, const char* k, std::vector<double>& x) {
    f.push_back({s, k, [&x](const std::string& p, const std::string& v) { x = to_doubles(p, v); }, [&x] { return join(x); }});
  };
  auto words = [&](const char* s, const char* k, std::vector<std::string>& x) {
    f.push_back({s, k, [&x](const std::string&, const std::string& v) { x = split(v); }, [&x] { return join(x); }});
  };

  text("model", "name", c.model);
  real("model", "constant_amplitude", c.constant_amplitude);
  integer("grid", "dim", c.dim);
  integer("grid", "points", c.points);
  real("noise", "r", c.noise.r);
  real("noise", "s", c.noise.s);
  integer("noise", "k_max", c.noise.k_max);
  seed("noise", "seed", c.noise.seed);
  real("solver", "dt", c.dt);
  real("solver", "T", c.T);
  count("solver", "record_every", c.record_every);
  flag("solver", "dealias", c.dealias);
  flag("solver", "clip_c", c.clip_c);
  flag("solver", "freeze_phi", c.freeze_phi);
  real("solver", "blowup_factor", c.blowup_factor);
  real("solver", "noise_base_dt", c.noise_base_dt);
  text("solver", "singular_form", c.singular_form);
  real("regularization", "tau", c.tau);
  real("regularization", "epsilon", c.epsilon);
  real("regularization", "eta_width", c.eta_width);
  flag("regularization", "release_cap_when_positive", c.release_cap_when_positive);
  text("initial", "phase", c.phase);
  reals("initial", "center", c.center);
  real("initial", "radius", c.radius);
  real("initial", "width", c.width);
  real("initial", "floor", c.floor);
  real("initial", "height", c.height);
  real("initial", "mean", c.mean);
  real("initial", "amplitude", c.amplitude);
  real("initial", "value", c.value);
  seed("initial", "phase_seed", c.phase_seed);
  integer("initial", "phase_modes", c.phase_modes);
  text("initial", "concentration", c.concentration);
  reals("initial", "c_values", c.c_values);
  seed("initial", "c_seed", c.c_seed);
  words("diagnostics", "weights", c.weights);
  real("diagnostics", "weight_exponent", c.weight_exponent);
  reals("diagnostics", "guards", c.guards);
  flag("diagnostics", "admissibility", c.admissibility);
  flag("diagnostics", "weak_form", c.weak_form);
  flag("diagnostics", "ito", c.ito);
  flag("diagnostics", "energy", c.energy);
  flag("diagnostics", "positivity", c.positivity);
  seed("diagnostics", "test_seed", c.test_seed);
  real("diagnostics", "tolerance", c.tolerance);
  count("ensemble", "paths", c.paths);
  seed("ensemble", "first_seed", c.first_seed);
  reals("cascade", "taus", c.taus);
  reals("cascade", "epsilons", c.epsilons);
  reals("cascade", "alphas", c.alphas);
  text("cascade", "pairing", c.pairing);
  flag("output", "snapshots", c.snapshots);
  flag("output", "ledger", c.ledger);
  flag("output", "plots", c.plots);
  return f;
}

}  // namespace config_io

inline ModelSpec build_model(const RunConfig& c) {
  try {
    auto m = make_model(c.model, c.model_params);
    if (c.constant_amplitude >= 0.0) m = with_constant_amplitude(std::move(m), c.constant_amplitude);
    return m;
  } catch (const ModelError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

// Range and consistency checks that need no compute.
inline void validate_config(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  const auto m = build_model(c);
  need(c.dim >= 1 && c.dim <= 3, "grid.dim: must be 1, 2 or 3");
  need(c.points >= 4 && (c.points & (c.points - 1)) == 0, "grid.points: must be a power of two >= 4");
  need(c.noise.k_max >= 0 && 2 * c.noise.k_max < c.points, "noise.k_max: must stay below points/2");
  need(c.noise.s > c.noise.r + 0.5 * c.dim, "noise.s: must exceed r + dim/2");
  need(c.dt > 0.0, "solver.dt: must be positive");
  need(c.T >= c.dt, "solver.T: must be at least dt");
  need(c.record_every > 0, "solver.record_every: must be positive");
  need(c.singular_form == "quotient" || c.singular_form == "cole_hopf", "solver.singular_form: quotient or cole_hopf");
  need(c.tau > 0.0, "regularization.tau: must be positive");
  need(c.epsilon >= 0.0, "regularization.epsilon: must be nonnegative");
  need(c.eta_width > 0.0, "regularization.eta_width: must be positive");
  const std::vector<std::string> phases{"bump", "disk_hole", "cosine", "constant", "random_smooth"};
  need(std::find(phases.begin(), phases.end(), c.phase) != phases.end(),
       "initial.phase: one of bump, disk_hole, cosine, constant, random_smooth");
  need(c.center.size() >= static_cast<std::size_t>(c.dim), "initial.center: needs one coordinate per dimension");
  need(c.concentration == "midpoint" || c.concentration == "values" || c.concentration == "random_smooth",
       "initial.concentration: one of midpoint, values, random_smooth");
  if (c.concentration == "values")
    need(c.c_values.size() == static_cast<std::size_t>(m.d), "initial.c_values: needs one value per component");
  for (const auto& w : c.weights)
    need(w == "one" || w == "phi_power" || w == "heat", "diagnostics.weights: entries are one, phi_power or heat");
  need(c.weight_exponent > 0.0 && c.weight_exponent < 0.5, "diagnostics.weight_exponent: must lie in (0, 1/2)");
  need(!c.guards.empty(), "diagnostics.guards: at least one guard");
  for (double g : c.guards) need(g > 0.0, "diagnostics.guards: guards must be positive");
  need(c.tolerance > 0.0, "diagnostics.tolerance: must be positive");
  need(c.pairing == "paper_ordered" || c.pairing == "simultaneous", "cascade.pairing: paper_ordered or simultaneous");
}

inline RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  auto table = config_io::fields(c);
  const std::vector<std::string> sections{"model", "grid", "noise", "solver", "regularization", "initial",
                                          "diagnostics", "ensemble", "cascade", "output"};
  for (const auto& [section, body] : tree) {
    if (std::find(sections.begin(), sections.end(), section) == sections.end())
      throw ConfigError(section + ": unknown section");
    if (body.empty() && !body.data().empty()) throw ConfigError(section + ": key outside any section");
    for (const auto& [key, node] : body) {
      const std::string path = section + "." + key;
      auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.section == section && f.key == key; });
      if (it != table.end()) {
        it->set(path, node.data());
      } else if (section == "model") {
        c.model_params[key] = config_io::to_double(path, node.data());
      } else {
        throw ConfigError(path + ": unknown key");
      }
    }
  }
  validate_config(c);
  return c;
}

inline RunConfig load_config(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError(p.string() + ": no such config file");
  return parse_config(read_file(p));
}

// Full INI echo with every default and every resolved model parameter written out.
inline std::string echo_config(const RunConfig& cfg) {
  RunConfig c = cfg;
  const auto params = make_model(c.model, c.model_params).params;
  auto table = config_io::fields(c);
  std::ostringstream os;
  std::string current;
  for (const auto& f : table) {
    if (f.section != current) {
      if (!current.empty()) os << "\n";
      os << "[" << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get() << "\n";
    if (f.section == "model" && f.key == "constant_amplitude")
      for (const auto& [k, v] : params) os << k << " = " << config_io::num(v) << "\n";
  }
  return os.str();
}

inline std::string config_hash(const RunConfig& c) { return sha256_hex(echo_config(c)); }

inline SolverConfig build_solver(const RunConfig& c, const ModelSpec& m) {
  auto s = SolverConfig::for_model(m);
  s.dt = c.dt;
  s.T = c.T;
  s.record_every = c.record_every;
  s.dealias = c.dealias;
  s.clip_c = c.clip_c;
  s.freeze_phi = c.freeze_phi;
  s.blowup_factor = c.blowup_factor;
  s.noise_base_dt = c.noise_base_dt;
  s.singular_form = c.singular_form == "cole_hopf" ? SingularForm::cole_hopf : SingularForm::quotient;
  s.keep_ledger = c.ledger;
  return s;
}

inline RegParams build_reg(const RunConfig& c) {
  RegParams r;
  r.tau = c.tau;
  r.epsilon = c.epsilon;
  r.alpha = c.weight_exponent;
  r.eta = EtaCutoff(c.eta_width);
  r.release_cap_when_positive = c.release_cap_when_positive;
  return r;
}

inline NoiseSpec build_noise(const RunConfig& c, const ModelSpec& m) {
  auto n = c.noise;
  n.components = m.d;
  return n;
}

inline ScalarField build_phase(const RunConfig& c, const TorusGrid& g) {
  const std::array<double, 3> ctr{c.center[0], c.center.size() > 1 ? c.center[1] : 0.5, c.center.size() > 2 ? c.center[2] : 0.5};
  try {
    if (c.phase == "bump") return initial::bump(g, ctr, c.radius, c.floor, c.height);
    if (c.phase == "disk_hole") return initial::disk_hole(g, ctr, c.radius, c.width, c.height);
    if (c.phase == "cosine") return initial::cosine(g, c.mean, c.amplitude);
    if (c.phase == "constant") return initial::constant(g, c.value);
    return initial::random_smooth(g, c.phase_seed, c.phase_modes, c.floor);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("initial: ") + e.what());
  }
}

inline VectorField build_concentration(const RunConfig& c, const ModelSpec& m, const TorusGrid& g) {
  VectorField out(g, m.d);
  for (int j = 0; j < m.d; ++j) {
    const double lo = m.lower[j], hi = m.upper[j];
    if (c.concentration == "values") {
      out[j] = ScalarField(g, c.c_values[j]);
    } else if (c.concentration == "random_smooth") {
      auto r = initial::random_smooth(g, c.c_seed + static_cast<std::uint64_t>(j), 2, 0.0);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = lo + (hi - lo) * (0.1 + 0.8 * r[i]);
      out[j] = std::move(r);
    } else {
      out[j] = ScalarField(g, 0.5 * (lo + hi));
    }
  }
  if (m.constrain) {
    std::vector<double> s(m.d);
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (int j = 0; j < m.d; ++j) s[j] = out[j][i];
      m.constrain(s.data(), -1);
      for (int j = 0; j < m.d; ++j) out[j][i] = s[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Worker pool

inline unsigned worker_count() {
  if (const char* env = std::getenv("SPF_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i < n on up to `workers` threads; fn must not throw.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(n, 1)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------------------------
// Manifest

struct RunManifest {
  std::string verb = "run";
  std::string version = code_version;
  std::string config_text;
  std::string config_sha256;
  std::map<std::string, std::string> inputs;     // name -> sha256
  std::map<std::string, std::string> artifacts;  // relative path -> sha256
  std::map<std::string, std::uint64_t> seeds;
  double wall_seconds = 0.0;
  std::map<std::string, std::string> extra;

  nlohmann::json to_json() const {
    return {{"verb", verb},           {"code_version", version}, {"config", config_text}, {"config_sha256", config_sha256},
            {"inputs", inputs},       {"artifacts", artifacts},  {"seeds", seeds},        {"wall_seconds", wall_seconds},
            {"extra", extra}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.verb = j.at("verb").get<std::string>();
    m.version = j.at("code_version").get<std::string>();
    m.config_text = j.at("config").get<std::string>();
    m.config_sha256 = j.at("config_sha256").get<std::string>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
    if (j.contains("extra")) m.extra = j.at("extra").get<std::map<std::string, std::string>>();
    return m;
  }

  void write(const fs::path& p) const {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << to_json().dump(2) << "\n";
  }

  static RunManifest read(const fs::path& p) { return from_json(nlohmann::json::parse(read_file(p))); }
};

// Hashes of every regular file below dir except the manifest itself.
inline std::map<std::string, std::string> hash_artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Report emission

struct LabeledReport {
  std::string label;
  DiagnosticsReport report;
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string safe_name(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
  return s;
}

struct Line {
  std::string label;
  std::vector<double> x, y;
};

// Minimal line plot; log_y drops nonpositive points.
inline void write_svg(const fs::path& p, const std::string& title, const std::string& xlabel, const std::vector<Line>& lines,
                      bool log_y) {
  const double W = 640, H = 400, L = 70, R = 150, Tm = 40, B = 50;
  double x0 = infinity, x1 = -infinity, y0 = infinity, y1 = -infinity;
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  for (const auto& l : lines)
    for (std::size_t i = 0; i < l.x.size(); ++i) {
      if (!std::isfinite(l.y[i]) || (log_y && l.y[i] <= 0.0)) continue;
      x0 = std::min(x0, l.x[i]);
      x1 = std::max(x1, l.x[i]);
      y0 = std::min(y0, ty(l.y[i]));
      y1 = std::max(y1, ty(l.y[i]));
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - Tm - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::ofstream out(p);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << L << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" font-size=\"12\">" << xlabel << "</text>\n";
  auto tick = [](double v) {
    std::ostringstream s;
    s << std::setprecision(3) << v;
    return s.str();
  };
  out << "<text x=\"4\" y=\"" << Tm + 4 << "\" font-size=\"10\">" << (log_y ? "1e" : "") << tick(y1) << "</text>\n";
  out << "<text x=\"4\" y=\"" << H - B << "\" font-size=\"10\">" << (log_y ? "1e" : "") << tick(y0) << "</text>\n";
  out << "<text x=\"" << L << "\" y=\"" << H - B + 14 << "\" font-size=\"10\">" << tick(x0) << "</text>\n";
  out << "<text x=\"" << W - R - 30 << "\" y=\"" << H - B + 14 << "\" font-size=\"10\">" << tick(x1) << "</text>\n";
  for (std::size_t k = 0; k < lines.size(); ++k) {
    const char* col = colors[k % 8];
    out << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
    for (std::size_t i = 0; i < lines[k].x.size(); ++i) {
      if (!std::isfinite(lines[k].y[i]) || (log_y && lines[k].y[i] <= 0.0)) continue;
      out << tick(px(lines[k].x[i])) << "," << tick(py(lines[k].y[i])) << " ";
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < lines[k].x.size(); ++i) {
      if (!std::isfinite(lines[k].y[i]) || (log_y && lines[k].y[i] <= 0.0)) continue;
      out << "<circle cx=\"" << tick(px(lines[k].x[i])) << "\" cy=\"" << tick(py(lines[k].y[i])) << "\" r=\"2.5\" fill=\"" << col
          << "\"/>\n";
    }
    out << "<text x=\"" << W - R + 8 << "\" y=\"" << Tm + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << col << "\">"
        << lines[k].label << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace detail

struct EmitResult {
  int exit_code = 0;
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::vector<fs::path> files;
};

inline void write_combined_csv(std::ostream& os, const std::vector<LabeledReport>& reports) {
  os << "report,id,formula,value,tolerance,bound,pass,config_hash,note\n";
  std::vector<std::pair<std::string, CheckResult>> rows;
  for (const auto& r : reports)
    for (const auto& c : r.report.checks()) rows.emplace_back(r.label, c);
  std::stable_partition(rows.begin(), rows.end(), [](const auto& x) { return !x.second.pass; });
  for (const auto& [label, c] : rows) {
    const auto& hash = std::find_if(reports.begin(), reports.end(), [&](const auto& r) { return r.label == label; })->report.config_hash;
    os << detail::csv_field(label) << ',' << detail::csv_field(c.id) << ',' << detail::csv_field(c.formula) << ','
       << DiagnosticsReport::fmt(c.value) << ',' << DiagnosticsReport::fmt(c.tolerance) << ','
       << (c.bound == Bound::at_most ? "at_most" : "at_least") << ',' << (c.pass ? 1 : 0) << ',' << hash << ','
       << detail::csv_field(c.note) << "\n";
  }
}

// Reads a report CSV written by write_combined_csv or DiagnosticsReport::write_csv.
inline std::vector<LabeledReport> read_report_csv(const fs::path& p, const std::string& default_label) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::string line;
  std::getline(in, line);
  const auto header = detail::csv_split(line);
  const bool labeled = !header.empty() && header[0] == "report";
  const std::size_t off = labeled ? 1 : 0;
  if (header.size() < off + 8 || header[off] != "id") throw std::runtime_error(p.string() + ": not a report CSV");
  std::vector<LabeledReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::csv_split(line);
    if (f.size() < off + 8) throw std::runtime_error(p.string() + ": short row");
    const std::string label = labeled ? f[0] : default_label;
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& r) { return r.label == label; });
    if (it == out.end()) {
      out.push_back({label, {}});
      it = out.end() - 1;
      it->report.config_hash = f[off + 6];
    }
    CheckResult c{f[off], f[off + 1], std::strtod(f[off + 2].c_str(), nullptr), std::strtod(f[off + 3].c_str(), nullptr),
                  f[off + 4] == "at_least" ? Bound::at_least : Bound::at_most, f[off + 5] == "1", f[off + 7]};
    it->report.add_result(c);
  }
  return out;
}

// CSV tables, per-series plots, per-check convergence plots across reports, and one summary.
inline EmitResult emit_report(const std::vector<LabeledReport>& reports, const fs::path& dir, bool plots = true) {
  EmitResult res;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("output path not writable: " + dir.string());
  {
    std::ofstream out(dir / "report.csv");
    if (!out) throw std::runtime_error("output path not writable: " + dir.string());
    write_combined_csv(out, reports);
    res.files.push_back(dir / "report.csv");
  }
  bool any_series = false;
  for (const auto& r : reports) any_series = any_series || !r.report.series().empty();
  if (any_series) {
    std::ofstream out(dir / "series.csv");
    out << "report,id,t,value\n";
    for (const auto& r : reports)
      for (const auto& s : r.report.series())
        for (std::size_t i = 0; i < s.t.size(); ++i)
          out << detail::csv_field(r.label) << ',' << detail::csv_field(s.id) << ',' << DiagnosticsReport::fmt(s.t[i]) << ','
              << DiagnosticsReport::fmt(s.value[i]) << "\n";
    res.files.push_back(dir / "series.csv");
  }
  for (const auto& r : reports) {
    res.checks += r.report.checks().size();
    res.failures += r.report.failures();
  }
  {
    std::ofstream out(dir / "summary.txt");
    out << "reports " << reports.size() << " checks " << res.checks << " passed " << res.checks - res.failures << " failed "
        << res.failures << "\n";
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& r : reports)
        for (const auto& c : r.report.checks()) {
          if (c.pass != (pass == 1)) continue;
          out << (c.pass ? "PASS " : "FAIL ") << r.label << " " << c.id << " value=" << DiagnosticsReport::fmt(c.value)
              << (c.bound == Bound::at_most ? " <= " : " >= ") << DiagnosticsReport::fmt(c.tolerance);
          if (!c.note.empty()) out << " (" << c.note << ")";
          out << "\n";
        }
    res.files.push_back(dir / "summary.txt");
  }
  if (plots) {
    try {
      fs::create_directories(dir / "plots");
      std::map<std::string, std::vector<detail::Line>> by_series;
      for (const auto& r : reports)
        for (const auto& s : r.report.series()) by_series[s.id].push_back({r.label, s.t, s.value});
      for (const auto& [id, lines] : by_series) {
        auto p = dir / "plots" / ("series_" + detail::safe_name(id) + ".svg");
        detail::write_svg(p, id, "t", lines, false);
        res.files.push_back(p);
      }
      std::map<std::string, detail::Line> by_check;
      std::vector<std::string> order;
      for (std::size_t k = 0; k < reports.size(); ++k)
        for (const auto& c : reports[k].report.checks()) {
          if (!by_check.count(c.id)) order.push_back(c.id);
          auto& l = by_check[c.id];
          l.label = c.id;
          l.x.push_back(static_cast<double>(k));
          l.y.push_back(std::abs(c.value));
        }
      for (const auto& id : order) {
        const auto& l = by_check[id];
        if (l.x.size() < 2) continue;
        auto p = dir / "plots" / ("check_" + detail::safe_name(id) + ".svg");
        detail::write_svg(p, id + " across reports", "report index", {l}, true);
        res.files.push_back(p);
      }
    } catch (const std::exception&) {
      // plots never gate the exit status
    }
  }
  res.exit_code = res.failures == 0 ? 0 : 1;
  return res;
}

// ---------------------------------------------------------------------------------------------
// Single runs

struct SingleRun {
  Trajectory trajectory;
  DiagnosticsReport report;
  RunManifest manifest;
};

inline Weight make_weight(const std::string& name, const RunConfig& c, const SolverConfig& s) {
  if (name == "one") return Weight::constant();
  if (name == "heat") return Weight::heat(s.gamma);
  return Weight::phi_power(c.weight_exponent);
}

inline std::string weight_label(const std::string& name, const RunConfig& c) {
  if (name == "phi_power") return "phi^" + config_io::num(c.weight_exponent);
  return name == "heat" ? "sqrt_heat" : "one";
}

inline void write_trajectory(const fs::path& dir, const Trajectory& tr) {
  std::ofstream bin(dir / "snapshots.sdf", std::ios::binary);
  std::ofstream idx(dir / "snapshots.csv");
  idx << "index,step,t\n";
  for (std::size_t k = 0; k < tr.snapshots.size(); ++k) {
    const auto& s = tr.snapshots[k];
    std::vector<ScalarField> comps{s.phi};
    for (const auto& c : s.c) comps.push_back(c);
    write_snapshot(bin, VectorField(std::move(comps)));
    idx << k << ',' << s.step << ',' << DiagnosticsReport::fmt(s.t) << "\n";
  }
}

// One trajectory with the configured diagnostics; artifacts go to out_dir when it is non-empty.
inline SingleRun run_single(const RunConfig& c, const fs::path& out_dir = {}, const std::string& config_input = {}) {
  validate_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = build_model(c);
  const TorusGrid grid(c.dim, c.points);
  const auto solver = build_solver(c, model);
  const auto reg = build_reg(c);
  const auto noise = build_noise(c, model);
  const auto phi0 = build_phase(c, grid);
  const auto c0 = build_concentration(c, model, grid);
  validate_initial(model, phi0, c0, true);

  std::vector<std::unique_ptr<StepObserver>> owned;
  std::vector<StepObserver*> obs;
  auto keep = [&](auto p) {
    auto* raw = p.get();
    owned.push_back(std::move(p));
    obs.push_back(raw);
    return raw;
  };
  std::vector<std::pair<std::string, AdmissibilityObserver*>> adm;
  std::vector<std::pair<std::string, WeakFormObserver*>> weak;
  const bool positive = phi0.min() > 0.0;
  const auto tests = default_tests(grid, c.test_seed);
  for (const auto& w : c.weights) {
    if (c.admissibility) adm.emplace_back(weight_label(w, c), keep(std::make_unique<AdmissibilityObserver>(make_weight(w, c, solver), c.guards)));
    if (c.weak_form && (w != "one" || positive))
      weak.emplace_back(weight_label(w, c), keep(std::make_unique<WeakFormObserver>(make_weight(w, c, solver), tests)));
  }
  ItoSquareObserver* ito = c.ito ? keep(std::make_unique<ItoSquareObserver>()) : nullptr;
  PhiEnergyObserver* energy = c.energy && !c.freeze_phi ? keep(std::make_unique<PhiEnergyObserver>()) : nullptr;
  PositivityObserver* pos = nullptr;
  if (c.positivity && !c.freeze_phi && positive) {
    const auto inv = validate_invariance(model, 2000, 1, reg.eta);
    pos = keep(std::make_unique<PositivityObserver>(inv.g_over_phi, inv.psi_bound));
  }

  SingleRun out;
  auto& rep = out.report;
  rep.config_hash = config_hash(c);
  out.trajectory = run_coupled(solver, model, reg, noise, phi0, c0, obs);
  const auto& st = out.trajectory.stats;

  auto all_finite = [](const ScalarField& f) {
    return std::all_of(f.values().begin(), f.values().end(), [](double x) { return std::isfinite(x); });
  };
  bool finite = true;
  for (const auto& s : out.trajectory.snapshots) {
    finite = finite && all_finite(s.phi);
    for (const auto& cj : s.c) finite = finite && all_finite(cj);
  }
  rep.add_flag("finite", "all recorded fields finite", finite);
  rep.add("phase_band", "max(-min phi, max phi - K_phi)", std::max(-st.min_phi, st.max_phi - model.k_phi), 1e-2);
  const NoiseSpectrum spec(noise, grid);
  const double band = 5.0 * c.dt + 3.0 * st.max_amplitude * std::sqrt(c.dt * spec.trace());
  rep.add("hypercube_excursion", "max excursion of c beyond K", st.max_excursion, band, Bound::at_most, "5 dt + noise band");
  rep.add("cap_activations", "steps x nodes with |grad phi| capped at tau", static_cast<double>(st.cap_activations), infinity,
          Bound::at_most, "informational");
  for (const auto& [label, a] : adm) {
    const auto r = a->result();
    const double first = r.integral.front(), last = r.integral.back();
    const double change = first > 0.0 ? std::abs(last / first - 1.0) : (last == 0.0 ? 0.0 : infinity);
    if (label == "one" && !positive)
      rep.add("admissibility[one]", "guard growth of sum dt int |grad phi|^2 / max(phi,g)^2", first > 0.0 ? last / first : 0.0,
              -infinity, Bound::at_least, "informational; phase vanishes somewhere");
    else
      rep.add("admissibility[" + label + "]", "relative change of the weighted quotient integral across guards", change, 0.1);
  }
  for (const auto& [label, w] : weak) {
    const auto r = w->result();
    rep.add("weak_form[" + label + "]", "worst normalized weak-form residual over test functions", r.worst, c.tolerance,
            Bound::at_most, "guard activations " + std::to_string(r.guard_activations));
  }
  if (ito) {
    const auto r = ito->result();
    rep.add("ito_square", "max |R_t| / ||c_0||^2 for the squared-norm Ito identity", r.scale > 0 ? r.max_residual / r.scale : r.max_residual,
            c.tolerance);
    rep.add_series({"ito_square_residual", r.t, r.residual});
  }
  if (energy) {
    const auto r = energy->result();
    rep.add("phi_energy", "normalized residual of the gradient-energy balance", r.normalized, c.tolerance);
    rep.add("phi_energy_dissipation", "max dissipation increment", r.max_dissipation_increment, 0.0);
  }
  if (pos) {
    const auto r = pos->result();
    rep.add("positivity_floor", "count of nodes with phi < u - 1e-3 after 10 steps", static_cast<double>(r.violations), 0.0);
  }
  {
    Series mass{"mean_phi", {}, {}}, cmean{"mean_c1", {}, {}};
    for (const auto& s : out.trajectory.snapshots) {
      mass.t.push_back(s.t);
      mass.value.push_back(mean_integral(s.phi));
      cmean.t.push_back(s.t);
      cmean.value.push_back(mean_integral(s.c[0]));
    }
    rep.add_series(std::move(mass));
    rep.add_series(std::move(cmean));
  }

  auto& man = out.manifest;
  man.config_text = echo_config(c);
  man.config_sha256 = rep.config_hash;
  if (!config_input.empty()) man.inputs["config_file"] = sha256_hex(config_input);
  man.seeds = {{"noise", c.noise.seed}, {"initial_phase", c.phase_seed}, {"initial_concentration", c.c_seed},
               {"test_functions", c.test_seed}};
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    {
      std::ofstream cfg(out_dir / "config.ini");
      cfg << man.config_text;
    }
    emit_report({{"run", rep}}, out_dir, c.plots);
    if (c.snapshots) write_trajectory(out_dir, out.trajectory);
    if (c.ledger) {
      std::ofstream l(out_dir / "ledger.sdl", std::ios::binary);
      write_ledger(l, out.trajectory.ledger);
    }
    man.artifacts = hash_artifacts(out_dir);
  }
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) man.write(out_dir / "manifest.json");
  return out;
}

struct ReplayResult {
  bool identical = false;
  std::vector<std::string> mismatched;
  RunManifest original, replayed;
};

// Re-runs the configuration echoed in a manifest into out_dir and compares artifact hashes.
inline ReplayResult replay_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
  ReplayResult r;
  r.original = RunManifest::read(manifest_path);
  if (r.original.verb != "run") throw ConfigError("manifest: only run manifests can be replayed");
  const auto cfg = parse_config(r.original.config_text);
  r.replayed = run_single(cfg, out_dir, r.original.config_text).manifest;
  std::set<std::string> names;
  for (const auto& [k, v] : r.original.artifacts) names.insert(k);
  for (const auto& [k, v] : r.replayed.artifacts) names.insert(k);
  for (const auto& k : names) {
    auto a = r.original.artifacts.find(k);
    auto b = r.replayed.artifacts.find(k);
    if (a == r.original.artifacts.end() || b == r.replayed.artifacts.end() || a->second != b->second) r.mismatched.push_back(k);
  }
  r.identical = r.mismatched.empty();
  return r;
}

// ---------------------------------------------------------------------------------------------
// Ensembles

struct Statistic {
  std::size_t n = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline Statistic summarize(const std::vector<double>& xs) {
  Statistic s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.stderr_ = std::sqrt(v / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  }
  return s;
}

struct PathOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  QVPath qv;
  double martingale = 0.0;
  double final_mean_c = 0.0;
  double max_excursion = 0.0;
};

struct EnsembleResult {
  DiagnosticsReport report;
  std::vector<PathOutcome> paths;
  std::size_t completed = 0;
  std::size_t failed = 0;
  bool reliable = false;
  QVEstimate qv;
  CenteredStat martingale;
  Statistic final_mean_c;
  RunManifest manifest;
};

inline constexpr std::size_t reliable_paths = 30;

// M paths with seeds first_seed .. first_seed + M - 1; a failing path is isolated and counted.
// path_hook, if given, replaces the per-path run (used to inject failures).
inline EnsembleResult run_ensemble(const RunConfig& c, std::size_t M, const fs::path& out_dir = {},
                                   std::function<PathOutcome(const RunConfig&)> path_hook = {}) {
  if (M < 2) throw ConfigError("ensemble.paths: need at least 2 paths");
  validate_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = build_model(c);
  const TorusGrid grid(c.dim, c.points);
  const auto solver = build_solver(c, model);
  const auto reg = build_reg(c);
  const auto phi0 = build_phase(c, grid);
  const auto c0 = build_concentration(c, model, grid);
  validate_initial(model, phi0, c0, true);
  const auto probe = default_tests(grid, c.test_seed)[1].u;

  EnsembleResult res;
  res.paths.resize(M);
  auto one_path = [&](const RunConfig& pc) {
    PathOutcome o;
    o.seed = pc.noise.seed;
    QVObserver qv(probe);
    ItoSquareObserver ito;
    std::vector<StepObserver*> obs{&qv, &ito};
    auto s = solver;
    s.record_every = s.steps();
    auto tr = run_coupled(s, model, reg, build_noise(pc, model), phi0, c0, obs);
    o.qv = qv.result();
    o.martingale = ito.result().martingale;
    o.final_mean_c = mean_integral(tr.snapshots.back().c[0]);
    o.max_excursion = tr.stats.max_excursion;
    o.ok = true;
    return o;
  };
  parallel_for(M, worker_count(), [&](std::size_t i) {
    RunConfig pc = c;
    pc.noise.seed = c.first_seed + i;
    try {
      res.paths[i] = path_hook ? path_hook(pc) : one_path(pc);
    } catch (const std::exception& e) {
      res.paths[i] = PathOutcome{pc.noise.seed, false, e.what(), {}, 0.0, 0.0, 0.0};
    }
  });

  std::vector<QVPath> qv;
  std::vector<double> mart, mean_c;
  double excursion = 0.0;
  for (const auto& p : res.paths) {
    if (!p.ok) {
      ++res.failed;
      continue;
    }
    ++res.completed;
    qv.push_back(p.qv);
    mart.push_back(p.martingale);
    mean_c.push_back(p.final_mean_c);
    excursion = std::max(excursion, p.max_excursion);
  }
  res.reliable = res.completed >= reliable_paths;
  auto& rep = res.report;
  rep.config_hash = config_hash(c);
  const std::string ci_note = res.reliable ? "" : "unreliable: fewer than " + std::to_string(reliable_paths) + " paths";
  rep.add("completed_paths", "paths finished without error", static_cast<double>(res.completed), static_cast<double>(M),
          Bound::at_least, std::to_string(res.failed) + " failed");
  if (res.completed >= 2) {
    res.qv = qv_estimate(qv, 0, reliable_paths);
    res.martingale = centeredness(mart, reliable_paths);
    res.final_mean_c = summarize(mean_c);
    rep.add("qv_relative_error", "|mean realized QV - mean predicted covariation| / predicted", res.qv.relative_error, 0.1,
            Bound::at_most, ci_note);
    rep.add("martingale_centered", "|mean of sum 2<N,c>| / (3 sd / sqrt(M))",
            res.martingale.bound > 0 ? std::abs(res.martingale.mean) / res.martingale.bound : 0.0, 1.0, Bound::at_most, ci_note);
    rep.add("final_mean_c", "mean over paths of the spatial mean of c_1 at T", res.final_mean_c.mean, infinity, Bound::at_most,
            "stderr " + DiagnosticsReport::fmt(res.final_mean_c.stderr_) + (ci_note.empty() ? "" : "; " + ci_note));
    rep.add("hypercube_excursion", "max over paths of the excursion of c beyond K", excursion,
            5.0 * c.dt + 3.0 * std::sqrt(c.dt * NoiseSpectrum(build_noise(c, model), grid).trace()), Bound::at_most);
  }
  rep.add("ci_reliable", "1 if completed paths >= " + std::to_string(reliable_paths), res.reliable ? 1.0 : 0.0, 0.0,
          Bound::at_least, res.reliable ? "" : "unreliable flag raised; informational");

  auto& man = res.manifest;
  man.verb = "ensemble";
  man.config_text = echo_config(c);
  man.config_sha256 = rep.config_hash;
  man.seeds = {{"first_noise_seed", c.first_seed}, {"paths", M}, {"initial_phase", c.phase_seed}, {"test_functions", c.test_seed}};
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    {
      std::ofstream cfg(out_dir / "config.ini");
      cfg << man.config_text;
      std::ofstream paths(out_dir / "paths.csv");
      paths << "seed,ok,realized_qv,predicted_qv,terminal,martingale,final_mean_c,error\n";
      for (const auto& p : res.paths)
        paths << p.seed << ',' << (p.ok ? 1 : 0) << ',' << DiagnosticsReport::fmt(p.ok ? p.qv.realized[0] : 0.0) << ','
              << DiagnosticsReport::fmt(p.ok ? p.qv.predicted[0] : 0.0) << ','
              << DiagnosticsReport::fmt(p.ok ? p.qv.terminal[0] : 0.0) << ','
              << DiagnosticsReport::fmt(p.martingale) << ',' << DiagnosticsReport::fmt(p.final_mean_c) << ','
              << detail::csv_field(p.error) << "\n";
    }
    emit_report({{"ensemble", rep}}, out_dir, c.plots);
    man.artifacts = hash_artifacts(out_dir);
  }
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) man.write(out_dir / "manifest.json");
  return res;
}

// ---------------------------------------------------------------------------------------------
// Regularization cascade

enum class Pairing { paper_ordered, simultaneous };

struct CascadeSchedule {
  std::vector<double> taus;
  std::vector<double> epsilons;
  std::vector<double> alphas;
  Pairing pairing = Pairing::paper_ordered;

  void validate() const {
    for (std::size_t i = 1; i < taus.size(); ++i)
      if (!(taus[i] > taus[i - 1])) throw ConfigError("cascade.taus: must be strictly increasing");
    for (double t : taus)
      if (!(t > 0.0)) throw ConfigError("cascade.taus: must be positive");
    for (std::size_t i = 0; i + 1 < taus.size(); ++i)
      if (std::isinf(taus[i])) throw ConfigError("cascade.taus: only the last entry may be inf");
    for (std::size_t i = 1; i < epsilons.size(); ++i)
      if (!(epsilons[i] < epsilons[i - 1])) throw ConfigError("cascade.epsilons: must be strictly decreasing");
    for (double e : epsilons)
      if (!(e > 0.0)) throw ConfigError("cascade.epsilons: must stay positive");
    for (std::size_t i = 1; i < alphas.size(); ++i)
      if (!(alphas[i] < alphas[i - 1])) throw ConfigError("cascade.alphas: must be strictly decreasing");
    for (double a : alphas)
      if (!(a > 0.0 && a < 0.5)) throw ConfigError("cascade.alphas: must lie in (0, 1/2)");
    if (pairing == Pairing::simultaneous && (taus.size() != epsilons.size() || (!alphas.empty() && alphas.size() != taus.size())))
      throw ConfigError("cascade: simultaneous pairing needs lists of equal length");
  }

  static CascadeSchedule from(const RunConfig& c) {
    return {c.taus, c.epsilons, c.alphas, c.pairing == "simultaneous" ? Pairing::simultaneous : Pairing::paper_ordered};
  }
};

struct CascadeMember {
  std::string stage;  // "tau", "epsilon" or "joint"
  double tau = infinity;
  double epsilon = 0.0;
  std::size_t cap_activations = 0;
  std::size_t final_cap_activations = 0;
  double min_phi = 0.0;
  std::map<double, double> weak_form_worst;  // alpha -> worst residual
};

struct CascadeDifference {
  std::string stage;
  std::size_t from = 0, to = 0;  // member indices
  double phi_h1 = 0.0;           // L2(0,T; H1) surrogate
  double c_l2 = 0.0;             // L2(0,T; L2)
  double c_weighted = 0.0;       // L2(0,T; L2) of phi^alpha (c - c')
};

struct CascadeTable {
  std::vector<CascadeMember> members;
  std::vector<CascadeDifference> differences;
  std::map<std::string, double> decay_rate;  // fitted slope of log c-difference vs log parameter, per stage
  DiagnosticsReport report;
  RunManifest manifest;
};

namespace detail {

struct Differences {
  double phi_h1 = 0.0, c_l2 = 0.0, c_weighted = 0.0;
};

inline Differences trajectory_differences(const Trajectory& a, const Trajectory& b, double alpha, double dt_record) {
  if (a.snapshots.size() != b.snapshots.size()) throw std::logic_error("cascade members recorded different time grids");
  Differences d;
  for (std::size_t k = 1; k < a.snapshots.size(); ++k) {
    const auto& sa = a.snapshots[k];
    const auto& sb = b.snapshots[k];
    auto dphi = sa.phi - sb.phi;
    double h1 = norm2_squared(dphi);
    for (const auto& g : gradient(dphi)) h1 += norm2_squared(g);
    d.phi_h1 += dt_record * h1;
    ScalarField w(sb.phi.grid());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(std::max(sb.phi[i], 0.0), alpha);
    for (int j = 0; j < sa.c.components(); ++j) {
      auto dc = sa.c[j] - sb.c[j];
      d.c_l2 += dt_record * norm2_squared(dc);
      d.c_weighted += dt_record * norm2_squared(w * dc);
    }
  }
  d.phi_h1 = std::sqrt(d.phi_h1);
  d.c_l2 = std::sqrt(d.c_l2);
  d.c_weighted = std::sqrt(d.c_weighted);
  return d;
}

inline double log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  if (lx.size() < 2) return std::nan("");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) mx += lx[i], my += ly[i];
  mx /= lx.size();
  my /= ly.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
  return sxx > 0 ? sxy / sxx : std::nan("");
}

}  // namespace detail

// Common-random-numbers cascade: every member shares the noise seed, grid and initial data.
inline CascadeTable run_cascade(const RunConfig& c, const CascadeSchedule& sched, const fs::path& out_dir = {}) {
  sched.validate();
  validate_config(c);
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = build_model(c);
  const TorusGrid grid(c.dim, c.points);
  const auto solver = build_solver(c, model);
  const auto noise = build_noise(c, model);
  const auto phi0 = build_phase(c, grid);
  const auto c0 = build_concentration(c, model, grid);
  validate_initial(model, phi0, c0, true);
  const auto tests = default_tests(grid, c.test_seed);

  CascadeTable table;
  std::vector<std::pair<double, double>> params;  // (tau, eps)
  std::vector<std::string> stages;
  if (sched.pairing == Pairing::simultaneous) {
    for (std::size_t i = 0; i < sched.taus.size(); ++i) {
      params.emplace_back(sched.taus[i], sched.epsilons[i]);
      stages.push_back("joint");
    }
  } else {
    const double eps_fixed = sched.epsilons.empty() ? c.epsilon : sched.epsilons.front();
    for (double t : sched.taus) {
      params.emplace_back(t, eps_fixed);
      stages.push_back("tau");
    }
    const double tau_final = sched.taus.empty() ? c.tau : sched.taus.back();
    for (double e : sched.epsilons) {
      params.emplace_back(tau_final, e);
      stages.push_back("epsilon");
    }
  }
  const std::size_t n = params.size();
  std::vector<Trajectory> trajs(n);
  table.members.resize(n);
  std::vector<std::string> errors(n);
  const bool weak_on_all = sched.pairing == Pairing::simultaneous;
  std::vector<std::size_t> source(n), unique;
  for (std::size_t i = 0; i < n; ++i) {
    source[i] = i;
    for (std::size_t j = 0; j < i; ++j)
      if (params[j] == params[i] && (weak_on_all || i + 1 != n)) {
        source[i] = j;
        break;
      }
    if (source[i] == i) unique.push_back(i);
  }
  parallel_for(unique.size(), worker_count(), [&](std::size_t u) {
    const std::size_t i = unique[u];
    try {
      auto reg = build_reg(c);
      reg.tau = params[i].first;
      reg.epsilon = params[i].second;
      std::vector<std::unique_ptr<WeakFormObserver>> weak;
      std::vector<StepObserver*> obs;
      if (weak_on_all || i + 1 == n)
        for (double a : sched.alphas) {
          weak.push_back(std::make_unique<WeakFormObserver>(Weight::phi_power(a), tests));
          obs.push_back(weak.back().get());
        }
      trajs[i] = run_coupled(solver, model, reg, noise, phi0, c0, obs);
      auto& m = table.members[i];
      m.stage = stages[i];
      m.tau = params[i].first;
      m.epsilon = params[i].second;
      m.cap_activations = trajs[i].stats.cap_activations;
      m.final_cap_activations = trajs[i].stats.final_cap_activations;
      m.min_phi = trajs[i].stats.min_phi;
      for (std::size_t k = 0; k < weak.size(); ++k) m.weak_form_worst[sched.alphas[k]] = weak[k]->result().worst;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < n; ++i)
    if (!errors[i].empty()) throw std::runtime_error("cascade member " + std::to_string(i) + ": " + errors[i]);
  for (std::size_t i = 0; i < n; ++i)
    if (source[i] != i) {
      trajs[i] = trajs[source[i]];
      table.members[i] = table.members[source[i]];
      table.members[i].stage = stages[i];
    }

  const double dt_record = c.dt * static_cast<double>(c.record_every);
  auto& rep = table.report;
  rep.config_hash = config_hash(c);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (stages[i] != stages[i + 1]) continue;
    const auto d = detail::trajectory_differences(trajs[i], trajs[i + 1], c.weight_exponent, dt_record);
    table.differences.push_back({stages[i], i, i + 1, d.phi_h1, d.c_l2, d.c_weighted});
  }
  for (const std::string stage : {"tau", "epsilon", "joint"}) {
    std::vector<const CascadeDifference*> ds;
    for (const auto& d : table.differences)
      if (d.stage == stage) ds.push_back(&d);
    if (ds.empty()) continue;
    if (stage == "tau") {
      for (const auto* d : ds) {
        const auto& a = table.members[d->from];
        const auto& b = table.members[d->to];
        if (a.cap_activations == 0 && b.cap_activations == 0)
          rep.add("tau_difference[" + DiagnosticsReport::fmt(a.tau) + "->" + DiagnosticsReport::fmt(b.tau) + "]",
                  "c and phi differences once the cap is inactive", std::max(d->c_l2, d->phi_h1), 1e-12);
      }
    } else {
      bool strictly = true;
      for (std::size_t k = 1; k < ds.size(); ++k) strictly = strictly && ds[k]->c_l2 < ds[k - 1]->c_l2;
      rep.add_flag(stage + "_c_differences_decreasing", "successive L2(0,T;L2) c-differences strictly decreasing", strictly,
                   strictly ? "" : "non-monotone; reported as measured");
      std::vector<double> x, y;
      for (const auto* d : ds) {
        x.push_back(table.members[d->from].epsilon);
        y.push_back(d->c_l2);
      }
      table.decay_rate[stage] = detail::log_slope(x, y);
      rep.add(stage + "_decay_rate", "fitted slope of log c-difference vs log epsilon", table.decay_rate[stage], -infinity,
              Bound::at_least, "informational");
    }
  }
  for (const auto& m : table.members)
    for (const auto& [a, w] : m.weak_form_worst)
      rep.add("alpha_weak_form[" + DiagnosticsReport::fmt(a) + "]", "worst weighted weak-form residual with weight phi^alpha", w, c.tolerance,
              Bound::at_most, "tau " + DiagnosticsReport::fmt(m.tau) + " epsilon " + DiagnosticsReport::fmt(m.epsilon));

  auto& man = table.manifest;
  man.verb = "cascade";
  man.config_text = echo_config(c);
  man.config_sha256 = rep.config_hash;
  man.seeds = {{"noise", c.noise.seed}, {"initial_phase", c.phase_seed}, {"test_functions", c.test_seed}};
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    {
      std::ofstream cfg(out_dir / "config.ini");
      cfg << man.config_text;
      std::ofstream mt(out_dir / "members.csv");
      mt << "index,stage,tau,epsilon,cap_activations,final_cap_activations,min_phi\n";
      for (std::size_t i = 0; i < n; ++i) {
        const auto& m = table.members[i];
        mt << i << ',' << m.stage << ',' << config_io::num(m.tau) << ',' << config_io::num(m.epsilon) << ',' << m.cap_activations
           << ',' << m.final_cap_activations << ',' << DiagnosticsReport::fmt(m.min_phi) << "\n";
      }
      std::ofstream dt(out_dir / "cascade.csv");
      dt << "stage,from,to,phi_h1,c_l2,c_weighted\n";
      for (const auto& d : table.differences)
        dt << d.stage << ',' << d.from << ',' << d.to << ',' << DiagnosticsReport::fmt(d.phi_h1) << ','
           << DiagnosticsReport::fmt(d.c_l2) << ',' << DiagnosticsReport::fmt(d.c_weighted) << "\n";
    }
    emit_report({{"cascade", rep}}, out_dir, c.plots);
    man.artifacts = hash_artifacts(out_dir);
  }
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) man.write(out_dir / "manifest.json");
  return table;
}

}  // namespace spf
