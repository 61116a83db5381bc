#include <CLI11.hpp>

#include <iostream>

#include "spf/harness.hpp"

using namespace spf;

namespace {

enum Exit { ok = 0, checks_failed = 1, bad_config = 2, aborted = 3 };

RunConfig load(const std::string& path, std::optional<std::uint64_t> seed, std::string* text = nullptr) {
  auto cfg = load_config(path);
  if (seed) cfg.noise.seed = *seed;
  if (text) *text = read_file(path);
  return cfg;
}

int print_summary(const fs::path& out) {
  std::ifstream in(out / "summary.txt");
  std::string line;
  int failed = 0;
  while (std::getline(in, line)) {
    std::cout << line << "\n";
    if (line.rfind("FAIL", 0) == 0) ++failed;
  }
  return failed == 0 ? ok : checks_failed;
}

int cmd_run(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed, int levels) {
  if (fs::path(config).extension() == ".json") {
    auto r = replay_manifest(config, out);
    std::cout << "replay of " << config << ": " << (r.identical ? "identical artifact hashes" : "artifact hashes differ") << "\n";
    for (const auto& m : r.mismatched) std::cout << "  mismatch " << m << "\n";
    return r.identical ? print_summary(out) : aborted;
  }
  std::string text;
  auto cfg = load(config, seed, &text);
  if (levels <= 1) {
    run_single(cfg, out, text);
    return print_summary(out);
  }
  std::vector<LabeledReport> reports;
  const double coarse = cfg.dt;
  for (int l = 0; l < levels; ++l) {
    auto lc = cfg;
    lc.dt = std::ldexp(coarse, -l);
    lc.noise_base_dt = coarse;
    lc.record_every = cfg.record_every << l;
    const std::string label = "dt_level_" + std::to_string(l);
    auto r = run_single(lc, fs::path(out) / label, text);
    reports.push_back({label + " dt=" + config_io::num(lc.dt), r.report});
  }
  emit_report(reports, out, cfg.plots);
  return print_summary(out);
}

int cmd_ensemble(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
                 std::optional<std::size_t> paths) {
  auto cfg = load(config, std::nullopt);
  if (seed) cfg.first_seed = *seed;
  const std::size_t M = paths ? *paths : cfg.paths;
  auto r = run_ensemble(cfg, M, out);
  std::cout << "paths " << M << " completed " << r.completed << " failed " << r.failed << (r.reliable ? "" : " (CIs unreliable)")
            << "\n";
  return print_summary(out);
}

int cmd_cascade(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  auto cfg = load(config, seed);
  auto t = run_cascade(cfg, CascadeSchedule::from(cfg), out);
  std::cout << "stage from to phi_h1 c_l2 c_weighted\n";
  for (const auto& d : t.differences)
    std::cout << d.stage << " " << d.from << " " << d.to << " " << d.phi_h1 << " " << d.c_l2 << " " << d.c_weighted << "\n";
  return print_summary(out);
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<LabeledReport> all;
  for (const auto& in : inputs) {
    auto rs = read_report_csv(in, fs::path(in).parent_path().filename().string());
    all.insert(all.end(), rs.begin(), rs.end());
  }
  emit_report(all, out);
  return print_summary(out);
}

int cmd_validate(const std::string& config, const std::string& model, std::uint64_t seed, std::size_t samples) {
  ModelSpec m = config.empty() ? make_model(model) : build_model(load_config(config));
  const auto rep = validate_invariance(m, samples, seed);
  std::cout << "model " << m.name << " components " << m.d << " samples " << rep.samples << "\n";
  std::cout << "lipschitz_g " << rep.lipschitz_g << "\ng_over_phi " << rep.g_over_phi << "\npsi_bound " << rep.psi_bound
            << "\nlipschitz_b_eta " << rep.lipschitz_b_eta << "\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(rep.violations.size(), 20); ++i)
    std::cout << "violation " << rep.violations[i].condition << " phi=" << rep.violations[i].phi
              << " value=" << rep.violations[i].value << "\n";
  std::cout << (rep.ok() ? "invariance conditions hold" : std::to_string(rep.violations.size()) + " violations") << "\n";
  return rep.ok() ? ok : checks_failed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic phase-field simulator and verification harness"};
  app.require_subcommand(1);
  std::string config, out, model = "abs";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> paths;
  int levels = 1;
  std::size_t samples = 10000;
  std::vector<std::string> inputs;

  auto* run = app.add_subcommand("run", "single trajectory with diagnostics (a manifest.json config replays it)");
  run->add_option("--config", config, "INI config or manifest.json")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory")->required();
  run->add_option("--seed", seed, "noise seed override");
  run->add_option("--dt-levels", levels, "number of dt halvings sharing one Brownian path")->check(CLI::Range(1, 8));

  auto* ens = app.add_subcommand("ensemble", "Monte Carlo ensemble with martingale statistics");
  ens->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ens->add_option("--out", out)->required();
  ens->add_option("--seed", seed, "first noise seed");
  ens->add_option("--paths", paths, "number of paths")->check(CLI::Range(2, 1000000));

  auto* cas = app.add_subcommand("cascade", "common-random-numbers regularization cascade");
  cas->add_option("--config", config)->required()->check(CLI::ExistingFile);
  cas->add_option("--out", out)->required();
  cas->add_option("--seed", seed, "shared noise seed");

  auto* rep = app.add_subcommand("report", "merge report CSVs into one summary with plots");
  rep->add_option("inputs", inputs, "report.csv files")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", out)->required();

  auto* val = app.add_subcommand("validate-model", "sample the invariance and growth conditions of a preset");
  val->add_option("--config", config)->check(CLI::ExistingFile);
  val->add_option("--model", model, "preset name when no config is given");
  val->add_option("--seed", seed);
  val->add_option("--samples", samples)->check(CLI::Range(1, 100000000));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, out, seed, levels);
    if (*ens) return cmd_ensemble(config, out, seed, paths);
    if (*cas) return cmd_cascade(config, out, seed);
    if (*rep) return cmd_report(inputs, out);
    if (*val) return cmd_validate(config, model, seed.value_or(1), samples);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return bad_config;
  } catch (const ModelError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return bad_config;
  } catch (const SolverAbort& e) {
    std::cerr << "solver aborted at step " << e.step() << " (t = " << e.time() << "): " << e.what() << "\n";
    return aborted;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return aborted;
  }
  return ok;
}
