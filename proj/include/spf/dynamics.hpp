#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spf/models.hpp"
#include "spf/noise.hpp"
#include "spf/torus_field.hpp"

namespace spf {

class SolverAbort : public std::runtime_error {
 public:
  SolverAbort(const std::string& what, std::size_t step, double t)
      : std::runtime_error(what + " (step " + std::to_string(step) + ", t = " + std::to_string(t) + ")"),
        step_(step),
        t_(t) {}
  std::size_t step() const noexcept { return step_; }
  double time() const noexcept { return t_; }

 private:
  std::size_t step_;
  double t_;
};

inline constexpr double infinity = std::numeric_limits<double>::infinity();

struct RegParams {
  double tau = infinity;
  double epsilon = 0.0;
  double alpha = 0.25;
  EtaCutoff eta{0.05};
  // Drop the gradient cap on steps where min phi already exceeds 2 epsilon.
  bool release_cap_when_positive = false;
};

enum class SingularForm { quotient, cole_hopf };

struct SolverConfig {
  double dt = 1e-4;
  double T = 0.5;
  double gamma = 1.0;
  std::vector<double> D{1.0};
  std::size_t record_every = 100;
  bool dealias = true;
  bool clip_c = false;
  bool freeze_phi = false;
  double blowup_factor = 10.0;
  double noise_base_dt = 0.0;  // coarse step the Brownian path is keyed on; 0 means dt
  SingularForm singular_form = SingularForm::quotient;
  bool keep_ledger = false;

  static SolverConfig for_model(const ModelSpec& m) {
    SolverConfig cfg;
    cfg.gamma = m.gamma;
    cfg.D = m.diffusion;
    return cfg;
  }

  std::size_t steps() const { return static_cast<std::size_t>(std::llround(T / dt)); }

  int noise_level() const {
    const double base = noise_base_dt > 0.0 ? noise_base_dt : dt;
    const double ratio = base / dt;
    const int level = static_cast<int>(std::lround(std::log2(ratio)));
    if (level < 0 || std::abs(std::ldexp(1.0, level) - ratio) > 1e-9 * ratio)
      throw std::invalid_argument("noise_base_dt must be dt times a power of two");
    return level;
  }

  void validate(int d) const {
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    if (!(T >= dt)) throw std::invalid_argument("horizon T must be at least dt");
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
    if (static_cast<int>(D.size()) != d) throw std::invalid_argument("diffusivity count must match components");
    for (double x : D)
      if (!(x > 0.0)) throw std::invalid_argument("diffusivities must be positive");
    if (record_every == 0) throw std::invalid_argument("record_every must be positive");
    noise_level();
  }
};

struct PhiStepDetails {
  VectorField grad;          // grad^tau phi used by the step
  ScalarField g;
  ScalarField psi;
  ScalarField tendency;      // g + psi as applied (after dealiasing)
  std::size_t cap_activations = 0;
};

struct CStepDetails {
  VectorField singular;
  VectorField reaction;
  VectorField tendency;      // singular + reaction as applied (after dealiasing)
  VectorField noise;         // b_eta dW
  AmplitudeField amplitude;
  std::size_t clip_activations = 0;
};

namespace detail {

inline double effective_tau(const RegParams& reg, const ScalarField& phi) {
  if (reg.release_cap_when_positive && phi.min() > 2.0 * reg.epsilon) return infinity;
  return reg.tau;
}

inline ScalarField filtered_physical(const ScalarField& f, bool dealias_on) {
  auto s = to_spectral(f);
  if (dealias_on) dealias(s);
  return to_physical(std::move(s));
}

inline void check_blowup(const ScalarField& phi, double bound, std::size_t step, double t) {
  for (double v : phi.values())
    if (!std::isfinite(v) || std::abs(v) > bound) throw SolverAbort("blow-up: sup|phi| exceeded " + std::to_string(bound), step, t);
}

}  // namespace detail

namespace detail {

// All pointwise model terms at (phi_k, c_k) in one sweep over the nodes.
struct NodeTerms {
  ScalarField g;
  ScalarField psi;
  VectorField reaction;
  AmplitudeField amplitude;
};

inline NodeTerms node_terms(const ModelSpec& m, const EtaCutoff& eta, const ScalarField& phi, const VectorField& c,
                            const VectorField* grad, const NonlocalValues& nv) {
  const auto& grid = phi.grid();
  const int d = m.d;
  NodeTerms t{ScalarField(grid), ScalarField(grid), VectorField(grid, d),
              AmplitudeField{d, std::vector<ScalarField>(static_cast<std::size_t>(d * d), ScalarField(grid))}};
  const bool phi_terms = grad != nullptr;
  const int n = grid.dim();
  std::array<double, max_components> state{}, r{};
  std::array<double, max_components * max_components> b{};
  const std::size_t size = phi.size();
  for (std::size_t i = 0; i < size; ++i) {
    const double p = phi[i];
    for (int j = 0; j < d; ++j) state[j] = c[j][i];
    if (phi_terms) {
      t.g[i] = m.g(p, state.data(), nv);
      if (!m.psi.empty()) {
        double coeff = 0.0;
        for (const auto& term : m.psi) coeff += term.coefficient(p, state.data(), nv);
        double s2 = 0.0;
        for (int a = 0; a < n; ++a) s2 += (*grad)[a][i] * (*grad)[a][i];
        t.psi[i] = coeff * std::sqrt(s2);
      }
    }
    m.f(p, state.data(), nv, r.data());
    for (int j = 0; j < d; ++j) t.reaction[j][i] = r[j];
    const double e = eta.value(m, state.data());
    if (e == 0.0) continue;
    m.b(p, state.data(), b.data());
    for (int k = 0; k < d * d; ++k) t.amplitude.entries[k][i] = e * b[k];
  }
  return t;
}

struct PhiUpdate {
  ScalarField phi;
  SpectralCoeffs hat;
};

// Phase-field step from a known spectrum of phi and its capped gradient already in pd.grad.
inline PhiUpdate phi_advance(SpectralCoeffs phi_hat, NodeTerms& terms, const ModelSpec& model, const SolverConfig& cfg,
                             PhiStepDetails& pd, bool full, std::size_t step) {
  auto tendency = terms.g + terms.psi;
  auto t_hat = to_spectral(tendency);
  if (cfg.dealias) dealias(t_hat);
  const auto& tab = SpectralTables::get(phi_hat.grid);
  for (std::size_t i = 0; i < phi_hat.size(); ++i)
    phi_hat.c[i] = (phi_hat.c[i] + cfg.dt * t_hat.c[i]) / (1.0 + cfg.dt * cfg.gamma * tab.laplace[i]);
  if (full) {
    pd.tendency = cfg.dealias ? to_physical(t_hat) : std::move(tendency);
    pd.g = std::move(terms.g);
    pd.psi = std::move(terms.psi);
  }
  auto next = to_physical(phi_hat);
  check_blowup(next, cfg.blowup_factor * model.k_phi, step + 1, (step + 1) * cfg.dt);
  return {std::move(next), std::move(phi_hat)};
}

}  // namespace detail

// One IMEX step of the phase-field equation: (I - dt gamma Lap)^{-1}[phi + dt (g + Psi(grad^tau phi))].
inline ScalarField step_phi(const ScalarField& phi, const VectorField& c, const ModelSpec& model,
                            const SolverConfig& cfg, const RegParams& reg, PhiStepDetails* details = nullptr,
                            std::size_t step = 0) {
  require_finite(phi, "phase field");
  PhiStepDetails local;
  auto& pd = details ? *details : local;
  check_inputs(model, phi, c);
  auto phi_hat = to_spectral(phi);
  pd.cap_activations = 0;
  pd.grad = grad_cap(gradient_from(phi_hat), detail::effective_tau(reg, phi), &pd.cap_activations);
  auto terms = detail::node_terms(model, reg.eta, phi, c, &pd.grad, nonlocal_values(model, phi, c));
  return detail::phi_advance(std::move(phi_hat), terms, model, cfg, pd, details != nullptr, step).phi;
}

namespace detail {

inline VectorField singular_from(const ScalarField& phi, const VectorField& grad_phi,
                                 const std::vector<SpectralCoeffs>& c_hat, const ModelSpec& model,
                                 const SolverConfig& cfg, const RegParams& reg, std::size_t step) {
  VectorField out(phi.grid(), model.d);
  bool any = false;
  for (double k : model.drift_multiplier) any = any || k != 0.0;
  if (!any) return out;
  if (reg.epsilon == 0.0 && phi.min() < 1e-12)
    throw SolverAbort("uncertified singular division: epsilon = 0 and min phi below 1e-12", step, step * cfg.dt);
  const int n = phi.grid().dim();
  std::optional<VectorField> grad_z;
  if (cfg.singular_form == SingularForm::cole_hopf) {
    auto z = map(phi, [&](double p) { return -std::log(p + reg.epsilon); });
    grad_z = gradient(z);
  }
  for (int j = 0; j < model.d; ++j) {
    const double coeff = model.drift_multiplier[j] * cfg.D[j];
    if (coeff == 0.0) continue;
    auto gc = gradient_from(c_hat[j]);
    auto& o = out[j];
    for (std::size_t i = 0; i < o.size(); ++i) {
      double dot = 0.0;
      if (grad_z) {
        for (int a = 0; a < n; ++a) dot -= gc[a][i] * (*grad_z)[a][i];
      } else {
        for (int a = 0; a < n; ++a) dot += gc[a][i] * grad_phi[a][i];
        dot /= phi[i] + reg.epsilon;
      }
      o[i] = coeff * dot;
    }
  }
  return out;
}

inline std::vector<SpectralCoeffs> spectra_of(const VectorField& c) {
  std::vector<SpectralCoeffs> out;
  out.reserve(static_cast<std::size_t>(c.components()));
  for (const auto& comp : c) out.push_back(to_spectral(comp));
  return out;
}

struct CUpdate {
  VectorField c;
  std::vector<SpectralCoeffs> hat;
};

inline CUpdate c_advance(const ScalarField& phi, const VectorField& grad_phi, std::vector<SpectralCoeffs> c_hat,
                         NodeTerms& terms, const ModelSpec& model, const SolverConfig& cfg, const RegParams& reg,
                         const VectorField& dW, CStepDetails& cd, bool full, std::size_t step) {
  auto sing = singular_from(phi, grad_phi, c_hat, model, cfg, reg, step);
  auto& reac = terms.reaction;
  cd.amplitude = std::move(terms.amplitude);
  VectorField noise(phi.grid(), model.d);
  for (int i = 0; i < model.d; ++i) {
    for (int j = 0; j < model.d; ++j) {
      if (model.diagonal_noise && i != j) continue;
      const auto& a = cd.amplitude.at(i, j);
      const auto& w = dW[j];
      auto& out = noise[i];
      for (std::size_t x = 0; x < out.size(); ++x) out[x] += a[x] * w[x];
    }
  }
  const auto& tab = SpectralTables::get(phi.grid());
  VectorField next(phi.grid(), model.d);
  if (full) cd.tendency = VectorField(phi.grid(), model.d);
  for (int j = 0; j < model.d; ++j) {
    auto e = sing[j] + reac[j];
    auto e_hat = to_spectral(e);
    if (cfg.dealias) dealias(e_hat);
    if (full) cd.tendency[j] = cfg.dealias ? to_physical(e_hat) : std::move(e);
    auto n_hat = to_spectral(noise[j]);
    auto& h = c_hat[static_cast<std::size_t>(j)];
    const double kappa = cfg.dt * cfg.D[j];
    for (std::size_t i = 0; i < h.size(); ++i)
      h.c[i] = (h.c[i] + cfg.dt * e_hat.c[i] + n_hat.c[i]) / (1.0 + kappa * tab.laplace[i]);
    next[j] = to_physical(h);
  }
  cd.clip_activations = 0;
  if (cfg.clip_c) {
    next = clip_to_K(next, model, &cd.clip_activations);
    if (cd.clip_activations > 0) c_hat = spectra_of(next);
  }
  double bound = 1.0;
  for (int j = 0; j < model.d; ++j) bound = std::max({bound, std::abs(model.lower[j]), std::abs(model.upper[j])});
  bound *= cfg.blowup_factor;
  for (const auto& comp : next) check_blowup(comp, bound, step + 1, (step + 1) * cfg.dt);
  if (full) {
    cd.singular = std::move(sing);
    cd.reaction = std::move(reac);
    cd.noise = std::move(noise);
  }
  return {std::move(next), std::move(c_hat)};
}

}  // namespace detail

// Singular transport kappa_j D_j grad c_j . grad^tau phi / (phi + eps), or the Cole-Hopf
// rewriting -kappa_j D_j grad c_j . grad z with z = log(1/(phi + eps)) differentiated spectrally.
inline VectorField singular_term(const ScalarField& phi, const VectorField& grad_phi, const VectorField& c,
                                 const ModelSpec& model, const SolverConfig& cfg, const RegParams& reg,
                                 std::size_t step = 0) {
  return detail::singular_from(phi, grad_phi, detail::spectra_of(c), model, cfg, reg, step);
}

// Euler-Maruyama step with implicit diffusion:
// c' = (I - dt D Lap)^{-1}[c + dt (singular + f) + b_eta dW].
inline VectorField step_c(const ScalarField& phi, const VectorField& grad_phi, const VectorField& c,
                          const ModelSpec& model, const SolverConfig& cfg, const RegParams& reg, const VectorField& dW,
                          CStepDetails* details = nullptr, std::size_t step = 0) {
  require_finite(c, "concentration");
  CStepDetails local;
  auto& cd = details ? *details : local;
  check_inputs(model, phi, c);
  auto terms = detail::node_terms(model, reg.eta, phi, c, nullptr, nonlocal_values(model, phi, c));
  return detail::c_advance(phi, grad_phi, detail::spectra_of(c), terms, model, cfg, reg, dW, cd, details != nullptr, step)
      .c;
}

// Everything a streaming diagnostic may need about the step k -> k+1.
struct StepView {
  std::size_t step;
  double t;
  double dt;
  const ScalarField& phi;
  const ScalarField& phi_next;
  const VectorField& c;
  const VectorField& c_next;
  const VectorField& grad_phi;       // grad^tau phi_k
  const ScalarField& phi_rate;       // (phi_{k+1} - phi_k) / dt
  // phi_{k+1} - phi_k = dt (gamma Lap phi_{k+1} + phi_tendency) holds exactly in every mode; for a
  // prescribed or frozen phase field the tendency is that remainder and g carries it, psi is zero.
  const ScalarField& phi_tendency;
  const ScalarField& g;
  const ScalarField& psi;
  const VectorField& c_tendency;     // applied singular + f
  const VectorField& singular;
  const VectorField& reaction;
  const VectorField& noise;          // b_eta dW
  const VectorField& dW;
  const AmplitudeField& amplitude;
  std::size_t cap_activations;
  bool phi_evolved;                  // phi advanced by its own equation
  const ModelSpec& model;
  const SolverConfig& cfg;
  const RegParams& reg;
  const NoiseSpectrum& spectrum;
};

class StepObserver {
 public:
  virtual ~StepObserver() = default;
  virtual void on_start(const ScalarField&, const VectorField&, const SolverConfig&) {}
  virtual void on_step(const StepView& view) = 0;
  virtual void on_finish() {}
};

struct Snapshot {
  std::size_t step = 0;
  double t = 0.0;
  ScalarField phi;
  VectorField c;
};

struct RunStats {
  std::size_t steps = 0;
  std::size_t cap_activations = 0;       // summed over steps
  std::size_t final_cap_activations = 0; // in the last step
  std::size_t clip_activations = 0;
  double max_excursion = 0.0;            // of c beyond K
  double min_phi = infinity;
  double max_phi = -infinity;
  double max_amplitude = 0.0;
  double wall_seconds = 0.0;
};

struct Trajectory {
  std::vector<Snapshot> snapshots;
  NoiseLedger ledger;
  RunStats stats;
};

// Prescribed phase-field path for the uncoupled mode: phi at step k.
using PhasePath = std::function<ScalarField(std::size_t step, double t)>;

inline PhasePath constant_path(const ScalarField& phi) {
  return [phi](std::size_t, double) { return phi; };
}

// Exact spectral heat flow of phi0 with diffusivity gamma.
inline PhasePath heat_flow_path(const ScalarField& phi0, double gamma) {
  auto hat = to_spectral(phi0);
  return [hat, gamma](std::size_t, double t) {
    auto s = hat;
    const auto& tab = SpectralTables::get(s.grid);
    for (std::size_t i = 0; i < s.size(); ++i) s.c[i] *= std::exp(-gamma * tab.laplace[i] * t);
    return to_physical(std::move(s));
  };
}

inline void validate_initial(const ModelSpec& model, const ScalarField& phi0, const VectorField& c0, bool need_phi_mass) {
  constexpr double tol = 1e-12;
  require_finite(phi0, "initial phase field");
  require_finite(c0, "initial concentration");
  if (c0.components() != model.d) throw std::invalid_argument("initial concentration has wrong component count");
  if (phi0.min() < -tol || phi0.max() > model.k_phi + tol)
    throw std::invalid_argument("initial phase field outside [0, K_phi]");
  if (need_phi_mass && phi0.max() <= 0.0) throw std::invalid_argument("initial phase field vanishes identically");
  std::string why;
  if (!state_in_K(model, c0, tol, &why)) throw std::invalid_argument("initial concentration outside K: " + why);
}

class Simulator {
 public:
  Simulator(ModelSpec model, SolverConfig cfg, RegParams reg, NoiseSpec noise, const TorusGrid& grid)
      : model_(std::move(model)), cfg_(std::move(cfg)), reg_(reg), spectrum_(noise, grid) {
    cfg_.validate(model_.d);
    reg_.eta.check(model_);
    if (noise.components != model_.d) throw std::invalid_argument("noise components must match model components");
    if (!(reg_.tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (!(reg_.epsilon >= 0.0)) throw std::invalid_argument("epsilon must be nonnegative");
    if (!(reg_.alpha >= 0.0 && reg_.alpha < 0.5)) throw std::invalid_argument("alpha must lie in [0, 1/2)");
  }

  const ModelSpec& model() const noexcept { return model_; }
  const SolverConfig& config() const noexcept { return cfg_; }
  const RegParams& reg() const noexcept { return reg_; }
  const NoiseSpectrum& spectrum() const noexcept { return spectrum_; }

  Trajectory run_coupled(const ScalarField& phi0, const VectorField& c0, std::span<StepObserver* const> obs = {}) const {
    validate_initial(model_, phi0, c0, true);
    return run(phi0, c0, nullptr, obs);
  }

  Trajectory run_uncoupled(const PhasePath& path, const VectorField& c0, std::span<StepObserver* const> obs = {}) const {
    auto phi0 = path(0, 0.0);
    validate_initial(model_, phi0, c0, false);
    return run(phi0, c0, &path, obs);
  }

 private:
  Trajectory run(const ScalarField& phi0, const VectorField& c0, const PhasePath* path,
                 std::span<StepObserver* const> obs) const {
    const auto start = std::chrono::steady_clock::now();
    const auto& grid = phi0.grid();
    if (!(grid == spectrum_.grid())) throw std::invalid_argument("initial data grid differs from noise grid");
    const int level = cfg_.noise_level();
    const double base_dt = std::ldexp(cfg_.dt, level);
    NoiseSampler sampler(spectrum_, spectrum_.spec().seed, base_dt, level);
    const std::size_t steps = cfg_.steps();

    Trajectory traj;
    traj.ledger = NoiseLedger{spectrum_.spec(), grid, cfg_.dt, level, {}};
    ScalarField phi = phi0;
    VectorField c = c0;
    traj.snapshots.push_back({0, 0.0, phi, c});
    for (auto* o : obs) o->on_start(phi, c, cfg_);
    const bool detailed = !obs.empty();
    PhiStepDetails pd;
    CStepDetails cd;
    auto& st = traj.stats;
    st.min_phi = phi.min();
    st.max_phi = phi.max();
    auto phi_hat = to_spectral(phi);
    auto c_hat = detail::spectra_of(c);
    for (std::size_t k = 0; k < steps; ++k) {
      const double t = k * cfg_.dt;
      auto dW = sampler.increment(k);
      const auto nv = nonlocal_values(model_, phi, c);
      ScalarField phi_next;
      SpectralCoeffs phi_next_hat;
      const bool moving = !(path || cfg_.freeze_phi);
      pd.cap_activations = 0;
      pd.grad = grad_cap(gradient_from(phi_hat), detail::effective_tau(reg_, phi), &pd.cap_activations);
      auto terms = detail::node_terms(model_, reg_.eta, phi, c, moving ? &pd.grad : nullptr, nv);
      if (moving) {
        auto up = detail::phi_advance(std::move(phi_hat), terms, model_, cfg_, pd, detailed, k);
        phi_next = std::move(up.phi);
        phi_next_hat = std::move(up.hat);
      } else {
        if (path) {
          phi_next = (*path)(k + 1, t + cfg_.dt);
          phi_next_hat = to_spectral(phi_next);
        } else {
          phi_next = phi;
          phi_next_hat = phi_hat;
        }
        if (detailed) {
          pd.tendency = phi_next - phi;
          pd.tendency *= 1.0 / cfg_.dt;
          pd.tendency.axpy(-cfg_.gamma, to_physical(spectral_laplacian(phi_next_hat)));
          pd.g = pd.tendency;
          pd.psi = ScalarField(grid);
        }
      }
      auto cu = detail::c_advance(phi, pd.grad, std::move(c_hat), terms, model_, cfg_, reg_, dW, cd, detailed, k);
      auto& c_next = cu.c;
      st.cap_activations += pd.cap_activations;
      st.final_cap_activations = pd.cap_activations;
      st.clip_activations += cd.clip_activations;
      st.max_amplitude = std::max(st.max_amplitude, cd.amplitude.sup_norm());
      if (detailed) {
        auto rate = phi_next - phi;
        rate *= 1.0 / cfg_.dt;
        StepView view{k,         t,           cfg_.dt,        phi,       phi_next, c,
                      c_next,    pd.grad,     rate,           pd.tendency, pd.g,   pd.psi,
                      cd.tendency, cd.singular, cd.reaction,  cd.noise,  dW,       cd.amplitude,
                      pd.cap_activations, moving, model_,     cfg_,      reg_,     spectrum_};
        for (auto* o : obs) o->on_step(view);
      }
      if (cfg_.keep_ledger) traj.ledger.increments.push_back(std::move(dW));
      phi = std::move(phi_next);
      phi_hat = std::move(phi_next_hat);
      c = std::move(c_next);
      c_hat = std::move(cu.hat);
      st.min_phi = std::min(st.min_phi, phi.min());
      st.max_phi = std::max(st.max_phi, phi.max());
      st.max_excursion = std::max(st.max_excursion, box_excursion(model_, c));
      if ((k + 1) % cfg_.record_every == 0 || k + 1 == steps)
        traj.snapshots.push_back({k + 1, (k + 1) * cfg_.dt, phi, c});
    }
    st.steps = steps;
    for (auto* o : obs) o->on_finish();
    st.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return traj;
  }

  ModelSpec model_;
  SolverConfig cfg_;
  RegParams reg_;
  NoiseSpectrum spectrum_;
};

inline Trajectory run_coupled(const SolverConfig& cfg, const ModelSpec& model, const RegParams& reg,
                              const NoiseSpec& noise, const ScalarField& phi0, const VectorField& c0,
                              std::span<StepObserver* const> obs = {}) {
  return Simulator(model, cfg, reg, noise, phi0.grid()).run_coupled(phi0, c0, obs);
}

inline Trajectory run_uncoupled(const SolverConfig& cfg, const ModelSpec& model, const RegParams& reg,
                                const NoiseSpec& noise, const PhasePath& path, const VectorField& c0,
                                std::span<StepObserver* const> obs = {}) {
  auto phi0 = path(0, 0.0);
  for (double k : model.drift_multiplier)
    if (k != 0.0 && reg.epsilon == 0.0 && phi0.min() <= 0.0)
      throw std::invalid_argument("phase path has zeros: a positive epsilon is required");
  return Simulator(model, cfg, reg, noise, phi0.grid()).run_uncoupled(path, c0, obs);
}

// Semi-implicit integration of u_t = gamma Lap u - M1 u - M2 |grad u| from phi0, the comparison
// function bounding phi from below.
class SubsolutionFloor {
 public:
  SubsolutionFloor(const ScalarField& phi0, double m1, double m2, double gamma, double dt, bool dealias_on = true)
      : u_(phi0), m1_(m1), m2_(m2), gamma_(gamma), dt_(dt), dealias_(dealias_on) {
    if (!(m1 >= 0.0 && m2 >= 0.0)) throw std::invalid_argument("Lipschitz constants must be nonnegative");
    if (phi0.min() < 0.0) throw std::invalid_argument("subsolution needs phi0 >= 0");
    if (phi0.max() <= 0.0) throw std::invalid_argument("subsolution needs phi0 not identically zero");
  }

  void step() {
    auto hat = to_spectral(u_);
    auto norm = magnitude(gradient_from(hat));
    ScalarField tendency(u_.grid());
    for (std::size_t i = 0; i < u_.size(); ++i) tendency[i] = -m1_ * u_[i] - m2_ * norm[i];
    auto t_hat = to_spectral(tendency);
    if (dealias_) dealias(t_hat);
    const auto& tab = SpectralTables::get(u_.grid());
    for (std::size_t i = 0; i < hat.size(); ++i)
      hat.c[i] = (hat.c[i] + dt_ * t_hat.c[i]) / (1.0 + dt_ * gamma_ * tab.laplace[i]);
    u_ = to_physical(std::move(hat));
  }

  const ScalarField& value() const noexcept { return u_; }

 private:
  ScalarField u_;
  double m1_, m2_, gamma_, dt_;
  bool dealias_;
};

inline std::pair<ScalarField, double> subsolution_floor(const ScalarField& phi0, double m1, double m2, double t,
                                                        const SolverConfig& cfg) {
  SubsolutionFloor floor(phi0, m1, m2, cfg.gamma, cfg.dt, cfg.dealias);
  const auto steps = static_cast<std::size_t>(std::llround(t / cfg.dt));
  for (std::size_t k = 0; k < steps; ++k) floor.step();
  return {floor.value(), floor.value().min()};
}

}  // namespace spf
