#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spf/dynamics.hpp"
#include "spf/philox.hpp"

namespace spf {

class DiagnosticError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double default_guard = 1e-12;

// ---------------------------------------------------------------------------------------------
// Report

enum class Bound { at_most, at_least };

struct CheckResult {
  std::string id;
  std::string formula;
  double value = 0.0;
  double tolerance = 0.0;
  Bound bound = Bound::at_most;
  bool pass = false;
  std::string note;
};

struct Series {
  std::string id;
  std::vector<double> t;
  std::vector<double> value;
};

class DiagnosticsReport {
 public:
  std::string config_hash;

  CheckResult& add(std::string id, std::string formula, double value, double tolerance, Bound bound = Bound::at_most,
                   std::string note = {}) {
    CheckResult r{std::move(id), std::move(formula), value, tolerance, bound, false, std::move(note)};
    r.pass = std::isfinite(value) && (bound == Bound::at_most ? value <= tolerance : value >= tolerance);
    checks_.push_back(std::move(r));
    return checks_.back();
  }

  // A yes/no property recorded as value 1 (holds) against tolerance 1.
  CheckResult& add_flag(std::string id, std::string formula, bool holds, std::string note = {}) {
    return add(std::move(id), std::move(formula), holds ? 1.0 : 0.0, 1.0, Bound::at_least, std::move(note));
  }

  void add_result(CheckResult r) { checks_.push_back(std::move(r)); }
  void add_series(Series s) { series_.push_back(std::move(s)); }
  void merge(const DiagnosticsReport& o) {
    checks_.insert(checks_.end(), o.checks_.begin(), o.checks_.end());
    series_.insert(series_.end(), o.series_.begin(), o.series_.end());
  }

  const std::vector<CheckResult>& checks() const noexcept { return checks_; }
  const std::vector<Series>& series() const noexcept { return series_; }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(checks_.begin(), checks_.end(), [](const auto& c) { return !c.pass; }));
  }
  bool all_passed() const { return failures() == 0; }

  // Failures first, otherwise in insertion order.
  std::vector<CheckResult> ordered() const {
    std::vector<CheckResult> out = checks_;
    std::stable_partition(out.begin(), out.end(), [](const auto& c) { return !c.pass; });
    return out;
  }

  void write_text(std::ostream& os) const {
    os << "config_hash " << (config_hash.empty() ? "-" : config_hash) << "\n";
    os << "checks " << checks_.size() << " failed " << failures() << "\n";
    for (const auto& c : ordered()) {
      os << (c.pass ? "PASS " : "FAIL ") << c.id << " value=" << fmt(c.value)
         << (c.bound == Bound::at_most ? " <= " : " >= ") << fmt(c.tolerance) << " formula=" << c.formula;
      if (!c.note.empty()) os << " note=" << c.note;
      os << "\n";
    }
  }

  void write_csv(std::ostream& os) const {
    os << "id,formula,value,tolerance,bound,pass,config_hash,note\n";
    for (const auto& c : ordered())
      os << csv(c.id) << ',' << csv(c.formula) << ',' << fmt(c.value) << ',' << fmt(c.tolerance) << ','
         << (c.bound == Bound::at_most ? "at_most" : "at_least") << ',' << (c.pass ? 1 : 0) << ',' << config_hash
         << ',' << csv(c.note) << "\n";
  }

  void write_series_csv(std::ostream& os) const {
    os << "id,t,value\n";
    for (const auto& s : series_)
      for (std::size_t i = 0; i < s.t.size(); ++i) os << csv(s.id) << ',' << fmt(s.t[i]) << ',' << fmt(s.value[i]) << "\n";
  }

  static std::string fmt(double x) {
    std::ostringstream ss;
    ss << std::setprecision(10) << x;
    return ss.str();
  }

 private:
  static std::string csv(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
  }

  std::vector<CheckResult> checks_;
  std::vector<Series> series_;
};

// ---------------------------------------------------------------------------------------------
// Weights and test functions

enum class WeightKind { constant, phi_power, heat, path };

using WeightPath = std::function<ScalarField(std::size_t step, double t)>;

class Weight {
 public:
  static Weight constant() { return Weight(WeightKind::constant); }

  // rho = max(phi + shift, 0)^alpha
  static Weight phi_power(double alpha, double shift = 0.0) {
    if (!(alpha > 0.0 && alpha < 0.5)) throw DiagnosticError("phi-power weight needs alpha in (0, 1/2)");
    if (!(shift >= 0.0)) throw DiagnosticError("phi-power shift must be nonnegative");
    Weight w(WeightKind::phi_power);
    w.alpha_ = alpha;
    w.shift_ = shift;
    return w;
  }

  // rho = sqrt(h), h the heat flow of phi0 with the given diffusivity.
  static Weight heat(double diffusivity) {
    if (!(diffusivity > 0.0)) throw DiagnosticError("heat weight needs a positive diffusivity");
    Weight w(WeightKind::heat);
    w.diffusivity_ = diffusivity;
    return w;
  }

  static Weight path(WeightPath rho, std::string label = "path") {
    if (!rho) throw DiagnosticError("path weight needs a function");
    Weight w(WeightKind::path);
    w.path_ = std::move(rho);
    w.label_ = std::move(label);
    return w;
  }

  WeightKind kind() const noexcept { return kind_; }
  double alpha() const noexcept { return alpha_; }
  double shift() const noexcept { return shift_; }
  double diffusivity() const noexcept { return diffusivity_; }

  std::string label() const {
    switch (kind_) {
      case WeightKind::constant: return "one";
      case WeightKind::phi_power: return "phi^" + DiagnosticsReport::fmt(alpha_);
      case WeightKind::heat: return "sqrt_heat";
      case WeightKind::path: return label_;
    }
    return "?";
  }

  void start(const ScalarField& phi0) {
    if (kind_ == WeightKind::heat) {
      if (phi0.min() < -1e-12) throw DiagnosticError("heat weight needs phi0 >= 0");
      phi0_hat_ = to_spectral(phi0);
    }
  }

  ScalarField rho(std::size_t step, double t, const ScalarField& phi) const {
    switch (kind_) {
      case WeightKind::constant: return ScalarField(phi.grid(), 1.0);
      case WeightKind::phi_power: {
        const double a = alpha_, e = shift_;
        return map(phi, [a, e](double p) { return std::pow(std::max(p + e, 0.0), a); });
      }
      case WeightKind::heat: {
        auto h = heat_value(t);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::sqrt(std::max(h[i], 0.0));
        return h;
      }
      case WeightKind::path: {
        auto r = path_(step, t);
        if (!(r.grid() == phi.grid())) throw DiagnosticError("weight path lives on another grid");
        if (r.min() < 0.0) throw DiagnosticError("weight path must be nonnegative");
        require_finite(r, "weight path");
        return r;
      }
    }
    throw DiagnosticError("unknown weight kind");
  }

  ScalarField heat_value(double t) const {
    if (phi0_hat_.size() == 0) throw DiagnosticError("heat weight used before start");
    auto s = phi0_hat_;
    const auto& tab = SpectralTables::get(s.grid);
    for (std::size_t i = 0; i < s.size(); ++i) s.c[i] *= std::exp(-diffusivity_ * tab.laplace[i] * t);
    return to_physical(s);
  }

 private:
  explicit Weight(WeightKind k) : kind_(k) {}
  WeightKind kind_;
  double alpha_ = 0.0;
  double shift_ = 0.0;
  double diffusivity_ = 1.0;
  WeightPath path_;
  std::string label_;
  SpectralCoeffs phi0_hat_;
};

struct TestFunction {
  std::string label;
  ScalarField u;
};

using TestFunctionSet = std::vector<TestFunction>;

// Real Fourier modes with 1-norm of k at most two (the constant, cos and sin per half-space k) plus one
// seeded random field with modes |k|_inf <= 3 scaled to sup norm one.
inline TestFunctionSet default_tests(const TorusGrid& grid, std::uint64_t seed) {
  TestFunctionSet out;
  const int n = grid.dim();
  out.push_back({"1", ScalarField(grid, 1.0)});
  for_each_box_mode(n, 2, [&](const std::array<int, 3>& k, std::uint32_t) {
    int l1 = 0;
    for (int a = 0; a < n; ++a) l1 += std::abs(k[a]);
    if (l1 == 0 || l1 > 2 || !in_half_space(k)) return;
    std::string tag;
    for (int a = 0; a < n; ++a) tag += (a ? "," : "") + std::to_string(k[a]);
    auto phase = [&](const std::array<double, 3>& x) {
      double s = 0.0;
      for (int a = 0; a < n; ++a) s += k[a] * x[a];
      return two_pi * s;
    };
    out.push_back({"cos(" + tag + ")", ScalarField::from_function(grid, [&](const auto& x) { return std::cos(phase(x)); })});
    out.push_back({"sin(" + tag + ")", ScalarField::from_function(grid, [&](const auto& x) { return std::sin(phase(x)); })});
  });
  CounterStream rng(seed, 0x7E57u);
  ScalarField r(grid);
  for_each_box_mode(n, 3, [&](const std::array<int, 3>& k, std::uint32_t) {
    if (!in_half_space(k)) return;
    const double a = rng.normal(), b = rng.normal();
    for (std::size_t i = 0; i < r.size(); ++i) {
      auto x = grid.coordinates(i);
      double s = 0.0;
      for (int d = 0; d < n; ++d) s += k[d] * x[d];
      r[i] += a * std::cos(two_pi * s) + b * std::sin(two_pi * s);
    }
  });
  r *= 1.0 / r.sup_norm();
  out.push_back({"random", std::move(r)});
  return out;
}

// ---------------------------------------------------------------------------------------------
// Helpers

namespace detail {

inline std::vector<int> component_list(const std::vector<int>& requested, int d) {
  if (requested.empty()) {
    std::vector<int> all(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) all[static_cast<std::size_t>(j)] = j;
    return all;
  }
  for (int j : requested)
    if (j < 0 || j >= d) throw DiagnosticError("component selector out of range");
  return requested;
}

// -<phi, Lap phi>: the gradient energy in the form that telescopes exactly against the scheme.
inline double gradient_energy(const ScalarField& phi, const ScalarField& lap) { return -inner(phi, lap); }

inline double max_abs(std::initializer_list<double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Admissibility integral  sum_k dt ∫ rho_k^2 |grad phi_k|^2 / max(phi_k, g)^2

struct AdmissibilityResult {
  std::vector<double> guards;
  std::vector<double> integral;          // per guard
  std::vector<std::size_t> activations;  // node-steps where the guard replaced phi and the integrand was live
  std::string weight;
};

class AdmissibilityObserver : public StepObserver {
 public:
  AdmissibilityObserver(Weight w, std::vector<double> guards = {default_guard}) : w_(std::move(w)) {
    if (guards.empty()) throw DiagnosticError("need at least one guard");
    for (double g : guards)
      if (!(g > 0.0)) throw DiagnosticError("guards must be positive");
    res_.guards = std::move(guards);
    res_.integral.assign(res_.guards.size(), 0.0);
    res_.activations.assign(res_.guards.size(), 0);
    res_.weight = w_.label();
  }

  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig&) override { w_.start(phi0); }

  void on_step(const StepView& v) override {
    auto rho = w_.rho(v.step, v.t, v.phi);
    auto grad2 = magnitude(gradient(v.phi));
    const std::size_t n = v.phi.size();
    for (std::size_t gi = 0; gi < res_.guards.size(); ++gi) {
      const double g = res_.guards[gi];
      std::size_t act = 0;
      double s = pairwise_sum(0, n, [&](std::size_t i) {
        const double num = rho[i] * rho[i] * grad2[i] * grad2[i];
        if (num == 0.0) return 0.0;
        const double q = v.phi[i] < g ? (++act, g) : v.phi[i];
        return num / (q * q);
      });
      res_.integral[gi] += v.dt * s / static_cast<double>(n);
      res_.activations[gi] += act;
    }
  }

  const AdmissibilityResult& result() const noexcept { return res_; }

 private:
  Weight w_;
  AdmissibilityResult res_;
};

// ---------------------------------------------------------------------------------------------
// Alpha scan  alpha sum_k dt ∫ |grad phi|^2 / max(phi, g)^(2 - 2 alpha), plus the log estimate

struct AlphaScanResult {
  std::vector<double> alphas;
  std::vector<double> scaled;       // alpha * integral
  double max_over_min = 0.0;
  double trend_slope = 0.0;         // d log(scaled) / d log(1/alpha); positive means growth as alpha decreases
  double log_gradient_integral = 0.0;  // sum dt ∫ |grad phi / phi|^2
  double log_l1_initial = 0.0;
  double log_l1_sup = 0.0;
  std::size_t guard_activations = 0;
};

class AlphaScanObserver : public StepObserver {
 public:
  explicit AlphaScanObserver(std::vector<double> alphas, double guard = default_guard)
      : alphas_(std::move(alphas)), guard_(guard), sums_(alphas_.size(), 0.0) {
    if (alphas_.empty()) throw DiagnosticError("alpha scan needs at least one alpha");
    for (double a : alphas_)
      if (!(a > 0.0 && a < 0.5)) throw DiagnosticError("alpha scan values must lie in (0, 1/2)");
    if (!(guard > 0.0)) throw DiagnosticError("guard must be positive");
  }

  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig&) override {
    log0_ = log_l1(phi0);
    sup_ = log0_;
  }

  void on_step(const StepView& v) override {
    auto gm = magnitude(gradient(v.phi));
    const std::size_t n = v.phi.size();
    std::size_t act = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (v.phi[i] < guard_ && gm[i] != 0.0) ++act;
    acts_ += act;
    for (std::size_t a = 0; a < alphas_.size(); ++a) {
      const double p = 2.0 - 2.0 * alphas_[a];
      sums_[a] += v.dt * pairwise_sum(0, n, [&](std::size_t i) {
                    return gm[i] * gm[i] / std::pow(std::max(v.phi[i], guard_), p);
                  }) / static_cast<double>(n);
    }
    logint_ += v.dt * pairwise_sum(0, n, [&](std::size_t i) {
                 const double q = std::max(v.phi[i], guard_);
                 return gm[i] * gm[i] / (q * q);
               }) / static_cast<double>(n);
    sup_ = std::max(sup_, log_l1(v.phi_next));
  }

  AlphaScanResult result() const {
    AlphaScanResult r;
    r.alphas = alphas_;
    for (std::size_t a = 0; a < alphas_.size(); ++a) r.scaled.push_back(alphas_[a] * sums_[a]);
    auto [mn, mx] = std::minmax_element(r.scaled.begin(), r.scaled.end());
    r.max_over_min = *mn > 0.0 ? *mx / *mn : (*mx > 0.0 ? infinity : 1.0);
    r.trend_slope = slope(r.alphas, r.scaled);
    r.log_gradient_integral = logint_;
    r.log_l1_initial = log0_;
    r.log_l1_sup = sup_;
    r.guard_activations = acts_;
    return r;
  }

  // Least-squares slope of log(values) against log(1/alpha); zero when any value vanishes.
  static double slope(const std::vector<double>& alphas, const std::vector<double>& values) {
    const std::size_t n = alphas.size();
    if (n < 2) return 0.0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(values[i] > 0.0)) return 0.0;
      const double x = -std::log(alphas[i]), y = std::log(values[i]);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double den = n * sxx - sx * sx;
    return den == 0.0 ? 0.0 : (n * sxy - sx * sy) / den;
  }

 private:
  double log_l1(const ScalarField& phi) const {
    return pairwise_sum(0, phi.size(), [&](std::size_t i) { return std::abs(std::log(std::max(phi[i], guard_))); }) /
           static_cast<double>(phi.size());
  }

  std::vector<double> alphas_;
  double guard_;
  std::vector<double> sums_;
  double logint_ = 0.0, log0_ = 0.0, sup_ = 0.0;
  std::size_t acts_ = 0;
};

// Constant of the log estimate: sup ||log phi_t||_1 <= ||log phi_0||_1 + (M1 + M2^2 / (2 gamma)) T.
inline double log_estimate_constant(double m1, double m2, double gamma) { return m1 + m2 * m2 / (2.0 * gamma); }

// ---------------------------------------------------------------------------------------------
// Weight support identity for Q(t) = ∫ (1 - phi^a) rho^2 along the discrete path:
//   dQ = -a(1-a) gamma ∫|grad phi|^2 phi^(a-2) rho^2 + a gamma ∫ phi^(a-1) grad phi . grad(rho^2)
//        - a ∫ psi phi^(a-1) rho^2 - a ∫ g phi^(a-1) rho^2 + 2 ∫ d_t rho rho (1 - phi^a)

struct WeightSupportResult {
  double residual = 0.0;     // Q_T - Q_0 - sum of terms
  double normalized = 0.0;   // |residual| / max single term
  double scale = 0.0;
  std::map<std::string, double> terms;
  std::size_t guard_activations = 0;
};

class WeightSupportObserver : public StepObserver {
 public:
  WeightSupportObserver(Weight w, double alpha, double guard = default_guard, bool drop_rate_term = false)
      : w_(std::move(w)), alpha_(alpha), guard_(guard), drop_rate_(drop_rate_term) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DiagnosticError("weight support alpha must lie in (0, 1)");
  }

  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig&) override {
    w_.start(phi0);
    rho_ = w_.rho(0, 0.0, phi0);
    q0_ = support_mass(phi0, rho_);
  }

  void on_step(const StepView& v) override {
    const double a = alpha_, gamma = v.cfg.gamma;
    auto next_rho = w_.rho(v.step + 1, v.t + v.dt, v.phi_next);
    auto grad = gradient(v.phi);
    ScalarField rho2 = rho_ * rho_;
    auto grad_rho2 = gradient(rho2);
    const std::size_t n = v.phi.size();
    const int dim = v.phi.grid().dim();
    std::size_t act = 0;
    ScalarField pm1(v.phi.grid()), pm2(v.phi.grid());
    for (std::size_t i = 0; i < n; ++i) {
      double q = v.phi[i];
      if (q < guard_) {
        q = guard_;
        if (rho2[i] != 0.0) ++act;
      }
      pm1[i] = std::pow(q, a - 1.0);
      pm2[i] = pm1[i] / q;
    }
    acts_ += act;
    auto sum = [&](auto&& fn) { return v.dt * pairwise_sum(0, n, fn) / static_cast<double>(n); };
    terms_["quotient"] += sum([&](std::size_t i) {
      double g2 = 0.0;
      for (int d = 0; d < dim; ++d) g2 += grad[d][i] * grad[d][i];
      return -a * (1.0 - a) * gamma * g2 * pm2[i] * rho2[i];
    });
    terms_["cross"] += sum([&](std::size_t i) {
      double s = 0.0;
      for (int d = 0; d < dim; ++d) s += grad[d][i] * grad_rho2[d][i];
      return a * gamma * pm1[i] * s;
    });
    terms_["psi"] += sum([&](std::size_t i) { return -a * (v.phi_tendency[i] - v.g[i]) * pm1[i] * rho2[i]; });
    terms_["g"] += sum([&](std::size_t i) { return -a * v.g[i] * pm1[i] * rho2[i]; });
    if (!drop_rate_)
      terms_["rate"] += pairwise_sum(0, n, [&](std::size_t i) {
                          return 2.0 * (next_rho[i] - rho_[i]) * rho_[i] * (1.0 - std::pow(std::max(v.phi[i], 0.0), a));
                        }) / static_cast<double>(n);
    rho_ = std::move(next_rho);
    last_phi_ = v.phi_next;
  }

  void on_finish() override { qt_ = last_phi_.size() ? support_mass(last_phi_, rho_) : q0_; }

  WeightSupportResult result() const {
    WeightSupportResult r;
    r.terms = terms_;
    double total = 0.0, scale = detail::max_abs({qt_, q0_});
    for (const auto& [k, val] : terms_) {
      total += val;
      scale = std::max(scale, std::abs(val));
    }
    r.residual = qt_ - q0_ - total;
    r.scale = scale;
    r.normalized = scale > 0.0 ? std::abs(r.residual) / scale : 0.0;
    r.guard_activations = acts_;
    return r;
  }

 private:
  double support_mass(const ScalarField& phi, const ScalarField& rho) const {
    return pairwise_sum(0, phi.size(), [&](std::size_t i) {
             return (1.0 - std::pow(std::max(phi[i], 0.0), alpha_)) * rho[i] * rho[i];
           }) /
           static_cast<double>(phi.size());
  }

  Weight w_;
  double alpha_, guard_;
  bool drop_rate_;
  ScalarField rho_, last_phi_;
  double q0_ = 0.0, qt_ = 0.0;
  std::map<std::string, double> terms_;
  std::size_t acts_ = 0;
};

// ---------------------------------------------------------------------------------------------
// Ito formula for ||c_j||^2 along the scheme:
//   ||c_T||^2 - ||c_0||^2 = sum_k [ dt D <Lap c_{k+1}, c_{k+1} + c_k> + 2 dt <E_k, c_k> + 2 <N_k, c_k> + dt tr_k ] + R

struct ItoSquareResult {
  std::vector<double> t;
  std::vector<double> residual;  // R(t)
  double final_residual = 0.0;
  double max_residual = 0.0;
  double rms_residual = 0.0;
  double martingale = 0.0;       // sum_k 2 <N_k, c_k>
  double trace_term = 0.0;
  double scale = 0.0;            // ||c_0||^2
};

class ItoSquareObserver : public StepObserver {
 public:
  explicit ItoSquareObserver(std::vector<int> components = {}) : requested_(std::move(components)) {}

  void on_start(const ScalarField&, const VectorField& c0, const SolverConfig&) override {
    initial_ = 0.0;
    comps_ = detail::component_list(requested_, c0.components());
    for (int j : comps_) initial_ += norm2_squared(c0[j]);
  }

  void on_step(const StepView& v) override {
    double now = 0.0;
    for (int j : comps_) {
      const auto& cn = v.c_next[j];
      const auto& ck = v.c[j];
      auto lap = laplacian(cn);
      diffusion_ += v.dt * v.cfg.D[static_cast<std::size_t>(j)] * (inner(lap, cn) + inner(lap, ck));
      drift_ += 2.0 * v.dt * inner(v.c_tendency[j], ck);
      mart_ += 2.0 * inner(v.noise[j], ck);
      double amp2 = 0.0;
      const int d = v.model.d;
      for (int l = 0; l < d; ++l) {
        if (v.model.diagonal_noise && l != j) continue;
        amp2 += norm2_squared(v.amplitude.at(j, l));
      }
      trace_ += v.dt * v.spectrum.trace() * amp2;
      now += norm2_squared(cn);
    }
    const double r = now - initial_ - diffusion_ - drift_ - mart_ - trace_;
    res_.t.push_back(v.t + v.dt);
    res_.residual.push_back(r);
  }

  ItoSquareResult result() const {
    ItoSquareResult r = res_;
    r.final_residual = r.residual.empty() ? 0.0 : r.residual.back();
    double sq = 0.0;
    for (double x : r.residual) {
      r.max_residual = std::max(r.max_residual, std::abs(x));
      sq += x * x;
    }
    r.rms_residual = r.residual.empty() ? 0.0 : std::sqrt(sq / r.residual.size());
    r.martingale = mart_;
    r.trace_term = trace_;
    r.scale = initial_;
    return r;
  }

 private:
  std::vector<int> requested_, comps_;
  double initial_ = 0.0, diffusion_ = 0.0, drift_ = 0.0, mart_ = 0.0, trace_ = 0.0;
  ItoSquareResult res_;
};

// ---------------------------------------------------------------------------------------------
// Gradient energy of the phase field:
//   E(phi_T) - E(phi_0) = sum_k [ -dt gamma <Lap phi_{k+1}, Lap phi_k + Lap phi_{k+1}> - 2 dt <G_k, Lap phi_k> ] + R,
// E(phi) = -<phi, Lap phi>, G the applied explicit tendency.

struct PhiEnergyResult {
  double residual = 0.0;
  double normalized = 0.0;
  double dissipation = 0.0;
  double forcing = 0.0;
  double max_dissipation_increment = 0.0;  // must stay <= 0
  double initial = 0.0, final_energy = 0.0;
};

class PhiEnergyObserver : public StepObserver {
 public:
  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig&) override {
    lap_ = laplacian(phi0);
    res_.initial = detail::gradient_energy(phi0, lap_);
    res_.max_dissipation_increment = -infinity;
  }

  void on_step(const StepView& v) override {
    auto lap_next = laplacian(v.phi_next);
    const double inc = -v.dt * v.cfg.gamma * (inner(lap_next, lap_) + inner(lap_next, lap_next));
    res_.dissipation += inc;
    res_.max_dissipation_increment = std::max(res_.max_dissipation_increment, inc);
    res_.forcing += -2.0 * v.dt * inner(v.phi_tendency, lap_);
    res_.final_energy = detail::gradient_energy(v.phi_next, lap_next);
    lap_ = std::move(lap_next);
  }

  PhiEnergyResult result() const {
    auto r = res_;
    r.residual = r.final_energy - r.initial - r.dissipation - r.forcing;
    const double scale = detail::max_abs({r.final_energy, r.initial, r.dissipation, r.forcing});
    r.normalized = scale > 0.0 ? std::abs(r.residual) / scale : 0.0;
    if (!std::isfinite(r.max_dissipation_increment)) r.max_dissipation_increment = 0.0;
    return r;
  }

 private:
  ScalarField lap_;
  PhiEnergyResult res_;
};

// ---------------------------------------------------------------------------------------------
// Log transform z = -log phi:  (z_{k+1} - z_k)/dt - gamma (Lap z_{k+1} - |grad z_{k+1}|^2) + G_k / phi_{k+1} = r_k

class ColeHopfObserver : public StepObserver {
 public:
  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig&) override {
    if (phi0.min() <= 0.0) throw DiagnosticError("log transform needs a positive phase field");
    z_ = map(phi0, [](double p) { return -std::log(p); });
  }

  void on_step(const StepView& v) override {
    if (v.phi_next.min() <= 0.0) throw DiagnosticError("log transform needs a positive phase field");
    auto z_next = map(v.phi_next, [](double p) { return -std::log(p); });
    auto hat = to_spectral(z_next);
    auto lap = to_physical(spectral_laplacian(hat));
    auto gm = magnitude(gradient_from(hat));
    ScalarField r(z_next.grid());
    for (std::size_t i = 0; i < r.size(); ++i)
      r[i] = (z_next[i] - z_[i]) / v.dt - v.cfg.gamma * (lap[i] - gm[i] * gm[i]) + v.phi_tendency[i] / v.phi_next[i];
    acc_ += v.dt * norm2_squared(r);
    z_ = std::move(z_next);
  }

  double residual() const { return std::sqrt(acc_); }

 private:
  ScalarField z_;
  double acc_ = 0.0;
};

// ---------------------------------------------------------------------------------------------
// Weighted weak form. For test v_k = s_k u with s = rho^p (p = 2 for the weighted formulation, p = 1 for the
// product rule with y = rho):
//   <c_K, v_K> - <c_0, v_0> = sum_k [ dt D <Lap c, v_k> + dt <S_k, v_k> + dt <f_k, v_k> + <c, v_{k+1} - v_k> + <N_k, v_k> ] + R
// with c = c_k (left point) or, for the scheme-consistent quadrature, c_{k+1} in the diffusion and weight-rate
// terms and the filtered tendencies. For phi-power weights the expanded form acts on Y = <(phi+e)^a c, u>.

enum class Quadrature { left_point, scheme_consistent };

struct WeakFormOptions {
  int exponent = 2;
  bool expanded = true;  // use the expanded identity for phi-power weights
  Quadrature quadrature = Quadrature::left_point;
  std::vector<int> components;
  double guard = default_guard;
  double degenerate_fraction = 1e-8;  // tests whose scale is below this share of the largest are not scored
};

struct WeakFormEntry {
  std::string test;
  int component = 0;
  double lhs = 0.0;  // final minus initial pairing
  std::map<std::string, double> terms;
  double residual = 0.0;
  double scale = 0.0;
  double normalized = 0.0;
  bool scored = true;
};

struct WeakFormResult {
  std::string weight;
  bool expanded = false;
  std::vector<WeakFormEntry> entries;
  double worst = 0.0;  // max normalized residual over scored entries
  std::size_t guard_activations = 0;

  // Worst normalized residual when the named term is left out of the balance.
  double worst_without(const std::string& term) const {
    double w = 0.0;
    for (const auto& e : entries) {
      if (!e.scored) continue;
      auto it = e.terms.find(term);
      const double t = it == e.terms.end() ? 0.0 : it->second;
      w = std::max(w, std::abs(e.residual + t) / e.scale);
    }
    return w;
  }

  std::vector<std::string> term_names() const {
    return entries.empty() ? std::vector<std::string>{} : [&] {
      std::vector<std::string> names;
      for (const auto& [k, v] : entries.front().terms) names.push_back(k);
      return names;
    }();
  }
};

class WeakFormObserver : public StepObserver {
 public:
  WeakFormObserver(Weight w, TestFunctionSet tests, WeakFormOptions opt = {})
      : w_(std::move(w)), tests_(std::move(tests)), opt_(std::move(opt)) {
    if (tests_.empty()) throw DiagnosticError("weak form needs test functions");
    if (opt_.exponent != 1 && opt_.exponent != 2) throw DiagnosticError("weight exponent must be 1 or 2");
    expanded_ = opt_.expanded && w_.kind() == WeightKind::phi_power;
    if (expanded_) {
      for (const auto& t : tests_) grad_u_.push_back(gradient(t.u));
    }
  }

  void on_start(const ScalarField& phi0, const VectorField& c0, const SolverConfig&) override {
    if (w_.kind() == WeightKind::constant && phi0.min() <= 0.0)
      throw DiagnosticError("constant weight is admissible only for a positive initial phase field");
    w_.start(phi0);
    comps_ = detail::component_list(opt_.components, c0.components());
    entries_.clear();
    for (int j : comps_)
      for (const auto& t : tests_) entries_.push_back({t.label, j, 0.0, {}, 0.0, 0.0, 0.0, true});
    if (expanded_) {
      power_ = shifted_power(phi0, w_.alpha());
      initial_ = pairings(power_, c0);
    } else {
      s_ = weight_factor(0, 0.0, phi0);
      initial_ = pairings(s_, c0);
    }
  }

  void on_step(const StepView& v) override {
    if (expanded_)
      step_expanded(v);
    else
      step_generic(v);
  }

  void on_finish() override {
    final_ = expanded_ ? pairings(power_, last_c_) : pairings(s_, last_c_);
  }

  WeakFormResult result() const {
    WeakFormResult r;
    r.weight = w_.label();
    r.expanded = expanded_;
    r.entries = entries_;
    r.guard_activations = acts_;
    double top = 0.0;
    for (std::size_t e = 0; e < r.entries.size(); ++e) {
      auto& en = r.entries[e];
      en.lhs = final_.empty() ? 0.0 : final_[e] - initial_[e];
      double total = 0.0;
      en.scale = final_.empty() ? 0.0 : detail::max_abs({final_[e], initial_[e]});
      for (const auto& [k, val] : en.terms) {
        total += val;
        en.scale = std::max(en.scale, std::abs(val));
      }
      en.residual = en.lhs - total;
      top = std::max(top, en.scale);
    }
    for (auto& en : r.entries) {
      en.scored = en.scale > opt_.degenerate_fraction * top && en.scale > 0.0;
      en.normalized = en.scored ? std::abs(en.residual) / en.scale : 0.0;
      if (en.scored) r.worst = std::max(r.worst, en.normalized);
    }
    return r;
  }

 private:
  ScalarField shifted_power(const ScalarField& phi, double a) const {
    const double e = w_.shift();
    return map(phi, [a, e](double p) { return std::pow(std::max(p + e, 0.0), a); });
  }

  ScalarField weight_factor(std::size_t step, double t, const ScalarField& phi) const {
    auto rho = w_.rho(step, t, phi);
    if (opt_.exponent == 2) rho *= rho;
    return rho;
  }

  std::vector<double> pairings(const ScalarField& s, const VectorField& c) const {
    std::vector<double> out;
    for (int j : comps_)
      for (const auto& t : tests_) out.push_back(inner(s * t.u, c[j]));
    return out;
  }

  void step_generic(const StepView& v) {
    auto s_next = weight_factor(v.step + 1, v.t + v.dt, v.phi_next);
    const bool consistent = opt_.quadrature == Quadrature::scheme_consistent;
    auto ds = s_next - s_;
    std::size_t e = 0;
    for (int j : comps_) {
      const auto& cref = consistent ? v.c_next[j] : v.c[j];
      auto lap = laplacian(cref);
      const double D = v.cfg.D[static_cast<std::size_t>(j)];
      auto sing = detail::filtered_physical(v.singular[j], v.cfg.dealias);
      auto reac = detail::filtered_physical(v.reaction[j], v.cfg.dealias);
      for (const auto& t : tests_) {
        auto vk = s_ * t.u;
        auto& terms = entries_[e++].terms;
        terms["diffusion"] += v.dt * D * inner(lap, vk);
        terms["singular"] += v.dt * inner(sing, vk);
        terms["reaction"] += v.dt * inner(reac, vk);
        terms["weight_rate"] += inner(cref, ds * t.u);
        terms["martingale"] += inner(v.noise[j], vk);
      }
    }
    s_ = std::move(s_next);
    last_c_ = v.c_next;
  }

  void step_expanded(const StepView& v) {
    const double a = w_.alpha(), gamma = v.cfg.gamma, e_shift = w_.shift();
    const std::size_t n = v.phi.size();
    const int dim = v.phi.grid().dim();
    auto grad = gradient(v.phi);
    ScalarField pa(v.phi.grid()), pm1(v.phi.grid()), pm2(v.phi.grid()), g2(v.phi.grid());
    std::size_t act = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = v.phi[i] + e_shift;
      double q = raw;
      if (q < opt_.guard) {
        q = opt_.guard;
        ++act;
      }
      pa[i] = std::pow(std::max(raw, 0.0), a);
      pm1[i] = std::pow(q, a - 1.0);
      pm2[i] = pm1[i] / q;
      double s = 0.0;
      for (int d = 0; d < dim; ++d) s += grad[d][i] * grad[d][i];
      g2[i] = s;
    }
    acts_ += act;
    std::size_t e = 0;
    for (int j : comps_) {
      const auto& c = v.c[j];
      auto gc = gradient(c);
      const double D = v.cfg.D[static_cast<std::size_t>(j)];
      ScalarField coupling(v.phi.grid()), quotient(v.phi.grid()), psi_t(v.phi.grid()), g_t(v.phi.grid()),
          reac(v.phi.grid()), noise(v.phi.grid());
      VectorField flux(v.phi.grid(), dim), transport(v.phi.grid(), dim);
      auto sing = detail::filtered_physical(v.singular[j], v.cfg.dealias);
      auto f = detail::filtered_physical(v.reaction[j], v.cfg.dealias);
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int d = 0; d < dim; ++d) {
          dot += gc[d][i] * grad[d][i];
          flux[d][i] = -D * pa[i] * gc[d][i];
          transport[d][i] = -a * gamma * pm1[i] * c[i] * grad[d][i];
        }
        // weight derivative -(D + gamma) a (phi+e)^(a-1) grad c . grad phi plus the applied singular drift times (phi+e)^a
        coupling[i] = -(D + gamma) * a * pm1[i] * dot + pa[i] * sing[i];
        quotient[i] = -a * (a - 1.0) * gamma * g2[i] * pm2[i] * c[i];
        psi_t[i] = a * pm1[i] * (v.phi_tendency[i] - v.g[i]) * c[i];
        g_t[i] = a * pm1[i] * v.g[i] * c[i];
        reac[i] = pa[i] * f[i];
        noise[i] = pa[i] * v.noise[j][i];
      }
      for (std::size_t ti = 0; ti < tests_.size(); ++ti) {
        const auto& u = tests_[ti].u;
        auto& terms = entries_[e++].terms;
        terms["diffusion"] += v.dt * inner(flux, grad_u_[ti]);
        terms["coupling"] += v.dt * inner(coupling, u);
        terms["reaction"] += v.dt * inner(reac, u);
        terms["transport"] += v.dt * inner(transport, grad_u_[ti]);
        terms["quotient"] += v.dt * inner(quotient, u);
        terms["psi"] += v.dt * inner(psi_t, u);
        terms["g"] += v.dt * inner(g_t, u);
        terms["martingale"] += inner(noise, u);
      }
    }
    power_ = shifted_power(v.phi_next, a);
    last_c_ = v.c_next;
  }

  Weight w_;
  TestFunctionSet tests_;
  WeakFormOptions opt_;
  bool expanded_ = false;
  std::vector<VectorField> grad_u_;
  std::vector<int> comps_;
  std::vector<WeakFormEntry> entries_;
  std::vector<double> initial_, final_;
  ScalarField s_, power_;
  VectorField last_c_;
  std::size_t acts_ = 0;
};

// ---------------------------------------------------------------------------------------------
// Quadratic variation of <M, v>, M_t = sum_k N_k:
//   realized  sum_k <N_k, v>^2,  predicted  sum_k dt sum_l covariance_form(b_jl v).

struct QVPath {
  std::vector<double> realized;   // per component
  std::vector<double> predicted;
  std::vector<double> terminal;   // <M_T, v>
};

class QVObserver : public StepObserver {
 public:
  QVObserver(ScalarField v, std::vector<int> components = {}) : v_(std::move(v)), requested_(std::move(components)) {}

  void on_start(const ScalarField&, const VectorField& c0, const SolverConfig&) override {
    comps_ = detail::component_list(requested_, c0.components());
    path_ = QVPath{std::vector<double>(comps_.size()), std::vector<double>(comps_.size()),
                   std::vector<double>(comps_.size())};
  }

  void on_step(const StepView& view) override {
    for (std::size_t q = 0; q < comps_.size(); ++q) {
      const int j = comps_[q];
      const double m = inner(view.noise[j], v_);
      path_.realized[q] += m * m;
      path_.terminal[q] += m;
      double pred = 0.0;
      for (int l = 0; l < view.model.d; ++l) {
        if (view.model.diagonal_noise && l != j) continue;
        const auto& b = view.amplitude.at(j, l);
        if (b.sup_norm() == 0.0) continue;
        pred += view.spectrum.covariance_form(b * v_);
      }
      path_.predicted[q] += view.dt * pred;
    }
  }

  const QVPath& result() const noexcept { return path_; }

 private:
  ScalarField v_;
  std::vector<int> requested_, comps_;
  QVPath path_;
};

struct QVEstimate {
  std::size_t paths = 0;
  bool too_few_paths = false;
  double mean_realized = 0.0;
  double mean_predicted = 0.0;
  double relative_error = 0.0;       // realized vs predicted
  double realized_stderr = 0.0;
  double terminal_variance = 0.0;    // E <M_T, v>^2
  double terminal_relative_error = 0.0;
};

inline double pairwise_mean(const std::vector<double>& xs) {
  return xs.empty() ? 0.0 : pairwise_sum(std::span<const double>(xs)) / static_cast<double>(xs.size());
}

inline QVEstimate qv_estimate(const std::vector<QVPath>& paths, std::size_t component = 0, std::size_t min_paths = 100) {
  QVEstimate e;
  e.paths = paths.size();
  e.too_few_paths = paths.size() < min_paths;
  if (paths.empty()) return e;
  std::vector<double> re, pr, te;
  for (const auto& p : paths) {
    if (component >= p.realized.size()) throw DiagnosticError("component not recorded in the QV paths");
    re.push_back(p.realized[component]);
    pr.push_back(p.predicted[component]);
    te.push_back(p.terminal[component] * p.terminal[component]);
  }
  e.mean_realized = pairwise_mean(re);
  e.mean_predicted = pairwise_mean(pr);
  e.terminal_variance = pairwise_mean(te);
  if (e.mean_predicted > 0.0) {
    e.relative_error = std::abs(e.mean_realized - e.mean_predicted) / e.mean_predicted;
    e.terminal_relative_error = std::abs(e.terminal_variance - e.mean_predicted) / e.mean_predicted;
  }
  if (re.size() > 1) {
    double ss = 0.0;
    for (double x : re) ss += (x - e.mean_realized) * (x - e.mean_realized);
    e.realized_stderr = std::sqrt(ss / (re.size() - 1) / re.size());
  }
  return e;
}

// Ensemble centeredness of a scalar martingale sample.
struct CenteredStat {
  std::size_t paths = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double bound = 0.0;  // 3 stddev / sqrt(M)
  bool centered = false;
  bool reliable = false;
};

inline CenteredStat centeredness(const std::vector<double>& xs, std::size_t reliable_paths = 30) {
  CenteredStat s;
  s.paths = xs.size();
  s.reliable = xs.size() >= reliable_paths;
  if (xs.empty()) return s;
  s.mean = pairwise_mean(xs);
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / (xs.size() - 1));
  }
  s.bound = 3.0 * s.stddev / std::sqrt(static_cast<double>(xs.size()));
  s.centered = std::abs(s.mean) <= s.bound;
  return s;
}

// ---------------------------------------------------------------------------------------------
// Subsolution floor tracked alongside a run: phi_k >= u_k - tol from step `from` on.

struct PositivityResult {
  double min_margin = infinity;  // min over checked nodes and steps of phi - u
  std::size_t violations = 0;     // node-steps with phi < u - tol
  double min_phi = infinity;
  double final_floor_min = 0.0;
};

class PositivityObserver : public StepObserver {
 public:
  PositivityObserver(double m1, double m2, double tol = 1e-3, std::size_t from_step = 10)
      : m1_(m1), m2_(m2), tol_(tol), from_(from_step) {}

  void on_start(const ScalarField& phi0, const VectorField&, const SolverConfig& cfg) override {
    floor_ = std::make_unique<SubsolutionFloor>(phi0, m1_, m2_, cfg.gamma, cfg.dt, cfg.dealias);
  }

  void on_step(const StepView& v) override {
    floor_->step();
    const auto& u = floor_->value();
    res_.min_phi = std::min(res_.min_phi, v.phi_next.min());
    if (v.step + 1 < from_) return;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double margin = v.phi_next[i] - u[i];
      res_.min_margin = std::min(res_.min_margin, margin);
      if (margin < -tol_) ++res_.violations;
    }
    res_.final_floor_min = u.min();
  }

  const PositivityResult& result() const noexcept { return res_; }

 private:
  double m1_, m2_, tol_;
  std::size_t from_;
  std::unique_ptr<SubsolutionFloor> floor_;
  PositivityResult res_;
};

}  // namespace spf
