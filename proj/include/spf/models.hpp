#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spf/philox.hpp"
#include "spf/torus_field.hpp"

namespace spf {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int max_components = 8;

using Params = std::map<std::string, double>;

struct NonlocalValues {
  double mean_phi = 0.0;
  std::array<double, max_components> mean_phi_c{};
};

using ScalarKernel = std::function<double(double phi, const double* c, const NonlocalValues&)>;
using VectorKernel = std::function<void(double phi, const double* c, const NonlocalValues&, double* out)>;
using MatrixKernel = std::function<void(double phi, const double* c, double* out)>;

// One summand Psi_i(phi, c) * |grad phi| of the transport-like phase-field term.
struct PsiTerm {
  std::string label;
  ScalarKernel coefficient;
};

struct ModelSpec {
  std::string name;
  int d = 1;
  std::vector<double> lower;
  std::vector<double> upper;
  double k_phi = 1.0;
  Params params;
  ScalarKernel g;
  VectorKernel f;
  std::vector<PsiTerm> psi;
  MatrixKernel b;  // row-major d x d
  bool diagonal_noise = true;
  double gamma = 1.0;
  std::vector<double> diffusion;
  std::vector<double> drift_multiplier;
  // Optional reduction of K to an invariant subset; maps a state into it while keeping
  // component `fixed` (or none if -1) untouched.
  std::function<void(double* c, int fixed)> constrain;
  std::string constraint_label;
};

class EtaCutoff {
 public:
  EtaCutoff() = default;
  explicit EtaCutoff(double margin) : margin_(margin) {
    if (!(margin > 0.0)) throw ModelError("eta margin must be positive");
  }

  double margin() const noexcept { return margin_; }
  double lipschitz() const noexcept { return 1.5 / margin_; }

  void check(const ModelSpec& m) const {
    for (int i = 0; i < m.d; ++i)
      if (!(margin_ < 0.5 * (m.upper[i] - m.lower[i])))
        throw ModelError("eta margin must be below half the box width of every component");
  }

  static double ramp(double x) noexcept {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    return x * x * (3.0 - 2.0 * x);
  }

  // Product of per-component C^1 ramps: 1 on the margin-inset box, 0 outside K.
  double value(const ModelSpec& m, const double* c) const noexcept {
    double eta = 1.0;
    for (int i = 0; i < m.d; ++i) {
      const double lo = (c[i] - m.lower[i]) / margin_;
      const double hi = (m.upper[i] - c[i]) / margin_;
      eta *= ramp(lo) * ramp(hi);
      if (eta == 0.0) return 0.0;
    }
    return eta;
  }

 private:
  double margin_ = 0.05;
};

namespace detail {

inline double clamp01(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

inline double param(const Params& p, const std::string& key) {
  auto it = p.find(key);
  if (it == p.end()) throw ModelError("missing parameter '" + key + "'");
  return it->second;
}

inline double abs_g(double K, double phi) { return -K * phi * (phi - 1.0) * (phi - 0.5); }

}  // namespace detail

inline NonlocalValues nonlocal_values(const ModelSpec& m, const ScalarField& phi, const VectorField& c) {
  NonlocalValues nv;
  const std::size_t n = phi.size();
  nv.mean_phi = pairwise_sum(0, n, [&](std::size_t i) { return detail::clamp01(phi[i], 0.0, m.k_phi); }) / n;
  for (int j = 0; j < m.d; ++j) {
    const auto& cj = c[j];
    nv.mean_phi_c[j] = pairwise_sum(0, n, [&](std::size_t i) {
                         return detail::clamp01(phi[i], 0.0, m.k_phi) * detail::clamp01(cj[i], m.lower[j], m.upper[j]);
                       }) /
                       n;
  }
  return nv;
}

inline void check_inputs(const ModelSpec& m, const ScalarField& phi, const VectorField& c) {
  if (c.components() != m.d) throw ModelError("component count does not match model");
  if (!(c.grid() == phi.grid())) throw ModelError("phase field and concentrations live on different grids");
  require_finite(phi, "phase field");
  require_finite(c, "concentration");
}

template <class F>
void for_each_node(const ModelSpec& m, const ScalarField& phi, const VectorField& c, F&& fn) {
  std::array<double, max_components> state{};
  for (std::size_t i = 0; i < phi.size(); ++i) {
    for (int j = 0; j < m.d; ++j) state[j] = c[j][i];
    fn(i, phi[i], state.data());
  }
}

// d x d nodewise amplitudes, row-major: entry (i, j) multiplies noise component j in equation i.
struct AmplitudeField {
  int d = 0;
  std::vector<ScalarField> entries;
  const ScalarField& at(int i, int j) const { return entries[static_cast<std::size_t>(i * d + j)]; }
  ScalarField& at(int i, int j) { return entries[static_cast<std::size_t>(i * d + j)]; }
  double sup_norm() const {
    double s = 0.0;
    for (const auto& e : entries) s = std::max(s, e.sup_norm());
    return s;
  }
};

namespace detail {

// Unchecked evaluators sharing one set of nonlocal values; the stepper validates its fields once per step.
inline ScalarField g_with(const ModelSpec& m, const ScalarField& phi, const VectorField& c, const NonlocalValues& nv) {
  ScalarField out(phi.grid());
  for_each_node(m, phi, c, [&](std::size_t i, double p, const double* s) { out[i] = m.g(p, s, nv); });
  return out;
}

inline VectorField f_with(const ModelSpec& m, const ScalarField& phi, const VectorField& c, const NonlocalValues& nv) {
  VectorField out(phi.grid(), m.d);
  std::array<double, max_components> r{};
  for_each_node(m, phi, c, [&](std::size_t i, double p, const double* s) {
    m.f(p, s, nv, r.data());
    for (int j = 0; j < m.d; ++j) out[j][i] = r[j];
  });
  return out;
}

inline ScalarField psi_with(const ModelSpec& m, const ScalarField& phi, const VectorField& c, const VectorField& grad_phi,
                            const NonlocalValues& nv) {
  ScalarField out(phi.grid());
  if (m.psi.empty()) return out;
  auto norm = magnitude(grad_phi);
  for_each_node(m, phi, c, [&](std::size_t i, double p, const double* s) {
    double coeff = 0.0;
    for (const auto& t : m.psi) coeff += t.coefficient(p, s, nv);
    out[i] = coeff * norm[i];
  });
  return out;
}

inline AmplitudeField b_eta_with(const ModelSpec& m, const EtaCutoff& eta, const ScalarField& phi, const VectorField& c) {
  AmplitudeField out{m.d, std::vector<ScalarField>(static_cast<std::size_t>(m.d * m.d), ScalarField(phi.grid()))};
  std::array<double, max_components * max_components> b{};
  for_each_node(m, phi, c, [&](std::size_t i, double p, const double* s) {
    const double e = eta.value(m, s);
    if (e == 0.0) return;
    m.b(p, s, b.data());
    for (int k = 0; k < m.d * m.d; ++k) out.entries[k][i] = e * b[k];
  });
  return out;
}

}  // namespace detail

inline ScalarField eval_g(const ModelSpec& m, const ScalarField& phi, const VectorField& c) {
  check_inputs(m, phi, c);
  return detail::g_with(m, phi, c, nonlocal_values(m, phi, c));
}

inline VectorField eval_f(const ModelSpec& m, const ScalarField& phi, const VectorField& c) {
  check_inputs(m, phi, c);
  return detail::f_with(m, phi, c, nonlocal_values(m, phi, c));
}

inline ScalarField eval_psi(const ModelSpec& m, const ScalarField& phi, const VectorField& c, const VectorField& grad_phi) {
  check_inputs(m, phi, c);
  if (grad_phi.components() != phi.grid().dim()) throw ModelError("gradient must have n components");
  require_finite(grad_phi, "phase-field gradient");
  return detail::psi_with(m, phi, c, grad_phi, nonlocal_values(m, phi, c));
}

inline AmplitudeField eval_b_eta(const ModelSpec& m, const EtaCutoff& eta, const ScalarField& phi, const VectorField& c) {
  check_inputs(m, phi, c);
  return detail::b_eta_with(m, eta, phi, c);
}

inline VectorField clip_to_K(const VectorField& c, const ModelSpec& m, std::size_t* activations = nullptr) {
  VectorField out = c;
  std::size_t count = 0;
  for (int j = 0; j < m.d; ++j) {
    for (std::size_t i = 0; i < out[j].size(); ++i) {
      double v = out[j][i];
      double w = detail::clamp01(v, m.lower[j], m.upper[j]);
      if (w != v) ++count;
      out[j][i] = w;
    }
  }
  if (activations) *activations = count;
  return out;
}

struct InvarianceViolation {
  std::string condition;
  double phi = 0.0;
  std::vector<double> c;
  double value = 0.0;
};

struct InvarianceReport {
  std::size_t samples = 0;
  std::vector<InvarianceViolation> violations;
  double lipschitz_g = 0.0;    // in phi, over [0, K_phi] x K
  double psi_bound = 0.0;      // sup |sum_i Psi_i|, the Lipschitz bound of Psi in grad phi
  double g_over_phi = 0.0;     // sup |g| / max(phi, 1e-8)
  double lipschitz_b_eta = 0.0;  // in c
  bool ok() const { return violations.empty(); }
};

inline InvarianceReport validate_invariance(const ModelSpec& m, std::size_t samples, std::uint64_t seed,
                                            const EtaCutoff& eta = EtaCutoff(0.05), double tol = 1e-12) {
  InvarianceReport rep;
  rep.samples = samples;
  CounterStream rng(seed, 17);
  std::array<double, max_components> c{}, c2{}, r{};
  std::array<double, max_components * max_components> b1{}, b2{};
  auto sample_state = [&](int fixed) {
    for (int j = 0; j < m.d; ++j)
      if (j != fixed) c[j] = rng.uniform(m.lower[j], m.upper[j]);
    if (m.constrain) m.constrain(c.data(), fixed);
  };
  auto sample_nonlocal = [&]() {
    NonlocalValues nv;
    nv.mean_phi = rng.uniform(0.0, m.k_phi);
    for (int j = 0; j < m.d; ++j)
      nv.mean_phi_c[j] = rng.uniform(m.k_phi * std::min(m.lower[j], 0.0), m.k_phi * std::max(m.upper[j], 0.0));
    return nv;
  };
  auto record = [&](const std::string& what, double phi, double value) {
    if (rep.violations.size() < 64) rep.violations.push_back({what, phi, std::vector<double>(c.begin(), c.begin() + m.d), value});
    else rep.violations.back().condition = what;  // keep the list bounded but still nonempty
  };
  for (std::size_t s = 0; s < samples; ++s) {
    const double phi = rng.uniform(0.0, m.k_phi);
    for (int j = 0; j < m.d; ++j) {
      for (int face = 0; face < 2; ++face) {
        c[j] = face == 0 ? m.lower[j] : m.upper[j];
        sample_state(j);
        auto nv = sample_nonlocal();
        m.f(phi, c.data(), nv, r.data());
        if (face == 0 && r[j] < -tol) record("f_" + std::to_string(j + 1) + " < 0 at lower face", phi, r[j]);
        if (face == 1 && r[j] > tol) record("f_" + std::to_string(j + 1) + " > 0 at upper face", phi, r[j]);
      }
    }
    sample_state(-1);
    auto nv = sample_nonlocal();
    const double g0 = m.g(0.0, c.data(), nv);
    const double g1 = m.g(m.k_phi, c.data(), nv);
    if (std::abs(g0) > tol) record("g != 0 at phi = 0", 0.0, g0);
    if (std::abs(g1) > tol) record("g != 0 at phi = K_phi", m.k_phi, g1);

    const double p1 = rng.uniform(0.0, m.k_phi);
    const double p2 = rng.uniform(0.0, m.k_phi);
    if (p1 != p2)
      rep.lipschitz_g = std::max(rep.lipschitz_g, std::abs(m.g(p1, c.data(), nv) - m.g(p2, c.data(), nv)) / std::abs(p1 - p2));
    const double small = m.k_phi * std::pow(10.0, -8.0 * rng.uniform());
    rep.g_over_phi = std::max(rep.g_over_phi, std::abs(m.g(small, c.data(), nv)) / std::max(small, 1e-8));
    rep.g_over_phi = std::max(rep.g_over_phi, std::abs(m.g(p1, c.data(), nv)) / std::max(p1, 1e-8));
    double coeff = 0.0;
    for (const auto& t : m.psi) coeff += t.coefficient(p1, c.data(), nv);
    rep.psi_bound = std::max(rep.psi_bound, std::abs(coeff));

    for (int j = 0; j < m.d; ++j) c2[j] = c[j] + 0.01 * (m.upper[j] - m.lower[j]) * (2.0 * rng.uniform() - 1.0);
    m.b(p1, c.data(), b1.data());
    m.b(p1, c2.data(), b2.data());
    const double e1 = eta.value(m, c.data()), e2 = eta.value(m, c2.data());
    double db = 0.0, dc = 0.0;
    for (int k = 0; k < m.d * m.d; ++k) db = std::max(db, std::abs(e1 * b1[k] - e2 * b2[k]));
    for (int j = 0; j < m.d; ++j) dc = std::max(dc, std::abs(c[j] - c2[j]));
    if (dc > 0.0) rep.lipschitz_b_eta = std::max(rep.lipschitz_b_eta, db / dc);
  }
  return rep;
}

namespace detail {

inline void apply_overrides(Params& p, const Params& overrides, const std::vector<std::string>& extra_keys) {
  for (const auto& [k, v] : overrides) {
    bool known = p.count(k) > 0 || std::find(extra_keys.begin(), extra_keys.end(), k) != extra_keys.end();
    if (!known) throw ModelError("unknown model parameter '" + k + "'");
    if (!std::isfinite(v)) throw ModelError("parameter '" + k + "' is not finite");
    p[k] = v;
  }
}

inline void finish_box(ModelSpec& m) {
  m.lower.resize(m.d, 0.0);
  m.upper.resize(m.d, 1.0);
  for (int j = 0; j < m.d; ++j) {
    auto lo = m.params.find("lower_" + std::to_string(j + 1));
    auto hi = m.params.find("upper_" + std::to_string(j + 1));
    if (lo != m.params.end()) m.lower[j] = lo->second;
    if (hi != m.params.end()) m.upper[j] = hi->second;
    if (!(m.lower[j] < m.upper[j]))
      throw ModelError("box bound violated for component " + std::to_string(j + 1) + ": lower must be below upper");
  }
  if (m.params.count("K_phi")) m.k_phi = m.params.at("K_phi");
  if (!(m.k_phi > 0.0)) throw ModelError("K_phi must be positive");
}

inline std::vector<std::string> box_keys(int d) {
  std::vector<std::string> keys{"K_phi"};
  for (int j = 1; j <= d; ++j) {
    keys.push_back("lower_" + std::to_string(j));
    keys.push_back("upper_" + std::to_string(j));
  }
  return keys;
}

inline ModelSpec make_abs(const Params& overrides) {
  ModelSpec m;
  m.name = "abs";
  m.d = 1;
  m.params = {{"K", 1.0},     {"K_alpha", 1.0}, {"delta0", 0.5}, {"M", 0.5},     {"A0", 0.3},
              {"A1", 0.1},    {"alpha", 0.5},   {"beta", 1.0},   {"gamma", 0.01}, {"D", 0.1},
              {"rho", 0.2},   {"delta_min", 0.05}, {"delta_max", 0.95}, {"kappa", 1.0}};
  apply_overrides(m.params, overrides, box_keys(1));
  finish_box(m);
  const Params& p = m.params;
  const double K = param(p, "K"), Ka = param(p, "K_alpha"), d0 = param(p, "delta0"), M = param(p, "M");
  const double A0 = param(p, "A0"), A1 = param(p, "A1"), al = param(p, "alpha"), be = param(p, "beta");
  const double rho = param(p, "rho"), dlo = param(p, "delta_min"), dhi = param(p, "delta_max");
  m.g = [K](double phi, const double*, const NonlocalValues&) { return abs_g(K, phi); };
  m.f = [=](double, const double* c, const NonlocalValues& nv, double* out) {
    const double delta = clamp01(d0 + M * (nv.mean_phi_c[0] - A1), dlo, dhi);
    out[0] = -Ka * c[0] * (c[0] - 1.0) * (c[0] - delta) - rho * c[0];
  };
  m.psi = {{"area", [=](double, const double*, const NonlocalValues& nv) { return be * (nv.mean_phi - A0); }},
           {"signal", [=](double, const double* c, const NonlocalValues&) { return al * c[0]; }}};
  m.b = [](double phi, const double*, double* out) { out[0] = phi * (1.0 - phi); };
  m.gamma = param(p, "gamma");
  m.diffusion = {param(p, "D")};
  m.drift_multiplier = {param(p, "kappa")};
  return m;
}

inline ModelSpec make_kirkpatrick_barton(const Params& overrides) {
  ModelSpec m;
  m.name = "kirkpatrick_barton";
  m.d = 1;
  m.params = {{"G", 1.0}, {"sigma2", 2.0}, {"gamma", 1.0}, {"regularized_barton", 0.0}, {"barton_epsilon", 0.01}};
  apply_overrides(m.params, overrides, box_keys(1));
  finish_box(m);
  const double G = param(m.params, "G"), s2 = param(m.params, "sigma2");
  const bool barton = param(m.params, "regularized_barton") != 0.0;
  const double eb = param(m.params, "barton_epsilon");
  m.g = [](double n, const double* z, const NonlocalValues&) { return n * (1.0 - n) * (n - z[0] * z[0]); };
  m.f = [G](double n, const double* z, const NonlocalValues&, double* out) { out[0] = -2.0 * G * (1.0 - n) * z[0]; };
  if (barton) {
    m.b = [eb](double n, const double* z, double* out) {
      out[0] = std::sqrt(std::max(z[0] * (1.0 - z[0]), 0.0) / (std::max(n, 0.0) + eb));
    };
  } else {
    m.b = [](double, const double*, double* out) { out[0] = 1.0; };
  }
  m.gamma = param(m.params, "gamma");
  m.diffusion = {0.5 * s2};
  m.drift_multiplier = {2.0};  // logarithmic-derivative factor sigma^2 over the Laplacian's sigma^2/2
  return m;
}

inline ModelSpec make_cao_rappel(const Params& overrides) {
  ModelSpec m;
  m.name = "cao_rappel";
  m.d = 2;
  m.params = {{"K", 1.0},   {"alpha", 0.5}, {"beta", 1.0}, {"A0", 0.3},  {"gamma", 0.01}, {"S1", 1.0},
              {"S2", 0.5},  {"k_s", 1.0},   {"K_s", 0.5},  {"c1", 1.0},  {"c2", 0.5},     {"tau_R", 1.0},
              {"b", 0.1},   {"d1", 0.5},    {"d2", 0.5},   {"D_R", 0.1}, {"D_S", 0.1}};
  apply_overrides(m.params, overrides, box_keys(2));
  const Params& p = m.params;
  const double S1 = param(p, "S1");
  if (!m.params.count("upper_1")) m.params["upper_1"] = S1;
  if (!m.params.count("upper_2")) m.params["upper_2"] = S1;
  finish_box(m);
  const double K = param(p, "K"), al = param(p, "alpha"), be = param(p, "beta"), A0 = param(p, "A0");
  const double S2 = param(p, "S2"), ks = param(p, "k_s"), Ks = param(p, "K_s"), c1 = param(p, "c1"),
               c2 = param(p, "c2"), tau = param(p, "tau_R"), bb = param(p, "b"), d1 = param(p, "d1"),
               d2 = param(p, "d2");
  if (c2 > c1) throw ModelError("cao_rappel needs c2 <= c1 for the box to be invariant");
  m.g = [K](double phi, const double*, const NonlocalValues&) { return abs_g(K, phi); };
  m.f = [=](double, const double* c, const NonlocalValues&, double* out) {
    const double R = c[0], S = c[1];
    out[0] = (c2 * S - c1 * R) / tau;
    out[1] = (ks * S * S / (Ks * Ks + S * S) + bb) * (S1 - S) - (d1 + d2 * R) * S;
  };
  m.psi = {{"signal",
            [=](double, const double* c, const NonlocalValues&) {
              const double S3 = c[1] * c[1] * c[1];
              const double denom = S3 + S2 * S2 * S2;
              return denom > 0.0 ? al * S3 / denom : 0.0;
            }},
           {"area", [=](double, const double*, const NonlocalValues& nv) { return -be * (nv.mean_phi - A0); }}};
  m.b = [](double, const double*, double* out) {
    out[0] = 1.0;
    out[1] = 0.0;
    out[2] = 0.0;
    out[3] = 1.0;
  };
  m.gamma = param(p, "gamma");
  m.diffusion = {param(p, "D_R"), param(p, "D_S")};
  m.drift_multiplier = {1.0, 1.0};
  return m;
}

inline ModelSpec make_torres(const Params& overrides) {
  ModelSpec m;
  m.name = "torres";
  m.d = 3;
  m.params = {{"K", 1.0},  {"alpha", 0.5}, {"beta", 1.0}, {"A0", 0.3}, {"gamma", 0.01}, {"b", 0.5},
              {"gamma_u", 0.5}, {"s", 1.0}, {"eta_F", 1.0}, {"p0", 0.5}, {"p1", 0.5}, {"D", 1.0},
              {"D_v", 1.0}, {"D_F", 1.0}, {"independent_noise", 0.0}};
  apply_overrides(m.params, overrides, box_keys(3));
  finish_box(m);
  const Params& p = m.params;
  const double K = param(p, "K"), al = param(p, "alpha"), be = param(p, "beta"), A0 = param(p, "A0");
  const double bb = param(p, "b"), gu = param(p, "gamma_u"), s = param(p, "s"), eF = param(p, "eta_F"),
               p0 = param(p, "p0"), p1 = param(p, "p1");
  const bool independent = param(p, "independent_noise") != 0.0;
  m.g = [K](double phi, const double*, const NonlocalValues&) { return abs_g(K, phi); };
  m.f = [=](double, const double* c, const NonlocalValues&, double* out) {
    const double u = c[0], v = c[1], F = c[2];
    const double exchange = (bb + gu * u * u) * v - (1.0 + s * F + u * u) * u;
    out[0] = exchange;
    out[1] = -exchange;
    out[2] = eF * (p0 + p1 * u - F);
  };
  m.psi = {{"signal", [=](double, const double* c, const NonlocalValues&) { return al * c[0]; }},
           {"area", [=](double, const double*, const NonlocalValues& nv) { return -be * (nv.mean_phi - A0); }}};
  m.diagonal_noise = independent;
  m.b = [independent](double, const double*, double* out) {
    std::fill(out, out + 9, 0.0);
    out[0] = 1.0;
    if (independent) out[4] = 1.0;
    else out[3] = -1.0;  // v receives the opposite of u's forcing: u + v is conserved
    out[8] = 1.0;
  };
  m.gamma = param(p, "gamma");
  m.diffusion = {param(p, "D"), param(p, "D_v"), param(p, "D_F")};
  // The Torres transport terms are plain Laplacians: (1/phi)(phi D Laplacian u).
  m.drift_multiplier = {0.0, 0.0, 0.0};
  if (!independent) {
    m.constraint_label = "u + v <= 1";
    m.constrain = [](double* c, int fixed) {
      if (c[0] + c[1] <= 1.0) return;
      if (fixed == 1) c[0] = 1.0 - c[1];
      else c[1] = 1.0 - c[0];
    };
  }
  return m;
}

}  // namespace detail

inline std::vector<std::string> model_names() { return {"abs", "kirkpatrick_barton", "cao_rappel", "torres"}; }

inline ModelSpec make_model(const std::string& name, const Params& overrides = {}) {
  if (name == "abs") return detail::make_abs(overrides);
  if (name == "kirkpatrick_barton") return detail::make_kirkpatrick_barton(overrides);
  if (name == "cao_rappel") return detail::make_cao_rappel(overrides);
  if (name == "torres") return detail::make_torres(overrides);
  throw ModelError("unknown model preset '" + name + "'");
}

// The same model driven by sigma times independent unit noises in every component.
inline ModelSpec with_constant_amplitude(ModelSpec m, double sigma) {
  if (!(sigma >= 0.0)) throw ModelError("amplitude must be nonnegative");
  const int d = m.d;
  m.diagonal_noise = true;
  m.b = [d, sigma](double, const double*, double* out) {
    std::fill(out, out + d * d, 0.0);
    for (int i = 0; i < d; ++i) out[i * d + i] = sigma;
  };
  m.params["constant_amplitude"] = sigma;
  return m;
}

// Does the state lie in K (and in the preset's invariant subset, if any) up to tol?
inline bool state_in_K(const ModelSpec& m, const VectorField& c, double tol, std::string* why = nullptr) {
  for (int j = 0; j < m.d; ++j) {
    for (std::size_t i = 0; i < c[j].size(); ++i) {
      if (c[j][i] < m.lower[j] - tol || c[j][i] > m.upper[j] + tol) {
        if (why) {
          std::ostringstream os;
          os << "component " << j + 1 << " = " << c[j][i] << " at node " << i << " outside [" << m.lower[j] << ", "
             << m.upper[j] << "]";
          *why = os.str();
        }
        return false;
      }
    }
  }
  return true;
}

// Largest distance of any component beyond its face of K.
inline double box_excursion(const ModelSpec& m, const VectorField& c) {
  double e = 0.0;
  for (int j = 0; j < m.d; ++j)
    for (double v : c[j].values()) e = std::max({e, m.lower[j] - v, v - m.upper[j]});
  return e;
}

}  // namespace spf
