#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "spf/philox.hpp"
#include "spf/torus_field.hpp"

namespace spf {

class NoiseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NoiseSpec {
  double r = 0.1;
  double s = 2.0;
  int k_max = 8;
  int components = 1;
  std::uint64_t seed = 0;
};

struct NoiseMode {
  std::array<int, 3> k{};
  double lambda = 0.0;
  std::uint32_t id = 0;  // position in the K_max box, independent of N
};

inline double bessel_weight(const std::array<int, 3>& k) { return 1.0 + two_pi * two_pi * wave_norm2(k); }

// Walk the box |k|_inf <= k_max in lexicographic order; fn(k, id).
template <class F>
void for_each_box_mode(int dim, int k_max, F&& fn) {
  const int side = 2 * k_max + 1;
  std::uint32_t total = 1;
  for (int a = 0; a < dim; ++a) total *= static_cast<std::uint32_t>(side);
  for (std::uint32_t id = 0; id < total; ++id) {
    std::array<int, 3> k{0, 0, 0};
    std::uint32_t rest = id;
    for (int a = dim - 1; a >= 0; --a) {
      k[a] = static_cast<int>(rest % side) - k_max;
      rest /= side;
    }
    fn(k, id);
  }
}

// k = 0 or first nonzero component positive: one representative per cos/sin pair.
inline bool in_half_space(const std::array<int, 3>& k) {
  for (int a = 0; a < 3; ++a) {
    if (k[a] != 0) return k[a] > 0;
  }
  return true;
}

inline double hs_partial_sum(double r, double s, int dim, int k_max) {
  double sum = 0.0;
  for_each_box_mode(dim, k_max, [&](const auto& k, std::uint32_t) {
    double w = bessel_weight(k);
    sum += std::pow(w, r - s);
  });
  return sum;
}

class NoiseSpectrum {
 public:
  NoiseSpectrum(const NoiseSpec& spec, const TorusGrid& grid) : spec_(spec), grid_(grid) {
    const int n = grid.dim();
    if (spec.components < 1) throw NoiseError("noise needs at least one component");
    if (spec.k_max < 0) throw NoiseError("K_max must be nonnegative");
    if (2 * spec.k_max >= grid.points()) throw NoiseError("K_max must stay below N/2");
    if (!(spec.s > spec.r + 0.5 * n))
      throw NoiseError("decay s must exceed r + n/2 for a Hilbert-Schmidt square root");
    for_each_box_mode(n, spec.k_max, [&](const auto& k, std::uint32_t id) {
      const double lam = std::pow(bessel_weight(k), -spec.s);
      trace_ += lam;
      hs_sum_ += lam * std::pow(bessel_weight(k), spec.r);
      if (in_half_space(k)) modes_.push_back({k, lam, id});
    });
  }

  const NoiseSpec& spec() const noexcept { return spec_; }
  const TorusGrid& grid() const noexcept { return grid_; }
  const std::vector<NoiseMode>& modes() const noexcept { return modes_; }
  double trace() const noexcept { return trace_; }
  double hs_sum() const noexcept { return hs_sum_; }
  double lambda(const std::array<int, 3>& k) const {
    for (int a = 0; a < grid_.dim(); ++a)
      if (std::abs(k[a]) > spec_.k_max) return 0.0;
    return std::pow(bessel_weight(k), -spec_.s);
  }

  // Sum_k lambda_k |w_k|^2 = Sum_m lambda_m <w, e_m>^2 over the real basis.
  double covariance_form(const ScalarField& w) const {
    auto s = to_spectral(w);
    double total = 0.0;
    const int last = grid_.dim() - 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto k = grid_.wave_vector(i);
      double lam = lambda(k);
      if (lam == 0.0) continue;
      double mult = k[last] == 0 ? 1.0 : 2.0;
      total += mult * lam * std::norm(s.c[i]);
    }
    return total;
  }

 private:
  NoiseSpec spec_;
  TorusGrid grid_;
  std::vector<NoiseMode> modes_;
  double trace_ = 0.0;
  double hs_sum_ = 0.0;
};

inline NoiseSpectrum build_spectrum(const NoiseSpec& spec, const TorusGrid& grid) { return NoiseSpectrum(spec, grid); }

// Per-mode Brownian increments at level `level` (dt = base_dt / 2^level), refined from the
// coarse level by Brownian bridges so that all levels share one underlying path.
class NoiseSampler {
 public:
  NoiseSampler(const NoiseSpectrum& spectrum, std::uint64_t seed, double base_dt, int level = 0)
      : spectrum_(&spectrum), seed_(seed), base_dt_(base_dt), level_(level) {
    if (!(base_dt > 0.0)) throw NoiseError("time step must be positive");
    if (level < 0 || level > 30) throw NoiseError("refinement level out of range");
  }

  double dt() const noexcept { return std::ldexp(base_dt_, -level_); }
  int level() const noexcept { return level_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const NoiseSpectrum& spectrum() const noexcept { return *spectrum_; }

  // Standard Brownian increments (cos, sin) of mode `mode` for component `comp` at fine step `step`.
  std::pair<double, double> unit_increment(int comp, std::uint32_t mode_id, std::uint64_t step) const {
    return increment_at(comp, mode_id, level_, step);
  }

  VectorField increment(std::uint64_t step) const {
    const auto& grid = spectrum_->grid();
    VectorField out(grid, spectrum_->spec().components);
    for (int comp = 0; comp < out.components(); ++comp) out[comp] = component_increment(comp, step);
    return out;
  }

  ScalarField component_increment(int comp, std::uint64_t step) const {
    const auto& grid = spectrum_->grid();
    const auto& modes = spectrum_->modes();
    const auto& values = mode_increments(comp, step);
    SpectralCoeffs s(grid);
    const int last = grid.dim() - 1;
    for (std::size_t q = 0; q < modes.size(); ++q) {
      const auto& m = modes[q];
      auto [a, b] = values[q];
      const double amp = std::sqrt(m.lambda);
      if (m.k == std::array<int, 3>{0, 0, 0}) {
        s.c[0] = amp * a;
        continue;
      }
      const std::complex<double> z = amp * std::complex<double>(a, -b) / std::numbers::sqrt2;
      std::array<int, 3> neg{-m.k[0], -m.k[1], -m.k[2]};
      if (m.k[last] > 0) {
        s.c[grid.spectral_index(m.k)] = z;
      } else if (m.k[last] < 0) {
        s.c[grid.spectral_index(neg)] = std::conj(z);
      } else {
        s.c[grid.spectral_index(m.k)] = z;
        s.c[grid.spectral_index(neg)] = std::conj(z);
      }
    }
    return to_physical(std::move(s));
  }

 private:
  using Pairs = std::vector<std::pair<double, double>>;

  // Increments of every mode along the bridge chain, memoized per level: consecutive fine steps
  // share their coarse ancestors, so each ancestor is drawn once.
  struct ChainCache {
    std::vector<std::uint64_t> step;
    std::vector<Pairs> values;
  };

  const Pairs& mode_increments(int comp, std::uint64_t step) const {
    if (cache_.size() <= static_cast<std::size_t>(comp)) cache_.resize(static_cast<std::size_t>(comp) + 1);
    auto& chain = cache_[static_cast<std::size_t>(comp)];
    if (chain.values.empty()) {
      chain.step.assign(static_cast<std::size_t>(level_) + 1, ~std::uint64_t{0});
      chain.values.assign(static_cast<std::size_t>(level_) + 1, Pairs(spectrum_->modes().size()));
    }
    fill_level(chain, comp, level_, step);
    return chain.values[static_cast<std::size_t>(level_)];
  }

  void fill_level(ChainCache& chain, int comp, int level, std::uint64_t step) const {
    const auto l = static_cast<std::size_t>(level);
    if (chain.step[l] == step) return;
    const auto& modes = spectrum_->modes();
    auto& out = chain.values[l];
    const std::uint32_t tag = (static_cast<std::uint32_t>(level) << 16) | static_cast<std::uint32_t>(comp);
    if (level == 0) {
      const double sq = std::sqrt(base_dt_);
      for (std::size_t q = 0; q < modes.size(); ++q) {
        auto z = normal_pair(seed_, step, modes[q].id, tag);
        out[q] = {sq * z.first, sq * z.second};
      }
    } else {
      fill_level(chain, comp, level - 1, step >> 1);
      const auto& parent = chain.values[l - 1];
      const double spread = 0.5 * std::sqrt(std::ldexp(base_dt_, -(level - 1)));
      const double sign = (step & 1u) ? -1.0 : 1.0;
      for (std::size_t q = 0; q < modes.size(); ++q) {
        auto z = normal_pair(seed_, step >> 1, modes[q].id, tag);
        out[q] = {0.5 * parent[q].first + sign * spread * z.first, 0.5 * parent[q].second + sign * spread * z.second};
      }
    }
    chain.step[l] = step;
  }

  std::pair<double, double> increment_at(int comp, std::uint32_t mode_id, int level, std::uint64_t step) const {
    const std::uint32_t tag = (static_cast<std::uint32_t>(level) << 16) | static_cast<std::uint32_t>(comp);
    if (level == 0) {
      auto z = normal_pair(seed_, step, mode_id, tag);
      const double sq = std::sqrt(base_dt_);
      return {sq * z.first, sq * z.second};
    }
    // Both children of a coarse step share one bridge variable.
    auto z = normal_pair(seed_, step >> 1, mode_id, tag);
    auto parent = increment_at(comp, mode_id, level - 1, step >> 1);
    const double spread = 0.5 * std::sqrt(std::ldexp(base_dt_, -(level - 1)));
    const double sign = (step & 1u) ? -1.0 : 1.0;
    return {0.5 * parent.first + sign * spread * z.first, 0.5 * parent.second + sign * spread * z.second};
  }

  const NoiseSpectrum* spectrum_;
  std::uint64_t seed_;
  double base_dt_;
  int level_;
  mutable std::vector<ChainCache> cache_;
};

inline VectorField sample_increment(const NoiseSpectrum& spectrum, double dt, std::uint64_t seed, std::uint64_t step) {
  if (!(dt > 0.0)) throw NoiseError("time step must be positive");
  return NoiseSampler(spectrum, seed, dt).increment(step);
}

struct NoiseLedger {
  NoiseSpec spec;
  TorusGrid grid;
  double dt = 0.0;
  int level = 0;
  std::vector<VectorField> increments;
};

inline NoiseLedger replay_ledger(const NoiseSpectrum& spectrum, double base_dt, int level, std::uint64_t steps) {
  NoiseSampler sampler(spectrum, spectrum.spec().seed, base_dt, level);
  NoiseLedger ledger{spectrum.spec(), spectrum.grid(), sampler.dt(), level, {}};
  ledger.increments.reserve(steps);
  for (std::uint64_t k = 0; k < steps; ++k) ledger.increments.push_back(sampler.increment(k));
  return ledger;
}

struct ModeVariance {
  std::array<int, 3> k{};
  bool sine = false;
  double expected = 0.0;
  double empirical = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool within_ci = true;
};

struct CovarianceReport {
  std::size_t samples = 0;
  bool insufficient = false;
  bool degenerate = false;
  double trace_estimate = 0.0;
  double trace_expected = 0.0;
  double max_relative_error = 0.0;
  std::size_t outside_ci = 0;
  std::vector<ModeVariance> modes;
};

// Empirical second moments of <dW, e_m> per mode versus lambda_m dt, with a two-sided
// chi-square band; `tail` is the probability in each tail (3-sigma normal level by default).
inline CovarianceReport covariance_diagnostic(const NoiseLedger& ledger, double tail = 0.00135) {
  CovarianceReport rep;
  rep.samples = ledger.increments.size();
  rep.insufficient = rep.samples < 100;
  if (rep.samples == 0) {
    rep.degenerate = true;
    return rep;
  }
  NoiseSpectrum spectrum(ledger.spec, ledger.grid);
  rep.trace_expected = spectrum.trace();
  const auto& grid = ledger.grid;
  const int last = grid.dim() - 1;
  const double M = static_cast<double>(rep.samples);
  const int comps = ledger.increments.front().components();

  std::vector<double> energy(rep.samples, 0.0);
  std::vector<ModeVariance> acc;
  for (const auto& m : spectrum.modes()) {
    for (int which = 0; which < (m.k == std::array<int, 3>{0, 0, 0} ? 1 : 2); ++which)
      acc.push_back({m.k, which == 1, m.lambda * ledger.dt * comps, 0.0, 0.0, 0.0, true});
  }
  std::vector<std::vector<double>> squares(acc.size(), std::vector<double>(rep.samples));
  for (std::size_t j = 0; j < rep.samples; ++j) {
    const auto& inc = ledger.increments[j];
    energy[j] = norm2_squared(inc);
    std::vector<SpectralCoeffs> coeffs;
    for (int c = 0; c < comps; ++c) coeffs.push_back(to_spectral(inc[c]));
    for (std::size_t a = 0; a < acc.size(); ++a) {
      auto k = acc[a].k;
      bool conj = k[last] < 0;
      std::array<int, 3> kk = conj ? std::array<int, 3>{-k[0], -k[1], -k[2]} : k;
      std::size_t idx = grid.spectral_index(kk);
      double sq = 0.0;
      for (int c = 0; c < comps; ++c) {
        auto z = coeffs[c].c[idx];
        if (conj) z = std::conj(z);
        double proj;
        if (k == std::array<int, 3>{0, 0, 0})
          proj = z.real();
        else
          proj = acc[a].sine ? -std::numbers::sqrt2 * z.imag() : std::numbers::sqrt2 * z.real();
        sq += proj * proj;
      }
      squares[a][j] = sq;
    }
  }
  rep.trace_estimate = pairwise_sum(energy) / M / ledger.dt / comps;
  rep.degenerate = rep.trace_estimate == 0.0;
  // Sum over components of chi^2_1 variables: M*comps degrees of freedom.
  boost::math::chi_squared chi(M * comps);
  const double lo_q = boost::math::quantile(chi, tail) / (M * comps);
  const double hi_q = boost::math::quantile(boost::math::complement(chi, tail)) / (M * comps);
  for (std::size_t a = 0; a < acc.size(); ++a) {
    auto& mv = acc[a];
    mv.empirical = pairwise_sum(squares[a]) / M;
    mv.ci_low = mv.expected * lo_q;
    mv.ci_high = mv.expected * hi_q;
    mv.within_ci = mv.empirical >= mv.ci_low && mv.empirical <= mv.ci_high;
    if (!mv.within_ci) ++rep.outside_ci;
    if (mv.expected > 0.0)
      rep.max_relative_error = std::max(rep.max_relative_error, std::abs(mv.empirical / mv.expected - 1.0));
  }
  rep.modes = std::move(acc);
  return rep;
}

inline void write_ledger(std::ostream& os, const NoiseLedger& ledger) {
  os.write("SDL1", 4);
  io::put_f64(os, ledger.spec.r);
  io::put_f64(os, ledger.spec.s);
  io::put_u32(os, static_cast<std::uint32_t>(ledger.spec.k_max));
  io::put_u32(os, static_cast<std::uint32_t>(ledger.spec.components));
  io::put_u64(os, ledger.spec.seed);
  for (const auto& inc : ledger.increments) write_snapshot(os, inc);
}

// The time step is not part of the file; the caller supplies it from the run manifest.
inline NoiseLedger read_ledger(std::istream& is, double dt, int level = 0) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SDL1", 4) != 0) throw NoiseError("bad SDL1 magic");
  NoiseLedger ledger;
  ledger.spec.r = io::get_f64(is);
  ledger.spec.s = io::get_f64(is);
  ledger.spec.k_max = static_cast<int>(io::get_u32(is));
  ledger.spec.components = static_cast<int>(io::get_u32(is));
  ledger.spec.seed = io::get_u64(is);
  ledger.dt = dt;
  ledger.level = level;
  while (is.peek() != std::char_traits<char>::eof()) ledger.increments.push_back(read_snapshot(is));
  if (!ledger.increments.empty()) ledger.grid = ledger.increments.front().grid();
  return ledger;
}

}  // namespace spf
