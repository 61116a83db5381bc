#pragma once

#include <cmath>

#include "spf/philox.hpp"
#include "spf/torus_field.hpp"

namespace spf::testing {

// Random trigonometric polynomial with |k|_inf <= kmax.
inline ScalarField random_band_limited(const TorusGrid& grid, int kmax, std::uint64_t seed, double offset = 0.0) {
  CounterStream rng(seed);
  ScalarField f(grid, offset);
  const int n = grid.dim();
  std::array<int, 3> k{};
  int side = 2 * kmax + 1, total = 1;
  for (int a = 0; a < n; ++a) total *= side;
  for (int id = 0; id < total; ++id) {
    int rest = id;
    for (int a = n - 1; a >= 0; --a) {
      k[a] = rest % side - kmax;
      rest /= side;
    }
    const double amp = rng.normal() / (1.0 + wave_norm2(k)), phase = two_pi * rng.uniform();
    for (std::size_t i = 0; i < f.size(); ++i) {
      auto x = grid.coordinates(i);
      double arg = 0.0;
      for (int a = 0; a < n; ++a) arg += k[a] * x[a];
      f[i] += amp * std::cos(two_pi * arg + phase);
    }
  }
  return f;
}

inline double sup_diff(const ScalarField& a, const ScalarField& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace spf::testing
