#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "spf/philox.hpp"
#include "spf/torus_field.hpp"

// Initial phase fields on the unit torus.
namespace spf::initial {

// Periodic distance from x to c.
inline double torus_distance(const std::array<double, 3>& x, const std::array<double, 3>& c, int dim) {
  double s = 0.0;
  for (int a = 0; a < dim; ++a) {
    double d = std::abs(x[a] - c[a]);
    d = std::min(d, 1.0 - d);
    s += d * d;
  }
  return std::sqrt(s);
}

// C-infinity step: 0 for s <= 0, 1 for s >= 1.
inline double smooth_step(double s) {
  if (s <= 0.0) return 0.0;
  if (s >= 1.0) return 1.0;
  const double a = std::exp(-1.0 / s), b = std::exp(-1.0 / (1.0 - s));
  return a / (a + b);
}

// Compactly supported C-infinity bump with peak 1 at r = 0 and support r < 1.
inline double bump_profile(double r) { return r >= 1.0 ? 0.0 : std::exp(1.0 - 1.0 / (1.0 - r * r)); }

inline ScalarField constant(const TorusGrid& g, double value) { return ScalarField(g, value); }

// mean + amplitude cos(2 pi x_1)
inline ScalarField cosine(const TorusGrid& g, double mean, double amplitude) {
  return ScalarField::from_function(g, [=](const auto& x) { return mean + amplitude * std::cos(two_pi * x[0]); });
}

// floor + height * bump(|x - center| / radius)
inline ScalarField bump(const TorusGrid& g, std::array<double, 3> center, double radius, double floor = 0.0,
                        double height = 1.0) {
  if (!(radius > 0.0 && radius <= 0.5)) throw std::invalid_argument("bump radius must lie in (0, 1/2]");
  return ScalarField::from_function(
      g, [&](const auto& x) { return floor + height * bump_profile(torus_distance(x, center, g.dim()) / radius); });
}

// Zero on the disk |x - center| <= radius, rising smoothly to `outer` across a collar of the given width.
inline ScalarField disk_hole(const TorusGrid& g, std::array<double, 3> center, double radius, double width,
                             double outer = 1.0) {
  if (!(radius > 0.0 && width > 0.0 && radius + width < 0.5)) throw std::invalid_argument("hole does not fit the torus");
  return ScalarField::from_function(g, [&](const auto& x) {
    return outer * smooth_step((torus_distance(x, center, g.dim()) - radius) / width);
  });
}

// Seeded positive band-limited field: floor + (1 - floor) * normalized random mixture of modes |k|_inf <= k_max,
// mapped into [floor, 1].
inline ScalarField random_smooth(const TorusGrid& g, std::uint64_t seed, int k_max = 3, double floor = 0.1) {
  CounterStream rng(seed, 0x1417u);
  ScalarField f(g);
  const int n = g.dim();
  const int side = 2 * k_max + 1;
  int total = 1;
  for (int a = 0; a < n; ++a) total *= side;
  for (int id = 0; id < total; ++id) {
    std::array<int, 3> k{0, 0, 0};
    int rest = id;
    double k2 = 0.0;
    for (int a = 0; a < n; ++a) {
      k[a] = rest % side - k_max;
      rest /= side;
      k2 += k[a] * k[a];
    }
    if (k2 == 0.0) continue;
    const double amp = rng.normal() / (1.0 + k2), phase = rng.uniform(0.0, two_pi);
    for (std::size_t i = 0; i < f.size(); ++i) {
      auto x = g.coordinates(i);
      double s = 0.0;
      for (int a = 0; a < n; ++a) s += k[a] * x[a];
      f[i] += amp * std::cos(two_pi * s + phase);
    }
  }
  const double lo = f.min(), hi = f.max();
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = floor + (1.0 - floor) * (f[i] - lo) / (hi - lo);
  return f;
}

}  // namespace spf::initial
