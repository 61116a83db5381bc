#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>

namespace spf {

class FieldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Pairwise summation keeps reductions reproducible to ~1e-16 relative regardless of length.
template <class F>
double pairwise_sum(std::size_t first, std::size_t n, F&& term) {
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = first; i < first + n; ++i) s += term(i);
    return s;
  }
  std::size_t half = n / 2;
  return pairwise_sum(first, half, term) + pairwise_sum(first + half, n - half, term);
}

inline double pairwise_sum(std::span<const double> v) {
  return pairwise_sum(0, v.size(), [&](std::size_t i) { return v[i]; });
}

class TorusGrid {
 public:
  TorusGrid() = default;
  TorusGrid(int dim, int points) : dim_(dim), points_(points) {
    if (dim < 1 || dim > 3) throw FieldError("grid dimension must be 1, 2 or 3");
    if (points < 8 || !std::has_single_bit(static_cast<unsigned>(points)))
      throw FieldError("points per axis must be a power of two >= 8");
  }

  int dim() const noexcept { return dim_; }
  int points() const noexcept { return points_; }
  double spacing() const noexcept { return 1.0 / points_; }
  std::size_t size() const noexcept {
    std::size_t s = 1;
    for (int i = 0; i < dim_; ++i) s *= static_cast<std::size_t>(points_);
    return s;
  }
  std::size_t spectral_size() const noexcept { return size() / points_ * (points_ / 2 + 1); }
  // Only n >= 2 is covered by the existence theory; n = 1 runs are allowed but flagged.
  bool within_theory() const noexcept { return dim_ >= 2; }

  std::array<double, 3> coordinates(std::size_t node) const noexcept {
    std::array<double, 3> x{0.0, 0.0, 0.0};
    for (int a = dim_ - 1; a >= 0; --a) {
      x[a] = static_cast<double>(node % points_) * spacing();
      node /= points_;
    }
    return x;
  }

  // Signed wave vector of an entry in the r2c layout (last axis holds 0..N/2).
  std::array<int, 3> wave_vector(std::size_t spec_index) const noexcept {
    std::array<int, 3> k{0, 0, 0};
    const int half = points_ / 2 + 1;
    k[dim_ - 1] = static_cast<int>(spec_index % half);
    spec_index /= half;
    for (int a = dim_ - 2; a >= 0; --a) {
      int i = static_cast<int>(spec_index % points_);
      k[a] = i < points_ / 2 ? i : i - points_;
      spec_index /= points_;
    }
    return k;
  }

  std::size_t spectral_index(const std::array<int, 3>& k) const {
    const int half = points_ / 2 + 1;
    std::size_t idx = 0;
    for (int a = 0; a < dim_ - 1; ++a) {
      int i = k[a] < 0 ? k[a] + points_ : k[a];
      idx = idx * points_ + static_cast<std::size_t>(i);
    }
    if (k[dim_ - 1] < 0 || k[dim_ - 1] >= half) throw FieldError("wave vector outside r2c half space");
    return idx * half + static_cast<std::size_t>(k[dim_ - 1]);
  }

  friend bool operator==(const TorusGrid&, const TorusGrid&) = default;

 private:
  int dim_ = 2;
  int points_ = 64;
};

class ScalarField {
 public:
  ScalarField() = default;
  explicit ScalarField(const TorusGrid& grid, double value = 0.0) : grid_(grid), values_(grid.size(), value) {}
  ScalarField(const TorusGrid& grid, std::vector<double> values) : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.size()) throw FieldError("value count does not match grid");
  }

  template <class F>
  static ScalarField from_function(const TorusGrid& grid, F&& fn) {
    ScalarField out(grid);
    for (std::size_t i = 0; i < out.size(); ++i) out.values_[i] = fn(grid.coordinates(i));
    return out;
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return values_.size(); }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  double min() const { return *std::min_element(values_.begin(), values_.end()); }
  double max() const { return *std::max_element(values_.begin(), values_.end()); }
  double sup_norm() const {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }

  ScalarField& operator+=(const ScalarField& o) {
    check_same(o);
    for (std::size_t i = 0; i < size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ScalarField& operator-=(const ScalarField& o) {
    check_same(o);
    for (std::size_t i = 0; i < size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ScalarField& operator*=(const ScalarField& o) {
    check_same(o);
    for (std::size_t i = 0; i < size(); ++i) values_[i] *= o.values_[i];
    return *this;
  }
  ScalarField& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }
  ScalarField& operator+=(double s) {
    for (double& v : values_) v += s;
    return *this;
  }
  // this += s * o
  ScalarField& axpy(double s, const ScalarField& o) {
    check_same(o);
    for (std::size_t i = 0; i < size(); ++i) values_[i] += s * o.values_[i];
    return *this;
  }

  void check_same(const ScalarField& o) const {
    if (!(grid_ == o.grid_)) throw FieldError("grid mismatch");
  }

  friend bool operator==(const ScalarField&, const ScalarField&) = default;

 private:
  TorusGrid grid_;
  std::vector<double> values_;
};

inline ScalarField operator+(ScalarField a, const ScalarField& b) { return a += b; }
inline ScalarField operator-(ScalarField a, const ScalarField& b) { return a -= b; }
inline ScalarField operator*(ScalarField a, const ScalarField& b) { return a *= b; }
inline ScalarField operator*(double s, ScalarField a) { return a *= s; }

template <class F>
ScalarField map(const ScalarField& f, F&& fn) {
  ScalarField out(f.grid());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = fn(f[i]);
  return out;
}

class VectorField {
 public:
  VectorField() = default;
  VectorField(const TorusGrid& grid, int components, double value = 0.0) {
    if (components < 1) throw FieldError("vector field needs at least one component");
    comps_.assign(static_cast<std::size_t>(components), ScalarField(grid, value));
  }
  explicit VectorField(std::vector<ScalarField> comps) : comps_(std::move(comps)) {
    if (comps_.empty()) throw FieldError("vector field needs at least one component");
    for (const auto& c : comps_) comps_.front().check_same(c);
  }

  int components() const noexcept { return static_cast<int>(comps_.size()); }
  const TorusGrid& grid() const { return comps_.front().grid(); }
  ScalarField& operator[](std::size_t i) noexcept { return comps_[i]; }
  const ScalarField& operator[](std::size_t i) const noexcept { return comps_[i]; }
  auto begin() noexcept { return comps_.begin(); }
  auto end() noexcept { return comps_.end(); }
  auto begin() const noexcept { return comps_.begin(); }
  auto end() const noexcept { return comps_.end(); }

  double sup_norm() const {
    double m = 0.0;
    for (const auto& c : comps_) m = std::max(m, c.sup_norm());
    return m;
  }

  VectorField& operator+=(const VectorField& o) {
    for (std::size_t i = 0; i < comps_.size(); ++i) comps_[i] += o.comps_[i];
    return *this;
  }
  VectorField& operator-=(const VectorField& o) {
    for (std::size_t i = 0; i < comps_.size(); ++i) comps_[i] -= o.comps_[i];
    return *this;
  }
  VectorField& operator*=(double s) {
    for (auto& c : comps_) c *= s;
    return *this;
  }

  friend bool operator==(const VectorField&, const VectorField&) = default;

 private:
  std::vector<ScalarField> comps_;
};

inline VectorField operator+(VectorField a, const VectorField& b) { return a += b; }
inline VectorField operator-(VectorField a, const VectorField& b) { return a -= b; }

inline void require_finite(const ScalarField& f, const char* what = "field") {
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!std::isfinite(f[i])) {
      auto x = f.grid().coordinates(i);
      std::ostringstream os;
      os << what << ": non-finite value at node " << i << " (x = " << x[0];
      for (int a = 1; a < f.grid().dim(); ++a) os << ", " << x[a];
      os << ")";
      throw FieldError(os.str());
    }
  }
}

inline void require_finite(const VectorField& v, const char* what = "field") {
  for (const auto& c : v) require_finite(c, what);
}

// Coefficients of the r2c transform, normalized so that the k = 0 entry is the mean.
struct SpectralCoeffs {
  TorusGrid grid;
  std::vector<std::complex<double>> c;

  SpectralCoeffs() = default;
  explicit SpectralCoeffs(const TorusGrid& g) : grid(g), c(g.spectral_size()) {}
  std::size_t size() const noexcept { return c.size(); }
  std::complex<double>& operator[](std::size_t i) noexcept { return c[i]; }
  const std::complex<double>& operator[](std::size_t i) const noexcept { return c[i]; }
};

namespace detail {

struct FftPlanPair {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

// Plans are created once per grid shape and never mutated; execution uses the
// new-array interface on per-thread aligned buffers so SIMD codelets stay eligible.
inline const FftPlanPair& plans_for(const TorusGrid& grid) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, FftPlanPair> cache;
  std::lock_guard lock(mutex);
  auto key = std::make_pair(grid.dim(), grid.points());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::array<int, 3> dims{grid.points(), grid.points(), grid.points()};
  double* real = fftw_alloc_real(grid.size());
  fftw_complex* spec = fftw_alloc_complex(grid.spectral_size());
  FftPlanPair p;
  p.forward = fftw_plan_dft_r2c(grid.dim(), dims.data(), real, spec, FFTW_ESTIMATE);
  p.backward = fftw_plan_dft_c2r(grid.dim(), dims.data(), spec, real, FFTW_ESTIMATE);
  fftw_free(real);
  fftw_free(spec);
  if (!p.forward || !p.backward) throw FieldError("FFTW plan creation failed");
  return cache.emplace(key, p).first->second;
}

struct FftBuffers {
  std::size_t real_size = 0, spectral_size = 0;
  double* real = nullptr;
  fftw_complex* spec = nullptr;
  FftBuffers() = default;
  FftBuffers(const FftBuffers&) = delete;
  FftBuffers& operator=(const FftBuffers&) = delete;
  ~FftBuffers() {
    fftw_free(real);
    fftw_free(spec);
  }
};

inline FftBuffers& buffers_for(const TorusGrid& grid) {
  thread_local std::map<std::pair<int, int>, FftBuffers> buffers;
  auto& b = buffers[std::make_pair(grid.dim(), grid.points())];
  if (!b.real) {
    b.real_size = grid.size();
    b.spectral_size = grid.spectral_size();
    b.real = fftw_alloc_real(b.real_size);
    b.spec = fftw_alloc_complex(b.spectral_size);
    if (!b.real || !b.spec) throw FieldError("FFT buffer allocation failed");
  }
  return b;
}

}  // namespace detail

inline SpectralCoeffs to_spectral(const ScalarField& f) {
  const auto& g = f.grid();
  const auto& plans = detail::plans_for(g);
  auto& buf = detail::buffers_for(g);
  std::memcpy(buf.real, f.data(), buf.real_size * sizeof(double));
  fftw_execute_dft_r2c(plans.forward, buf.real, buf.spec);
  SpectralCoeffs out(g);
  const double scale = 1.0 / static_cast<double>(g.size());
  for (std::size_t i = 0; i < buf.spectral_size; ++i) out.c[i] = {buf.spec[i][0] * scale, buf.spec[i][1] * scale};
  return out;
}

inline ScalarField to_physical(const SpectralCoeffs& coeffs) {
  const auto& g = coeffs.grid;
  const auto& plans = detail::plans_for(g);
  auto& buf = detail::buffers_for(g);
  std::memcpy(buf.spec, coeffs.c.data(), buf.spectral_size * sizeof(fftw_complex));
  fftw_execute_dft_c2r(plans.backward, buf.spec, buf.real);
  ScalarField out(g);
  std::memcpy(out.data(), buf.real, buf.real_size * sizeof(double));
  return out;
}

inline double wave_norm2(const std::array<int, 3>& k) noexcept {
  return static_cast<double>(k[0] * k[0] + k[1] * k[1] + k[2] * k[2]);
}

// Per-grid multiplier tables for hot loops: 4pi^2|k|^2, 2pi k_a (Nyquist zeroed), dealias mask.
struct SpectralTables {
  TorusGrid grid;
  std::vector<double> laplace;
  std::array<std::vector<double>, 3> derivative;
  std::vector<unsigned char> keep;

  static const SpectralTables& get(const TorusGrid& g) {
    static std::mutex mutex;
    static std::map<std::pair<int, int>, SpectralTables> cache;
    std::lock_guard lock(mutex);
    auto key = std::make_pair(g.dim(), g.points());
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    SpectralTables t;
    t.grid = g;
    const std::size_t m = g.spectral_size();
    const int nyquist = g.points() / 2;
    const int cut = g.points() / 3;
    t.laplace.resize(m);
    t.keep.resize(m);
    for (int a = 0; a < g.dim(); ++a) t.derivative[a].resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto k = g.wave_vector(i);
      t.laplace[i] = two_pi * two_pi * wave_norm2(k);
      bool keep = true;
      for (int a = 0; a < g.dim(); ++a) {
        t.derivative[a][i] = (std::abs(k[a]) == nyquist) ? 0.0 : two_pi * k[a];
        if (std::abs(k[a]) > cut) keep = false;
      }
      t.keep[i] = keep ? 1 : 0;
    }
    return cache.emplace(key, std::move(t)).first->second;
  }
};

template <class F>
void apply_multiplier(SpectralCoeffs& s, F&& fn) {
  for (std::size_t i = 0; i < s.size(); ++i) s.c[i] *= fn(s.grid.wave_vector(i));
}

inline SpectralCoeffs spectral_laplacian(SpectralCoeffs s) {
  const auto& t = SpectralTables::get(s.grid);
  for (std::size_t i = 0; i < s.size(); ++i) s.c[i] *= -t.laplace[i];
  return s;
}

inline SpectralCoeffs spectral_derivative(SpectralCoeffs s, int axis) {
  const auto& t = SpectralTables::get(s.grid);
  const auto& m = t.derivative[axis];
  for (std::size_t i = 0; i < s.size(); ++i) s.c[i] = std::complex<double>(-m[i] * s.c[i].imag(), m[i] * s.c[i].real());
  return s;
}

// (I - kappa*Laplacian)^{-1}
inline SpectralCoeffs spectral_resolvent(SpectralCoeffs s, double kappa) {
  const auto& t = SpectralTables::get(s.grid);
  for (std::size_t i = 0; i < s.size(); ++i) s.c[i] /= 1.0 + kappa * t.laplace[i];
  return s;
}

// 2/3 rule: modes with some |k_j| > N/3 are removed from explicit nonlinear tendencies.
inline void dealias(SpectralCoeffs& s) {
  const auto& t = SpectralTables::get(s.grid);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!t.keep[i]) s.c[i] = 0.0;
}

inline ScalarField laplacian(const ScalarField& f) {
  require_finite(f, "laplacian input");
  return to_physical(spectral_laplacian(to_spectral(f)));
}

inline VectorField gradient_from(const SpectralCoeffs& s) {
  std::vector<ScalarField> comps;
  for (int a = 0; a < s.grid.dim(); ++a) comps.push_back(to_physical(spectral_derivative(s, a)));
  return VectorField(std::move(comps));
}

inline VectorField gradient(const ScalarField& f) {
  require_finite(f, "gradient input");
  return gradient_from(to_spectral(f));
}

inline ScalarField divergence(const VectorField& v) {
  require_finite(v, "divergence input");
  if (v.components() != v.grid().dim()) throw FieldError("divergence needs a field with n components");
  SpectralCoeffs acc(v.grid());
  for (int a = 0; a < v.components(); ++a) {
    auto d = spectral_derivative(to_spectral(v[a]), a);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.c[i] += d.c[i];
  }
  return to_physical(std::move(acc));
}

inline double mean_integral(const ScalarField& f) {
  return pairwise_sum(f.values()) / static_cast<double>(f.size());
}

inline double inner(const ScalarField& a, const ScalarField& b) {
  a.check_same(b);
  const double* x = a.data();
  const double* y = b.data();
  auto term = [&](std::size_t i) { return x[i] * y[i]; };
  return pairwise_sum(0, a.size(), term) / static_cast<double>(a.size());
}

inline double inner(const VectorField& a, const VectorField& b) {
  double s = 0.0;
  for (int i = 0; i < a.components(); ++i) s += inner(a[i], b[i]);
  return s;
}

inline double norm2_squared(const ScalarField& f) { return inner(f, f); }
inline double norm2_squared(const VectorField& f) { return inner(f, f); }

// Sum over all wave vectors of |c_k|^2, counting the conjugate half implied by r2c storage.
inline double spectral_norm2_squared(const SpectralCoeffs& s) {
  const int last = s.grid.dim() - 1;
  const int nyquist = s.grid.points() / 2;
  auto term = [&](std::size_t i) {
    int kl = s.grid.wave_vector(i)[last];
    double mult = (kl == 0 || kl == nyquist) ? 1.0 : 2.0;
    return mult * std::norm(s.c[i]);
  };
  return pairwise_sum(0, s.size(), term);
}

inline ScalarField magnitude(const VectorField& v) {
  ScalarField out(v.grid());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (int a = 0; a < v.components(); ++a) s += v[a][i] * v[a][i];
    out[i] = std::sqrt(s);
  }
  return out;
}

inline VectorField grad_cap(VectorField v, double tau, std::size_t* activations = nullptr) {
  if (!(tau > 0.0)) throw FieldError("gradient cap must be positive");
  std::size_t count = 0;
  if (!std::isinf(tau)) {
    for (std::size_t i = 0; i < v.grid().size(); ++i) {
      double s = 0.0;
      for (int a = 0; a < v.components(); ++a) s += v[a][i] * v[a][i];
      double m = std::sqrt(s);
      if (m > tau) {
        ++count;
        for (int a = 0; a < v.components(); ++a) v[a][i] = tau * v[a][i] / m;
      }
    }
  }
  if (activations) *activations = count;
  return v;
}

// |sum_i (∫φ g_i v + ∫∂_iφ u v + ∫φ u ∂_i v)|: vanishes iff g is the φ-weighted weak gradient of u against v.
inline double weighted_derivative_residual(const ScalarField& phi, const ScalarField& u, const VectorField& g,
                                           const ScalarField& v) {
  phi.check_same(u);
  phi.check_same(v);
  if (!(g.grid() == phi.grid()) || g.components() != phi.grid().dim()) throw FieldError("grid mismatch");
  auto dphi = gradient(phi);
  auto dv = gradient(v);
  double total = 0.0;
  for (int a = 0; a < g.components(); ++a) {
    auto t1 = pairwise_sum(0, phi.size(), [&](std::size_t i) {
      return phi[i] * g[a][i] * v[i] + dphi[a][i] * u[i] * v[i] + phi[i] * u[i] * dv[a][i];
    });
    total += t1 / static_cast<double>(phi.size());
  }
  return std::abs(total);
}

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double x) { put_u64(os, std::bit_cast<std::uint64_t>(x)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FieldError("truncated stream");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FieldError("truncated stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace io

inline void write_snapshot(std::ostream& os, const VectorField& v) {
  os.write("SDF1", 4);
  io::put_u32(os, static_cast<std::uint32_t>(v.grid().dim()));
  io::put_u32(os, static_cast<std::uint32_t>(v.grid().points()));
  io::put_u32(os, static_cast<std::uint32_t>(v.components()));
  for (const auto& c : v)
    for (double x : c.values()) io::put_f64(os, x);
}

inline void write_snapshot(std::ostream& os, const ScalarField& f) { write_snapshot(os, VectorField({f})); }

inline VectorField read_snapshot(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SDF1", 4) != 0) throw FieldError("bad SDF1 magic");
  int n = static_cast<int>(io::get_u32(is));
  int N = static_cast<int>(io::get_u32(is));
  int d = static_cast<int>(io::get_u32(is));
  TorusGrid grid(n, N);
  VectorField v(grid, d);
  for (auto& c : v)
    for (double& x : c.values()) x = io::get_f64(is);
  return v;
}

}  // namespace spf
