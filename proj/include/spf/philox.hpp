#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace spf {

// Philox4x32-10 counter-based generator (Salmon et al. 2011).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key) noexcept {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += 0x9E3779B9u;
        key[1] += 0xBB67AE85u;
      }
      const std::uint64_t p0 = static_cast<std::uint64_t>(0xD2511F53u) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(0xCD9E8D57u) * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }
};

// Two independent standard normals for one counter value (Box-Muller on two 53-bit uniforms).
inline std::pair<double, double> normal_pair(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint32_t c) noexcept {
  Philox4x32::Counter ctr{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), b, c};
  Philox4x32::Key key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  auto r = Philox4x32::generate(ctr, key);
  const std::uint64_t w0 = (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
  const std::uint64_t w1 = (static_cast<std::uint64_t>(r[2]) << 32) | r[3];
  const double u1 = (static_cast<double>(w0 >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(w1 >> 11) * 0x1.0p-53;          // [0, 1)
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

inline double uniform01(std::uint64_t seed, std::uint64_t a, std::uint32_t b, std::uint32_t c) noexcept {
  Philox4x32::Counter ctr{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), b, c};
  Philox4x32::Key key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  auto r = Philox4x32::generate(ctr, key);
  const std::uint64_t w0 = (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
  return static_cast<double>(w0 >> 11) * 0x1.0p-53;
}

// Sequential convenience stream over the counter space, for samplers that do not need random access.
class CounterStream {
 public:
  explicit CounterStream(std::uint64_t seed, std::uint32_t stream = 0) : seed_(seed), stream_(stream) {}
  double uniform() noexcept { return uniform01(seed_, next_++, stream_, 0x5EEDu); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept { return normal_pair(seed_, next_++, stream_, 0xB0B0u).first; }

 private:
  std::uint64_t seed_;
  std::uint32_t stream_;
  std::uint64_t next_ = 0;
};

}  // namespace spf
