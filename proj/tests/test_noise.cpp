#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "spf/noise.hpp"

using namespace spf;

namespace {

const TorusGrid grid(2, 32);

NoiseSpec spec_with(int kmax, std::uint64_t seed = 1, int comps = 1) {
  NoiseSpec s;
  s.k_max = kmax;
  s.seed = seed;
  s.components = comps;
  return s;
}

// <w, e> with e the real basis function sqrt2 cos / sqrt2 sin of wave vector k.
double project(const ScalarField& w, std::array<int, 3> k, bool sine) {
  if (k == std::array<int, 3>{0, 0, 0}) return mean_integral(w);
  auto e = ScalarField::from_function(w.grid(), [&](auto x) {
    double arg = two_pi * (k[0] * x[0] + k[1] * x[1]);
    return std::numbers::sqrt2 * (sine ? std::sin(arg) : std::cos(arg));
  });
  return inner(w, e);
}

}  // namespace

TEST(Philox, KnownAnswerVectors) {
  auto r = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(r, (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  r = Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(r, (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  r = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(r, (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, NormalsHaveUnitMoments) {
  const int M = 200000;
  double s1 = 0, s2 = 0;
  for (int i = 0; i < M; ++i) {
    auto [a, b] = normal_pair(9, i, 0, 0);
    s1 += a + b;
    s2 += a * a + b * b;
  }
  EXPECT_NEAR(s1 / (2 * M), 0.0, 4.0 / std::sqrt(2.0 * M));
  EXPECT_NEAR(s2 / (2 * M), 1.0, 4.0 * std::sqrt(2.0 / (2 * M)));
}

TEST(Spectrum, SingleModeHasUnitTrace) {
  auto sp = build_spectrum(spec_with(0), grid);
  EXPECT_EQ(sp.modes().size(), 1u);
  EXPECT_DOUBLE_EQ(sp.trace(), 1.0);
}

TEST(Spectrum, HilbertSchmidtSumStableUnderCutoffDoubling) {
  const TorusGrid g64(2, 64);
  auto a = build_spectrum(spec_with(8), g64);
  auto b = build_spectrum(spec_with(16), g64);
  EXPECT_LT(std::abs(b.hs_sum() / a.hs_sum() - 1.0), 0.01);
  EXPECT_LT(std::abs(b.trace() / a.trace() - 1.0), 0.01);
  // Direct double summation as an independent oracle of the HS sum.
  double direct = 0.0;
  for (int i = -8; i <= 8; ++i)
    for (int j = -8; j <= 8; ++j) {
      double w = 1.0 + two_pi * two_pi * (i * i + j * j);
      direct += std::pow(w, -2.0) * std::pow(w, 0.1);
    }
  EXPECT_NEAR(a.hs_sum(), direct, 1e-12 * direct);
}

TEST(Spectrum, BoundaryOfSummabilityRejected) {
  NoiseSpec s = spec_with(4);
  s.s = s.r + 1.0;  // r + n/2 with n = 2
  EXPECT_THROW(build_spectrum(s, grid), NoiseError);
  s.s = 0.5;
  EXPECT_THROW(build_spectrum(s, grid), NoiseError);
  EXPECT_THROW(build_spectrum(spec_with(16), grid), NoiseError);  // K_max must stay below N/2
}

TEST(Spectrum, DivergentGrowthDetectedWhenConditionFails) {
  // s <= r + n/2: partial sums keep growing under cutoff doubling.
  const double r = 0.1;
  for (double s : {1.1, 0.9}) {
    double a = hs_partial_sum(r, s, 2, 8), b = hs_partial_sum(r, s, 2, 16), c = hs_partial_sum(r, s, 2, 32);
    EXPECT_GT(b / a - 1.0, 0.01);
    EXPECT_GT(c - b, 0.5 * (b - a));
  }
  double a = hs_partial_sum(r, 2.0, 2, 8), b = hs_partial_sum(r, 2.0, 2, 16);
  EXPECT_LT(b / a - 1.0, 0.01);
}

TEST(Increment, DeterministicAndRealAndBandLimited) {
  auto sp = build_spectrum(spec_with(4, 77), grid);
  auto a = sample_increment(sp, 1e-3, 77, 5);
  auto b = sample_increment(sp, 1e-3, 77, 5);
  EXPECT_TRUE(a == b);
  auto c = sample_increment(sp, 1e-3, 78, 5);
  EXPECT_FALSE(a == c);
  auto s = to_spectral(a[0]);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto k = grid.wave_vector(i);
    if (std::abs(k[0]) > 4 || std::abs(k[1]) > 4) {
      EXPECT_LE(std::abs(s.c[i]), 1e-14);
    }
  }
  EXPECT_THROW(sample_increment(sp, 0.0, 1, 0), NoiseError);
}

TEST(Increment, NormScalesLinearlyInDt) {
  auto sp = build_spectrum(spec_with(4, 3), grid);
  const int M = 1000;
  for (double dt : {1e-2, 1e-3, 1e-4}) {
    std::vector<double> e(M);
    for (int j = 0; j < M; ++j) e[j] = norm2_squared(sample_increment(sp, dt, 3, j)) / dt;
    double mean = pairwise_sum(e) / M;
    double var = 0.0;
    for (double x : e) var += (x - mean) * (x - mean);
    var /= (M - 1);
    EXPECT_NEAR(mean, sp.trace(), 3.0 * std::sqrt(var / M)) << "dt = " << dt;
  }
}

TEST(Increment, ModeVariancesWithinChiSquareBand) {
  auto sp = build_spectrum(spec_with(4, 11), grid);
  const int M = 2000;
  const double dt = 1e-3;
  const std::vector<std::pair<std::array<int, 3>, bool>> modes = {
      {{0, 0, 0}, false}, {{1, 0, 0}, false}, {{0, 1, 0}, true}, {{2, -1, 0}, true}, {{3, 4, 0}, false}};
  boost::math::chi_squared chi(M);
  for (const auto& [k, sine] : modes) {
    double s2 = 0.0;
    for (int j = 0; j < M; ++j) {
      double p = project(sample_increment(sp, dt, 11, j)[0], k, sine);
      s2 += p * p;
    }
    const double expected = sp.lambda(k) * dt;
    const double stat = s2 / expected;
    EXPECT_GE(stat, boost::math::quantile(chi, 0.00135)) << k[0] << "," << k[1];
    EXPECT_LE(stat, boost::math::quantile(chi, 0.99865)) << k[0] << "," << k[1];
  }
}

TEST(Increment, DisjointStepsUncorrelated) {
  auto sp = build_spectrum(spec_with(2, 5), grid);
  const int M = 2000;
  double cross = 0.0, s1 = 0.0, s2 = 0.0;
  for (int j = 0; j < M; ++j) {
    double a = project(sample_increment(sp, 1.0, 5, 2 * j)[0], {1, 0, 0}, false);
    double b = project(sample_increment(sp, 1.0, 5, 2 * j + 1)[0], {1, 0, 0}, false);
    cross += a * b;
    s1 += a * a;
    s2 += b * b;
  }
  const double corr = cross / std::sqrt(s1 * s2);
  EXPECT_LT(std::abs(corr), 3.0 / std::sqrt(M));
}

TEST(BrownianBridge, FineIncrementsSumToCoarse) {
  auto sp = build_spectrum(spec_with(3, 21), grid);
  NoiseSampler coarse(sp, 21, 1e-2, 0), fine(sp, 21, 1e-2, 1), finer(sp, 21, 1e-2, 2);
  for (std::uint64_t k = 0; k < 10; ++k) {
    auto sum = fine.increment(2 * k) + fine.increment(2 * k + 1);
    auto ref = coarse.increment(k);
    EXPECT_LE((sum - ref).sup_norm(), 1e-14);
    auto sum4 = finer.increment(4 * k) + finer.increment(4 * k + 1) + finer.increment(4 * k + 2) + finer.increment(4 * k + 3);
    EXPECT_LE((sum4 - ref).sup_norm(), 1e-14);
  }
}

TEST(BrownianBridge, FineLevelHasHalvedVariance) {
  auto sp = build_spectrum(spec_with(0, 4), grid);
  NoiseSampler fine(sp, 4, 1.0, 2);
  const int M = 20000;
  double s2 = 0.0, cross = 0.0;
  for (int k = 0; k < M; ++k) {
    auto [a, b] = fine.unit_increment(0, 0, k);
    s2 += a * a;
    if (k % 2 == 1) cross += a * fine.unit_increment(0, 0, k - 1).first;
  }
  EXPECT_NEAR(s2 / M, 0.25, 4 * 0.25 * std::sqrt(2.0 / M));
  EXPECT_NEAR(cross / (M / 2), 0.0, 4 * 0.25 / std::sqrt(M / 2.0));
}

TEST(CovarianceDiagnostic, LedgerOfTwoThousandIncrements) {
  NoiseSpec s = spec_with(3, 8);
  auto sp = build_spectrum(s, grid);
  auto ledger = replay_ledger(sp, 1e-3, 0, 2000);
  auto rep = covariance_diagnostic(ledger);
  EXPECT_FALSE(rep.insufficient);
  EXPECT_FALSE(rep.degenerate);
  EXPECT_LE(rep.max_relative_error, 0.15);
  EXPECT_NEAR(rep.trace_estimate, sp.trace(), 0.1 * sp.trace());
  EXPECT_EQ(rep.modes.size(), 49u);

  auto shuffled = ledger;
  std::reverse(shuffled.increments.begin(), shuffled.increments.end());
  std::rotate(shuffled.increments.begin(), shuffled.increments.begin() + 333, shuffled.increments.end());
  auto rep2 = covariance_diagnostic(shuffled);
  ASSERT_EQ(rep.modes.size(), rep2.modes.size());
  for (std::size_t i = 0; i < rep.modes.size(); ++i)
    EXPECT_NEAR(rep.modes[i].empirical, rep2.modes[i].empirical, 1e-15 * rep.modes[i].empirical);
}

TEST(CovarianceDiagnostic, ZeroLedgerIsDegenerateAndSmallLedgerFlagged) {
  NoiseLedger ledger{spec_with(2), grid, 1e-3, 0, std::vector<VectorField>(150, VectorField(grid, 1))};
  auto rep = covariance_diagnostic(ledger);
  EXPECT_TRUE(rep.degenerate);
  EXPECT_EQ(rep.trace_estimate, 0.0);
  ledger.increments.resize(20);
  EXPECT_TRUE(covariance_diagnostic(ledger).insufficient);
}

TEST(Ledger, FileRoundTripAndReplay) {
  NoiseSpec s = spec_with(2, 99, 2);
  auto sp = build_spectrum(s, grid);
  auto ledger = replay_ledger(sp, 1e-3, 0, 5);
  std::stringstream ss;
  write_ledger(ss, ledger);
  EXPECT_EQ(ss.str().substr(0, 4), "SDL1");
  auto back = read_ledger(ss, 1e-3);
  EXPECT_EQ(back.spec.seed, 99u);
  EXPECT_EQ(back.spec.k_max, 2);
  EXPECT_EQ(back.spec.components, 2);
  ASSERT_EQ(back.increments.size(), 5u);
  for (int k = 0; k < 5; ++k) EXPECT_TRUE(back.increments[k] == ledger.increments[k]);
  auto again = replay_ledger(build_spectrum(back.spec, grid), 1e-3, 0, 5);
  for (int k = 0; k < 5; ++k) EXPECT_TRUE(again.increments[k] == ledger.increments[k]);
}
