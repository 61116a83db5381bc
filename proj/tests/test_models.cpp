#include <gtest/gtest.h>

#include "spf/models.hpp"
#include "test_support.hpp"

using namespace spf;

namespace {

const TorusGrid grid(2, 16);

ScalarField constant(double v) { return ScalarField(grid, v); }
VectorField constant_c(std::vector<double> v) {
  VectorField c(grid, static_cast<int>(v.size()));
  for (std::size_t j = 0; j < v.size(); ++j) c[j] += v[j];
  return c;
}

}  // namespace

TEST(AbsPreset, PhaseReactionRootsAndValue) {
  auto m = make_model("abs");
  auto c = constant_c({0.3});
  EXPECT_EQ(eval_g(m, constant(0.0), c).sup_norm(), 0.0);
  EXPECT_EQ(eval_g(m, constant(1.0), c).sup_norm(), 0.0);
  EXPECT_EQ(eval_g(m, constant(0.5), c).sup_norm(), 0.0);
  EXPECT_DOUBLE_EQ(eval_g(m, constant(0.25), c)[0], -1.0 * 0.25 * (-0.75) * (-0.25));
  EXPECT_DOUBLE_EQ(eval_g(m, constant(0.25), c)[0], -0.046875);
}

TEST(AbsPreset, PhaseReactionOverPhiBounded) {
  auto m = make_model("abs");
  NonlocalValues nv;
  double c = 0.5, worst = 0.0;
  for (int i = 0; i <= 100000; ++i) {
    double phi = i / 100000.0;
    worst = std::max(worst, std::abs(m.g(phi, &c, nv)) / std::max(phi, 1e-8));
  }
  EXPECT_TRUE(std::isfinite(worst));
  EXPECT_LE(worst, 0.5 + 1e-12);  // |g/phi| = K|(phi-1)(phi-0.5)| <= K/2 on [0,1]
}

TEST(AbsPreset, ConcentrationReaction) {
  auto m = make_model("abs", {{"rho", 0.0}, {"M", 0.0}});
  auto phi = constant(0.7);
  for (double v : {0.0, 1.0}) EXPECT_NEAR(eval_f(m, phi, constant_c({v}))[0][0], 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(eval_f(m, phi, constant_c({0.25}))[0][3], -1.0 * 0.25 * (-0.75) * (-0.25));
  // The linear decay of the default preset adds -rho c.
  auto md = make_model("abs", {{"M", 0.0}});
  EXPECT_NEAR(eval_f(md, phi, constant_c({0.25}))[0][0], -0.046875 - 0.2 * 0.25, 1e-15);
}

TEST(AbsPreset, NonlocalThresholdIsClipped) {
  auto m = make_model("abs", {{"M", 50.0}, {"rho", 0.0}});
  // With M huge the threshold saturates at 0.05 or 0.95; f(c) then has that root.
  auto hi = eval_f(m, constant(1.0), constant_c({0.95}));
  EXPECT_NEAR(hi[0][0], 0.0, 1e-15);
  auto lo = eval_f(make_model("abs", {{"M", 50.0}, {"rho", 0.0}, {"A1", 0.9}}), constant(0.5), constant_c({0.05}));
  EXPECT_NEAR(lo[0][0], 0.0, 1e-15);
}

TEST(AbsPreset, FaceSignsOnSampledStates) {
  auto m = make_model("abs");
  CounterStream rng(3);
  for (int s = 0; s < 2000; ++s) {
    NonlocalValues nv;
    nv.mean_phi = rng.uniform();
    nv.mean_phi_c[0] = rng.uniform();
    double phi = rng.uniform(), out = 0.0, c = 0.0;
    m.f(phi, &c, nv, &out);
    EXPECT_GE(out, 0.0);
    c = 1.0;
    m.f(phi, &c, nv, &out);
    EXPECT_LE(out, 0.0);
  }
}

TEST(AbsPreset, TransportTerm) {
  auto m = make_model("abs");
  auto c = constant_c({0.5});
  VectorField zero(grid, 2);
  EXPECT_EQ(eval_psi(m, constant(0.4), c, zero).sup_norm(), 0.0);
  auto m2 = make_model("abs", {{"beta", 0.0}, {"alpha", 1.0}});
  VectorField g(grid, 2);
  g[0] += 2.0;
  auto psi = eval_psi(m2, constant(0.4), c, g);
  for (double v : psi.values()) EXPECT_DOUBLE_EQ(v, 1.0);
  // Area term vanishes when the phase-field mass equals A0.
  auto m3 = make_model("abs", {{"alpha", 0.0}});
  EXPECT_NEAR(eval_psi(m3, constant(0.3), c, g).sup_norm(), 0.0, 1e-15);
}

TEST(AbsPreset, NoiseAmplitude) {
  auto m = make_model("abs");
  EtaCutoff eta(0.1);
  auto amp = eval_b_eta(m, eta, constant(0.5), constant_c({0.5}));
  EXPECT_DOUBLE_EQ(amp.at(0, 0)[0], 0.25);
  EXPECT_EQ(eval_b_eta(m, eta, constant(0.0), constant_c({0.5})).sup_norm(), 0.0);
  EXPECT_EQ(eval_b_eta(m, eta, constant(1.0), constant_c({0.5})).sup_norm(), 0.0);
  auto c = constant_c({0.5});
  c[0][7] = 1.2;
  c[0][8] = -0.01;
  auto a2 = eval_b_eta(m, eta, constant(0.5), c);
  EXPECT_EQ(a2.at(0, 0)[7], 0.0);
  EXPECT_EQ(a2.at(0, 0)[8], 0.0);
}

TEST(EtaCutoff, RangeSupportAndLipschitz) {
  auto m = make_model("torres", {{"independent_noise", 1.0}});
  EtaCutoff eta(0.1);
  EXPECT_DOUBLE_EQ(eta.lipschitz(), 15.0);
  CounterStream rng(5);
  double worst = 0.0;
  for (int s = 0; s < 20000; ++s) {
    std::array<double, 3> a{}, b{};
    for (int j = 0; j < 3; ++j) {
      a[j] = rng.uniform(-0.2, 1.2);
      b[j] = a[j];
    }
    int j = s % 3;
    b[j] += rng.uniform(-0.02, 0.02);
    const double ea = eta.value(m, a.data()), eb = eta.value(m, b.data());
    EXPECT_GE(ea, 0.0);
    EXPECT_LE(ea, 1.0);
    bool outside = false;
    for (int k = 0; k < 3; ++k) outside = outside || a[k] < 0.0 || a[k] > 1.0;
    if (outside) {
      EXPECT_EQ(ea, 0.0);
    }
    bool inset = true;
    for (int k = 0; k < 3; ++k) inset = inset && a[k] >= 0.1 && a[k] <= 0.9;
    if (inset) {
      EXPECT_EQ(ea, 1.0);
    }
    if (a[j] != b[j]) worst = std::max(worst, std::abs(ea - eb) / std::abs(a[j] - b[j]));
  }
  EXPECT_LE(worst, eta.lipschitz() * (1 + 1e-9));
  EXPECT_THROW(EtaCutoff(0.0), ModelError);
  EXPECT_THROW(EtaCutoff(0.6).check(make_model("abs")), ModelError);
}

TEST(NoiseAmplitude, LipschitzInConcentration) {
  auto m = make_model("kirkpatrick_barton", {{"regularized_barton", 1.0}, {"barton_epsilon", 0.1}});
  EtaCutoff eta(0.1);
  auto rep = validate_invariance(m, 20000, 4, eta);
  // b = sqrt(z(1-z)/(n+eps)) is not Lipschitz at z = 0, but eta vanishes quadratically there.
  EXPECT_TRUE(std::isfinite(rep.lipschitz_b_eta));
  auto abs = make_model("abs");
  auto r2 = validate_invariance(abs, 20000, 4, eta);
  // b = phi(1 - phi) does not depend on c: bound Lip(eta) sup|b| = 15 * 0.25.
  EXPECT_LE(r2.lipschitz_b_eta, eta.lipschitz() * 0.25 + 1e-9);
}

TEST(ClipToK, ProjectionProperties) {
  auto m = make_model("abs");
  auto c = constant_c({0.4});
  EXPECT_TRUE(clip_to_K(c, m) == c);
  c[0][3] = 1.3;
  std::size_t hits = 0;
  auto out = clip_to_K(c, m, &hits);
  EXPECT_EQ(out[0][3], 1.0);
  EXPECT_EQ(hits, 1u);
  for (std::uint64_t s = 0; s < 20; ++s) {
    VectorField a({spf::testing::random_band_limited(grid, 3, s, 0.5)});
    VectorField b({spf::testing::random_band_limited(grid, 3, 100 + s, 0.5)});
    auto ca = clip_to_K(a, m), cb = clip_to_K(b, m);
    EXPECT_TRUE(clip_to_K(ca, m) == ca);
    EXPECT_LE((ca - cb).sup_norm(), (a - b).sup_norm());
  }
}

TEST(Invariance, AbsDefaultsHaveNoViolations) {
  auto rep = validate_invariance(make_model("abs"), 10000, 1);
  EXPECT_TRUE(rep.ok()) << rep.violations.front().condition;
  EXPECT_NEAR(rep.lipschitz_g, 0.5, 0.05);
  EXPECT_LE(rep.psi_bound, 1.0 * 0.7 + 0.5 + 1e-12);
}

TEST(Invariance, FlippedReactionReportsLowerFace) {
  auto m = make_model("torres");
  auto f = m.f;
  m.f = [f](double p, const double* c, const NonlocalValues& nv, double* out) {
    f(p, c, nv, out);
    for (int j = 0; j < 3; ++j) out[j] = -out[j];
  };
  auto rep = validate_invariance(m, 2000, 2);
  ASSERT_FALSE(rep.ok());
  bool lower = false;
  for (const auto& v : rep.violations) lower = lower || v.condition.find("lower face") != std::string::npos;
  EXPECT_TRUE(lower);
}

TEST(Invariance, TorresOnConservedSubsetHasNoViolations) {
  auto m = make_model("torres");
  EXPECT_EQ(m.d, 3);
  auto rep = validate_invariance(m, 10000, 3);
  EXPECT_TRUE(rep.ok()) << rep.violations.front().condition;
}

TEST(Invariance, TorresFullCubeCounterexample) {
  // Without the u + v <= 1 restriction the v-face condition fails, e.g. at u = v = F = 1.
  auto m = make_model("torres", {{"independent_noise", 1.0}});
  double c[3] = {1.0, 1.0, 1.0}, out[3];
  m.f(0.5, c, NonlocalValues{}, out);
  EXPECT_DOUBLE_EQ(out[1], 2.0);
  auto rep = validate_invariance(m, 5000, 3);
  ASSERT_FALSE(rep.ok());
  bool upper_v = false;
  for (const auto& v : rep.violations) upper_v = upper_v || v.condition == "f_2 > 0 at upper face";
  EXPECT_TRUE(upper_v);
}

TEST(Invariance, AllPresetsAtDefaults) {
  for (const auto& name : model_names()) {
    auto m = make_model(name);
    auto rep = validate_invariance(m, 10000, 9);
    EXPECT_TRUE(rep.ok()) << name << ": " << (rep.ok() ? "" : rep.violations.front().condition);
    EXPECT_TRUE(std::isfinite(rep.g_over_phi)) << name;
    EXPECT_LT(rep.g_over_phi, 10.0) << name;
  }
}

TEST(Presets, KirkpatrickBartonStructure) {
  auto m = make_model("kirkpatrick_barton");
  EXPECT_EQ(m.d, 1);
  EXPECT_EQ(m.drift_multiplier[0], 2.0);
  EXPECT_EQ(m.diffusion[0], 1.0);
  EXPECT_EQ(m.gamma, 1.0);
  double z = 0.6, out = 0.0;
  EXPECT_DOUBLE_EQ(m.g(0.3, &z, {}), 0.3 * 0.7 * (0.3 - 0.36));
  m.f(0.3, &z, {}, &out);
  EXPECT_DOUBLE_EQ(out, -2.0 * 0.7 * 0.6);
  m.b(0.3, &z, &out);
  EXPECT_EQ(out, 1.0);
}

TEST(Presets, CaoRappelAndTorresShapes) {
  auto cr = make_model("cao_rappel");
  EXPECT_EQ(cr.d, 2);
  EXPECT_EQ(cr.upper[1], cr.params.at("S1"));
  EXPECT_THROW(make_model("cao_rappel", {{"c2", 2.0}}), ModelError);
  auto t = make_model("torres");
  double c[3] = {0.2, 0.5, 0.3}, out[3];
  t.f(0.5, c, {}, out);
  EXPECT_DOUBLE_EQ(out[0] + out[1], 0.0);  // conservative exchange
  EXPECT_DOUBLE_EQ(out[2], 0.5 + 0.5 * 0.2 - 0.3);
}

TEST(Presets, AbsShape) {
  auto m = make_model("abs");
  EXPECT_EQ(m.d, 1);
  EXPECT_EQ(m.lower[0], 0.0);
  EXPECT_EQ(m.upper[0], 1.0);
  EXPECT_EQ(m.k_phi, 1.0);
  double c = 0.3, b = 0.0;
  m.b(0.2, &c, &b);
  EXPECT_DOUBLE_EQ(b, 0.2 * 0.8);
}

TEST(Presets, Errors) {
  EXPECT_THROW(make_model("nope"), ModelError);
  EXPECT_THROW(make_model("abs", {{"lower_1", 1.0}}), ModelError);
  EXPECT_THROW(make_model("abs", {{"upper_1", -0.5}}), ModelError);
  EXPECT_THROW(make_model("abs", {{"typo", 1.0}}), ModelError);
  EXPECT_THROW(make_model("abs", {{"K", std::nan("")}}), ModelError);
}

TEST(Evaluation, RejectsNaNAndMismatch) {
  auto m = make_model("abs");
  auto phi = constant(0.5);
  phi[2] = std::nan("");
  EXPECT_THROW(eval_g(m, phi, constant_c({0.5})), FieldError);
  EXPECT_THROW(eval_f(m, constant(0.5), constant_c({0.5, 0.5})), ModelError);
}
