#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "spf/diagnostics.hpp"
#include "spf/initial.hpp"
#include "test_support.hpp"

using namespace spf;

namespace {

VectorField single(ScalarField f) { return VectorField({std::move(f)}); }

ModelSpec silent(ModelSpec m) {
  m.b = [d = m.d](double, const double*, double* out) { std::fill(out, out + d * d, 0.0); };
  return m;
}

ModelSpec pure_heat(double gamma = 1.0) {
  return make_model("abs", {{"K", 0.0}, {"alpha", 0.0}, {"beta", 0.0}, {"gamma", gamma}, {"K_alpha", 0.0}, {"rho", 0.0}});
}

template <class... Obs>
Trajectory run_with(const SolverConfig& cfg, const ModelSpec& m, const RegParams& reg, const NoiseSpec& ns,
                    const ScalarField& phi0, const VectorField& c0, Obs&... obs) {
  std::vector<StepObserver*> list{&obs...};
  return run_coupled(cfg, m, reg, ns, phi0, c0, list);
}

SolverConfig config_for(const ModelSpec& m, double T, double dt) {
  auto cfg = SolverConfig::for_model(m);
  cfg.T = T;
  cfg.dt = dt;
  cfg.record_every = 1000000;
  return cfg;
}

RegParams with_epsilon(double e) {
  RegParams r;
  r.epsilon = e;
  return r;
}

const NoiseSpec noise16{0.1, 2.0, 6, 1, 3};

}  // namespace

TEST(Report, PassFailAndOrdering) {
  DiagnosticsReport r;
  r.config_hash = "abc";
  r.add("a", "f1", 0.01, 0.05);
  r.add("b", "f2", 0.2, 0.05);
  r.add("c", "f3", 12.0, 10.0, Bound::at_least);
  r.add("d", "f4", std::nan(""), 1.0);
  EXPECT_EQ(r.failures(), 2u);
  auto o = r.ordered();
  EXPECT_EQ(o[0].id, "b");
  EXPECT_EQ(o[1].id, "d");
  EXPECT_EQ(o[2].id, "a");
  std::ostringstream csv;
  r.write_csv(csv);
  EXPECT_NE(csv.str().find("b,f2,0.2,0.05,at_most,0,abc"), std::string::npos);
}

TEST(Report, EmptyReportPasses) {
  DiagnosticsReport r;
  EXPECT_TRUE(r.all_passed());
  std::ostringstream os;
  r.write_text(os);
  EXPECT_NE(os.str().find("checks 0 failed 0"), std::string::npos);
}

TEST(Report, CsvQuotesFields) {
  DiagnosticsReport r;
  r.add("x", "a,b", 1.0, 2.0, Bound::at_most, "say \"hi\"");
  std::ostringstream csv;
  r.write_csv(csv);
  EXPECT_NE(csv.str().find("\"a,b\""), std::string::npos);
  EXPECT_NE(csv.str().find("\"say \"\"hi\"\"\""), std::string::npos);
}

TEST(Weights, ValidationAndValues) {
  const TorusGrid g(2, 16);
  EXPECT_THROW(Weight::phi_power(0.5), DiagnosticError);
  EXPECT_THROW(Weight::phi_power(0.0), DiagnosticError);
  EXPECT_THROW(Weight::heat(0.0), DiagnosticError);
  auto phi = initial::cosine(g, 0.5, 0.3);
  auto w = Weight::phi_power(0.25);
  auto rho = w.rho(0, 0.0, phi);
  for (std::size_t i = 0; i < phi.size(); ++i) EXPECT_DOUBLE_EQ(rho[i], std::pow(phi[i], 0.25));
  auto h = Weight::heat(1.0);
  h.start(phi);
  auto r = h.rho(3, 0.01, phi);
  auto expect = initial::cosine(g, 0.5, 0.3 * std::exp(-4.0 * M_PI * M_PI * 0.01));
  for (std::size_t i = 0; i < phi.size(); ++i) EXPECT_NEAR(r[i] * r[i], expect[i], 1e-13);
  auto neg = Weight::path([&](std::size_t, double) { return ScalarField(g, -1.0); });
  EXPECT_THROW(neg.rho(0, 0.0, phi), DiagnosticError);
}

TEST(TestFunctions, DefaultSetShape) {
  const TorusGrid g(2, 32);
  auto set = default_tests(g, 5);
  EXPECT_EQ(set.size(), 14u);
  for (const auto& t : set) {
    EXPECT_LE(t.u.sup_norm(), 1.0 + 1e-12);
    EXPECT_TRUE(std::isfinite(magnitude(gradient(t.u)).sup_norm()));
  }
  auto again = default_tests(g, 5);
  EXPECT_EQ(set.back().u, again.back().u);
  EXPECT_FALSE(default_tests(g, 6).back().u == set.back().u);
}

TEST(Admissibility, ConstantPhaseGivesZero) {
  const TorusGrid g(2, 16);
  auto m = make_model("abs", {{"K", 0.0}});
  AdmissibilityObserver a(Weight::constant(), {1e-6, 1e-12});
  run_with(config_for(m, 0.01, 1e-3), m, RegParams{}, noise16, ScalarField(g, 1.0), single(ScalarField(g, 0.5)), a);
  EXPECT_EQ(a.result().integral[0], 0.0);
  EXPECT_EQ(a.result().integral[1], 0.0);
}

TEST(Admissibility, GuardDichotomyOnVanishingDisk) {
  const TorusGrid g(2, 256);
  auto m = make_model("abs");
  auto phi0 = initial::disk_hole(g, {0.5, 0.5, 0.0}, 0.1, 0.35);
  std::vector<double> guards{1e-6, 1e-12};
  AdmissibilityObserver one(Weight::constant(), guards), power(Weight::phi_power(0.25), guards);
  auto cfg = config_for(m, 0.002, 1e-4);
  run_with(cfg, m, with_epsilon(1e-2), NoiseSpec{0.1, 2.0, 8, 1, 1}, phi0, single(ScalarField(g, 0.3)), one, power);
  const auto& a = one.result();
  const auto& b = power.result();
  EXPECT_GE(a.integral[1] / a.integral[0], 10.0);
  EXPECT_GT(a.activations[1], 0u);
  EXPECT_LE(std::abs(b.integral[1] / b.integral[0] - 1.0), 0.1);
}

TEST(AlphaScan, ConstantPhaseAllZero) {
  const TorusGrid g(2, 16);
  auto m = make_model("abs", {{"K", 0.0}});
  AlphaScanObserver a({0.4, 0.2, 0.1});
  run_with(config_for(m, 0.01, 1e-3), m, RegParams{}, noise16, ScalarField(g, 0.7), single(ScalarField(g, 0.5)), a);
  for (double v : a.result().scaled) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(a.result().max_over_min, 1.0);
}

TEST(AlphaScan, SlopeStatistic) {
  std::vector<double> al{0.4, 0.2, 0.1, 0.05};
  std::vector<double> flat{1.0, 1.0, 1.0, 1.0}, lin{0.4, 0.2, 0.1, 0.05};
  EXPECT_NEAR(AlphaScanObserver::slope(al, flat), 0.0, 1e-12);
  EXPECT_NEAR(AlphaScanObserver::slope(al, lin), -1.0, 1e-12);
}

TEST(AlphaScan, BoundedAcrossAlphaWithLogEstimate) {
  const TorusGrid g(2, 32);
  auto m = make_model("abs");
  auto phi0 = initial::bump(g, {0.5, 0.5, 0.0}, 0.3, 0.05, 0.95);
  AlphaScanObserver a({0.4, 0.2, 0.1, 0.05, 0.025});
  auto cfg = config_for(m, 0.05, 1e-4);
  run_with(cfg, m, with_epsilon(1e-2), noise16, phi0, single(ScalarField(g, 0.3)), a);
  auto r = a.result();
  EXPECT_LE(r.max_over_min, 10.0);
  EXPECT_LE(r.trend_slope, 0.2);
  EXPECT_TRUE(std::isfinite(r.log_gradient_integral));
  auto inv = validate_invariance(m, 2000, 1);
  EXPECT_LE(r.log_l1_sup, r.log_l1_initial + log_estimate_constant(inv.g_over_phi, inv.psi_bound, cfg.gamma) * cfg.T);
}

TEST(WeightSupport, ConstantsGiveZero) {
  const TorusGrid g(2, 16);
  auto m = make_model("abs", {{"K", 0.0}});
  WeightSupportObserver w(Weight::constant(), 0.1);
  run_with(config_for(m, 0.01, 1e-3), m, RegParams{}, noise16, ScalarField(g, 0.7), single(ScalarField(g, 0.5)), w);
  EXPECT_LE(std::abs(w.result().residual), 1e-12);
}

TEST(WeightSupport, HeatFlowConvergesAndDetectsMissingTerm) {
  const TorusGrid g(2, 32);
  auto m = silent(pure_heat(1.0));
  auto phi0 = initial::bump(g, {0.5, 0.5, 0.0}, 0.4, 0.01, 0.99);
  std::vector<double> res;
  for (double dt : {2e-4, 1e-4}) {
    WeightSupportObserver w(Weight::heat(1.0), 0.1), faulty(Weight::heat(1.0), 0.1, default_guard, true);
    run_with(config_for(m, 0.05, dt), m, RegParams{}, noise16, phi0, single(ScalarField(g, 0.5)), w, faulty);
    res.push_back(w.result().normalized);
    EXPECT_GT(faulty.result().normalized, 0.3);
  }
  EXPECT_LE(res[1], 0.05);
  EXPECT_LE(res[1] / res[0], 0.6);
}

TEST(ItoSquare, DegenerateConfigurationIsExact) {
  const TorusGrid g(2, 32);
  auto m = silent(make_model("abs", {{"K_alpha", 0.0}, {"rho", 0.0}}));
  ItoSquareObserver ito;
  auto c0 = single(initial::random_smooth(g, 4, 3, 0.2));
  run_with(config_for(m, 0.05, 1e-4), m, RegParams{}, noise16, ScalarField(g, 0.8), c0, ito);
  auto r = ito.result();
  EXPECT_LE(r.max_residual, 1e-6 * r.scale);
  EXPECT_EQ(r.martingale, 0.0);
}

TEST(ItoSquare, NoisyResidualShrinksWithStep) {
  const TorusGrid g(2, 16);
  auto m = make_model("abs");
  auto phi0 = initial::random_smooth(g, 7, 3, 0.2);
  auto c0 = single(ScalarField(g, 0.5));
  std::vector<double> rms;
  for (double dt : {4e-4, 2e-4, 1e-4}) {
    double sum = 0.0;
    const int paths = 32;
    for (int p = 0; p < paths; ++p) {
      ItoSquareObserver ito;
      auto cfg = config_for(m, 0.05, dt);
      cfg.noise_base_dt = 4e-4;
      run_with(cfg, m, with_epsilon(1e-2), NoiseSpec{0.1, 2.0, 6, 1, 500u + p}, phi0, c0, ito);
      sum += ito.result().rms_residual;
    }
    rms.push_back(sum / paths);
  }
  EXPECT_LT(rms[1], rms[0]);
  EXPECT_LT(rms[2], rms[1]);
}

TEST(PhiEnergy, PureHeatIsExact) {
  const TorusGrid g(2, 32);
  auto m = silent(pure_heat(1.0));
  PhiEnergyObserver e;
  run_with(config_for(m, 0.05, 1e-4), m, RegParams{}, noise16, initial::random_smooth(g, 2), single(ScalarField(g, 0.5)), e);
  auto r = e.result();
  EXPECT_LE(r.normalized, 1e-8);
  EXPECT_LE(r.max_dissipation_increment, 0.0);
}

TEST(PhiEnergy, FrozenConcentrationHalvesWithStep) {
  const TorusGrid g(2, 32);
  auto m = silent(make_model("abs", {{"K_alpha", 0.0}, {"rho", 0.0}, {"gamma", 0.1}, {"K", 5.0}}));
  auto phi0 = initial::random_smooth(g, 8, 3, 0.05);
  std::vector<double> res;
  for (double dt : {4e-4, 2e-4, 1e-4}) {
    PhiEnergyObserver e;
    run_with(config_for(m, 0.1, dt), m, with_epsilon(1e-2), noise16, phi0, single(ScalarField(g, 0.5)), e);
    res.push_back(e.result().normalized);
    EXPECT_LE(e.result().max_dissipation_increment, 0.0);
  }
  EXPECT_LE(res[1] / res[0], 0.6);
  EXPECT_LE(res[2] / res[1], 0.6);
}

TEST(ColeHopf, ConstantPhaseGivesZero) {
  const TorusGrid g(2, 16);
  auto m = silent(pure_heat(1.0));
  ColeHopfObserver ch;
  run_with(config_for(m, 0.01, 1e-3), m, RegParams{}, noise16, ScalarField(g, 0.6), single(ScalarField(g, 0.5)), ch);
  EXPECT_EQ(ch.residual(), 0.0);
}

TEST(ColeHopf, RejectsNonpositivePhase) {
  const TorusGrid g(2, 16);
  ColeHopfObserver ch;
  EXPECT_THROW(ch.on_start(initial::bump(g, {0.5, 0.5, 0.0}, 0.2), VectorField(g, 1), SolverConfig{}), DiagnosticError);
}

TEST(ColeHopf, HeatFlowResidualShrinksAndDriftFormsAgree) {
  const TorusGrid g(2, 32);
  auto m = silent(pure_heat(1.0));
  auto phi0 = ScalarField::from_function(g, [](const auto& x) { return (1.0 + 0.5 * std::cos(two_pi * x[0])) / 1.5; });
  std::vector<double> res;
  for (double dt : {2e-4, 1e-4}) {
    ColeHopfObserver ch;
    run_with(config_for(m, 0.05, dt), m, RegParams{}, noise16, phi0, single(ScalarField(g, 0.5)), ch);
    res.push_back(ch.residual());
  }
  EXPECT_LT(res[1], res[0]);

  auto abs = make_model("abs", {{"K", 0.0}, {"alpha", 0.0}, {"beta", 0.0}, {"gamma", 1.0}});
  auto cfg = config_for(abs, 0.02, 1e-4);
  auto c0 = single(ScalarField::from_function(g, [](const auto& x) { return 0.5 + 0.3 * std::sin(two_pi * x[1] + two_pi * x[0]); }));
  auto quotient = run_coupled(cfg, abs, RegParams{}, noise16, phi0, c0);
  cfg.singular_form = SingularForm::cole_hopf;
  auto transformed = run_coupled(cfg, abs, RegParams{}, noise16, phi0, c0);
  EXPECT_LE(spf::testing::sup_diff(quotient.snapshots.back().c[0], transformed.snapshots.back().c[0]), 1e-8);
}

TEST(WeakForm, TrivialConfigurationResidual) {
  const TorusGrid g(2, 32);
  auto m = silent(make_model("abs", {{"K_alpha", 0.0}, {"rho", 0.0}}));
  auto tests = default_tests(g, 1);
  WeakFormOptions consistent;
  consistent.quadrature = Quadrature::scheme_consistent;
  WeakFormObserver left(Weight::constant(), tests), exact(Weight::constant(), tests, consistent);
  auto c0 = single(initial::random_smooth(g, 9, 3, 0.2));
  run_with(config_for(m, 0.05, 1e-4), m, RegParams{}, noise16, ScalarField(g, 0.8), c0, left, exact);
  EXPECT_LE(exact.result().worst, 1e-6);
  EXPECT_LE(left.result().worst, 0.05);
}

TEST(WeakForm, ConstantWeightRejectedWhenPhaseVanishes) {
  const TorusGrid g(2, 16);
  WeakFormObserver w(Weight::constant(), default_tests(g, 1));
  EXPECT_THROW(w.on_start(initial::bump(g, {0.5, 0.5, 0.0}, 0.2), VectorField(g, 1, 0.5), SolverConfig{}), DiagnosticError);
}

TEST(WeakForm, PhiPowerExpandedFormConvergesAndNeedsQuotientTerm) {
  const TorusGrid g(2, 32);
  auto m = silent(make_model("abs"));
  auto tests = default_tests(g, 2);
  auto phi0 = initial::bump(g, {0.5, 0.5, 0.0}, 0.35, 0.05, 0.95);
  auto c0 = single(ScalarField::from_function(g, [](const auto& x) { return 0.3 + 0.1 * std::sin(two_pi * x[1]); }));
  std::vector<double> worst;
  for (double dt : {2e-4, 1e-4}) {
    WeakFormObserver w(Weight::phi_power(0.25), tests);
    run_with(config_for(m, 0.05, dt), m, with_epsilon(1e-2), noise16, phi0, c0, w);
    auto r = w.result();
    EXPECT_TRUE(r.expanded);
    worst.push_back(r.worst);
    EXPECT_GE(r.worst_without("quotient") / r.worst, 10.0);
  }
  EXPECT_LE(worst[1], 0.05);
  EXPECT_LE(worst[1] / worst[0], 0.6);
}

TEST(WeakForm, ProductRuleWithUnitFactorMatchesPlainForm) {
  const TorusGrid g(2, 32);
  auto m = make_model("abs");
  auto tests = default_tests(g, 3);
  WeakFormOptions product;
  product.exponent = 1;
  WeakFormObserver plain(Weight::constant(), tests), prod(Weight::path([&](std::size_t, double) { return ScalarField(g, 1.0); }, "one"), tests, product);
  auto phi0 = initial::random_smooth(g, 4, 3, 0.2);
  run_with(config_for(m, 0.02, 1e-4), m, with_epsilon(1e-2), noise16, phi0, single(ScalarField(g, 0.4)), plain, prod);
  auto a = plain.result(), b = prod.result();
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) EXPECT_NEAR(a.entries[i].residual, b.entries[i].residual, 1e-12);
  for (const auto& e : b.entries) EXPECT_EQ(e.terms.at("weight_rate"), 0.0);
}

TEST(WeakForm, ProductRuleWithPhiPowerConverges) {
  const TorusGrid g(2, 32);
  auto m = silent(make_model("abs"));
  auto tests = default_tests(g, 4);
  WeakFormOptions product;
  product.exponent = 1;
  product.expanded = false;
  auto phi0 = initial::random_smooth(g, 5, 3, 0.1);
  std::vector<double> worst;
  for (double dt : {2e-4, 1e-4}) {
    WeakFormObserver w(Weight::phi_power(0.25), tests, product);
    run_with(config_for(m, 0.05, dt), m, with_epsilon(1e-2), noise16, phi0, single(initial::cosine(g, 0.4, 0.2)), w);
    worst.push_back(w.result().worst);
  }
  EXPECT_LE(worst[1], 0.05);
  EXPECT_LE(worst[1] / worst[0], 0.6);
}

TEST(QuadraticVariation, ZeroAmplitudeGivesZero) {
  const TorusGrid g(2, 16);
  auto m = silent(make_model("abs"));
  auto v = default_tests(g, 1)[1].u;
  std::vector<QVPath> paths;
  for (std::uint64_t s = 0; s < 3; ++s) {
    QVObserver q(v);
    auto ns = noise16;
    ns.seed = s;
    run_with(config_for(m, 0.01, 1e-3), m, with_epsilon(1e-2), ns, initial::cosine(g, 0.5, 0.3), single(ScalarField(g, 0.5)), q);
    paths.push_back(q.result());
  }
  auto e = qv_estimate(paths);
  EXPECT_EQ(e.mean_realized, 0.0);
  EXPECT_EQ(e.mean_predicted, 0.0);
  EXPECT_TRUE(e.too_few_paths);
}

TEST(QuadraticVariation, ConstantAmplitudeMatchesClosedForm) {
  const TorusGrid g(2, 16);
  const double sigma = 0.05, T = 0.05;
  auto m = with_constant_amplitude(make_model("abs"), sigma);
  auto v = default_tests(g, 1)[2].u;
  const NoiseSpectrum spec(noise16, g);
  const double closed = sigma * sigma * T * spec.covariance_form(v);
  std::vector<QVPath> paths;
  for (std::uint64_t s = 0; s < 40; ++s) {
    QVObserver q(v);
    auto ns = noise16;
    ns.seed = 100 + s;
    run_with(config_for(m, T, 1e-3), m, with_epsilon(1e-2), ns, ScalarField(g, 0.6), single(ScalarField(g, 0.5)), q);
    paths.push_back(q.result());
  }
  auto e = qv_estimate(paths, 0, 20);
  EXPECT_FALSE(e.too_few_paths);
  EXPECT_NEAR(e.mean_predicted, closed, 1e-12 * closed);
  EXPECT_LE(e.relative_error, 0.1);
}

TEST(Centeredness, StatisticOnKnownSamples) {
  std::vector<double> xs;
  CounterStream rng(5);
  for (int i = 0; i < 400; ++i) xs.push_back(rng.normal());
  auto s = centeredness(xs);
  EXPECT_TRUE(s.reliable);
  EXPECT_TRUE(s.centered);
  for (double& x : xs) x += 1.0;
  EXPECT_FALSE(centeredness(xs).centered);
  EXPECT_FALSE(centeredness({1.0, 2.0}).reliable);
}

TEST(Positivity, CoupledRunStaysAboveFloor) {
  const TorusGrid g(2, 32);
  auto m = make_model("abs", {{"gamma", 1.0}});
  auto inv = validate_invariance(m, 2000, 2);
  PositivityObserver p(inv.g_over_phi, inv.psi_bound);
  run_with(config_for(m, 0.05, 1e-4), m, with_epsilon(1e-2), noise16, initial::bump(g, {0.3, 0.6, 0.0}, 0.3),
           single(ScalarField(g, 0.4)), p);
  EXPECT_EQ(p.result().violations, 0u);
}
