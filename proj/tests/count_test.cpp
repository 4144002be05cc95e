#include <cmath>

#include <gtest/gtest.h>

#include "cdmkit/count.hpp"

using namespace cdmkit;

namespace {

struct CountPanel {
  int entities = 20;
  int periods = 5;
  double slope = 0.5;
  double alpha = 0.0;
  bool binary_x = false;
  std::uint64_t seed = 1;
};

PanelDataset count_panel(const CountPanel& p) {
  Rng rng(p.seed);
  std::vector<PanelDataset::Key> keys;
  std::vector<double> x, y, emp;
  for (int e = 0; e < p.entities; ++e) {
    const double eta = rng.normal(0.0, 0.5);
    const int flip = static_cast<int>(rng.index(static_cast<std::size_t>(p.periods - 1)));
    for (int t = 0; t < p.periods; ++t) {
      keys.push_back({"E" + std::to_string(100 + e), 2010 + t});
      // Binary design: both values appear within every entity.
      const double xv = p.binary_x ? (t <= flip ? 0.0 : 1.0) : rng.normal();
      const double mu = std::exp(p.slope * xv + eta + 0.1 * t);
      const double g = p.alpha > 0.0 ? rng.gamma(1.0 / p.alpha, p.alpha) : 1.0;
      x.push_back(xv);
      y.push_back(static_cast<double>(rng.poisson(g * mu)));
      emp.push_back(std::exp(rng.normal(1.0, 0.5)));
    }
  }
  return PanelDataset::build(keys, {{"x", x}, {"y", y}, {"emp", emp}});
}

// Unconditional Poisson with explicit entity and year dummies by plain
// Newton-Raphson; returns the slope on the first column and the loglik.
std::pair<double, double> dummy_poisson(const PanelDataset& ds, const std::string& x, const std::string& yname) {
  const auto n = static_cast<Eigen::Index>(ds.n_rows());
  const auto ne = static_cast<Eigen::Index>(ds.n_entities());
  const auto ny = static_cast<Eigen::Index>(ds.periods().size());
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, 1 + ne + ny - 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(i);
    X(i, 0) = ds.column(x)[r];
    X(i, 1 + ds.entity_of(r)) = 1.0;
    const int t = ds.year_of(r) - ds.first_year();
    if (t > 0) X(i, ne + t) = 1.0;
    y(i) = ds.column(yname)[r];
  }
  Eigen::VectorXd b = Eigen::VectorXd::Zero(X.cols());
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd mu = (X * b).array().exp();
    const Eigen::VectorXd g = X.transpose() * (y - mu);
    const Eigen::MatrixXd H = X.transpose() * mu.asDiagonal() * X;
    const Eigen::VectorXd step = H.ldlt().solve(g);
    b += step;
    if (step.cwiseAbs().maxCoeff() < 1e-13) break;
  }
  const Eigen::VectorXd eta = X * b;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) ll += y(i) * eta(i) - std::exp(eta(i)) - std::lgamma(y(i) + 1.0);
  return {b(0), ll};
}

PanelDataset one_entity(std::vector<double> realized, std::vector<double> emp = {}) {
  std::vector<PanelDataset::Key> keys;
  for (std::size_t t = 0; t < realized.size(); ++t) keys.push_back({"A", 2010 + static_cast<int>(t)});
  if (emp.empty()) emp.assign(realized.size(), 1.0);
  return PanelDataset::build(keys, {{"PAT", realized}, {"EMP", emp}});
}

CountSpec spec_for(CountFamily fam) {
  CountSpec s;
  s.dependent = "y";
  s.regressors = {"x"};
  s.family = fam;
  return s;
}

}  // namespace

TEST(PoissonFe, MatchesDummyVariablePoisson) {
  auto ds = count_panel({.entities = 20, .periods = 5, .seed = 3});
  auto f = poisson_fe_fit(ds, spec_for(CountFamily::PoissonFe));
  EXPECT_NEAR(f.base.b("x"), dummy_poisson(ds, "x", "y").first, 1e-6);
  EXPECT_TRUE(f.base.has("year=2014"));
  EXPECT_FALSE(f.base.has("_cons"));
  f.base.check_invariants();
}

TEST(PoissonFe, RecoversSlope) {
  auto ds = count_panel({.entities = 200, .periods = 5, .slope = 0.5, .binary_x = true, .seed = 4});
  auto f = poisson_fe_fit(ds, spec_for(CountFamily::PoissonFe));
  EXPECT_LT(std::abs(f.base.b("x") - 0.5), 3.0 * f.base.se("x"));
}

TEST(PoissonFe, AllZeroEntityExcluded) {
  auto ds = count_panel({.entities = 10, .periods = 4, .slope = 0.5, .alpha = 0.0, .binary_x = false, .seed = 5});
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  for (auto& v : y) v += 1.0;
  for (auto r = ds.entity_begin(0); r < ds.entity_end(0); ++r) y[r] = 0.0;
  ds = ds.with_replaced("y", y);
  auto f = poisson_fe_fit(ds, spec_for(CountFamily::PoissonFe));
  EXPECT_EQ(f.dropped_zero_entities, 1u);
  EXPECT_EQ(f.base.n_obs, ds.n_rows() - 4);
  EXPECT_EQ(f.base.notes.at("entities_all_zero"), "1");
  EXPECT_EQ(f.entity_multiplier.count(ds.entities()[0]), 0u);

  std::fill(y.begin(), y.end(), 0.0);
  EXPECT_THROW(poisson_fe_fit(ds.with_replaced("y", y), spec_for(CountFamily::PoissonFe)), DataError);
}

TEST(PoissonFe, EntityConstantColumnAbsorbed) {
  auto ds = count_panel({.entities = 30, .periods = 5, .seed = 6});
  std::vector<double> c(ds.n_rows());
  for (std::size_t r = 0; r < ds.n_rows(); ++r) c[r] = 0.3 * ds.entity_of(r);
  auto ds2 = ds.with_column("size", c);
  auto spec = spec_for(CountFamily::PoissonFe);
  auto a = poisson_fe_fit(ds2, spec);
  spec.regressors = {"x", "size"};
  auto b = poisson_fe_fit(ds2, spec);
  EXPECT_LT(std::abs(a.base.b("x") - b.base.b("x")), 1e-8);
  EXPECT_FALSE(b.base.has("size"));
  ASSERT_EQ(b.absorbed.size(), 1u);
  EXPECT_FALSE(b.base.warnings.empty());
}

TEST(PoissonFe, RequiresEntityEffects) {
  auto ds = count_panel({});
  auto spec = spec_for(CountFamily::PoissonFe);
  spec.entity_fe = false;
  EXPECT_THROW(poisson_fe_fit(ds, spec), ValidationError);
}

TEST(Counts, RoundingRule) {
  auto ds = count_panel({.entities = 10, .periods = 4, .seed = 7});
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  y[2] = 2.4999;
  auto bad = ds.with_replaced("y", y);
  EXPECT_THROW(poisson_fe_fit(bad, spec_for(CountFamily::PoissonFe)), DataError);
  EXPECT_THROW(nb2_fit(bad, spec_for(CountFamily::Nb2)), DataError);
  y[2] = 3.0000004;
  EXPECT_NO_THROW(poisson_fe_fit(ds.with_replaced("y", y), spec_for(CountFamily::PoissonFe)));
  y[2] = 2.4999;
  auto spec = spec_for(CountFamily::PoissonFe);
  spec.rounding = CountRounding::Nearest;
  EXPECT_NO_THROW(poisson_fe_fit(ds.with_replaced("y", y), spec));
  y[2] = -1.0;
  EXPECT_THROW(poisson_fe_fit(ds.with_replaced("y", y), spec), DataError);
}

TEST(Nb2, DerivativesMatchFiniteDifferences) {
  const double h = 1e-6;
  for (double y : {0.0, 1.0, 4.0, 17.0}) {
    for (double eta : {-1.0, 0.5, 2.0}) {
      for (double th : {-3.0, -0.2, 1.0}) {
        const auto t = detail::nb2_terms(y, eta, th, true);
        auto ll = [&](double e, double q) { return detail::nb2_terms(y, e, q, false).ll; };
        EXPECT_NEAR(t.d_eta, (ll(eta + h, th) - ll(eta - h, th)) / (2 * h), 1e-6);
        EXPECT_NEAR(t.d_theta, (ll(eta, th + h) - ll(eta, th - h)) / (2 * h), 1e-6);
        const auto up = detail::nb2_terms(y, eta + h, th, true), dn = detail::nb2_terms(y, eta - h, th, true);
        EXPECT_NEAR(t.d_eta2, (up.d_eta - dn.d_eta) / (2 * h), 1e-5);
        EXPECT_NEAR(t.d_eta_theta, (up.d_theta - dn.d_theta) / (2 * h), 1e-5);
        const auto tu = detail::nb2_terms(y, eta, th + h, true), td = detail::nb2_terms(y, eta, th - h, true);
        EXPECT_NEAR(t.d_theta2, (tu.d_theta - td.d_theta) / (2 * h), 1e-5);
      }
    }
  }
}

TEST(Nb2, LikelihoodMatchesClosedForm) {
  // Direct NB2 pmf via lgamma.
  for (double y : {0.0, 3.0, 12.0}) {
    const double a = 0.7, m = 2.5;
    const double r = 1.0 / a;
    const double direct = std::lgamma(y + r) - std::lgamma(r) - std::lgamma(y + 1) + r * std::log(r / (r + m)) +
                          y * std::log(m / (r + m));
    EXPECT_NEAR(detail::nb2_terms(y, std::log(m), std::log(a), false).ll, direct, 1e-12);
  }
}

TEST(Nb2, RecoversOverdispersion) {
  auto ds = count_panel({.entities = 300, .periods = 6, .slope = 0.3, .alpha = 0.8, .seed = 8});
  auto spec = spec_for(CountFamily::Nb2);
  spec.entity_fe = false;
  // Homogeneous entities: the pooled NB2 likelihood is correctly specified.
  std::vector<double> y(ds.n_rows());
  Rng rng(80);
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    y[r] = static_cast<double>(rng.poisson(rng.gamma(1.25, 0.8) * std::exp(1.0 + 0.3 * ds.column("x")[r])));
  ds = ds.with_replaced("y", y);
  auto f = nb2_fit(ds, spec);
  ASSERT_TRUE(f.alpha.has_value());
  EXPECT_GE(*f.alpha, 0.6);
  EXPECT_LE(*f.alpha, 1.0);
  EXPECT_LT(std::abs(f.base.b("x") - 0.3), 3.0 * f.base.se("x"));
  EXPECT_TRUE(f.base.has("lnalpha"));
  EXPECT_NEAR(std::exp(f.base.b("lnalpha")), *f.alpha, 1e-12);
  EXPECT_TRUE(f.base.has("_cons"));
  f.base.check_invariants();
}

TEST(Nb2, EntityDummiesBiasAlphaDownAtShortT) {
  // Incidental-parameters effect of unconditional FE: with T = 6 the
  // estimate sits near alpha (T - 1) / T rather than alpha.
  auto ds = count_panel({.entities = 300, .periods = 6, .slope = 0.3, .alpha = 0.8, .seed = 8});
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  Rng rng(81);
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    const double eta = 0.5 * (static_cast<double>(ds.entity_of(r) % 7) / 3.0 - 1.0);
    y[r] = static_cast<double>(rng.poisson(rng.gamma(1.25, 0.8) * std::exp(2.5 + 0.3 * ds.column("x")[r] + eta)));
  }
  auto f = nb2_fit(ds.with_replaced("y", y), spec_for(CountFamily::Nb2));
  EXPECT_GT(*f.alpha, 0.5);
  EXPECT_LT(*f.alpha, 0.8);
  EXPECT_LT(std::abs(f.base.b("x") - 0.3), 3.0 * f.base.se("x"));
  EXPECT_FALSE(f.base.has("_cons"));
  EXPECT_EQ(f.entity_multiplier.size(), ds.n_entities());
}

TEST(Nb2, PoissonLimit) {
  auto ds = count_panel({.entities = 100, .periods = 6, .slope = 0.3, .seed = 9});
  auto nb = nb2_fit(ds, spec_for(CountFamily::Nb2));
  ASSERT_TRUE(nb.alpha.has_value());
  EXPECT_LT(*nb.alpha, 0.05);
  const auto [slope, ll] = dummy_poisson(ds, "x", "y");
  EXPECT_LT(std::abs(*nb.base.loglik - ll) / static_cast<double>(ds.n_rows()), 1e-3);

  auto spec = spec_for(CountFamily::Nb2);
  spec.fixed_alpha = 0.0;
  auto fixed = nb2_fit(ds, spec);
  EXPECT_NEAR(fixed.base.b("x"), slope, 1e-6);
  auto pfe = poisson_fe_fit(ds, spec_for(CountFamily::PoissonFe));
  EXPECT_NEAR(fixed.base.b("x"), pfe.base.b("x"), 1e-6);
}

TEST(Calibration, RatioScalingArithmetic) {
  auto ds = one_entity({5.0, 7.0});
  auto out = calibrate_raw({2.0, 4.0}, ds, {"PAT"});
  EXPECT_NEAR(out[0], 4.001, 1e-12);
  EXPECT_NEAR(out[1], 8.001, 1e-12);
  auto zero = calibrate_raw({2.0, 4.0}, one_entity({0.0, 0.0}), {"PAT"});
  EXPECT_EQ(zero[0], 0.001);
  EXPECT_EQ(zero[1], 0.001);
}

TEST(Calibration, Errors) {
  EXPECT_THROW(calibrate_raw({0.0, 0.0}, one_entity({1.0, 2.0}), {"PAT"}), DataError);
  EXPECT_THROW(calibrate_raw({1.0, 1.0}, one_entity({1.0, 2.0}), {"PAT", 0.0}), ValidationError);
}

TEST(Calibration, MeanMatchingOnFittedModels) {
  auto ds = count_panel({.entities = 40, .periods = 5, .seed = 10});
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  for (auto r = ds.entity_begin(3); r < ds.entity_end(3); ++r) y[r] = 0.0;
  ds = ds.with_replaced("y", y);
  for (auto fam : {CountFamily::PoissonFe, CountFamily::Nb2}) {
    auto f = count_fit(ds, spec_for(fam));
    auto pred = calibrate_predictions(f, ds, {"y"});
    for (std::uint32_t e = 0; e < ds.n_entities(); ++e) {
      double sp = 0, sr = 0;
      for (auto r = ds.entity_begin(e); r < ds.entity_end(e); ++r) {
        ASSERT_GE(pred[r], 0.001);
        sp += pred[r] - 0.001;
        sr += y[r];
      }
      const double n = static_cast<double>(ds.entity_end(e) - ds.entity_begin(e));
      EXPECT_NEAR(sp / n, sr / n, 1e-9);
    }
    auto intensity = patent_intensity(pred, ds.column("emp"));
    for (auto r = ds.entity_begin(3); r < ds.entity_end(3); ++r) EXPECT_EQ(intensity[r], std::log(0.001));
  }
}

TEST(Calibration, UnestimatedEntityUsesUnitEffect) {
  auto ds = count_panel({.entities = 10, .periods = 4, .seed = 11});
  auto f = poisson_fe_fit(ds, spec_for(CountFamily::PoissonFe));
  auto probe = PanelDataset::build({{"NEW", 2011}}, {{"x", {0.5}}});
  auto raw = raw_count_prediction(f, probe);
  EXPECT_NEAR(raw[0], std::exp(0.5 * f.base.b("x") + f.base.b("year=2011")), 1e-12);
}

TEST(PatentIntensity, Rules) {
  std::vector<double> pred = {10.001, 0.001, 0.001, 5.001, 5.001};
  std::vector<double> emp = {2.0, 3.0, -1.0, 1.0, 4.0};
  auto out = patent_intensity(pred, emp);
  EXPECT_NEAR(out[0], std::log(10.001 / 2.0), 1e-12);
  EXPECT_NEAR(out[0], 1.6095, 1e-4);
  EXPECT_EQ(out[1], std::log(0.001));
  EXPECT_NEAR(out[1], -6.907755, 1e-6);
  EXPECT_EQ(out[2], std::log(0.001));  // employees unused on zero rows
  EXPECT_GT(out[3], out[4]);
  std::vector<double> bad_emp = {0.0};
  std::vector<double> one = {3.001};
  EXPECT_THROW(patent_intensity(one, bad_emp), DataError);
}

TEST(PatentIntensity, Monotone) {
  std::vector<double> emp(50, 2.0);
  std::vector<double> pred;
  for (int i = 0; i < 50; ++i) pred.push_back(0.001 + 0.1 * (i + 1));
  auto out = patent_intensity(pred, emp);
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_GT(out[i], out[i - 1]);
}

TEST(Counts, BootstrapAlignedByName) {
  auto ds = count_panel({.entities = 60, .periods = 4, .seed = 12});
  auto spec = spec_for(CountFamily::PoissonFe);
  spec.vcov = VcovSpec::bootstrap(25, 3, "entity", 2);
  auto a = poisson_fe_fit(ds, spec);
  auto b = poisson_fe_fit(ds, spec);
  EXPECT_EQ(a.base.vcov, b.base.vcov);
  EXPECT_GT(a.base.se("x"), 0.0);
  spec.family = CountFamily::Nb2;
  spec.vcov = VcovSpec::bootstrap(10, 3);
  auto nb = nb2_fit(ds, spec);
  nb.base.check_invariants();
}
