#include <cmath>

#include <gtest/gtest.h>

#include "cdmkit/cqr.hpp"

using namespace cdmkit;

namespace {

PanelDataset make_panel(int entities, int periods, std::vector<std::pair<std::string, std::vector<double>>> cols) {
  std::vector<PanelDataset::Key> keys;
  for (int e = 0; e < entities; ++e)
    for (int t = 0; t < periods; ++t) keys.push_back({"E" + std::to_string(100 + e), 2000 + t});
  return PanelDataset::build(keys, std::move(cols), "firm", "year");
}

// y = 1 + 0.5 x + entity effect + skewed noise.
PanelDataset cqr_panel(std::uint64_t seed, int entities, int periods) {
  Rng rng(seed);
  std::vector<double> x, y;
  for (int e = 0; e < entities; ++e) {
    const double a = rng.normal();
    for (int t = 0; t < periods; ++t) {
      const double xi = rng.normal();
      x.push_back(xi);
      y.push_back(1.0 + 0.5 * xi + a + rng.gamma(2.0, 1.0));
    }
  }
  return make_panel(entities, periods, {{"x", x}, {"y", y}});
}

Eigen::MatrixXd ones(Eigen::Index n) { return Eigen::MatrixXd::Ones(n, 1); }

double grid_min_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double tau) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 10000; ++i) {
    const double b = -5.0 + 1e-3 * i;
    best = std::min(best, check_loss(y - b * x, tau));
  }
  return best;
}

CqrSpec spec_for(std::vector<std::string> fe, bool intercept = true) {
  CqrSpec s;
  s.dependent = "y";
  s.regressors = {"x"};
  s.fe_dims = std::move(fe);
  s.intercept = intercept;
  s.vcov = VcovSpec::bootstrap(20, 5);
  return s;
}

}  // namespace

TEST(Cqr, MedianOfThree) {
  Eigen::VectorXd y(3);
  y << 1, 2, 3;
  auto s = cqr_solve(ones(3), y, 0.5);
  EXPECT_NEAR(s.beta(0), 2.0, 1e-6);
  EXPECT_FALSE(s.nonunique);
  EXPECT_TRUE(s.polished);
}

TEST(Cqr, FlatOptimumLandsInInterval) {
  Eigen::VectorXd y(4);
  y << 1, 2, 3, 4;
  auto s = cqr_solve(ones(4), y, 0.5);
  EXPECT_GE(s.beta(0), 2.0 - 1e-4);
  EXPECT_LE(s.beta(0), 3.0 + 1e-4);
  EXPECT_TRUE(s.nonunique);
  EXPECT_NEAR(s.loss, 2.0, 1e-5);
}

TEST(Cqr, OtherQuantilesOfSample) {
  Eigen::VectorXd y(5);
  y << 5, 1, 4, 2, 3;
  EXPECT_NEAR(cqr_solve(ones(5), y, 0.3).beta(0), 2.0, 1e-6);
  EXPECT_NEAR(cqr_solve(ones(5), y, 0.9).beta(0), 5.0, 1e-6);
}

TEST(Cqr, SlopeMatchesGridSearchOracle) {
  Eigen::VectorXd x(9), y(9);
  // Every candidate slope y_i / x_i lies on the 1e-3 grid.
  const double ratio[] = {1.9, 1.352, 1.61, 1.5, 1.47, 1.633, 1.25, 1.625, 1.4};
  x << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  for (int i = 0; i < 9; ++i) y(i) = ratio[i] * x(i);
  for (double tau : {0.25, 0.5, 0.75}) {
    auto s = cqr_solve(x, y, tau);
    EXPECT_NEAR(s.loss, grid_min_loss(x, y, tau), 1e-6) << tau;
    EXPECT_NEAR(check_loss(y - s.beta(0) * x, tau), s.loss, 1e-12);
  }
}

TEST(Cqr, SlopeBelowGridMinimumOnRandomData) {
  Rng rng(3);
  Eigen::VectorXd x(9), y(9);
  for (int i = 0; i < 9; ++i) {
    x(i) = rng.uniform(0.5, 3.0);
    y(i) = 1.3 * x(i) + rng.normal();
  }
  for (double tau : {0.2, 0.5, 0.8}) EXPECT_LE(cqr_solve(x, y, tau).loss, grid_min_loss(x, y, tau) + 1e-6);
}

TEST(Cqr, LossNotAboveOls) {
  auto ds = cqr_panel(1, 30, 6);
  auto [names, sol] = cqr_coefficients(ds, spec_for({"year"}));
  auto ols = ols_fit(ds, ModelSpec{"y", {"x"}, true, {}});
  Eigen::VectorXd u(static_cast<Eigen::Index>(ds.n_rows()));
  // OLS with year indicators for a like-for-like comparison.
  DesignRequest req{"y", {"x"}, true, {"year"}};
  auto d = build_design(ds, req);
  Eigen::VectorXd b = d.X.colPivHouseholderQr().solve(d.y);
  EXPECT_LE(sol.loss, check_loss(d.y - d.X * b, 0.5) + 1e-12);
  EXPECT_EQ(names, d.names);
}

TEST(Cqr, ScaleEquivariance) {
  auto ds = cqr_panel(2, 25, 5);
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  for (double& v : y) v *= 3.5;
  auto scaled = ds.with_replaced("y", y);
  for (const auto& fe : {std::vector<std::string>{}, std::vector<std::string>{"year"}}) {
    auto a = cqr_coefficients(ds, spec_for(fe)).second.beta;
    auto b = cqr_coefficients(scaled, spec_for(fe)).second.beta;
    for (Eigen::Index j = 0; j < a.size(); ++j) EXPECT_NEAR(b(j), 3.5 * a(j), 1e-6);
  }
  // With entity effects absorbed the year block can sit on a flat stretch of
  // the loss; the regressor slope is still pinned.
  auto a = cqr_coefficients(ds, spec_for({"entity", "year"})).second;
  auto b = cqr_coefficients(scaled, spec_for({"entity", "year"})).second;
  EXPECT_NEAR(b.beta(0), 3.5 * a.beta(0), 1e-6);
  EXPECT_NEAR(b.loss, 3.5 * a.loss, 1e-9 * b.loss);
}

TEST(Cqr, NoiselessLinearSlopeExact) {
  std::vector<double> x, y;
  for (int i = 0; i < 40; ++i) {
    x.push_back(0.1 * i - 2.0);
    y.push_back(1.0 + 2.0 * x.back());
  }
  auto ds = make_panel(8, 5, {{"x", x}, {"y", y}});
  auto [names, sol] = cqr_coefficients(ds, spec_for({}));
  EXPECT_NEAR(sol.beta(0), 2.0, 1e-6);
}

TEST(Cqr, AbsorbedEntityMatchesIndicatorColumns) {
  auto ds = cqr_panel(4, 12, 6);
  auto [names, absorbed] = cqr_coefficients(ds, spec_for({"entity", "year"}));
  DesignRequest req{"y", {"x"}, true, {"entity", "year"}};
  auto d = build_design(ds, req);
  auto explicit_fit = cqr_solve(d.X, d.y, 0.5);
  EXPECT_NEAR(absorbed.loss, explicit_fit.loss, 1e-6 * (1.0 + explicit_fit.loss));
  EXPECT_NEAR(absorbed.beta(0), explicit_fit.beta(0), 1e-4);
}

TEST(Cqr, FitReportsBootstrap) {
  auto ds = cqr_panel(6, 40, 5);
  auto f = cqr_fit(ds, spec_for({"entity", "year"}));
  EXPECT_EQ(f.names.front(), "x");
  EXPECT_FALSE(f.has(kIntercept));
  EXPECT_GT(f.se("x"), 0.0);
  EXPECT_EQ(f.n_obs, 200u);
  EXPECT_EQ(f.se_method, "cluster_bootstrap(20,5)");
  EXPECT_EQ(f.notes.at("tau"), "0.5");
  EXPECT_NEAR(f.b("x"), 0.5, 0.3);
  auto g = cqr_fit(ds, spec_for({"entity", "year"}));
  EXPECT_EQ(f.vcov, g.vcov);
}

TEST(Cqr, Errors) {
  auto ds = cqr_panel(7, 10, 4);
  auto s = spec_for({});
  s.tau = 1.0;
  EXPECT_THROW(cqr_fit(ds, s), ValidationError);
  s = spec_for({});
  s.vcov = VcovSpec::analytic();
  EXPECT_THROW(cqr_fit(ds, s), ValidationError);
  std::vector<double> x(ds.column("x").begin(), ds.column("x").end());
  s = spec_for({});
  s.regressors = {"x", "x2"};
  EXPECT_THROW(cqr_fit(ds.with_column("x2", x), s), CollinearityError);
  std::vector<double> zone(ds.n_rows());
  for (std::size_t r = 0; r < ds.n_rows(); ++r) zone[r] = ds.entity_of(r) % 2;
  s = spec_for({"entity"});
  s.regressors = {"x", "zone"};
  EXPECT_THROW(cqr_fit(ds.with_column("zone", zone), s), CollinearityError);
}
