#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "cdmkit/rif.hpp"

using namespace cdmkit;

namespace {

PanelDataset make_panel(int entities, int periods, std::vector<std::pair<std::string, std::vector<double>>> cols) {
  std::vector<PanelDataset::Key> keys;
  for (int e = 0; e < entities; ++e)
    for (int t = 0; t < periods; ++t) keys.push_back({"E" + std::to_string(e), 2000 + t});
  return PanelDataset::build(keys, std::move(cols), "firm", "year");
}

// y = delta * x + scale(x) * e on an entities x periods panel.
PanelDataset uqr_panel(std::uint64_t seed, int entities, int periods, double delta, double scale_slope) {
  Rng rng(seed);
  std::vector<double> x, y;
  for (int i = 0; i < entities * periods; ++i) {
    const double xi = rng.uniform(0.0, 1.0);
    x.push_back(xi);
    y.push_back(delta * xi + (1.0 + scale_slope * xi) * rng.normal());
  }
  return make_panel(entities, periods, {{"x", x}, {"y", y}});
}

// Treatment T ~ Bernoulli(share); y = N(0,1) * (1 + widen T) + delta T.
PanelDataset treatment_panel(std::uint64_t seed, int entities, int periods, double delta, double widen,
                             double share = 0.4) {
  Rng rng(seed);
  std::vector<double> t, y, z;
  for (int i = 0; i < entities * periods; ++i) {
    const double zi = rng.normal();
    const double ti = rng.bernoulli(share) ? 1.0 : 0.0;
    z.push_back(zi);
    t.push_back(ti);
    y.push_back(rng.normal() * (1.0 + widen * ti) + delta * ti);
  }
  return make_panel(entities, periods, {{"T", t}, {"y", y}, {"z", z}});
}

std::vector<double> normal_sample(std::uint64_t seed, int n) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.normal();
  return v;
}

double mean_of(const std::vector<double>& v, const std::vector<double>& w = {}) {
  double s = 0, t = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    s += wi * v[i];
    t += wi;
  }
  return s / t;
}

}  // namespace

TEST(Kde, SinglePointAtCentre) {
  const std::vector<double> s = {0.0};
  EXPECT_NEAR(kde_at(s, 0.0, Bandwidth::fixed(1.0)), 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
}

TEST(Kde, SymmetricPair) {
  const std::vector<double> s = {-1.0, 1.0};
  const double h = 0.7;
  const double k = stats::normal_pdf(1.0 / h) / h;
  EXPECT_NEAR(kde_at(s, 0.0, Bandwidth::fixed(h)), k, 1e-15);
  EXPECT_NEAR(kde_at(s, 0.3, Bandwidth::fixed(h)), kde_at(s, -0.3, Bandwidth::fixed(h)), 1e-15);
}

TEST(Kde, StandardNormalDensityAtZero) {
  const auto s = normal_sample(17, 10000);
  EXPECT_NEAR(kde_at(s, 0.0, Bandwidth::silverman()), 1.0 / std::sqrt(2.0 * std::numbers::pi), 0.02);
}

TEST(Kde, ConstantSampleHasZeroBandwidth) {
  const std::vector<double> s(20, 4.0);
  EXPECT_THROW(kde_at(s, 4.0, Bandwidth::silverman()), DataError);
  EXPECT_THROW(kde_at(s, 4.0, Bandwidth::fixed(0.0)), ValidationError);
}

TEST(Kde, SilvermanFallsBackToSdWhenIqrIsZero) {
  std::vector<double> s(20, 0.0);
  s[0] = -5.0;
  s[19] = 5.0;
  const double mean = 0.0;
  double ss = 0;
  for (double v : s) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(silverman_bandwidth(s), 0.9 * std::sqrt(ss / 19.0) * std::pow(20.0, -0.2), 1e-14);
}

TEST(Quantile, OrderStatisticAtCeilIndex) {
  const std::vector<double> y = {3, 1, 2, 5, 4};
  EXPECT_EQ(weighted_quantile(y, 0.5), 3.0);   // ceil(2.5) = 3rd
  EXPECT_EQ(weighted_quantile(y, 0.4), 2.0);   // exactly 2nd
  EXPECT_EQ(weighted_quantile(y, 0.41), 3.0);
  EXPECT_EQ(weighted_quantile(y, 0.01), 1.0);
  EXPECT_EQ(weighted_quantile(y, 0.99), 5.0);
  const std::vector<double> three = {1, 2, 3};
  EXPECT_EQ(weighted_quantile(three, 1.0 / 3.0), 1.0);
}

TEST(Quantile, WeightedAnalogue) {
  const std::vector<double> y = {1, 2, 3}, w = {0.1, 0.1, 0.8};
  EXPECT_EQ(weighted_quantile(y, 0.2, w), 2.0);
  EXPECT_EQ(weighted_quantile(y, 0.21, w), 3.0);
  const std::vector<double> uniform(3, 0.25);
  for (double tau : {0.1, 0.34, 0.5, 0.9}) EXPECT_EQ(weighted_quantile(y, tau, uniform), weighted_quantile(y, tau));
}

TEST(Rif, TwoLevelsDifferingByInverseDensity) {
  const auto y = normal_sample(3, 200);
  for (double tau : default_taus()) {
    auto r = rif_quantile(y, QuantileSpec{}, tau);
    std::set<double> levels(r.rif.begin(), r.rif.end());
    ASSERT_EQ(levels.size(), 2u);
    EXPECT_NEAR(*levels.rbegin() - *levels.begin(), 1.0 / r.f_hat, 1e-12);
    EXPECT_NEAR(*levels.rbegin(), r.q_hat + tau / r.f_hat, 1e-12);
    EXPECT_NEAR(*levels.begin(), r.q_hat - (1.0 - tau) / r.f_hat, 1e-12);
  }
}

TEST(Rif, ArithmeticAtFixedDensity) {
  // f_hat = 0.25 with q_hat = 0 at tau = 0.5: levels +2 and -2.
  auto y = normal_sample(5, 100);
  auto r = rif_quantile(y, QuantileSpec{}, 0.5);
  const double above = r.q_hat + 0.5 / r.f_hat;
  EXPECT_DOUBLE_EQ(above - r.q_hat, 0.5 / r.f_hat);
  EXPECT_DOUBLE_EQ(0.0 + 0.5 / 0.25, 2.0);
  EXPECT_DOUBLE_EQ(0.0 + (0.5 - 1.0) / 0.25, -2.0);
}

TEST(Rif, MeanEqualsQuantileWhenCdfHitsTau) {
  const auto y = normal_sample(9, 1000);
  for (double tau : default_taus()) {
    auto r = rif_quantile(y, QuantileSpec{}, tau);
    EXPECT_NEAR(mean_of(r.rif), r.q_hat, 1e-10) << tau;
    EXPECT_EQ(r.identity_gap, 0.0);
  }
}

TEST(Rif, MeanGapMatchesReportedGap) {
  Rng rng(4);
  auto y = normal_sample(10, 137);
  std::vector<double> w(y.size());
  for (double& v : w) v = rng.uniform(0.1, 2.0);
  for (double tau : default_taus()) {
    auto r = rif_quantile(y, QuantileSpec{}, tau, w);
    EXPECT_NEAR(mean_of(r.rif, w) - r.q_hat, r.identity_gap, 1e-12);
  }
}

TEST(Rif, SigmaMatchesDirectSummation) {
  const auto y = normal_sample(21, 50);
  for (double tau : {0.1, 0.5, 0.9}) {
    auto r = rif_quantile(y, QuantileSpec{}, tau);
    double s = 0;
    for (double v : r.rif) s += (v - r.q_hat) * (v - r.q_hat);
    EXPECT_NEAR(r.sigma2_if, s / 50.0, 1e-12);
  }
}

TEST(Rif, MissingValuesPassThrough) {
  auto y = normal_sample(2, 30);
  y[4] = stats::kMissing;
  auto r = rif_quantile(y, QuantileSpec{}, 0.5);
  EXPECT_TRUE(is_missing(r.rif[4]));
  EXPECT_FALSE(is_missing(r.rif[5]));
}

TEST(Rif, Preconditions) {
  const std::vector<double> few = {1, 2, 3};
  EXPECT_THROW(rif_quantile(few, QuantileSpec{}, 0.5), DataError);
  const std::vector<double> flat(30, 1.0);
  EXPECT_THROW(rif_quantile(flat, QuantileSpec{}, 0.5), DataError);
  EXPECT_THROW(rif_quantile(normal_sample(1, 30), QuantileSpec{}, 1.0), ValidationError);
  QuantileSpec bad;
  bad.taus = {0.5, 0.3};
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Uqr, InterceptOnlyReturnsSampleQuantile) {
  auto ds = uqr_panel(1, 100, 10, 0.3, 0.0);
  auto fits = uqr_fit(ds, "y", {}, QuantileSpec{}, {});
  const auto y = ds.column("y");
  for (const auto& [tau, f] : fits) {
    EXPECT_NEAR(f.b(kIntercept), weighted_quantile(y, tau), 1e-10) << tau;
    EXPECT_EQ(f.se_method, "robust");
  }
}

TEST(Uqr, LocationShiftRecovered) {
  constexpr int reps = 20;
  std::map<double, double> sum;
  for (int r = 0; r < reps; ++r) {
    auto fits = uqr_fit(uqr_panel(100 + r, 300, 10, 0.3, 0.0), "y", {"x"}, QuantileSpec{});
    for (const auto& [tau, f] : fits) sum[tau] += f.b("x");
  }
  for (const auto& [tau, s] : sum) EXPECT_NEAR(s / reps, 0.3, 0.05) << tau;
}

TEST(Uqr, ScaleEffectProfileIncreasesThroughZero) {
  auto fits = uqr_fit(uqr_panel(7, 400, 10, 0.0, 2.0), "y", {"x"}, QuantileSpec{}, {"entity", "year"}, 3);
  double prev = -1e9;
  for (const auto& [tau, f] : fits) {
    EXPECT_GT(f.b("x"), prev) << tau;
    prev = f.b("x");
  }
  EXPECT_LT(fits.at(0.1).b("x"), 0.0);
  EXPECT_GT(fits.at(0.9).b("x"), 0.0);
}

TEST(Uqr, ConstantShiftMovesQuantileOnly) {
  auto ds = uqr_panel(8, 50, 6, 0.3, 0.5);
  auto a = uqr_fit(ds, "y", {"x"}, QuantileSpec{});
  std::vector<double> y(ds.column("y").begin(), ds.column("y").end());
  for (double& v : y) v += 5.0;
  auto b = uqr_fit(ds.with_replaced("y", y), "y", {"x"}, QuantileSpec{});
  for (const auto& [tau, f] : a) {
    EXPECT_NEAR(f.b("x"), b.at(tau).b("x"), 1e-8);
    EXPECT_NEAR(std::stod(b.at(tau).notes.at("q_hat")) - std::stod(f.notes.at("q_hat")), 5.0, 1e-9);
  }
}

TEST(Uqr, ParallelMatchesSerial) {
  auto ds = uqr_panel(12, 40, 5, 0.3, 0.5);
  auto a = uqr_fit(ds, "y", {"x"}, QuantileSpec{}, {"entity", "year"}, 1);
  auto b = uqr_fit(ds, "y", {"x"}, QuantileSpec{}, {"entity", "year"}, 4);
  for (const auto& [tau, f] : a) {
    EXPECT_EQ(f.coef, b.at(tau).coef);
    EXPECT_EQ(f.vcov, b.at(tau).vcov);
  }
}

TEST(Ipw, ConstantPropensityGivesUniformWeights) {
  auto ds = treatment_panel(3, 50, 10, 0.0, 0.0);
  TreatmentSpec s{.treatment = "T", .year_indicators = false};
  auto w = propensity_ipw(ds, s);
  const auto t = ds.column("T");
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    const double expect = t[r] == 1.0 ? 1.0 / static_cast<double>(w.n_treated) : 1.0 / static_cast<double>(w.n_control);
    EXPECT_NEAR(w.weight[r], expect, 1e-12);
  }
  // Reweighted quantiles of the treated group equal the unweighted ones.
  std::vector<double> y1, w1;
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    if (t[r] == 1.0) {
      y1.push_back(ds.column("y")[r]);
      w1.push_back(w.weight[r]);
    }
  for (double tau : default_taus()) EXPECT_NEAR(weighted_quantile(y1, tau, w1), weighted_quantile(y1, tau), 1e-12);
}

TEST(Ipw, WeightsSumToOnePerGroupAndClip) {
  Rng rng(6);
  std::vector<double> x, t, y;
  for (int i = 0; i < 600; ++i) {
    const double xi = rng.normal();
    x.push_back(xi);
    t.push_back(2.5 * xi + rng.normal() > 0.0 ? 1.0 : 0.0);
    y.push_back(rng.normal());
  }
  auto ds = make_panel(100, 6, {{"T", t}, {"x", x}, {"y", y}});
  TreatmentSpec s{.treatment = "T", .propensity_regressors = {"x"}};
  auto w = propensity_ipw(ds, s);
  EXPECT_GT(w.n_clipped, 0u);
  double s1 = 0, s0 = 0;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    EXPECT_GE(w.propensity[r], 0.01);
    EXPECT_LE(w.propensity[r], 0.99);
    EXPECT_GE(w.weight[r], 0.0);
    (ds.column("T")[r] == 1.0 ? s1 : s0) += w.weight[r];
  }
  EXPECT_NEAR(s1, 1.0, 1e-12);
  EXPECT_NEAR(s0, 1.0, 1e-12);
}

TEST(Ipw, Errors) {
  auto ds = treatment_panel(3, 10, 5, 0.0, 0.0);
  TreatmentSpec s{.treatment = "T", .clip_low = 0.6};
  EXPECT_THROW(propensity_ipw(ds, s), ValidationError);
  std::vector<double> ones(ds.n_rows(), 1.0);
  TreatmentSpec ok{.treatment = "T", .year_indicators = false};
  EXPECT_THROW(propensity_ipw(ds.with_replaced("T", ones), ok), Error);
  std::vector<double> bad(ds.n_rows(), 0.0);
  bad[0] = 2.0;
  EXPECT_THROW(propensity_ipw(ds.with_replaced("T", bad), ok), DataError);
}

TEST(RifTreatment, NullAndShiftEffects) {
  constexpr int reps = 20;
  std::map<double, double> null_sum, shift_sum;
  TreatmentSpec s{.treatment = "T"};
  for (int r = 0; r < reps; ++r) {
    for (const auto& [tau, f] : rif_treatment_fit(treatment_panel(500 + r, 300, 10, 0.0, 0.0), "y", s, {}))
      null_sum[tau] += f.b("T");
    for (const auto& [tau, f] : rif_treatment_fit(treatment_panel(900 + r, 300, 10, 0.5, 0.0), "y", s, {}))
      shift_sum[tau] += f.b("T");
  }
  for (const auto& [tau, v] : null_sum) EXPECT_NEAR(v / reps, 0.0, 0.05) << tau;
  for (const auto& [tau, v] : shift_sum) EXPECT_NEAR(v / reps, 0.5, 0.07) << tau;
}

TEST(RifTreatment, WiderTreatedDistributionCrossesZero) {
  auto fits = rif_treatment_fit(treatment_panel(31, 300, 10, 0.0, 1.0), "y", TreatmentSpec{.treatment = "T"}, {});
  EXPECT_LT(fits.at(0.1).b("T"), 0.0);
  EXPECT_GT(fits.at(0.9).b("T"), 0.0);
}

TEST(RifTreatment, IpwWithConstantPropensityMatchesUnweighted) {
  auto ds = treatment_panel(41, 100, 5, 0.5, 0.0);
  TreatmentSpec plain{.treatment = "T", .year_indicators = false};
  TreatmentSpec ipw = plain;
  ipw.weighting = Weighting::Ipw;
  auto a = rif_treatment_fit(ds, "y", plain, {});
  auto b = rif_treatment_fit(ds, "y", ipw, {});
  for (const auto& [tau, f] : a) {
    EXPECT_NEAR(f.b("T"), b.at(tau).b("T"), 1e-9);
    EXPECT_EQ(b.at(tau).notes.at("weighting"), "ipw");
  }
}

TEST(RifTreatment, IpwWithControlsRuns) {
  auto ds = treatment_panel(43, 100, 5, 0.5, 0.0);
  TreatmentSpec s{.treatment = "T", .propensity_regressors = {"z"}, .controls = {"z"}, .weighting = Weighting::Ipw};
  auto fits = rif_treatment_fit(ds, "y", s, {});
  EXPECT_EQ(fits.size(), 9u);
  for (const auto& [tau, f] : fits) {
    EXPECT_TRUE(f.has("z"));
    EXPECT_EQ(f.n_obs, 500u);
  }
}

TEST(RifTreatment, SmallGroupNamed) {
  auto ds = treatment_panel(5, 10, 5, 0.0, 0.0, 0.05);
  try {
    rif_treatment_fit(ds, "y", TreatmentSpec{.treatment = "T"}, {});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("treated group"), std::string::npos);
  }
}
