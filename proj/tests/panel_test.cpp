#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "cdmkit/demean.hpp"
#include "cdmkit/panel.hpp"
#include "cdmkit/rng.hpp"

using namespace cdmkit;

namespace {

PanelDataset from_text(const std::string& text) {
  std::istringstream in(text);
  return read_csv(in, "firm", "year");
}

std::vector<double> col(const PanelDataset& ds, const std::string& name) {
  auto c = ds.column(name);
  return {c.begin(), c.end()};
}

// Dense dummy-variable residualizer: y minus its projection on an intercept
// plus indicator columns for every level but the first of each factor.
std::vector<double> dummy_residuals(const std::vector<double>& y,
                                    const std::vector<std::vector<int>>& factors) {
  const auto n = static_cast<Eigen::Index>(y.size());
  std::vector<Eigen::VectorXd> cols{Eigen::VectorXd::Ones(n)};
  for (const auto& f : factors) {
    const int levels = *std::max_element(f.begin(), f.end()) + 1;
    for (int l = 1; l < levels; ++l) {
      Eigen::VectorXd c(n);
      for (Eigen::Index i = 0; i < n; ++i) c(i) = f[static_cast<std::size_t>(i)] == l ? 1.0 : 0.0;
      cols.push_back(c);
    }
  }
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = cols[j];
  const Eigen::VectorXd yy = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  const Eigen::VectorXd beta = (X.transpose() * X).ldlt().solve(X.transpose() * yy);
  const Eigen::VectorXd r = yy - X * beta;
  return {r.data(), r.data() + n};
}

PanelDataset random_panel(std::uint64_t seed, int entities, int periods, double drop_share) {
  Rng rng(seed);
  std::vector<PanelDataset::Key> keys;
  std::vector<double> a, b;
  for (int e = 0; e < entities; ++e) {
    for (int t = 0; t < periods; ++t) {
      if (rng.uniform() < drop_share) continue;
      keys.push_back({"E" + std::to_string(e), 2010 + t});
      a.push_back(rng.normal(e * 0.3, 1.0));
      b.push_back(rng.uniform() < 0.1 ? kMissing : rng.normal(t * 0.5, 2.0));
    }
  }
  return PanelDataset::build(keys, {{"a", a}, {"b", b}}, "firm", "year");
}

}  // namespace

TEST(LoadCsv, TwoRowsThreeColumns) {
  auto ds = from_text("firm,year,LEV,lnEMP,SOE\nA,2010,0.5,1.2,1\nB,2010,0.3,0.8,0\n");
  EXPECT_EQ(ds.n_rows(), 2u);
  EXPECT_EQ(ds.n_columns(), 3u);
  EXPECT_EQ(ds.meta().at("rows"), "2");
  EXPECT_DOUBLE_EQ(ds.column("LEV")[1], 0.3);
}

TEST(LoadCsv, EmptyCellIsMissing) {
  auto ds = from_text("firm,year,LEV,lnEMP\nA,2010,,1.2\nA,2011,.,1.4\n");
  EXPECT_TRUE(is_missing(ds.column("LEV")[0]));
  EXPECT_TRUE(is_missing(ds.column("LEV")[1]));
  EXPECT_DOUBLE_EQ(ds.column("lnEMP")[0], 1.2);
}

TEST(LoadCsv, DuplicateKeyNamesOffender) {
  try {
    from_text("firm,year,x\nA,2012,1\nB,2012,2\nA,2012,3\n");
    FAIL() << "expected duplicate-key error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("(A, 2012)"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, NonIntegerYearReportsLine) {
  try {
    from_text("firm,year,x\nA,2012,1\nA,2013.5,2\n");
    FAIL() << "expected year error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, MissingKeyColumnRejected) {
  std::istringstream in("id,year,x\nA,2012,1\n");
  EXPECT_THROW(read_csv(in, "firm", "year"), DataError);
}

TEST(LoadCsv, RoundTripPreservesValues) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto ds = random_panel(seed, 7, 5, 0.2);
    std::ostringstream out;
    write_csv(out, ds);
    std::istringstream in(out.str());
    auto back = read_csv(in, "firm", "year");
    ASSERT_EQ(back.n_rows(), ds.n_rows());
    for (const auto& name : ds.column_names()) {
      auto x = ds.column(name), y = back.column(name);
      for (std::size_t r = 0; r < ds.n_rows(); ++r) {
        if (is_missing(x[r])) {
          EXPECT_TRUE(is_missing(y[r]));
        } else {
          EXPECT_EQ(x[r], y[r]);
        }
      }
    }
  }
}

TEST(Derive, LagShiftsWithinEntity) {
  auto ds = from_text("firm,year,x\nA,2010,3\nA,2011,5\nB,2010,7\n");
  auto out = derive(ds, DeriveRule::lag("x", 1, "x_l1"));
  auto v = col(out, "x_l1");
  EXPECT_TRUE(is_missing(v[0]));
  EXPECT_EQ(v[1], 3.0);
  EXPECT_TRUE(is_missing(v[2]));
}

TEST(Derive, LeadNeverCrossesEntities) {
  auto ds = from_text("firm,year,x\nA,2010,3\nA,2011,5\nB,2010,7\nB,2011,9\n");
  auto v = col(derive(ds, DeriveRule::lead("x", 1, "x_f1")), "x_f1");
  EXPECT_EQ(v[0], 5.0);
  EXPECT_TRUE(is_missing(v[1]));
  EXPECT_EQ(v[2], 9.0);
  EXPECT_TRUE(is_missing(v[3]));
}

TEST(Derive, RollingMeanUsesShrinkingWindow) {
  auto ds = from_text("firm,year,p\nA,2010,0\nA,2011,3\nA,2012,6\n");
  auto v = col(derive(ds, DeriveRule::rolling_mean("p", 3, "p3")), "p3");
  EXPECT_DOUBLE_EQ(v[0], 0.0);
  EXPECT_DOUBLE_EQ(v[1], 1.5);
  EXPECT_DOUBLE_EQ(v[2], 3.0);
}

TEST(Derive, RollingMeanSkipsMissing) {
  auto ds = from_text("firm,year,p\nA,2010,2\nA,2011,\nA,2012,4\nA,2013,\n");
  auto v = col(derive(ds, DeriveRule::rolling_mean("p", 3, "p3")), "p3");
  EXPECT_DOUBLE_EQ(v[1], 2.0);
  EXPECT_DOUBLE_EQ(v[2], 3.0);
  EXPECT_DOUBLE_EQ(v[3], 4.0);
}

TEST(Derive, RollingMeanOfOneIsIdentity) {
  auto ds = random_panel(11, 5, 6, 0.1);
  auto v = col(derive(ds, DeriveRule::rolling_mean("b", 1, "b1")), "b1");
  auto b = col(ds, "b");
  for (std::size_t r = 0; r < b.size(); ++r) {
    if (is_missing(b[r])) {
      EXPECT_TRUE(is_missing(v[r]));
    } else {
      EXPECT_EQ(v[r], b[r]);
    }
  }
}

TEST(Derive, LogAndLogShift) {
  auto ds = from_text("firm,year,x\nA,2010,1\nA,2011,0\n");
  auto ds1 = filter_rows(ds, "x > 0");
  EXPECT_EQ(col(derive(ds1, DeriveRule::log("x", "lx")), "lx")[0], 0.0);
  auto v = col(derive(ds, DeriveRule::log_shift("x", 1.0, "lx1")), "lx1");
  EXPECT_DOUBLE_EQ(v[0], std::log(2.0));
  EXPECT_DOUBLE_EQ(v[1], 0.0);
}

TEST(Derive, LogOfNonPositiveIdentifiesRow) {
  auto ds = from_text("firm,year,x\nA,2010,1\nQ,2011,-2\n");
  try {
    derive(ds, DeriveRule::log("x", "lx"));
    FAIL();
  } catch (const DataError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("Q"), std::string::npos);
    EXPECT_NE(m.find("2011"), std::string::npos);
    EXPECT_NE(m.find("-2"), std::string::npos);
  }
}

TEST(Derive, RatioAndIndicator) {
  auto ds = from_text("firm,year,a,b\nA,2010,6,3\nA,2011,1,\n");
  auto r = col(derive(ds, DeriveRule::ratio("a", "b", "ab")), "ab");
  EXPECT_DOUBLE_EQ(r[0], 2.0);
  EXPECT_TRUE(is_missing(r[1]));
  auto ind = col(derive(ds, DeriveRule::indicator("a > 2", "big")), "big");
  EXPECT_EQ(ind[0], 1.0);
  EXPECT_EQ(ind[1], 0.0);
}

TEST(Derive, IsPureAndRejectsCollision) {
  auto ds = from_text("firm,year,x\nA,2010,1\nA,2011,2\n");
  auto rule = DeriveRule::lag("x", 1, "x_l1");
  auto out = derive(ds, rule);
  EXPECT_FALSE(ds.has_column("x_l1"));
  EXPECT_TRUE(out.has_column("x_l1"));
  EXPECT_THROW(derive(out, rule), ValidationError);
}

TEST(Derive, InvalidParametersAndUnknownSource) {
  auto ds = from_text("firm,year,x\nA,2010,1\n");
  EXPECT_THROW(derive(ds, DeriveRule::lag("x", 0, "bad")), ValidationError);
  EXPECT_THROW(derive(ds, DeriveRule::log_shift("x", 0.0, "bad")), ValidationError);
  EXPECT_THROW(derive(ds, DeriveRule::log("nope", "bad")), DataError);
}

TEST(FilterRows, KeepsMatchingRows) {
  auto ds = from_text("firm,year,SOE\nA,2010,1\nA,2011,0\nB,2010,1\nC,2011,0\n");
  auto out = filter_rows(ds, "SOE == 1");
  EXPECT_EQ(out.n_rows(), 2u);
  EXPECT_EQ(out.n_entities(), 2u);
  EXPECT_EQ(out.first_year(), 2010);
  EXPECT_EQ(out.last_year(), 2010);
  EXPECT_EQ(out.meta().at("filter"), "SOE == 1");
  for (double v : out.column("SOE")) EXPECT_EQ(v, 1.0);
}

TEST(FilterRows, AlwaysTrueIsIdentity) {
  auto ds = random_panel(5, 4, 4, 0.0);
  auto out = filter_rows(ds, "true");
  ASSERT_EQ(out.n_rows(), ds.n_rows());
  for (const auto& name : ds.column_names())
    for (std::size_t r = 0; r < ds.n_rows(); ++r) {
      const double x = ds.column(name)[r], y = out.column(name)[r];
      EXPECT_TRUE((is_missing(x) && is_missing(y)) || x == y);
    }
  EXPECT_TRUE(out.warnings().empty());
}

TEST(FilterRows, AlwaysFalseWarns) {
  auto ds = random_panel(5, 4, 4, 0.0);
  auto out = filter_rows(ds, "false");
  EXPECT_TRUE(out.empty());
  EXPECT_EQ(out.warnings().size(), 1u);
}

TEST(FilterRows, UnknownColumnRejected) {
  auto ds = random_panel(5, 4, 4, 0.0);
  EXPECT_THROW(filter_rows(ds, "HIGHPOL == 1"), DataError);
}

TEST(FilterRows, CompoundPredicateWithYear) {
  auto ds = random_panel(6, 3, 4, 0.0);
  auto out = filter_rows(ds, "year >= 2012 && !(a < -100)");
  EXPECT_EQ(out.n_rows(), 6u);
  EXPECT_EQ(out.first_year(), 2012);
}

TEST(WithinDemean, SingleEntity) {
  auto ds = from_text("firm,year,x\nA,2010,1\nA,2011,2\nA,2012,3\n");
  auto v = col(within_demean(ds, {"x"}, {"entity"}), "x");
  EXPECT_DOUBLE_EQ(v[0], -1.0);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
  EXPECT_DOUBLE_EQ(v[2], 1.0);
}

TEST(WithinDemean, TwoByTwoMatchesDummyRegression) {
  auto ds = from_text("firm,year,x\nA,2010,1.5\nA,2011,4\nB,2010,-2\nB,2011,7.25\n");
  auto v = col(within_demean(ds, {"x"}, {"entity", "year"}), "x");
  auto oracle = dummy_residuals(col(ds, "x"), {{0, 0, 1, 1}, {0, 1, 0, 1}});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(v[i], oracle[i], 1e-10);
}

TEST(WithinDemean, UnbalancedMatchesDummyRegression) {
  auto ds = random_panel(21, 12, 6, 0.25);
  auto sub = filter_rows(ds, "a == a");
  auto v = col(within_demean(sub, {"a"}, {"entity", "year"}), "a");
  std::vector<int> ent, yr;
  for (std::size_t r = 0; r < sub.n_rows(); ++r) {
    ent.push_back(static_cast<int>(sub.entity_of(r)));
    yr.push_back(sub.year_of(r) - sub.first_year());
  }
  auto oracle = dummy_residuals(col(sub, "a"), {ent, yr});
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], oracle[i], 1e-8);
}

TEST(WithinDemean, IdempotentOnBalancedPanel) {
  auto ds = random_panel(3, 6, 5, 0.0);
  auto once = within_demean(ds, {"a"}, {"entity", "year"});
  auto twice = within_demean(once, {"a"}, {"entity", "year"});
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    EXPECT_NEAR(once.column("a")[r], twice.column("a")[r], 1e-12);
}

TEST(WithinDemean, GroupMeansVanish) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    auto ds = random_panel(seed, 15, 7, 0.3);
    auto out = within_demean(ds, {"a", "b"}, {"entity", "year"});
    for (const std::string c : {"a", "b"}) {
      auto v = out.column(c);
      std::map<int, std::pair<double, int>> by_ent, by_year;
      for (std::size_t r = 0; r < out.n_rows(); ++r) {
        if (is_missing(v[r])) continue;
        by_ent[static_cast<int>(out.entity_of(r))].first += v[r];
        by_ent[static_cast<int>(out.entity_of(r))].second++;
        by_year[out.year_of(r)].first += v[r];
        by_year[out.year_of(r)].second++;
      }
      for (auto& [k, s] : by_ent) EXPECT_LT(std::abs(s.first / s.second), 1e-8);
      for (auto& [k, s] : by_year) EXPECT_LT(std::abs(s.first / s.second), 1e-8);
    }
    // Rows missing b are excluded from the joint sample.
    for (std::size_t r = 0; r < ds.n_rows(); ++r) {
      if (is_missing(ds.column("b")[r])) {
        EXPECT_TRUE(is_missing(out.column("a")[r]));
      }
    }
  }
}

TEST(WithinDemean, NonConvergenceReportsChange) {
  auto ds = random_panel(8, 20, 6, 0.35);
  try {
    within_demean(ds, {"a"}, {"entity", "year"}, DemeanOptions{1e-14, 2});
    FAIL();
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(WithinDemean, RequiresDimension) {
  auto ds = random_panel(8, 3, 3, 0.0);
  EXPECT_THROW(within_demean(ds, {"a"}, {}), ValidationError);
}
