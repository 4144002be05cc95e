#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cdmkit/estim.hpp"

namespace cdmkit {

// Eq 6 (one patent-intensity regressor) or Eq 7 (non-green and green).
// When `lead` is set the dependent is `outcome` one period ahead within
// entity, built here under the name "<outcome>_lead1".
struct ProdSpec {
  std::string outcome;
  bool lead = true;
  std::vector<std::string> patent_regressors;
  std::vector<std::string> controls;
  VcovSpec vcov = VcovSpec::bootstrap(200, 12345);

  bool extended() const { return patent_regressors.size() == 2; }
  std::string dependent() const { return lead ? outcome + "_lead1" : outcome; }
  std::vector<std::string> regressors() const {
    std::vector<std::string> r = patent_regressors;
    r.insert(r.end(), controls.begin(), controls.end());
    return r;
  }

  void validate() const {
    if (outcome.empty()) throw ValidationError("productivity: outcome required");
    if (patent_regressors.size() != 1 && patent_regressors.size() != 2)
      throw ValidationError("productivity: classical form takes one patent-intensity regressor, "
                            "extended form exactly two");
    vcov.validate();
  }
};

// Adds the lead of the outcome when requested and not already present.
inline PanelDataset with_prod_dependent(const PanelDataset& ds, const ProdSpec& spec) {
  if (!spec.lead || ds.has_column(spec.dependent())) return ds;
  return derive(ds, DeriveRule::lead(spec.outcome, 1, spec.dependent()));
}

// Two-way (entity + year) within estimator with the configured covariance.
inline FitResult fe_ols(const PanelDataset& ds_in, const ProdSpec& spec) {
  spec.validate();
  const PanelDataset ds = with_prod_dependent(ds_in, spec);
  ModelSpec m{spec.dependent(), spec.regressors(), false, {"entity", "year"}};
  FitResult f = ols_fit(ds, m, spec.vcov);
  f.notes["model"] = spec.extended() ? "extended" : "classical";
  f.notes["wald_restriction"] = "all slopes jointly zero";
  return f;
}

struct MundlakResult {
  double chi2 = 0.0;
  int df = 0;
  double p = 1.0;
  std::map<std::string, double> mean_coefficients;
  FitResult re_fit;
  double sigma_u = 0.0;
  double sigma_e = 0.0;
  std::vector<std::string> excluded;  // time-invariant regressors
  std::vector<std::string> warnings;
};

namespace detail {

// Greedy full-rank column subset, in order.
inline std::vector<Eigen::Index> independent_columns(const MatrixXd& X) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    MatrixXd Z(X.rows(), static_cast<Eigen::Index>(keep.size()) + 1);
    for (std::size_t c = 0; c < keep.size(); ++c) Z.col(static_cast<Eigen::Index>(c)) = X.col(keep[c]);
    Z.col(Z.cols() - 1) = X.col(j);
    if (first_dependent_column(Z.transpose() * Z) < 0) keep.push_back(j);
  }
  return keep;
}

inline MatrixXd take_columns(const MatrixXd& X, const std::vector<Eigen::Index>& cols) {
  MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = X.col(cols[c]);
  return out;
}

}  // namespace detail

// Random-effects FGLS (Swamy-Arora variance components) augmented with the
// entity means of the time-varying regressors; Wald test that the mean
// coefficients are jointly zero.
inline MundlakResult mundlak_test(const PanelDataset& ds_in, const ProdSpec& spec) {
  spec.validate();
  const PanelDataset ds = with_prod_dependent(ds_in, spec);
  const auto regs = spec.regressors();
  ModelSpec{spec.dependent(), regs, true, {}}.validate(ds);
  DesignRequest req;
  req.dependent = spec.dependent();
  req.regressors = regs;
  req.intercept = false;
  req.indicator_dims = {"year"};
  req.cluster = "entity";
  const Design d = build_design(ds, req);
  const Eigen::Index n = d.X.rows(), k = d.X.cols();
  const auto nx = static_cast<Eigen::Index>(regs.size());
  if (n == 0) throw DataError("mundlak: no complete cases");

  int G = 0;
  for (int c : d.cluster) G = std::max(G, c + 1);
  std::vector<double> Ti(static_cast<std::size_t>(G), 0.0);
  for (int c : d.cluster) Ti[static_cast<std::size_t>(c)] += 1.0;
  MatrixXd sums = MatrixXd::Zero(G, k + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = d.cluster[static_cast<std::size_t>(i)];
    sums(g, 0) += d.y(i);
    sums.row(g).tail(k) += d.X.row(i);
  }
  for (int g = 0; g < G; ++g) sums.row(g) /= Ti[static_cast<std::size_t>(g)];
  const VectorXd ybar_i = sums.col(0);
  const MatrixXd xbar_i = sums.rightCols(k);

  MundlakResult res;
  std::vector<std::string> mean_names;
  std::vector<Eigen::Index> mean_cols;
  for (Eigen::Index j = 0; j < nx; ++j) {
    double dev = 0.0, scale = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      dev = std::max(dev, std::abs(d.X(i, j) - xbar_i(d.cluster[static_cast<std::size_t>(i)], j)));
      scale = std::max(scale, std::abs(d.X(i, j)));
    }
    const auto& nm = regs[static_cast<std::size_t>(j)];
    if (dev <= 1e-12 * (1.0 + scale)) {
      res.excluded.push_back(nm);
      res.warnings.push_back("'" + nm + "' is time-invariant; excluded from the mean set");
    } else {
      mean_names.push_back("Mean_" + nm);
      mean_cols.push_back(j);
    }
  }
  if (mean_cols.empty()) throw ValidationError("mundlak: no time-varying regressors");

  // Within regression: entity-demeaned y and X (year dummies included).
  MatrixXd Xw(n, k);
  VectorXd yw(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = d.cluster[static_cast<std::size_t>(i)];
    yw(i) = d.y(i) - ybar_i(g);
    Xw.row(i) = d.X.row(i) - xbar_i.row(g);
  }
  const auto wcols = detail::independent_columns(Xw);
  const MatrixXd Xw2 = detail::take_columns(Xw, wcols);
  const VectorXd bw = Xw2.colPivHouseholderQr().solve(yw);
  const double ssr_w = (yw - Xw2 * bw).squaredNorm();
  const double dof_w = static_cast<double>(n - G) - static_cast<double>(wcols.size());
  if (dof_w <= 0.0) throw DataError("mundlak: too few within-entity observations");
  const double s2e = ssr_w / dof_w;

  // Between regression on entity means, with an intercept.
  MatrixXd Xb(G, k + 1);
  Xb.col(0).setOnes();
  Xb.rightCols(k) = xbar_i;
  const auto bcols = detail::independent_columns(Xb);
  const MatrixXd Xb2 = detail::take_columns(Xb, bcols);
  const VectorXd bb = Xb2.colPivHouseholderQr().solve(ybar_i);
  const double dof_b = static_cast<double>(G) - static_cast<double>(bcols.size());
  if (dof_b <= 0.0) throw DataError("mundlak: too few entities for the between regression");
  const double s2b = (ybar_i - Xb2 * bb).squaredNorm() / dof_b;
  double inv_t = 0.0;
  for (double t : Ti) inv_t += 1.0 / t;
  const double tbar = static_cast<double>(G) / inv_t;  // harmonic mean
  double s2u = s2b - s2e / tbar;
  if (s2u < 0.0) {
    res.warnings.push_back("negative entity variance component clamped to 0");
    s2u = 0.0;
  }
  res.sigma_u = std::sqrt(s2u);
  res.sigma_e = std::sqrt(s2e);

  // Quasi-demeaned regression on [regressors, year dummies, means, 1].
  std::vector<std::string> names = d.names;
  for (const auto& m : mean_names) names.push_back(m);
  names.push_back(kIntercept);
  const Eigen::Index p = k + static_cast<Eigen::Index>(mean_cols.size()) + 1;
  MatrixXd Z(n, p);
  VectorXd yz(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = d.cluster[static_cast<std::size_t>(i)];
    const double t = Ti[static_cast<std::size_t>(g)];
    const double theta = 1.0 - std::sqrt(s2e / (t * s2u + s2e));
    yz(i) = d.y(i) - theta * ybar_i(g);
    Z.row(i).head(k) = d.X.row(i) - theta * xbar_i.row(g);
    for (std::size_t m = 0; m < mean_cols.size(); ++m)
      Z(i, k + static_cast<Eigen::Index>(m)) = (1.0 - theta) * xbar_i(g, mean_cols[m]);
    Z(i, p - 1) = 1.0 - theta;
  }
  const LsSolution s = solve_ls(Z, yz, {}, names, "mundlak");
  FitResult& f = res.re_fit;
  f.names = names;
  f.coef = s.beta;
  f.vcov = s2e * s.bread;
  f.n_obs = static_cast<std::size_t>(n);
  f.n_dropped = d.n_dropped;
  f.notes["model"] = "random effects (Swamy-Arora) with entity means";
  f.fe_dims = {"year"};
  const WaldTest w = wald_chi2(f, mean_names);
  res.chi2 = w.statistic;
  res.df = w.df;
  res.p = w.p;
  f.wald = w;
  for (const auto& m : mean_names) res.mean_coefficients[m] = f.b(m);
  f.warnings = res.warnings;
  return res;
}

}  // namespace cdmkit
