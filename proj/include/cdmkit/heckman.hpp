#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cdmkit/estim.hpp"

namespace cdmkit {

// Regressors, indicator FE dimensions and intercept of a fitted linear index,
// enough to evaluate x'b on any dataset carrying the same columns.
struct LinearIndexModel {
  std::vector<std::string> regressors;
  std::vector<std::string> indicator_dims;
  bool intercept = true;
};

// x'b for every row; missing where a regressor or FE key is missing. FE
// levels absent from the fit (including the baseline) contribute zero.
inline std::vector<double> linear_index(const FitResult& fit, const LinearIndexModel& model,
                                        const PanelDataset& ds) {
  std::vector<double> out(ds.n_rows(), 0.0);
  for (const auto& r : model.regressors) {
    if (!ds.resolves(r)) throw DataError("linear_index: regressor '" + r + "' absent from dataset");
    const double b = fit.b(r);
    const auto v = ds.values_of(r);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b * v[i];
  }
  for (const auto& dim : model.indicator_dims) {
    const auto codes = ds.group_codes(dim);
    const auto levels = ds.group_levels(dim);
    std::vector<double> effect(levels.size(), 0.0);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const std::string name = dim + "=" + detail::level_label(ds, dim, levels[l]);
      if (fit.has(name)) effect[l] = fit.b(name);
    }
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = codes[i] < 0 ? kMissing : out[i] + effect[static_cast<std::size_t>(codes[i])];
  }
  if (model.intercept && fit.has(kIntercept)) {
    const double c = fit.b(kIntercept);
    for (double& v : out) v += c;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probit

// Probit log-likelihood over a dense design, with optional case weights.
inline LogLik probit_loglik(MatrixXd X, VectorXd y, std::vector<double> w = {}) {
  return [X = std::move(X), y = std::move(y), w = std::move(w)](const VectorXd& b, VectorXd* g,
                                                                MatrixXd* H) {
    const Eigen::Index n = X.rows();
    const VectorXd xb = X * b;
    double ll = 0.0;
    VectorXd score(n), curv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double wi = w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
      const double q = 2.0 * y(i) - 1.0;
      const double z = q * xb(i);
      if (!std::isfinite(z)) return -std::numeric_limits<double>::infinity();
      ll += wi * stats::log_normal_cdf(z);
      const double lam = stats::inverse_mills(z);
      score(i) = wi * q * lam;
      curv(i) = wi * lam * (lam + z);
    }
    if (g) *g = X.transpose() * score;
    if (H) *H = -(X.transpose() * curv.asDiagonal() * X);
    return ll;
  };
}

inline void require_binary(const VectorXd& y, const std::string& name) {
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y(i) != 0.0 && y(i) != 1.0)
      throw DataError("'" + name + "' must be binary (0/1), found " + detail::format_double(y(i)));
}

struct ProbitOptions {
  bool intercept = true;
  std::string weights;
  MleOptions mle;
};

// Probit by Newton MLE. FE dimensions enter as indicator columns with the
// first level dropped. Wald test covers the listed regressors.
inline FitResult probit_fit(const PanelDataset& ds, const std::string& dependent,
                            const std::vector<std::string>& regressors,
                            const std::vector<std::string>& fe_dims = {},
                            const ProbitOptions& opt = {}) {
  ModelSpec check{dependent, regressors, opt.intercept, fe_dims, {}, opt.weights};
  check.validate(ds);
  DesignRequest req;
  req.dependent = dependent;
  req.regressors = regressors;
  req.intercept = opt.intercept;
  req.indicator_dims = fe_dims;
  req.weights = opt.weights;
  const Design d = build_design(ds, req);
  const Eigen::Index n = d.X.rows(), k = d.X.cols();
  if (n == 0) throw DataError("probit: no complete cases for '" + dependent + "'");
  if (n < k + 1)
    throw DataError("probit: " + std::to_string(n) + " complete cases for " + std::to_string(k) +
                    " parameters");
  require_binary(d.y, dependent);
  if (const auto bad = first_dependent_column(d.X.transpose() * d.X); bad >= 0) {
    const auto& nm = d.names[static_cast<std::size_t>(bad)];
    throw CollinearityError("probit: rank-deficient design, column '" + nm + "'", nm);
  }

  VectorXd start = VectorXd::Zero(k);
  if (opt.intercept) {
    const double ybar = d.y.mean();
    if (ybar > 0.0 && ybar < 1.0) start(k - 1) = stats::normal_quantile(ybar);
  }
  const MleResult m = mle_fit(probit_loglik(d.X, d.y, d.weights), start, opt.mle);

  FitResult f;
  f.names = d.names;
  f.coef = m.params;
  f.vcov = m.vcov;
  f.n_obs = static_cast<std::size_t>(n);
  f.n_dropped = d.n_dropped;
  f.loglik = m.loglik;
  f.fe_dims = fe_dims;
  f.notes["dependent"] = dependent;
  f.notes["model"] = "probit";
  f.notes["iterations"] = std::to_string(m.iterations);
  if (!regressors.empty()) f.wald = wald_chi2(f, regressors);
  return f;
}

// ---------------------------------------------------------------------------
// Heckman two-step

struct HeckmanSpec {
  std::string outcome;
  std::string selection;
  std::vector<std::string> outcome_regressors;
  std::vector<std::string> exclusion_restrictions;
  std::vector<std::string> fe_dims;
  VcovSpec vcov;

  void validate(const PanelDataset& ds) const {
    if (outcome.empty() || selection.empty())
      throw ValidationError("heckman: outcome and selection variables required");
    for (const auto& z : exclusion_restrictions)
      if (std::find(outcome_regressors.begin(), outcome_regressors.end(), z) != outcome_regressors.end())
        throw ValidationError("heckman: exclusion restriction '" + z +
                              "' must not appear among the outcome regressors");
    for (const auto& d : fe_dims)
      if (d == "entity" || d == ds.entity_label())
        throw ValidationError("heckman: entity fixed effects are not supported; use categorical dims");
    for (const auto& v : outcome_regressors)
      if (!ds.resolves(v)) throw DataError("heckman: unknown regressor '" + v + "'");
    for (const auto& v : exclusion_restrictions)
      if (!ds.resolves(v)) throw DataError("heckman: unknown exclusion restriction '" + v + "'");
    for (const auto& v : {outcome, selection})
      if (!ds.has_column(v)) throw DataError("heckman: unknown column '" + v + "'");
    vcov.validate();
  }

  std::vector<std::string> selection_regressors() const {
    std::vector<std::string> s = outcome_regressors;
    s.insert(s.end(), exclusion_restrictions.begin(), exclusion_restrictions.end());
    return s;
  }
};

inline constexpr const char* kImrName = "IMR";

struct HeckmanFit {
  FitResult probit;
  FitResult outcome;  // includes the IMR coefficient under kImrName
  double lambda = 0.0;
  double rho = 0.0;
  double sigma = 0.0;
  bool rho_clamped = false;
  double imr_vif = stats::kMissing;
  double mean_vif = stats::kMissing;
  std::map<std::string, double> vifs;
  std::size_t n_selected = 0;
  std::size_t n_censored = 0;
  LinearIndexModel selection_model;
  LinearIndexModel outcome_model;  // excludes IMR
};

namespace detail {

struct HeckmanCore {
  HeckmanFit fit;
  Design step2;
};

inline HeckmanCore heckman_core(const PanelDataset& ds, const HeckmanSpec& spec) {
  const auto sel = ds.column(spec.selection);
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    if (is_missing(sel[r]))
      throw DataError("heckman: selection '" + spec.selection + "' missing for (" +
                      ds.entity_name(r) + ", " + std::to_string(ds.year_of(r)) + ")");
  }
  HeckmanCore core;
  HeckmanFit& h = core.fit;
  h.selection_model = {spec.selection_regressors(), spec.fe_dims, true};
  h.outcome_model = {spec.outcome_regressors, spec.fe_dims, true};
  h.probit = probit_fit(ds, spec.selection, h.selection_model.regressors, spec.fe_dims);

  const auto index = linear_index(h.probit, h.selection_model, ds);
  std::vector<double> imr(ds.n_rows(), kMissing);
  std::size_t selected = 0;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    if (sel[r] == 1.0) ++selected;
    if (!is_missing(index[r])) imr[r] = stats::inverse_mills(index[r]);
  }
  if (selected == 0) throw DataError("heckman: no selected rows ('" + spec.selection + "' == 1)");
  h.n_censored = ds.n_rows() - selected;

  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    if (sel[r] == 1.0) keep.push_back(r);
  PanelDataset s2 = ds.with_column(kImrName, imr).with_column("__index", index).select_rows(keep);

  DesignRequest req;
  req.dependent = spec.outcome;
  req.regressors = spec.outcome_regressors;
  req.regressors.push_back(kImrName);
  req.indicator_dims = spec.fe_dims;
  req.also_required = {"__index"};
  core.step2 = build_design(s2, req);
  Design& d = core.step2;
  const auto z = s2.column("__index");
  std::vector<double> zsel;
  for (auto r : d.rows) zsel.push_back(z[r]);

  Design work = d;
  try {
    h.outcome = ols_on_design(work, spec.outcome);
  } catch (const CollinearityError& e) {
    // The IMR is to blame when the design is full rank without it.
    Eigen::Index imr_col = 0;
    while (d.names[static_cast<std::size_t>(imr_col)] != kImrName) ++imr_col;
    MatrixXd rest(d.X.rows(), d.X.cols() - 1);
    rest << d.X.leftCols(imr_col), d.X.rightCols(d.X.cols() - imr_col - 1);
    if (e.column() == kImrName || first_dependent_column(rest.transpose() * rest) < 0)
      throw CollinearityError(std::string("heckman: inverse Mills ratio is collinear with the outcome "
                                          "regressors; add exclusion restrictions to the selection "
                                          "equation (") + e.what() + ")",
                              kImrName);
    throw;
  }
  h.n_selected = h.outcome.n_obs;
  h.lambda = h.outcome.b(kImrName);

  const Eigen::Index n = d.X.rows();
  const Eigen::Index imr_col = h.outcome.index_of(kImrName);
  const VectorXd e = d.y - d.X * h.outcome.coef;
  double delta = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = d.X(i, imr_col);
    delta += m * (m + zsel[static_cast<std::size_t>(i)]);
  }
  delta /= static_cast<double>(n);
  const double sigma2 = e.squaredNorm() / static_cast<double>(n) + h.lambda * h.lambda * delta;
  h.sigma = std::sqrt(std::max(sigma2, 0.0));
  const double raw = h.sigma > 0.0 ? h.lambda / h.sigma : (h.lambda >= 0.0 ? 1.0 : -1.0);
  h.rho = std::clamp(raw, -1.0, 1.0);
  h.rho_clamped = std::abs(raw) >= 1.0;
  if (h.rho_clamped) h.sigma = std::abs(h.lambda);
  if (!(h.sigma > 0.0)) throw DataError("heckman: degenerate outcome variance");
  return core;
}

}  // namespace detail

// Step 1 probit on all rows, IMR from its index, step 2 OLS over selected rows
// on X + IMR (+ FE indicator columns). SEs follow spec.vcov; a cluster
// bootstrap re-runs both steps on every replication.
inline HeckmanFit heckman_two_step(const PanelDataset& ds, const HeckmanSpec& spec) {
  spec.validate(ds);
  auto core = detail::heckman_core(ds, spec);
  HeckmanFit& h = core.fit;
  Design& d = core.step2;

  std::vector<std::string> vif_names = spec.outcome_regressors;
  vif_names.push_back(kImrName);
  if (vif_names.size() >= 2) {
    MatrixXd V(d.X.rows(), static_cast<Eigen::Index>(vif_names.size()));
    for (std::size_t j = 0; j < vif_names.size(); ++j)
      V.col(static_cast<Eigen::Index>(j)) = d.X.col(h.outcome.index_of(vif_names[j]));
    h.vifs = vif(V, vif_names);
    h.imr_vif = h.vifs[kImrName];
    h.mean_vif = cdmkit::mean_vif(h.vifs);
  }

  if (spec.vcov.kind == VcovKind::HcRobust) {
    Design work = d;
    h.outcome = detail::ols_on_design(work, spec.outcome, true);
    h.lambda = h.outcome.b(kImrName);
  } else if (spec.vcov.kind == VcovKind::ClusterBootstrap) {
    const auto names = h.outcome.names;
    auto bs = bootstrap_vcov(
        [&](const PanelDataset& b) {
          const auto c = detail::heckman_core(b, spec).fit.outcome;
          VectorXd v(static_cast<Eigen::Index>(names.size()));
          for (std::size_t j = 0; j < names.size(); ++j)
            v(static_cast<Eigen::Index>(j)) = c.has(names[j]) ? c.b(names[j]) : kMissing;
          return v;
        },
        ds, spec.vcov);
    h.outcome.vcov = bs.vcov;
    h.outcome.bootstrap_failures = bs.failures;
    h.outcome.dof = std::numeric_limits<double>::infinity();
  }
  h.outcome.se_method = spec.vcov.tag();
  h.outcome.fe_dims = spec.fe_dims;
  std::vector<std::string> slopes = spec.outcome_regressors;
  slopes.push_back(kImrName);
  try {
    h.outcome.wald = wald_chi2(h.outcome, slopes);
  } catch (const CollinearityError&) {
    h.outcome.warnings.push_back("Wald test skipped: singular covariance");
  }
  h.outcome.notes["model"] = "heckman step 2";
  return h;
}

// Step-2 index X'b for every row (selected or not), without the IMR term.
inline std::vector<double> predict_linear_index(const HeckmanFit& fit, const PanelDataset& ds) {
  return linear_index(fit.outcome, fit.outcome_model, ds);
}

inline PanelDataset with_heckman_prediction(const PanelDataset& ds, const HeckmanFit& fit,
                                            const std::string& target) {
  return ds.with_column(target, predict_linear_index(fit, ds), "heckman-predicted");
}

}  // namespace cdmkit
