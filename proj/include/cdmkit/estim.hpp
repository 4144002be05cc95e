#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdmkit/demean.hpp"
#include "cdmkit/error.hpp"
#include "cdmkit/panel.hpp"
#include "cdmkit/parallel.hpp"
#include "cdmkit/rng.hpp"
#include "cdmkit/stats.hpp"

namespace cdmkit {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr const char* kIntercept = "_cons";

// ---------------------------------------------------------------------------
// Specifications

enum class VcovKind { Analytic, HcRobust, ClusterBootstrap };

struct VcovSpec {
  VcovKind kind = VcovKind::Analytic;
  int replications = 0;
  std::uint64_t seed = 0;
  std::string cluster_dim = "entity";
  unsigned jobs = 1;

  static VcovSpec analytic() { return {}; }
  static VcovSpec robust() { return {VcovKind::HcRobust, 0, 0, "entity", 1}; }
  static VcovSpec bootstrap(int replications, std::uint64_t seed, std::string cluster = "entity",
                            unsigned jobs = 1) {
    return {VcovKind::ClusterBootstrap, replications, seed, std::move(cluster), jobs};
  }

  void validate() const {
    if (kind == VcovKind::ClusterBootstrap) {
      if (replications < 1) throw ValidationError("bootstrap requires at least one replication");
      if (cluster_dim.empty()) throw ValidationError("bootstrap requires a cluster dimension");
    }
  }

  std::string tag() const {
    switch (kind) {
      case VcovKind::Analytic: return "analytic";
      case VcovKind::HcRobust: return "robust";
      case VcovKind::ClusterBootstrap:
        return "cluster_bootstrap(" + std::to_string(replications) + "," + std::to_string(seed) +
               ")";
    }
    return {};
  }
};

struct ModelSpec {
  std::string dependent;
  std::vector<std::string> regressors;
  bool intercept = true;
  std::vector<std::string> fe_dims;
  std::string cluster;  // optional grouping column
  std::string weights;  // optional weight column

  void validate(const PanelDataset& ds) const {
    if (dependent.empty()) throw ValidationError("model: dependent variable required");
    if (std::find(regressors.begin(), regressors.end(), dependent) != regressors.end())
      throw ValidationError("model: dependent '" + dependent + "' also listed as a regressor");
    if (!ds.resolves(dependent)) throw DataError("model: unknown dependent '" + dependent + "'");
    for (const auto& r : regressors)
      if (!ds.resolves(r)) throw DataError("model: unknown regressor '" + r + "'");
    for (const auto& d : fe_dims)
      if (d != "entity" && !ds.resolves(d))
        throw DataError("model: unknown fixed-effect dimension '" + d + "'");
    if (!cluster.empty() && cluster != "entity" && !ds.resolves(cluster))
      throw DataError("model: unknown cluster column '" + cluster + "'");
    if (!weights.empty() && !ds.has_column(weights))
      throw DataError("model: unknown weight column '" + weights + "'");
    if (regressors.empty() && !intercept)
      throw ValidationError("model: needs at least one regressor or an intercept");
  }
};

// ---------------------------------------------------------------------------
// Results

struct WaldTest {
  double statistic = 0.0;
  int df = 0;
  double p = 1.0;
};

struct FitStats {
  double r2 = 0.0;
  double adj_r2 = 0.0;
};

struct FitResult {
  std::vector<std::string> names;
  VectorXd coef;
  MatrixXd vcov;
  std::size_t n_obs = 0;
  std::size_t n_dropped = 0;
  std::optional<double> loglik;
  std::optional<WaldTest> wald;
  std::optional<FitStats> fit;
  std::string se_method = "analytic";
  // Residual degrees of freedom for t-based p-values; infinity means normal.
  double dof = std::numeric_limits<double>::infinity();
  std::size_t bootstrap_failures = 0;
  std::vector<std::string> fe_dims;
  std::map<std::string, std::string> notes;
  std::vector<std::string> warnings;

  bool has(const std::string& name) const {
    return std::find(names.begin(), names.end(), name) != names.end();
  }
  Eigen::Index index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw DataError("no coefficient named '" + name + "'");
    return static_cast<Eigen::Index>(it - names.begin());
  }
  double b(const std::string& name) const { return coef(index_of(name)); }
  double se(const std::string& name) const {
    const Eigen::Index i = index_of(name);
    return std::sqrt(std::max(0.0, vcov(i, i)));
  }
  double pvalue(const std::string& name) const {
    const double s = se(name);
    if (!(s > 0.0)) return stats::kMissing;
    return stats::two_sided_p(b(name) / s, dof);
  }

  // Symmetric vcov with non-negative diagonal, names matching coefficients.
  void check_invariants() const {
    if (static_cast<std::size_t>(coef.size()) != names.size() || vcov.rows() != coef.size() ||
        vcov.cols() != coef.size())
      throw Error("FitResult: coefficient/vcov dimension mismatch");
    for (Eigen::Index i = 0; i < vcov.rows(); ++i) {
      if (vcov(i, i) < 0.0) throw Error("FitResult: negative variance for '" + names[i] + "'");
      for (Eigen::Index j = 0; j < i; ++j)
        if (std::abs(vcov(i, j) - vcov(j, i)) > 1e-10 * (1.0 + std::abs(vcov(i, j))))
          throw Error("FitResult: asymmetric vcov");
    }
  }
};

// Restricts a fit to a subset of its coefficients (order as given).
inline FitResult subset_fit(const FitResult& f, const std::vector<std::string>& keep) {
  FitResult out = f;
  const auto k = static_cast<Eigen::Index>(keep.size());
  out.names = keep;
  out.coef.resize(k);
  out.vcov.resize(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto a = f.index_of(keep[static_cast<std::size_t>(i)]);
    out.coef(i) = f.coef(a);
    for (Eigen::Index j = 0; j < k; ++j)
      out.vcov(i, j) = f.vcov(a, f.index_of(keep[static_cast<std::size_t>(j)]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wald test

inline WaldTest wald_chi2(const FitResult& fit, const std::vector<std::string>& restricted) {
  if (restricted.empty()) throw ValidationError("wald_chi2: empty restriction set");
  const auto k = static_cast<Eigen::Index>(restricted.size());
  VectorXd beta(k);
  MatrixXd v(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto a = fit.index_of(restricted[static_cast<std::size_t>(i)]);
    beta(i) = fit.coef(a);
    for (Eigen::Index j = 0; j < k; ++j)
      v(i, j) = fit.vcov(a, fit.index_of(restricted[static_cast<std::size_t>(j)]));
  }
  v = 0.5 * (v + v.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(v);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(top > 0.0) || eig.eigenvalues().minCoeff() <= 1e-14 * top)
    throw CollinearityError("wald_chi2: singular covariance block", restricted.front());
  WaldTest w;
  w.statistic = beta.dot(v.ldlt().solve(beta));
  w.df = static_cast<int>(k);
  w.p = stats::chi2_upper(w.statistic, w.df);
  return w;
}

// Restriction set "all slopes": every coefficient except the intercept.
inline std::vector<std::string> slope_names(const FitResult& fit) {
  std::vector<std::string> out;
  for (const auto& n : fit.names)
    if (n != kIntercept) out.push_back(n);
  return out;
}

// ---------------------------------------------------------------------------
// Design assembly

// Explicit indicator columns for one categorical dimension; levels[0] is the
// omitted baseline and column first_col + (k-1) corresponds to levels[k].
struct IndicatorBlock {
  std::string dim;
  std::vector<double> levels;
  std::vector<std::string> level_labels;
  Eigen::Index first_col = 0;
};

struct Design {
  std::vector<std::size_t> rows;
  VectorXd y;
  MatrixXd X;
  std::vector<std::string> names;
  std::vector<FactorCodes> absorbed;
  std::vector<std::string> absorbed_dims;
  std::vector<IndicatorBlock> indicators;
  std::vector<double> weights;
  std::vector<int> cluster;
  std::size_t n_dropped = 0;
};

struct DesignRequest {
  std::string dependent;
  std::vector<std::string> regressors;
  bool intercept = true;
  std::vector<std::string> indicator_dims;
  std::vector<std::string> absorb_dims;
  std::string cluster;
  std::string weights;
  std::vector<std::string> also_required;
};

namespace detail {

inline std::string level_label(const PanelDataset& ds, const std::string& dim, double level) {
  if (dim == "entity" || dim == ds.entity_label())
    return ds.entities()[static_cast<std::size_t>(level)];
  return format_double(level);
}

}  // namespace detail

// Complete-case design over the dependent, regressors, FE keys, cluster and
// weights. Absorbed dimensions suppress the intercept.
inline Design build_design(const PanelDataset& ds, const DesignRequest& req) {
  Design d;
  std::vector<std::vector<double>> cols;
  std::vector<double> y;
  if (!req.dependent.empty()) y = ds.values_of(req.dependent);
  for (const auto& r : req.regressors) cols.push_back(ds.values_of(r));
  std::vector<std::vector<double>> extra;
  for (const auto& r : req.also_required) extra.push_back(ds.values_of(r));
  std::vector<std::vector<int>> ind_codes, abs_codes;
  for (const auto& dim : req.indicator_dims) ind_codes.push_back(ds.group_codes(dim));
  for (const auto& dim : req.absorb_dims) abs_codes.push_back(ds.group_codes(dim));
  std::vector<int> cl;
  if (!req.cluster.empty()) cl = ds.group_codes(req.cluster);
  std::vector<double> w;
  if (!req.weights.empty()) w = ds.values_of(req.weights);

  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    bool ok = y.empty() || !is_missing(y[r]);
    for (const auto& c : cols) ok = ok && !is_missing(c[r]);
    for (const auto& c : extra) ok = ok && !is_missing(c[r]);
    for (const auto& c : ind_codes) ok = ok && c[r] >= 0;
    for (const auto& c : abs_codes) ok = ok && c[r] >= 0;
    if (!cl.empty()) ok = ok && cl[r] >= 0;
    if (!w.empty()) {
      if (!is_missing(w[r]) && w[r] < 0.0) throw DataError("negative weight in '" + req.weights + "'");
      ok = ok && !is_missing(w[r]);
    }
    if (ok) d.rows.push_back(r);
  }
  d.n_dropped = ds.n_rows() - d.rows.size();
  const auto n = static_cast<Eigen::Index>(d.rows.size());

  const bool intercept = req.intercept && req.absorb_dims.empty();
  std::vector<std::vector<double>> ind_levels(req.indicator_dims.size());
  Eigen::Index k = static_cast<Eigen::Index>(cols.size()) + (intercept ? 1 : 0);
  for (std::size_t f = 0; f < req.indicator_dims.size(); ++f) {
    std::set<int> present;
    for (auto r : d.rows) present.insert(ind_codes[f][r]);
    const auto all_levels = ds.group_levels(req.indicator_dims[f]);
    for (int c : present) ind_levels[f].push_back(all_levels[static_cast<std::size_t>(c)]);
    k += static_cast<Eigen::Index>(present.size()) - (present.empty() ? 0 : 1);
  }

  d.y.resize(n);
  d.X.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) d.y(i) = y.empty() ? 0.0 : y[d.rows[static_cast<std::size_t>(i)]];
  Eigen::Index col = 0;
  for (std::size_t j = 0; j < cols.size(); ++j, ++col) {
    for (Eigen::Index i = 0; i < n; ++i) d.X(i, col) = cols[j][d.rows[static_cast<std::size_t>(i)]];
    d.names.push_back(req.regressors[j]);
  }
  for (std::size_t f = 0; f < req.indicator_dims.size(); ++f) {
    IndicatorBlock blk;
    blk.dim = req.indicator_dims[f];
    blk.levels = ind_levels[f];
    blk.first_col = col;
    for (double lv : blk.levels) blk.level_labels.push_back(detail::level_label(ds, blk.dim, lv));
    const auto all_levels = ds.group_levels(blk.dim);
    for (std::size_t l = 1; l < blk.levels.size(); ++l, ++col) {
      d.names.push_back(blk.dim + "=" + blk.level_labels[l]);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double lv = all_levels[static_cast<std::size_t>(ind_codes[f][d.rows[static_cast<std::size_t>(i)]])];
        d.X(i, col) = lv == blk.levels[l] ? 1.0 : 0.0;
      }
    }
    d.indicators.push_back(std::move(blk));
  }
  if (intercept) {
    d.X.col(col).setOnes();
    d.names.push_back(kIntercept);
    ++col;
  }
  for (std::size_t f = 0; f < req.absorb_dims.size(); ++f) {
    std::vector<int> sub(d.rows.size());
    for (std::size_t i = 0; i < d.rows.size(); ++i) sub[i] = abs_codes[f][d.rows[i]];
    d.absorbed.push_back(compact_codes(sub));
    d.absorbed_dims.push_back(req.absorb_dims[f]);
  }
  if (!cl.empty()) {
    std::vector<int> sub(d.rows.size());
    for (std::size_t i = 0; i < d.rows.size(); ++i) sub[i] = cl[d.rows[i]];
    d.cluster = compact_codes(sub).code;
  }
  if (!w.empty())
    for (auto r : d.rows) d.weights.push_back(w[r]);
  return d;
}

// Degrees of freedom consumed by absorbed factors (connected-panel count).
inline Eigen::Index absorbed_dof(const std::vector<FactorCodes>& f) {
  if (f.empty()) return 0;
  Eigen::Index s = 0;
  for (const auto& c : f) s += c.levels;
  return s - static_cast<Eigen::Index>(f.size() - 1);
}

// Finds the first column lying in the span of the preceding ones (relative
// residual variance below rel_tol), or -1 when X has full column rank.
inline Eigen::Index first_dependent_column(const MatrixXd& xtx, double rel_tol = 1e-10) {
  const Eigen::Index k = xtx.rows();
  MatrixXd L = MatrixXd::Zero(k, k);
  std::vector<bool> active(static_cast<std::size_t>(k), false);
  for (Eigen::Index j = 0; j < k; ++j) {
    double d = xtx(j, j);
    for (Eigen::Index m = 0; m < j; ++m)
      if (active[static_cast<std::size_t>(m)]) d -= L(j, m) * L(j, m);
    if (!(xtx(j, j) > 0.0) || d <= rel_tol * xtx(j, j)) return j;
    L(j, j) = std::sqrt(d);
    active[static_cast<std::size_t>(j)] = true;
    for (Eigen::Index i = j + 1; i < k; ++i) {
      double s = xtx(i, j);
      for (Eigen::Index m = 0; m < j; ++m) s -= L(i, m) * L(j, m);
      L(i, j) = s / L(j, j);
    }
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Least squares

struct LsSolution {
  VectorXd beta;
  VectorXd resid;   // unweighted residuals y - X beta
  MatrixXd bread;   // (X' W X)^{-1}
  double ssr = 0.0; // weighted sum of squared residuals
};

// Weighted least squares with rank check; names label the columns for errors.
inline LsSolution solve_ls(const MatrixXd& X, const VectorXd& y, const std::vector<double>& w,
                           const std::vector<std::string>& names, const std::string& context = "ols") {
  const Eigen::Index n = X.rows(), k = X.cols();
  LsSolution s;
  if (k == 0) {
    s.beta.resize(0);
    s.resid = y;
    s.bread.resize(0, 0);
    s.ssr = w.empty() ? y.squaredNorm() : 0.0;
    if (!w.empty())
      for (Eigen::Index i = 0; i < n; ++i) s.ssr += w[static_cast<std::size_t>(i)] * y(i) * y(i);
    return s;
  }
  MatrixXd Xw = X;
  VectorXd yw = y;
  if (!w.empty()) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sw = std::sqrt(w[static_cast<std::size_t>(i)]);
      Xw.row(i) *= sw;
      yw(i) *= sw;
    }
  }
  const MatrixXd xtx = Xw.transpose() * Xw;
  if (const auto bad = first_dependent_column(xtx); bad >= 0) {
    const auto& nm = names[static_cast<std::size_t>(bad)];
    throw CollinearityError(context + ": rank-deficient design, column '" + nm +
                                "' is collinear with the preceding columns or absorbed",
                            nm);
  }
  Eigen::HouseholderQR<MatrixXd> qr(Xw);
  s.beta = qr.solve(yw);
  const MatrixXd R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(MatrixXd::Identity(k, k));
  s.bread = Rinv * Rinv.transpose();
  s.resid = y - X * s.beta;
  s.ssr = (yw - Xw * s.beta).squaredNorm();
  return s;
}

// HC1 sandwich: bread * sum (w e)^2 x x' * bread * n / dof.
inline MatrixXd hc1_vcov(const MatrixXd& X, const VectorXd& resid, const std::vector<double>& w,
                         const MatrixXd& bread, double dof) {
  const Eigen::Index n = X.rows();
  MatrixXd meat = MatrixXd::Zero(X.cols(), X.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wi = w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
    const double s = wi * resid(i);
    meat.noalias() += (s * s) * X.row(i).transpose() * X.row(i);
  }
  MatrixXd v = bread * meat * bread;
  v *= static_cast<double>(n) / std::max(1.0, dof);
  return 0.5 * (v + v.transpose());
}

// ---------------------------------------------------------------------------
// Cluster bootstrap

struct BootstrapResult {
  MatrixXd vcov;
  MatrixXd draws;  // successful draws, one per row, in replication order
  std::size_t failures = 0;
};

// Resamples clusters with replacement. Every drawn copy gets its own entity
// identity ("<entity>#<draw>") so fixed effects stay distinct across copies.
inline PanelDataset resample_clusters(const PanelDataset& ds, const std::string& cluster_dim,
                                      Rng& rng) {
  int n_groups = 0;
  const auto codes = ds.group_codes(cluster_dim, &n_groups);
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_groups));
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    if (codes[r] >= 0) members[static_cast<std::size_t>(codes[r])].push_back(r);
  std::vector<PanelDataset::Key> keys;
  std::vector<std::size_t> src;
  for (int g = 0; g < n_groups; ++g) {
    const auto pick = rng.index(static_cast<std::size_t>(n_groups));
    for (auto r : members[pick]) {
      keys.push_back({ds.entity_name(r) + "#" + std::to_string(g), ds.year_of(r)});
      src.push_back(r);
    }
  }
  std::vector<std::pair<std::string, std::vector<double>>> cols;
  for (const auto& name : ds.column_names()) {
    const auto c = ds.column(name);
    std::vector<double> v(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) v[i] = c[src[i]];
    cols.emplace_back(name, std::move(v));
  }
  return PanelDataset::build(keys, std::move(cols), ds.entity_label(), ds.year_label());
}

inline MatrixXd covariance_of_draws(const MatrixXd& draws) {
  const Eigen::Index m = draws.rows();
  if (m == 0) return MatrixXd();
  const VectorXd mean = draws.colwise().mean();
  const MatrixXd c = draws.rowwise() - mean.transpose();
  MatrixXd v = (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(1, m - 1));
  return 0.5 * (v + v.transpose());
}

using Refit = std::function<VectorXd(const PanelDataset&)>;

// Replication r draws from stream (seed, r). Failed refits are dropped and
// counted; more than 10% failures is an error.
inline BootstrapResult bootstrap_vcov(const Refit& refit, const PanelDataset& ds,
                                      const VcovSpec& spec) {
  if (spec.replications < 1) throw ValidationError("bootstrap_vcov: B must be >= 1");
  if (spec.cluster_dim.empty()) throw ValidationError("bootstrap_vcov: empty cluster dimension");
  const auto B = static_cast<std::size_t>(spec.replications);
  std::vector<std::optional<VectorXd>> out(B);
  parallel_for(B, spec.jobs, [&](std::size_t r) {
    try {
      Rng rng(spec.seed, r);
      VectorXd v = refit(resample_clusters(ds, spec.cluster_dim, rng));
      if (v.allFinite()) out[r] = std::move(v);
    } catch (const std::exception&) {
      // counted below
    }
  });
  BootstrapResult res;
  Eigen::Index p = -1;
  for (const auto& o : out)
    if (o && p < 0) p = o->size();
  std::vector<const VectorXd*> ok;
  for (const auto& o : out) {
    if (o && o->size() == p)
      ok.push_back(&*o);
    else
      ++res.failures;
  }
  if (ok.empty()) throw Error("bootstrap_vcov: all " + std::to_string(B) + " replications failed");
  if (static_cast<double>(res.failures) > 0.1 * static_cast<double>(B))
    throw Error("bootstrap_vcov: " + std::to_string(res.failures) + " of " + std::to_string(B) +
                " replications failed (limit 10%)");
  res.draws.resize(static_cast<Eigen::Index>(ok.size()), p);
  for (std::size_t i = 0; i < ok.size(); ++i) res.draws.row(static_cast<Eigen::Index>(i)) = ok[i]->transpose();
  res.vcov = covariance_of_draws(res.draws);
  return res;
}

// ---------------------------------------------------------------------------
// OLS

namespace detail {

inline FitResult ols_on_design(Design& d, const std::string& dependent, bool robust = false,
                               const DemeanOptions& dm = {}) {
  const Eigen::Index n = d.X.rows(), k = d.X.cols();
  if (n == 0) throw DataError("ols: no complete cases for '" + dependent + "'");
  if (n < k)
    throw DataError("ols: " + std::to_string(n) + " complete cases for " + std::to_string(k) +
                    " parameters");
  if (!d.absorbed.empty()) {
    MatrixXd m(n, k + 1);
    m << d.y, d.X;
    demean_inplace(m, d.absorbed, d.weights, dm);
    d.y = m.col(0);
    d.X = m.rightCols(k);
  }
  const LsSolution s = solve_ls(d.X, d.y, d.weights, d.names);
  FitResult f;
  f.names = d.names;
  f.coef = s.beta;
  f.n_obs = static_cast<std::size_t>(n);
  f.n_dropped = d.n_dropped;
  f.fe_dims = d.absorbed_dims;
  const double dof = static_cast<double>(n - k - absorbed_dof(d.absorbed));
  f.dof = std::max(dof, 0.0);
  if (robust)
    f.vcov = hc1_vcov(d.X, s.resid, d.weights, s.bread, dof);
  else
    f.vcov = (s.ssr / std::max(dof, 1.0)) * s.bread;

  const bool centered =
      !d.absorbed.empty() || std::find(d.names.begin(), d.names.end(), kIntercept) != d.names.end();
  double wsum = 0.0, ybar = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = d.weights.empty() ? 1.0 : d.weights[static_cast<std::size_t>(i)];
    wsum += w;
    ybar += w * d.y(i);
  }
  ybar = (centered && wsum > 0.0) ? ybar / wsum : 0.0;
  double tss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = d.weights.empty() ? 1.0 : d.weights[static_cast<std::size_t>(i)];
    tss += w * (d.y(i) - ybar) * (d.y(i) - ybar);
  }
  FitStats fs;
  fs.r2 = tss > 0.0 ? 1.0 - s.ssr / tss : (s.ssr == 0.0 ? 1.0 : 0.0);
  fs.adj_r2 = dof > 0.0 ? 1.0 - (1.0 - fs.r2) * (static_cast<double>(n) - (centered ? 1.0 : 0.0)) / dof
                        : stats::kMissing;
  f.fit = fs;
  const double sigma2_ml = s.ssr / static_cast<double>(n);
  if (sigma2_ml > 0.0)
    f.loglik = -0.5 * static_cast<double>(n) * (std::log(2.0 * std::numbers::pi * sigma2_ml) + 1.0);
  f.notes["dependent"] = dependent;
  return f;
}

}  // namespace detail

inline DesignRequest ols_request(const ModelSpec& spec) {
  DesignRequest req;
  req.dependent = spec.dependent;
  req.regressors = spec.regressors;
  req.intercept = spec.intercept;
  req.absorb_dims = spec.fe_dims;
  req.cluster = spec.cluster;
  req.weights = spec.weights;
  return req;
}

// Point estimates only, aligned with ols_fit names; used by bootstrap refits.
inline VectorXd ols_coefficients(const PanelDataset& ds, const ModelSpec& spec) {
  Design d = build_design(ds, ols_request(spec));
  return detail::ols_on_design(d, spec.dependent).coef;
}

inline FitResult ols_fit(const PanelDataset& ds, const ModelSpec& spec,
                         const VcovSpec& vcov = VcovSpec::analytic()) {
  spec.validate(ds);
  vcov.validate();
  Design d = build_design(ds, ols_request(spec));
  FitResult f = detail::ols_on_design(d, spec.dependent, vcov.kind == VcovKind::HcRobust);
  if (vcov.kind == VcovKind::ClusterBootstrap) {
    VcovSpec vs = vcov;
    if (!spec.cluster.empty() && vs.cluster_dim == "entity") vs.cluster_dim = spec.cluster;
    auto bs = bootstrap_vcov([&](const PanelDataset& b) { return ols_coefficients(b, spec); }, ds, vs);
    f.vcov = bs.vcov;
    f.bootstrap_failures = bs.failures;
    f.dof = std::numeric_limits<double>::infinity();
  }
  f.se_method = vcov.tag();
  const auto slopes = slope_names(f);
  if (!slopes.empty()) {
    try {
      f.wald = wald_chi2(f, slopes);
    } catch (const CollinearityError&) {
      f.warnings.push_back("Wald test skipped: singular covariance");
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Newton maximum likelihood

// Returns the log-likelihood at theta, filling gradient and Hessian when the
// pointers are non-null.
using LogLik = std::function<double(const VectorXd& theta, VectorXd* grad, MatrixXd* hess)>;

struct MleOptions {
  double tol = 1e-8;
  int max_iter = 200;
  int max_halvings = 50;
};

struct MleResult {
  VectorXd params;
  MatrixXd vcov;
  double loglik = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
};

// Newton ascent with step halving. Converged when the gradient max-norm is
// below tol and the Newton step is negligible; diverging parameters (e.g.
// separated binary data) therefore run into max_iter.
inline MleResult mle_fit(const LogLik& f, VectorXd theta, const MleOptions& opt = {}) {
  const Eigen::Index k = theta.size();
  VectorXd g(k);
  MatrixXd H(k, k);
  double val = f(theta, &g, &H);
  if (!std::isfinite(val)) throw ConvergenceError("mle_fit: objective not finite at start", val);
  int it = 0;
  for (;; ++it) {
    const double gnorm = g.cwiseAbs().maxCoeff();
    MatrixXd negH = -0.5 * (H + H.transpose());
    Eigen::LLT<MatrixXd> llt(negH);
    double ridge = 0.0;
    const double scale = std::max(1e-12, negH.diagonal().cwiseAbs().maxCoeff());
    while (llt.info() != Eigen::Success || !llt.matrixL().toDenseMatrix().diagonal().allFinite()) {
      ridge = ridge == 0.0 ? 1e-8 * scale : ridge * 10.0;
      llt.compute(negH + ridge * MatrixXd::Identity(k, k));
      if (ridge > 1e12 * scale) throw ConvergenceError("mle_fit: cannot form ascent direction", gnorm);
    }
    const VectorXd step = llt.solve(g);
    const double step_norm = step.cwiseAbs().maxCoeff();
    if (gnorm < opt.tol && ridge == 0.0 &&
        step_norm <= 1e-6 * (1.0 + theta.cwiseAbs().maxCoeff())) {
      MleResult r;
      r.params = theta;
      r.loglik = val;
      r.iterations = it;
      r.grad_norm = gnorm;
      Eigen::FullPivLU<MatrixXd> lu(negH);
      if (!lu.isInvertible()) throw ConvergenceError("mle_fit: singular Hessian at optimum", gnorm);
      r.vcov = lu.inverse();
      r.vcov = 0.5 * (r.vcov + r.vcov.transpose());
      for (Eigen::Index i = 0; i < k; ++i)
        if (!(r.vcov(i, i) > 0.0)) throw ConvergenceError("mle_fit: singular Hessian at optimum", gnorm);
      return r;
    }
    if (it >= opt.max_iter)
      throw ConvergenceError("mle_fit: max_iter " + std::to_string(opt.max_iter) +
                                 " reached, gradient max-norm " + std::to_string(gnorm),
                             gnorm);
    double t = 1.0;
    bool finite_seen = false;
    bool accepted = false;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      const VectorXd cand = theta + t * step;
      const double v = f(cand, nullptr, nullptr);
      if (std::isfinite(v)) {
        finite_seen = true;
        if (v >= val - 1e-12 * (1.0 + std::abs(val))) {
          theta = cand;
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      if (!finite_seen)
        throw ConvergenceError("mle_fit: objective non-finite along search direction", gnorm);
      throw ConvergenceError("mle_fit: line search failed, gradient max-norm " +
                                 std::to_string(gnorm),
                             gnorm);
    }
    val = f(theta, &g, &H);
  }
}

// ---------------------------------------------------------------------------
// Variance inflation factors

inline std::map<std::string, double> vif(const MatrixXd& X, const std::vector<std::string>& names) {
  const Eigen::Index n = X.rows(), k = X.cols();
  if (k < 2) throw ValidationError("vif: at least two regressors required");
  if (n <= k) throw DataError("vif: too few complete cases");
  std::map<std::string, double> out;
  for (Eigen::Index j = 0; j < k; ++j) {
    MatrixXd Z(n, k);
    Eigen::Index c = 0;
    for (Eigen::Index m = 0; m < k; ++m)
      if (m != j) Z.col(c++) = X.col(m);
    Z.col(c).setOnes();
    const VectorXd xj = X.col(j);
    const VectorXd centered = xj.array() - xj.mean();
    const double tss = centered.squaredNorm();
    const auto& nm = names[static_cast<std::size_t>(j)];
    if (!(tss > 0.0)) throw CollinearityError("vif: regressor '" + nm + "' is constant", nm);
    const VectorXd beta = Z.colPivHouseholderQr().solve(xj);
    const double r2 = 1.0 - (xj - Z * beta).squaredNorm() / tss;
    if (r2 >= 1.0 - 1e-12)
      throw CollinearityError("vif: regressor '" + nm + "' is perfectly collinear with the others", nm);
    out[nm] = 1.0 / (1.0 - r2);
  }
  return out;
}

inline std::map<std::string, double> vif(const PanelDataset& ds, const std::vector<std::string>& regressors) {
  DesignRequest req;
  req.regressors = regressors;
  req.intercept = false;
  const Design d = build_design(ds, req);
  return vif(d.X, regressors);
}

inline double mean_vif(const std::map<std::string, double>& v) {
  double s = 0.0;
  for (const auto& [k, x] : v) s += x;
  return v.empty() ? stats::kMissing : s / static_cast<double>(v.size());
}

}  // namespace cdmkit
