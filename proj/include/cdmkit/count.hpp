#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdmkit/estim.hpp"
#include "cdmkit/heckman.hpp"

namespace cdmkit {

enum class CountFamily { PoissonFe, Nb2 };

// How non-integer dependent values are mapped to counts. Exact accepts only
// values within 1e-6 of an integer; Nearest rounds (for rolling-average
// dependents) and keeps the raw values for calibration.
enum class CountRounding { Exact, Nearest };

struct CountSpec {
  std::string dependent;
  std::vector<std::string> regressors;
  CountFamily family = CountFamily::PoissonFe;
  bool entity_fe = true;
  bool year_fe = true;
  VcovSpec vcov;
  CountRounding rounding = CountRounding::Exact;
  std::optional<double> fixed_alpha;  // NB2 only
  MleOptions mle;

  void validate(const PanelDataset& ds) const {
    ModelSpec{dependent, regressors, true, {}}.validate(ds);
    if (family == CountFamily::PoissonFe && !entity_fe)
      throw ValidationError("count: poisson_fe requires entity fixed effects");
    if (fixed_alpha && family != CountFamily::Nb2)
      throw ValidationError("count: fixed_alpha applies to nb2 only");
    if (fixed_alpha && !(*fixed_alpha >= 0.0)) throw ValidationError("count: fixed_alpha must be >= 0");
    vcov.validate();
  }
};

struct CountFit {
  FitResult base;
  CountFamily family = CountFamily::PoissonFe;
  std::optional<double> alpha;
  std::optional<double> alpha_se;
  bool alpha_at_boundary = false;
  // exp(entity effect) for every estimated entity; 1 is assumed elsewhere.
  std::map<std::string, double> entity_multiplier;
  LinearIndexModel index_model;
  std::size_t dropped_zero_entities = 0;
  std::size_t dropped_singletons = 0;
  std::vector<std::string> absorbed;
};

inline std::string family_tag(CountFamily f) { return f == CountFamily::PoissonFe ? "poisson_fe" : "nb2"; }

namespace detail {

inline double to_count(double v, CountRounding mode, const std::string& name) {
  if (v < 0.0) throw DataError("count: negative value " + format_double(v) + " in '" + name + "'");
  const double r = std::round(v);
  if (mode == CountRounding::Exact && std::abs(v - r) > 1e-6)
    throw DataError("count: non-integer value " + format_double(v) + " in '" + name +
                    "' (tolerance 1e-6)");
  return r;
}

struct CountSample {
  PanelDataset ds;
  std::size_t zero_entities = 0;
  std::size_t singletons = 0;
};

// Complete cases, counts validated, and (under entity FE) entities without
// information removed: all-zero totals always, singletons when requested.
inline CountSample count_sample(const PanelDataset& ds, const CountSpec& spec, bool drop_singletons) {
  DesignRequest req;
  req.dependent = spec.dependent;
  req.regressors = spec.regressors;
  req.intercept = false;
  const Design full = build_design(ds, req);
  if (full.rows.empty()) throw DataError("count: no complete cases for '" + spec.dependent + "'");
  for (Eigen::Index i = 0; i < full.y.size(); ++i) to_count(full.y(i), spec.rounding, spec.dependent);

  CountSample s;
  std::vector<std::size_t> keep;
  if (!spec.entity_fe) {
    keep = full.rows;
  } else {
    std::map<std::uint32_t, std::pair<double, std::size_t>> tally;
    for (std::size_t i = 0; i < full.rows.size(); ++i) {
      auto& t = tally[ds.entity_of(full.rows[i])];
      t.first += std::round(full.y(static_cast<Eigen::Index>(i)));
      ++t.second;
    }
    for (const auto& [e, t] : tally) {
      if (t.first == 0.0)
        ++s.zero_entities;
      else if (drop_singletons && t.second < 2)
        ++s.singletons;
    }
    for (auto r : full.rows) {
      const auto& t = tally[ds.entity_of(r)];
      if (t.first > 0.0 && !(drop_singletons && t.second < 2)) keep.push_back(r);
    }
    if (keep.empty())
      throw DataError("count: every entity has an all-zero (or single-row) '" + spec.dependent +
                      "' series");
  }
  s.ds = ds.select_rows(keep);
  return s;
}

// Regressors constant within every entity, which entity effects absorb.
inline std::vector<std::string> entity_constant_columns(const PanelDataset& ds,
                                                        const std::vector<std::string>& cols) {
  std::vector<std::string> out;
  for (const auto& c : cols) {
    const auto v = ds.values_of(c);
    double scale = 0.0;
    for (double x : v) scale = std::max(scale, std::abs(x));
    bool constant = true;
    for (std::uint32_t e = 0; e < ds.n_entities() && constant; ++e)
      for (auto r = ds.entity_begin(e); r < ds.entity_end(e); ++r)
        if (std::abs(v[r] - v[ds.entity_begin(e)]) > 1e-12 * (1.0 + scale)) {
          constant = false;
          break;
        }
    if (constant) out.push_back(c);
  }
  return out;
}

inline std::vector<std::string> without(const std::vector<std::string>& a, const std::vector<std::string>& drop) {
  std::vector<std::string> out;
  for (const auto& x : a)
    if (std::find(drop.begin(), drop.end(), x) == drop.end()) out.push_back(x);
  return out;
}

// Entity-clustered sandwich from per-entity score contributions.
inline MatrixXd cluster_sandwich(const MatrixXd& bread, const MatrixXd& scores) {
  const auto G = static_cast<double>(scores.rows());
  MatrixXd meat = scores.transpose() * scores;
  MatrixXd v = bread * meat * bread * (G / std::max(1.0, G - 1.0));
  return 0.5 * (v + v.transpose());
}

struct PoissonFeCore {
  Design d;
  std::vector<std::size_t> group_start;  // rows of group g: [start[g], start[g+1])
  MleResult mle;
  MatrixXd scores;
  std::vector<std::string> absorbed;
  std::size_t zero_entities = 0, singletons = 0;
  PanelDataset sample;
};

inline PoissonFeCore poisson_fe_core(const PanelDataset& ds, const CountSpec& spec) {
  PoissonFeCore c;
  auto s = count_sample(ds, spec, true);
  c.zero_entities = s.zero_entities;
  c.singletons = s.singletons;
  c.sample = std::move(s.ds);
  c.absorbed = entity_constant_columns(c.sample, spec.regressors);
  DesignRequest req;
  req.dependent = spec.dependent;
  req.regressors = without(spec.regressors, c.absorbed);
  req.intercept = false;
  if (spec.year_fe) req.indicator_dims = {"year"};
  req.cluster = "entity";
  c.d = build_design(c.sample, req);
  Design& d = c.d;
  for (Eigen::Index i = 0; i < d.y.size(); ++i) d.y(i) = std::round(d.y(i));
  const Eigen::Index n = d.X.rows(), k = d.X.cols();
  if (k == 0) throw ValidationError("poisson_fe: no identifiable regressors after entity absorption");

  c.group_start.push_back(0);
  for (Eigen::Index i = 1; i < n; ++i)
    if (d.cluster[static_cast<std::size_t>(i)] != d.cluster[static_cast<std::size_t>(i - 1)])
      c.group_start.push_back(static_cast<std::size_t>(i));
  c.group_start.push_back(static_cast<std::size_t>(n));
  const std::size_t G = c.group_start.size() - 1;

  MatrixXd within = d.X;
  for (std::size_t g = 0; g < G; ++g) {
    const auto b = static_cast<Eigen::Index>(c.group_start[g]);
    const auto len = static_cast<Eigen::Index>(c.group_start[g + 1]) - b;
    const Eigen::RowVectorXd m = within.middleRows(b, len).colwise().mean();
    within.middleRows(b, len).rowwise() -= m;
  }
  if (const auto bad = first_dependent_column(within.transpose() * within); bad >= 0) {
    const auto& nm = d.names[static_cast<std::size_t>(bad)];
    throw CollinearityError("poisson_fe: rank-deficient design, column '" + nm + "'", nm);
  }

  const auto& X = d.X;
  const auto& y = d.y;
  const auto& starts = c.group_start;
  LogLik f = [&X, &y, &starts, G, k](const VectorXd& b, VectorXd* grad, MatrixXd* H) {
    const VectorXd xb = X * b;
    double ll = 0.0;
    if (grad) grad->setZero(k);
    if (H) H->setZero(k, k);
    for (std::size_t g = 0; g < G; ++g) {
      const auto lo = static_cast<Eigen::Index>(starts[g]), hi = static_cast<Eigen::Index>(starts[g + 1]);
      const double top = xb.segment(lo, hi - lo).maxCoeff();
      double denom = 0.0, total = 0.0;
      for (Eigen::Index i = lo; i < hi; ++i) {
        denom += std::exp(xb(i) - top);
        total += y(i);
      }
      const double lse = top + std::log(denom);
      for (Eigen::Index i = lo; i < hi; ++i) ll += y(i) * (xb(i) - lse);
      if (!grad && !H) continue;
      VectorXd xbar = VectorXd::Zero(k);
      MatrixXd xx = MatrixXd::Zero(k, k);
      for (Eigen::Index i = lo; i < hi; ++i) {
        const double p = std::exp(xb(i) - lse);
        xbar += p * X.row(i).transpose();
        if (grad) *grad += y(i) * X.row(i).transpose();
        if (H) xx.noalias() += p * X.row(i).transpose() * X.row(i);
      }
      if (grad) *grad -= total * xbar;
      if (H) *H -= total * (xx - xbar * xbar.transpose());
    }
    return ll;
  };
  c.mle = mle_fit(f, VectorXd::Zero(k), spec.mle);

  const VectorXd xb = X * c.mle.params;
  c.scores.setZero(static_cast<Eigen::Index>(G), k);
  for (std::size_t g = 0; g < G; ++g) {
    const auto lo = static_cast<Eigen::Index>(starts[g]), hi = static_cast<Eigen::Index>(starts[g + 1]);
    double denom = 0.0, total = 0.0;
    VectorXd xs = VectorXd::Zero(k);
    for (Eigen::Index i = lo; i < hi; ++i) {
      denom += std::exp(xb(i));
      xs += std::exp(xb(i)) * X.row(i).transpose();
      total += y(i);
    }
    VectorXd sc = -total * xs / denom;
    for (Eigen::Index i = lo; i < hi; ++i) sc += y(i) * X.row(i).transpose();
    c.scores.row(static_cast<Eigen::Index>(g)) = sc.transpose();
  }
  return c;
}

inline VectorXd aligned(const FitResult& f, const std::vector<std::string>& names) {
  VectorXd v(static_cast<Eigen::Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j)
    v(static_cast<Eigen::Index>(j)) = f.has(names[j]) ? f.b(names[j]) : kMissing;
  return v;
}

inline void finish_count_fit(CountFit& cf, const CountSpec& spec, const PanelDataset& ds,
                             const std::function<FitResult(const PanelDataset&)>& refit) {
  FitResult& f = cf.base;
  if (spec.vcov.kind == VcovKind::ClusterBootstrap) {
    const auto names = f.names;
    auto bs = bootstrap_vcov([&](const PanelDataset& b) { return aligned(refit(b), names); }, ds, spec.vcov);
    f.vcov = bs.vcov;
    f.bootstrap_failures = bs.failures;
  }
  f.se_method = spec.vcov.tag();
  f.notes["dependent"] = spec.dependent;
  f.notes["family"] = family_tag(spec.family);
  f.fe_dims.clear();
  if (spec.entity_fe) f.fe_dims.push_back("entity");
  if (spec.year_fe) f.fe_dims.push_back("year");
  const auto slopes = without(spec.regressors, cf.absorbed);
  if (!slopes.empty()) {
    try {
      f.wald = wald_chi2(f, slopes);
    } catch (const CollinearityError&) {
      f.warnings.push_back("Wald test skipped: singular covariance");
    }
  }
  for (const auto& a : cf.absorbed) f.warnings.push_back("'" + a + "' is constant within entities; absorbed by entity effects");
}

}  // namespace detail

// Conditional (fixed-effects) Poisson: entity effects drop out by
// conditioning on each entity's total. Year effects are indicator columns.
// Entities with all-zero or single-row series carry no information and are
// dropped; entity-constant regressors are absorbed and reported as such.
inline CountFit poisson_fe_fit(const PanelDataset& ds, const CountSpec& spec_in) {
  CountSpec spec = spec_in;
  spec.family = CountFamily::PoissonFe;
  spec.validate(ds);
  auto c = detail::poisson_fe_core(ds, spec);
  CountFit cf;
  cf.family = CountFamily::PoissonFe;
  cf.absorbed = c.absorbed;
  cf.dropped_zero_entities = c.zero_entities;
  cf.dropped_singletons = c.singletons;
  cf.index_model = {detail::without(spec.regressors, c.absorbed), spec.year_fe ? std::vector<std::string>{"year"}
                                                                              : std::vector<std::string>{},
                    false};
  FitResult& f = cf.base;
  f.names = c.d.names;
  f.coef = c.mle.params;
  f.loglik = c.mle.loglik;
  f.n_obs = static_cast<std::size_t>(c.d.X.rows());
  f.n_dropped = ds.n_rows() - f.n_obs;
  f.vcov = spec.vcov.kind == VcovKind::HcRobust ? detail::cluster_sandwich(c.mle.vcov, c.scores) : c.mle.vcov;

  const VectorXd xb = c.d.X * c.mle.params;
  for (std::size_t g = 0; g + 1 < c.group_start.size(); ++g) {
    double total = 0.0, denom = 0.0;
    for (auto i = c.group_start[g]; i < c.group_start[g + 1]; ++i) {
      total += c.d.y(static_cast<Eigen::Index>(i));
      denom += std::exp(xb(static_cast<Eigen::Index>(i)));
    }
    cf.entity_multiplier[c.sample.entity_name(c.d.rows[c.group_start[g]])] = total / denom;
  }
  f.notes["entities_all_zero"] = std::to_string(c.zero_entities);
  f.notes["entities_single_row"] = std::to_string(c.singletons);
  detail::finish_count_fit(cf, spec, ds, [&](const PanelDataset& b) {
    CountSpec s2 = spec;
    s2.vcov = VcovSpec::analytic();
    return poisson_fe_fit(b, s2).base;
  });
  return cf;
}

namespace detail {

// NB2 log-likelihood of one observation and its derivatives with respect to
// the linear index eta and theta = log(alpha). The digamma/trigamma
// differences are evaluated as finite sums over k < y, which stays accurate
// as alpha -> 0.
struct Nb2Terms {
  double ll, d_eta, d_eta2, d_theta, d_theta2, d_eta_theta;
};

inline Nb2Terms nb2_terms(double y, double eta, double theta, bool derivs) {
  const double m = std::exp(eta);
  const double r = std::exp(-theta);
  double s_log = 0.0, s1 = 0.0, s2 = 0.0;
  const auto yi = static_cast<long>(y);
  for (long k = 0; k < yi; ++k) {
    const double rk = r + static_cast<double>(k);
    s_log += std::log(rk / (r + m));
    s1 += 1.0 / rk;
    s2 += 1.0 / (rk * rk);
  }
  Nb2Terms t{};
  // sum log((r+k)/(r+m)) + y log m - lgamma(y+1) - r log(1 + m/r)
  t.ll = s_log + y * eta - std::lgamma(y + 1.0) - r * std::log1p(m / r);
  if (!derivs) return t;
  const double rm = r + m;
  const double dr = s1 + std::log(r / rm) + 1.0 - (r + y) / rm;
  const double drr = -s2 + 1.0 / r - 1.0 / rm - (m - y) / (rm * rm);
  t.d_eta = r * (y - m) / rm;
  t.d_eta2 = -m * r * (r + y) / (rm * rm);
  const double d_eta_r = (y - m) * m / (rm * rm);
  t.d_theta = -r * dr;
  t.d_theta2 = r * r * drr + r * dr;
  t.d_eta_theta = -r * d_eta_r;
  return t;
}

inline double poisson_ll(double y, double eta) { return y * eta - std::exp(eta) - std::lgamma(y + 1.0); }

}  // namespace detail

// NB2 with entity effects as indicator columns (unconditional FE) and year
// indicators. Maximizes jointly over (beta, log alpha). When the Poisson
// score for overdispersion is not positive the MLE sits at alpha = 0 and the
// Poisson fit is reported with alpha = 0.
inline CountFit nb2_fit(const PanelDataset& ds, const CountSpec& spec_in) {
  CountSpec spec = spec_in;
  spec.family = CountFamily::Nb2;
  spec.validate(ds);
  auto s = detail::count_sample(ds, spec, false);
  CountFit cf;
  cf.family = CountFamily::Nb2;
  cf.dropped_zero_entities = s.zero_entities;
  if (spec.entity_fe) cf.absorbed = detail::entity_constant_columns(s.ds, spec.regressors);
  const auto regs = detail::without(spec.regressors, cf.absorbed);

  DesignRequest req;
  req.dependent = spec.dependent;
  req.regressors = regs;
  req.intercept = true;
  if (spec.entity_fe) req.indicator_dims.push_back("entity");
  if (spec.year_fe) req.indicator_dims.push_back("year");
  Design d = build_design(s.ds, req);
  for (Eigen::Index i = 0; i < d.y.size(); ++i) d.y(i) = std::round(d.y(i));
  const Eigen::Index n = d.X.rows(), k = d.X.cols();
  if (n <= k) throw DataError("nb2: " + std::to_string(n) + " complete cases for " + std::to_string(k + 1) + " parameters");
  if (const auto bad = first_dependent_column(d.X.transpose() * d.X); bad >= 0) {
    const auto& nm = d.names[static_cast<std::size_t>(bad)];
    throw CollinearityError("nb2: rank-deficient design, column '" + nm + "'", nm);
  }
  const MatrixXd& X = d.X;
  const VectorXd& y = d.y;

  LogLik pois = [&X, &y, n](const VectorXd& b, VectorXd* g, MatrixXd* H) {
    const VectorXd eta = X * b;
    double ll = 0.0;
    VectorXd r(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      ll += detail::poisson_ll(y(i), eta(i));
      const double m = std::exp(eta(i));
      r(i) = y(i) - m;
      w(i) = m;
    }
    if (g) *g = X.transpose() * r;
    if (H) *H = -(X.transpose() * w.asDiagonal() * X);
    return ll;
  };
  auto nb_fixed = [&X, &y, n](double theta) {
    return LogLik([&X, &y, n, theta](const VectorXd& b, VectorXd* g, MatrixXd* H) {
      const VectorXd eta = X * b;
      double ll = 0.0;
      VectorXd r(n), w(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto t = detail::nb2_terms(y(i), eta(i), theta, g || H);
        ll += t.ll;
        r(i) = t.d_eta;
        w(i) = -t.d_eta2;
      }
      if (g) *g = X.transpose() * r;
      if (H) *H = -(X.transpose() * w.asDiagonal() * X);
      return ll;
    });
  };
  LogLik joint = [&X, &y, n, k](const VectorXd& p, VectorXd* g, MatrixXd* H) {
    const VectorXd eta = X * p.head(k);
    const double theta = p(k);
    double ll = 0.0;
    VectorXd r(n), w(n), c(n);
    double gt = 0.0, htt = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto t = detail::nb2_terms(y(i), eta(i), theta, g || H);
      ll += t.ll;
      r(i) = t.d_eta;
      w(i) = -t.d_eta2;
      c(i) = t.d_eta_theta;
      gt += t.d_theta;
      htt += t.d_theta2;
    }
    if (g) {
      g->resize(k + 1);
      g->head(k) = X.transpose() * r;
      (*g)(k) = gt;
    }
    if (H) {
      H->resize(k + 1, k + 1);
      H->topLeftCorner(k, k) = -(X.transpose() * w.asDiagonal() * X);
      const VectorXd cross = X.transpose() * c;
      H->col(k).head(k) = cross;
      H->row(k).head(k) = cross.transpose();
      (*H)(k, k) = htt;
    }
    return ll;
  };

  VectorXd start = VectorXd::Zero(k);
  start(k - 1) = std::log(std::max(y.mean(), 0.5));
  const MleResult p0 = mle_fit(pois, start, spec.mle);

  FitResult& f = cf.base;
  VectorXd beta;
  MatrixXd vbeta;
  std::optional<double> theta_se;
  double theta = -std::numeric_limits<double>::infinity();
  if (spec.fixed_alpha) {
    if (*spec.fixed_alpha == 0.0) {
      beta = p0.params;
      vbeta = p0.vcov;
      f.loglik = p0.loglik;
    } else {
      theta = std::log(*spec.fixed_alpha);
      const MleResult m = mle_fit(nb_fixed(theta), p0.params, spec.mle);
      beta = m.params;
      vbeta = m.vcov;
      f.loglik = m.loglik;
    }
    cf.alpha = *spec.fixed_alpha;
    f.notes["alpha"] = "fixed";
  } else {
    const VectorXd mu = (X * p0.params).array().exp();
    const double lm = 0.5 * ((y - mu).array().square() - y.array()).sum();
    if (lm <= 0.0) {
      beta = p0.params;
      vbeta = p0.vcov;
      f.loglik = p0.loglik;
      cf.alpha = 0.0;
      cf.alpha_at_boundary = true;
      f.warnings.push_back("no overdispersion detected; alpha at its boundary 0 (Poisson)");
    } else {
      const double a0 = std::max(1e-3, 2.0 * lm / mu.squaredNorm());
      VectorXd p(k + 1);
      p << p0.params, std::log(a0);
      const MleResult m = mle_fit(joint, p, spec.mle);
      theta = m.params(k);
      if (std::exp(theta) > 1e6)
        throw ConvergenceError("nb2: alpha diverged beyond 1e6 (severe overdispersion or misfit)", std::exp(theta));
      beta = m.params.head(k);
      f.loglik = m.loglik;
      cf.alpha = std::exp(theta);
      theta_se = std::sqrt(m.vcov(k, k));
      cf.alpha_se = *cf.alpha * *theta_se;
      // Keep beta and lnalpha jointly for the reported block.
      vbeta = m.vcov;
    }
  }

  // Reported coefficients: regressors, year indicators, the intercept when
  // no entity effects, and lnalpha when estimated.
  std::vector<std::string> report;
  std::vector<Eigen::Index> idx;
  for (std::size_t j = 0; j < d.names.size(); ++j) {
    const auto& nm = d.names[j];
    if (spec.entity_fe && (nm == kIntercept || nm.rfind("entity=", 0) == 0)) continue;
    report.push_back(nm);
    idx.push_back(static_cast<Eigen::Index>(j));
  }
  if (theta_se) {
    report.push_back("lnalpha");
    idx.push_back(k);
  }
  const auto m = static_cast<Eigen::Index>(idx.size());
  f.names = report;
  f.coef.resize(m);
  f.vcov.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    f.coef(i) = idx[static_cast<std::size_t>(i)] == k ? theta : beta(idx[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < m; ++j)
      f.vcov(i, j) = vbeta(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  f.n_obs = static_cast<std::size_t>(n);
  f.n_dropped = ds.n_rows() - f.n_obs;
  f.notes["entities_all_zero"] = std::to_string(cf.dropped_zero_entities);
  if (cf.alpha) f.notes["alpha"] = detail::format_double(*cf.alpha);

  cf.index_model = {regs, spec.year_fe ? std::vector<std::string>{"year"} : std::vector<std::string>{},
                    !spec.entity_fe};
  if (spec.entity_fe) {
    const double cons = beta(k - 1);
    const auto& blk = d.indicators.front();
    for (std::size_t l = 0; l < blk.levels.size(); ++l) {
      const double eff = l == 0 ? 0.0 : beta(blk.first_col + static_cast<Eigen::Index>(l) - 1);
      cf.entity_multiplier[blk.level_labels[l]] = std::exp(cons + eff);
    }
  }
  detail::finish_count_fit(cf, spec, ds, [&](const PanelDataset& b) {
    CountSpec s2 = spec;
    s2.vcov = VcovSpec::analytic();
    return nb2_fit(b, s2).base;
  });
  return cf;
}

inline CountFit count_fit(const PanelDataset& ds, const CountSpec& spec) {
  return spec.family == CountFamily::PoissonFe ? poisson_fe_fit(ds, spec) : nb2_fit(ds, spec);
}

// ---------------------------------------------------------------------------
// Prediction and calibration

struct CalibrationRule {
  std::string firm_mean_source;
  double epsilon = 0.001;
  std::string employee_col;
};

// exp(index) times the entity multiplier (1 for entities not estimated).
inline std::vector<double> raw_count_prediction(const CountFit& fit, const PanelDataset& ds) {
  auto idx = linear_index(fit.base, fit.index_model, ds);
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    if (is_missing(idx[r])) continue;
    auto it = fit.entity_multiplier.find(ds.entity_name(r));
    idx[r] = std::exp(idx[r]) * (it == fit.entity_multiplier.end() ? 1.0 : it->second);
  }
  return idx;
}

// Scales each entity's raw predictions so their mean equals the entity's mean
// realized count, then adds epsilon.
inline std::vector<double> calibrate_raw(const std::vector<double>& raw, const PanelDataset& ds,
                                         const CalibrationRule& rule) {
  if (!(rule.epsilon > 0.0)) throw ValidationError("calibration: epsilon must be > 0");
  const auto realized = ds.column(rule.firm_mean_source);
  std::vector<double> out(ds.n_rows(), kMissing);
  for (std::uint32_t e = 0; e < ds.n_entities(); ++e) {
    double rs = 0.0, ps = 0.0;
    std::size_t rn = 0, pn = 0;
    for (auto r = ds.entity_begin(e); r < ds.entity_end(e); ++r) {
      if (!is_missing(realized[r])) {
        rs += realized[r];
        ++rn;
      }
      if (!is_missing(raw[r])) {
        ps += raw[r];
        ++pn;
      }
    }
    if (pn == 0) continue;
    const double rmean = rn ? rs / static_cast<double>(rn) : 0.0;
    const double pmean = ps / static_cast<double>(pn);
    if (rmean < 0.0) throw DataError("calibration: negative realized mean for " + ds.entities()[e]);
    double scale = 0.0;
    if (rmean > 0.0) {
      if (!(pmean > 0.0))
        throw DataError("calibration: entity " + ds.entities()[e] +
                        " has zero mean raw prediction but positive realized mean");
      scale = rmean / pmean;
    }
    for (auto r = ds.entity_begin(e); r < ds.entity_end(e); ++r)
      if (!is_missing(raw[r])) out[r] = raw[r] * scale + rule.epsilon;
  }
  return out;
}

inline std::vector<double> calibrate_predictions(const CountFit& fit, const PanelDataset& ds,
                                                 const CalibrationRule& rule) {
  return calibrate_raw(raw_count_prediction(fit, ds), ds, rule);
}

// log(prediction / employees) where the pre-epsilon prediction is positive,
// log(epsilon) where it is zero.
inline std::vector<double> patent_intensity(std::span<const double> predicted, std::span<const double> employees,
                                            double epsilon = 0.001) {
  if (!(epsilon > 0.0)) throw ValidationError("patent_intensity: epsilon must be > 0");
  if (predicted.size() != employees.size()) throw DataError("patent_intensity: length mismatch");
  std::vector<double> out(predicted.size(), kMissing);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double p = predicted[i];
    if (is_missing(p)) continue;
    if (!(p - epsilon > 0.0)) {
      out[i] = std::log(epsilon);
      continue;
    }
    const double e = employees[i];
    if (is_missing(e)) continue;
    if (!(e > 0.0))
      throw DataError("patent_intensity: non-positive employees (" + detail::format_double(e) + ") at row " +
                      std::to_string(i));
    out[i] = std::log(p / e);
  }
  return out;
}

}  // namespace cdmkit
