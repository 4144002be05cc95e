#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cdmkit/estim.hpp"
#include "cdmkit/heckman.hpp"
#include "cdmkit/parallel.hpp"

namespace cdmkit {

struct Bandwidth {
  enum class Kind { Silverman, Fixed };
  Kind kind = Kind::Silverman;
  double h = 0.0;

  static Bandwidth silverman() { return {}; }
  static Bandwidth fixed(double h) { return {Kind::Fixed, h}; }
  std::string tag() const { return kind == Kind::Silverman ? "silverman" : "fixed(" + detail::format_double(h) + ")"; }
};

inline std::vector<double> default_taus() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

struct QuantileSpec {
  std::vector<double> taus = default_taus();
  Bandwidth bandwidth;

  void validate() const {
    if (taus.empty()) throw ValidationError("quantile spec: no taus");
    for (std::size_t i = 0; i < taus.size(); ++i) {
      if (!(taus[i] > 0.0 && taus[i] < 1.0))
        throw ValidationError("quantile spec: tau " + detail::format_double(taus[i]) + " outside (0,1)");
      if (i > 0 && !(taus[i] > taus[i - 1])) throw ValidationError("quantile spec: taus must be strictly increasing");
    }
    if (bandwidth.kind == Bandwidth::Kind::Fixed && !(bandwidth.h > 0.0))
      throw ValidationError("quantile spec: fixed bandwidth must be positive");
  }
};

namespace detail {

inline std::vector<double> unit_or(std::span<const double> w, std::size_t n) {
  if (w.empty()) return std::vector<double>(n, 1.0);
  if (w.size() != n) throw DataError("weights: size mismatch");
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("weights must be finite and non-negative");
    total += v;
  }
  if (!(total > 0.0)) throw DataError("weights must have a positive sum");
  return {w.begin(), w.end()};
}

}  // namespace detail

// Smallest y whose cumulative weight share reaches tau; with unit weights the
// order statistic at index ceil(tau * n). Ties resolve to the lower value.
inline double weighted_quantile(std::span<const double> y, double tau, std::span<const double> w = {}) {
  if (y.empty()) throw DataError("quantile of an empty sample");
  const auto wt = detail::unit_or(w, y.size());
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  const double total = std::accumulate(wt.begin(), wt.end(), 0.0);
  const double target = tau * total - 1e-12 * total;
  double cum = 0.0;
  for (std::size_t i : order) {
    cum += wt[i];
    if (wt[i] > 0.0 && cum >= target) return y[i];
  }
  return y[order.back()];
}

// Rule-of-thumb bandwidth 0.9 min(sd, IQR/1.34) n^(-1/5); falls back to sd
// when the IQR is zero.
inline double silverman_bandwidth(std::span<const double> y, std::span<const double> w = {}) {
  const auto wt = detail::unit_or(w, y.size());
  double total = 0.0, mean = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total += wt[i];
    mean += wt[i] * y[i];
    if (wt[i] > 0.0) ++n;
  }
  if (n < 2) throw DataError("silverman bandwidth needs at least two observations");
  mean /= total;
  double ss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) ss += wt[i] * (y[i] - mean) * (y[i] - mean);
  const double nn = static_cast<double>(n);
  const double sd = std::sqrt(ss / total * nn / (nn - 1.0));
  const double iqr = weighted_quantile(y, 0.75, wt) - weighted_quantile(y, 0.25, wt);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  const double h = 0.9 * spread * std::pow(nn, -0.2);
  if (!(h > 0.0)) throw DataError("zero bandwidth: sample is constant");
  return h;
}

inline double resolve_bandwidth(std::span<const double> y, const Bandwidth& bw, std::span<const double> w = {}) {
  if (bw.kind == Bandwidth::Kind::Fixed) {
    if (!(bw.h > 0.0)) throw ValidationError("fixed bandwidth must be positive");
    return bw.h;
  }
  return silverman_bandwidth(y, w);
}

// Gaussian-kernel density estimate at `point`.
inline double kde_at(std::span<const double> sample, double point, const Bandwidth& bw,
                     std::span<const double> w = {}) {
  if (sample.empty()) throw DataError("kde of an empty sample");
  const auto wt = detail::unit_or(w, sample.size());
  const double h = resolve_bandwidth(sample, bw, wt);
  double s = 0.0, total = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    s += wt[i] * stats::normal_pdf((point - sample[i]) / h);
    total += wt[i];
  }
  return s / (total * h);
}

struct RifResult {
  double tau = 0.0;
  double q_hat = 0.0;
  double f_hat = 0.0;
  double bandwidth = 0.0;
  std::vector<double> rif;  // missing where y is missing
  double sigma2_if = 0.0;
  // (tau - F(q_hat)) / f_hat: the weighted mean of rif minus q_hat. Zero when
  // the empirical CDF at q_hat equals tau exactly.
  double identity_gap = 0.0;
};

// RIF of the tau-quantile: q + (tau - 1{y <= q}) / f(q).
inline RifResult rif_quantile(std::span<const double> y, const QuantileSpec& spec, double tau,
                              std::span<const double> weights = {}) {
  if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("rif_quantile: tau outside (0,1)");
  if (!weights.empty() && weights.size() != y.size()) throw DataError("rif_quantile: weight size mismatch");
  std::vector<double> ys, ws;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (is_missing(y[i])) continue;
    ys.push_back(y[i]);
    ws.push_back(weights.empty() ? 1.0 : weights[i]);
  }
  if (ys.size() < 10) throw DataError("rif_quantile: needs at least 10 non-missing values");
  const auto wt = detail::unit_or(ws, ys.size());

  RifResult r;
  r.tau = tau;
  r.q_hat = weighted_quantile(ys, tau, wt);
  r.bandwidth = resolve_bandwidth(ys, spec.bandwidth, wt);
  r.f_hat = kde_at(ys, r.q_hat, Bandwidth::fixed(r.bandwidth), wt);
  if (!(r.f_hat > 0.0)) throw DataError("rif_quantile: zero density at the quantile");
  const double above = r.q_hat + tau / r.f_hat;
  const double below = r.q_hat - (1.0 - tau) / r.f_hat;
  r.rif.assign(y.size(), stats::kMissing);
  double total = 0.0, at_or_below = 0.0, ss = 0.0;
  for (std::size_t i = 0, j = 0; i < y.size(); ++i) {
    if (is_missing(y[i])) continue;
    const bool le = y[i] <= r.q_hat;
    r.rif[i] = le ? below : above;
    total += wt[j];
    if (le) at_or_below += wt[j];
    ss += wt[j] * (r.rif[i] - r.q_hat) * (r.rif[i] - r.q_hat);
    ++j;
  }
  r.sigma2_if = ss / total;
  r.identity_gap = (tau - at_or_below / total) / r.f_hat;
  return r;
}

namespace detail {

inline std::vector<std::size_t> complete_rows(const PanelDataset& ds, const std::vector<std::string>& cols) {
  std::vector<std::vector<double>> v;
  for (const auto& c : cols) {
    if (!ds.resolves(c)) throw DataError("unknown column '" + c + "'");
    v.push_back(ds.values_of(c));
  }
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    bool ok = true;
    for (const auto& x : v) ok = ok && !is_missing(x[r]);
    if (ok) rows.push_back(r);
  }
  return rows;
}

inline void rif_notes(FitResult& f, const RifResult& r, const std::string& suffix = {}) {
  f.notes["q_hat" + suffix] = format_double(r.q_hat);
  f.notes["f_hat" + suffix] = format_double(r.f_hat);
  f.notes["bandwidth" + suffix] = format_double(r.bandwidth);
  f.notes["sigma2_if" + suffix] = format_double(r.sigma2_if);
}

// Runs fn(i) for every tau in parallel and rethrows the first failure.
template <class Fn>
std::map<double, FitResult> per_tau(const std::vector<double>& taus, unsigned jobs, Fn&& fn) {
  std::vector<FitResult> out(taus.size());
  std::vector<std::exception_ptr> err(taus.size());
  parallel_for(taus.size(), jobs, [&](std::size_t i) {
    try {
      out[i] = fn(taus[i]);
    } catch (...) {
      err[i] = std::current_exception();
    }
  });
  for (const auto& e : err)
    if (e) std::rethrow_exception(e);
  std::map<double, FitResult> m;
  for (std::size_t i = 0; i < taus.size(); ++i) m.emplace(taus[i], std::move(out[i]));
  return m;
}

inline constexpr const char* kRifColumn = "__rif";

}  // namespace detail

// Unconditional quantile regression: for each tau, OLS of the quantile RIF on
// the regressors with the given FE absorbed and HC1 standard errors.
inline std::map<double, FitResult> uqr_fit(const PanelDataset& ds, const std::string& dependent,
                                           const std::vector<std::string>& regressors, const QuantileSpec& spec,
                                           const std::vector<std::string>& fe_dims = {"entity", "year"},
                                           unsigned jobs = 1) {
  spec.validate();
  ModelSpec{dependent, regressors, true, fe_dims}.validate(ds);
  std::vector<std::string> cols = regressors;
  cols.push_back(dependent);
  for (const auto& d : fe_dims)
    if (d != "entity") cols.push_back(d);
  const PanelDataset sub = ds.select_rows(detail::complete_rows(ds, cols));
  const auto y = sub.values_of(dependent);
  return detail::per_tau(spec.taus, jobs, [&](double tau) {
    const RifResult r = rif_quantile(y, spec, tau);
    const PanelDataset with = sub.with_column(detail::kRifColumn, r.rif);
    FitResult f = ols_fit(with, ModelSpec{detail::kRifColumn, regressors, true, fe_dims}, VcovSpec::robust());
    f.notes["tau"] = detail::format_double(tau);
    f.notes["dependent"] = dependent;
    detail::rif_notes(f, r);
    return f;
  });
}

// ---------------------------------------------------------------------------
// Treatment effects on quantiles

enum class Weighting { None, Ipw };

struct TreatmentSpec {
  std::string treatment;
  std::vector<std::string> propensity_regressors;
  std::vector<std::string> controls;
  std::vector<std::string> fe_dims = {"entity", "year"};
  double clip_low = 0.01;
  double clip_high = 0.99;
  Weighting weighting = Weighting::None;
  bool year_indicators = true;  // in the propensity probit
  std::size_t min_group = 30;

  void validate() const {
    if (treatment.empty()) throw ValidationError("treatment: indicator column required");
    if (!(clip_low > 0.0 && clip_low < 0.5) || !(clip_high > 0.5 && clip_high < 1.0))
      throw ValidationError("treatment: clip bounds must lie in (0,0.5) and (0.5,1)");
    if (std::find(controls.begin(), controls.end(), treatment) != controls.end())
      throw ValidationError("treatment: indicator also listed as a control");
  }
};

struct IpwWeights {
  std::vector<double> propensity;  // clipped; missing where unusable
  std::vector<double> weight;      // sums to 1 within each treatment group
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  std::size_t n_clipped = 0;
};

inline void check_binary_column(std::span<const double> t, const std::string& name) {
  for (double v : t)
    if (!is_missing(v) && v != 0.0 && v != 1.0)
      throw DataError("'" + name + "' must be binary (0/1), found " + detail::format_double(v));
}

// Probit propensity with clipping and Hajek-normalised inverse-probability
// weights T/p and (1-T)/(1-p).
inline IpwWeights propensity_ipw(const PanelDataset& ds, const TreatmentSpec& spec) {
  spec.validate();
  if (!ds.has_column(spec.treatment)) throw DataError("propensity_ipw: unknown treatment '" + spec.treatment + "'");
  const auto t = ds.column(spec.treatment);
  check_binary_column(t, spec.treatment);
  std::vector<std::string> fe;
  if (spec.year_indicators) fe.push_back("year");
  const FitResult pf = probit_fit(ds, spec.treatment, spec.propensity_regressors, fe);
  const auto index = linear_index(pf, LinearIndexModel{spec.propensity_regressors, fe, true}, ds);

  IpwWeights out;
  const std::size_t n = ds.n_rows();
  out.propensity.assign(n, stats::kMissing);
  out.weight.assign(n, stats::kMissing);
  double sum1 = 0.0, sum0 = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (is_missing(t[r]) || is_missing(index[r])) continue;
    double p = stats::normal_cdf(index[r]);
    if (p < spec.clip_low || p > spec.clip_high) {
      p = std::clamp(p, spec.clip_low, spec.clip_high);
      ++out.n_clipped;
    }
    out.propensity[r] = p;
    if (t[r] == 1.0) {
      out.weight[r] = 1.0 / p;
      sum1 += out.weight[r];
      ++out.n_treated;
    } else {
      out.weight[r] = 1.0 / (1.0 - p);
      sum0 += out.weight[r];
      ++out.n_control;
    }
  }
  if (out.n_treated == 0) throw DataError("propensity_ipw: treated group is empty");
  if (out.n_control == 0) throw DataError("propensity_ipw: control group is empty");
  for (std::size_t r = 0; r < n; ++r)
    if (!is_missing(out.weight[r])) out.weight[r] /= t[r] == 1.0 ? sum1 : sum0;
  return out;
}

// Distributional treatment effect: each observation's RIF comes from its own
// group's (optionally reweighted) distribution; the combined RIF is regressed
// on the treatment indicator and controls with FE absorbed.
inline std::map<double, FitResult> rif_treatment_fit(const PanelDataset& ds, const std::string& dependent,
                                                     const TreatmentSpec& spec, const QuantileSpec& qspec,
                                                     unsigned jobs = 1) {
  spec.validate();
  qspec.validate();
  std::vector<std::string> regs = {spec.treatment};
  regs.insert(regs.end(), spec.controls.begin(), spec.controls.end());
  ModelSpec{dependent, regs, true, spec.fe_dims}.validate(ds);
  std::vector<std::string> cols = regs;
  cols.push_back(dependent);
  if (spec.weighting == Weighting::Ipw)
    cols.insert(cols.end(), spec.propensity_regressors.begin(), spec.propensity_regressors.end());
  const PanelDataset sub = ds.select_rows(detail::complete_rows(ds, cols));
  const auto t = sub.column(spec.treatment);
  check_binary_column(t, spec.treatment);

  std::vector<std::size_t> g1, g0;
  for (std::size_t r = 0; r < sub.n_rows(); ++r) (t[r] == 1.0 ? g1 : g0).push_back(r);
  if (g1.size() < spec.min_group)
    throw DataError("rif_treatment: treated group (" + spec.treatment + " = 1) has " + std::to_string(g1.size()) +
                    " complete cases, minimum " + std::to_string(spec.min_group));
  if (g0.size() < spec.min_group)
    throw DataError("rif_treatment: control group (" + spec.treatment + " = 0) has " + std::to_string(g0.size()) +
                    " complete cases, minimum " + std::to_string(spec.min_group));

  std::vector<double> w(sub.n_rows(), 1.0);
  if (spec.weighting == Weighting::Ipw) w = propensity_ipw(sub, spec).weight;
  const auto y = sub.values_of(dependent);
  auto gather = [&](const std::vector<std::size_t>& rows, std::span<const double> v) {
    std::vector<double> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(v[r]);
    return out;
  };
  const auto y1 = gather(g1, y), y0 = gather(g0, y), w1 = gather(g1, w), w0 = gather(g0, w);

  return detail::per_tau(qspec.taus, jobs, [&](double tau) {
    const RifResult r1 = rif_quantile(y1, qspec, tau, w1);
    const RifResult r0 = rif_quantile(y0, qspec, tau, w0);
    std::vector<double> combined(sub.n_rows());
    for (std::size_t i = 0; i < g1.size(); ++i) combined[g1[i]] = r1.rif[i];
    for (std::size_t i = 0; i < g0.size(); ++i) combined[g0[i]] = r0.rif[i];
    const PanelDataset with = sub.with_column(detail::kRifColumn, std::move(combined));
    FitResult f = ols_fit(with, ModelSpec{detail::kRifColumn, regs, true, spec.fe_dims}, VcovSpec::robust());
    f.notes["tau"] = detail::format_double(tau);
    f.notes["dependent"] = dependent;
    f.notes["weighting"] = spec.weighting == Weighting::Ipw ? "ipw" : "none";
    detail::rif_notes(f, r1, "_treated");
    detail::rif_notes(f, r0, "_control");
    return f;
  });
}

}  // namespace cdmkit
