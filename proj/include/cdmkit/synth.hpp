#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdmkit/error.hpp"
#include "cdmkit/panel.hpp"
#include "cdmkit/rng.hpp"
#include "cdmkit/stats.hpp"

namespace cdmkit {

// True parameters of a synthetic three-stage firm panel.
//
// Stage 1: D* = a0 + a1 lnPPC + a2 lnIPT + a3 EPD + e, RD = 1{D* > 0};
//          RDINT* = b0 + b1 lnPPC + b2 lnIPT + u, corr(e, u) = rho,
//          RDINT observed only where RD = 1.
// Stage 2: mu = exp(c0 + c1 RDINT* + c2 lnEMP + eta_i + year_t);
//          ECO, NECO Poisson given a shared Gamma(1/alpha) frailty with green
//          share pi_it, PAT = ECO + NECO.
// Stage 3: lnVA_{t+1} = d_pat lnPATINT_t (or d_neco lnNECOINT_t + d_eco lnECOINT_t)
//          + d_cap lnCAPINT_t + d_emp lnEMP_t + GREEN effects + a_i + g_{t+1} + v.
struct DgpConfig {
  int n_entities = 500;
  int n_periods = 8;
  int first_year = 2010;
  std::uint64_t seed = 1;

  struct Selection {
    double intercept = 0.3;
    double ppc = 0.8;
    double ipt = -0.4;
    double exclusion = 1.0;
    double rho = 0.0;
  } selection;

  struct Rd {
    double intercept = 1.0;
    double ppc = 0.7;
    double ipt = 0.3;
    double noise_sd = 1.0;
  } rd;

  struct Counts {
    double intercept = 0.0;
    double rdint = 0.5;
    double emp = 0.6;
    double entity_sd = 0.5;
    double year_sd = 0.1;
    double alpha = 0.0;  // 0 gives Poisson counts
    double green_share = 0.3;
  } counts;

  struct Productivity {
    bool extended = false;
    double patent = 0.4;
    double neco = 0.3;
    double eco = 0.1;
    double capint = 0.3;
    double emp = -0.05;
    double entity_sd = 0.5;
    double year_sd = 0.2;
    double noise_sd = 0.3;
    double effect_corr = 0.0;  // corr(entity effect, entity mean of lnCAPINT)
  } productivity;

  struct Treatment {
    double intercept = -0.3;
    double emp = 0.5;
    double shift = 0.0;  // location effect on lnVA for GREEN = 1
    double scale = 1.0;  // noise sd multiplier for GREEN = 1
  } treatment;

  void validate() const {
    if (n_entities < 1 || n_periods < 1) throw ValidationError("dgp: need >= 1 entity and period");
    if (!(std::abs(selection.rho) <= 1.0)) throw ValidationError("dgp: |rho_sel| must be <= 1");
    if (!(std::abs(productivity.effect_corr) <= 1.0))
      throw ValidationError("dgp: |effect_corr| must be <= 1");
    for (double sd : {rd.noise_sd, counts.entity_sd, counts.year_sd, productivity.entity_sd,
                      productivity.year_sd, productivity.noise_sd})
      if (!(sd >= 0.0)) throw ValidationError("dgp: standard deviations must be >= 0");
    if (!(counts.alpha >= 0.0)) throw ValidationError("dgp: alpha must be >= 0");
    if (!(counts.green_share > 0.0 && counts.green_share < 1.0))
      throw ValidationError("dgp: green_share must lie in (0, 1)");
    if (!(treatment.scale > 0.0)) throw ValidationError("dgp: treatment scale must be > 0");
  }
};

namespace detail {

inline std::string entity_name(int i) {
  std::string s = std::to_string(i);
  return "F" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

inline void put_true(std::vector<std::pair<std::string, std::string>>& meta, const std::string& estimator,
                     const std::string& coef, double v) {
  meta.emplace_back("true:" + estimator + ":" + coef, format_double(v));
}

}  // namespace detail

// Deterministic in cfg (including seed). True parameters are recorded in the
// metadata as "true:<estimator>:<coefficient>", with coefficient names as the
// estimators report them.
inline PanelDataset generate_panel(const DgpConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int N = cfg.n_entities, T = cfg.n_periods;
  const auto& S = cfg.selection;
  const auto& R = cfg.rd;
  const auto& C = cfg.counts;
  const auto& P = cfg.productivity;
  const auto& G = cfg.treatment;

  // Year effects span T + 1 periods: index 0 is the unobserved period before
  // the first row, feeding the first observed lnVA.
  std::vector<double> count_year(static_cast<std::size_t>(T + 1)), prod_year(static_cast<std::size_t>(T + 1));
  for (int t = 0; t <= T; ++t) {
    count_year[static_cast<std::size_t>(t)] = t == 0 ? 0.0 : rng.normal(0.0, C.year_sd);
    prod_year[static_cast<std::size_t>(t)] = t == 0 ? 0.0 : rng.normal(0.0, P.year_sd);
  }

  std::vector<PanelDataset::Key> keys;
  const std::vector<std::string> names = {
      "REGION", "SOE", "HIGHPOL", "lnPPC",  "lnIPT",     "EPD",      "DSTAR", "RD", "RDINT",
      "RDINT_star", "EMP", "lnEMP", "lnCAPINT", "PAT", "ECO",  "NECO",     "lnPATINT",
      "lnECOINT", "lnNECOINT", "GREEN", "lnVA"};
  std::vector<std::vector<double>> cols(names.size());
  auto push = [&](std::size_t c, double v) { cols[c].push_back(v); };

  const double corr = P.effect_corr;
  for (int i = 0; i < N; ++i) {
    const double region = static_cast<double>(1 + rng.index(5));
    const double soe = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const double highpol = rng.bernoulli(0.35) ? 1.0 : 0.0;
    const double ppc_i = rng.normal(0.0, 0.6);
    const double size_i = rng.normal(0.8, 0.7);
    const double cap_i = rng.normal();  // entity mean component of lnCAPINT
    const double share_i = rng.normal(0.0, 0.5);
    const double eta = rng.normal(0.0, C.entity_sd);
    const double a_i = P.entity_sd * (corr * cap_i + std::sqrt(1.0 - corr * corr) * rng.normal());

    double prev_fitted = 0.0;  // stage-3 index from the previous period
    for (int t = 0; t <= T; ++t) {
      const double ppc = ppc_i + rng.normal(0.0, 0.8);
      const double ipt = rng.normal();
      const double epd = rng.normal();
      const double e = rng.normal();
      const double u = R.noise_sd * (S.rho * e + std::sqrt(1.0 - S.rho * S.rho) * rng.normal());
      const double dstar = S.intercept + S.ppc * ppc + S.ipt * ipt + S.exclusion * epd + e;
      const double rd = dstar > 0.0 ? 1.0 : 0.0;
      const double rdint_star = R.intercept + R.ppc * ppc + R.ipt * ipt + u;

      const double lnemp = size_i + rng.normal(0.0, 0.3);
      const double emp = std::exp(lnemp);
      const double lncap = cap_i + rng.normal(0.0, 0.7);
      const double mu = std::exp(C.intercept + C.rdint * rdint_star + C.emp * lnemp + eta +
                                 count_year[static_cast<std::size_t>(t)]);
      const double pi = 1.0 / (1.0 + std::exp(-(std::log(C.green_share / (1.0 - C.green_share)) +
                                                share_i + rng.normal(0.0, 0.5))));
      const double frailty = C.alpha > 0.0 ? rng.gamma(1.0 / C.alpha, C.alpha) : 1.0;
      const double eco = static_cast<double>(rng.poisson(frailty * mu * pi));
      const double neco = static_cast<double>(rng.poisson(frailty * mu * (1.0 - pi)));
      const double lnpatint = std::log(mu / emp);
      const double lnecoint = std::log(mu * pi / emp);
      const double lnnecoint = std::log(mu * (1.0 - pi) / emp);
      const double green = rng.bernoulli(stats::normal_cdf(G.intercept + G.emp * lnemp)) ? 1.0 : 0.0;
      const double noise_sd = P.noise_sd * (green == 1.0 ? G.scale : 1.0);
      const double lnva = prev_fitted + a_i + prod_year[static_cast<std::size_t>(t)] +
                          G.shift * green + rng.normal(0.0, noise_sd);
      prev_fitted = P.capint * lncap + P.emp * lnemp +
                    (P.extended ? P.neco * lnnecoint + P.eco * lnecoint : P.patent * lnpatint);
      if (t == 0) continue;

      keys.push_back({detail::entity_name(i), cfg.first_year + t - 1});
      const double row[] = {region, soe, highpol, ppc, ipt, epd, dstar, rd, rd == 1.0 ? rdint_star : kMissing,
                            rdint_star, emp, lnemp, lncap, eco + neco, eco, neco, lnpatint,
                            lnecoint, lnnecoint, green, lnva};
      for (std::size_t c = 0; c < names.size(); ++c) push(c, row[c]);
    }
  }

  std::vector<std::pair<std::string, std::vector<double>>> columns;
  for (std::size_t c = 0; c < names.size(); ++c) columns.emplace_back(names[c], std::move(cols[c]));
  PanelDataset ds = PanelDataset::build(keys, std::move(columns), "firm", "year");

  std::vector<std::pair<std::string, std::string>> meta;
  for (const char* est : {"heckman", "naive_ols"}) {
    detail::put_true(meta, est, "lnPPC", R.ppc);
    detail::put_true(meta, est, "lnIPT", R.ipt);
    detail::put_true(meta, est, "_cons", R.intercept);
  }
  detail::put_true(meta, "heckman", "IMR", S.rho * R.noise_sd);
  detail::put_true(meta, "probit", "lnPPC", S.ppc);
  detail::put_true(meta, "probit", "lnIPT", S.ipt);
  detail::put_true(meta, "probit", "EPD", S.exclusion);
  detail::put_true(meta, "probit", "_cons", S.intercept);
  for (const char* est : {"poisson_fe", "nb2"}) {
    detail::put_true(meta, est, "RDINT_star", C.rdint);
    detail::put_true(meta, est, "lnEMP", C.emp);
  }
  if (C.alpha > 0.0) detail::put_true(meta, "nb2", "lnalpha", std::log(C.alpha));
  if (P.extended) {
    detail::put_true(meta, "fe_ols", "lnNECOINT", P.neco);
    detail::put_true(meta, "fe_ols", "lnECOINT", P.eco);
  } else {
    detail::put_true(meta, "fe_ols", "lnPATINT", P.patent);
  }
  detail::put_true(meta, "fe_ols", "lnCAPINT", P.capint);
  detail::put_true(meta, "fe_ols", "lnEMP", P.emp);
  meta.emplace_back("dgp:seed", std::to_string(cfg.seed));
  meta.emplace_back("dgp:rho_sel", detail::format_double(S.rho));
  meta.emplace_back("dgp:effect_corr", detail::format_double(P.effect_corr));
  meta.emplace_back("dgp:treatment_shift", detail::format_double(G.shift));
  meta.emplace_back("dgp:treatment_scale", detail::format_double(G.scale));
  meta.emplace_back("source", "synthetic");
  for (auto& [k, v] : meta) ds = ds.with_meta(k, v);
  return ds;
}

}  // namespace cdmkit
