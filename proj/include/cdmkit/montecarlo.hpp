#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdmkit/count.hpp"
#include "cdmkit/heckman.hpp"
#include "cdmkit/parallel.hpp"
#include "cdmkit/productivity.hpp"
#include "cdmkit/synth.hpp"

namespace cdmkit {

// One replication's output: a fit whose coefficient names match the DGP's
// "true:<estimator>:<name>" metadata, and optionally a test p-value.
struct McDraw {
  FitResult fit;
  std::optional<double> test_p;
};

struct McEstimator {
  std::string name;
  std::string test_name;  // empty when the estimator carries no test
  std::function<McDraw(const PanelDataset&, const DgpConfig&)> run;
};

struct ParamReport {
  std::string name;
  double truth = 0.0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double mc_se = 0.0;  // sd of estimates / sqrt(R)
  double rmse = 0.0;
  double mean_se = 0.0;
  std::optional<double> coverage;  // 95% CI; not applicable when R = 1
};

struct McReport {
  std::string estimator;
  int reps = 0;
  std::uint64_t seed = 0;
  std::size_t failures = 0;
  std::vector<ParamReport> params;
  std::string test_name;
  std::optional<double> rejection_rate;  // at 5%
};

namespace detail {

inline HeckmanSpec mc_heckman_spec() {
  HeckmanSpec s;
  s.outcome = "RDINT";
  s.selection = "RD";
  s.outcome_regressors = {"lnPPC", "lnIPT"};
  s.exclusion_restrictions = {"EPD"};
  return s;
}

inline ProdSpec mc_prod_spec(const DgpConfig& cfg) {
  ProdSpec s;
  s.outcome = "lnVA";
  s.patent_regressors = cfg.productivity.extended ? std::vector<std::string>{"lnNECOINT", "lnECOINT"}
                                                  : std::vector<std::string>{"lnPATINT"};
  s.controls = {"lnCAPINT", "lnEMP"};
  s.vcov = VcovSpec::analytic();
  return s;
}

inline CountSpec mc_count_spec(CountFamily fam) {
  CountSpec s;
  s.dependent = "PAT";
  s.regressors = {"RDINT_star", "lnEMP"};
  s.family = fam;
  return s;
}

}  // namespace detail

inline const std::map<std::string, McEstimator>& mc_estimators() {
  static const std::map<std::string, McEstimator> reg = [] {
    std::map<std::string, McEstimator> m;
    m["heckman"] = {"heckman", "lambda = 0", [](const PanelDataset& ds, const DgpConfig&) {
                      auto h = heckman_two_step(ds, detail::mc_heckman_spec());
                      return McDraw{h.outcome, h.outcome.pvalue(kImrName)};
                    }};
    m["naive_ols"] = {"naive_ols", "", [](const PanelDataset& ds, const DgpConfig&) {
                        return McDraw{ols_fit(ds, ModelSpec{"RDINT", {"lnPPC", "lnIPT"}}), std::nullopt};
                      }};
    m["probit"] = {"probit", "", [](const PanelDataset& ds, const DgpConfig&) {
                     return McDraw{probit_fit(ds, "RD", {"lnPPC", "lnIPT", "EPD"}), std::nullopt};
                   }};
    m["poisson_fe"] = {"poisson_fe", "", [](const PanelDataset& ds, const DgpConfig&) {
                         return McDraw{count_fit(ds, detail::mc_count_spec(CountFamily::PoissonFe)).base, std::nullopt};
                       }};
    m["nb2"] = {"nb2", "", [](const PanelDataset& ds, const DgpConfig&) {
                  return McDraw{count_fit(ds, detail::mc_count_spec(CountFamily::Nb2)).base, std::nullopt};
                }};
    m["fe_ols"] = {"fe_ols", "", [](const PanelDataset& ds, const DgpConfig& cfg) {
                     return McDraw{fe_ols(ds, detail::mc_prod_spec(cfg)), std::nullopt};
                   }};
    m["mundlak"] = {"mundlak", "mundlak", [](const PanelDataset& ds, const DgpConfig& cfg) {
                      auto r = mundlak_test(ds, detail::mc_prod_spec(cfg));
                      return McDraw{r.re_fit, r.p};
                    }};
    return m;
  }();
  return reg;
}

// R generate-and-fit cycles; replication r uses DGP seed stream_seed(seed, r).
// Failed replications are excluded and counted; more than 10% is an error.
inline McReport monte_carlo(const DgpConfig& cfg, const McEstimator& est, int reps, std::uint64_t seed,
                            unsigned jobs = 1) {
  if (reps < 1) throw ValidationError("monte_carlo: reps must be >= 1");
  cfg.validate();
  const auto R = static_cast<std::size_t>(reps);
  std::vector<std::optional<McDraw>> draws(R);
  std::vector<std::map<std::string, std::string>> metas(R);
  parallel_for(R, jobs, [&](std::size_t r) {
    try {
      DgpConfig c = cfg;
      c.seed = stream_seed(seed, r);
      const PanelDataset ds = generate_panel(c);
      metas[r] = ds.meta();
      draws[r] = est.run(ds, c);
    } catch (const std::exception&) {
      // counted below
    }
  });

  McReport rep;
  rep.estimator = est.name;
  rep.reps = reps;
  rep.seed = seed;
  rep.test_name = est.test_name;
  std::vector<std::size_t> ok;
  for (std::size_t r = 0; r < R; ++r) (draws[r] ? ok.push_back(r) : void(++rep.failures));
  if (ok.empty()) throw Error("monte_carlo: all " + std::to_string(R) + " replications of '" + est.name + "' failed");
  if (static_cast<double>(rep.failures) > 0.1 * static_cast<double>(R))
    throw Error("monte_carlo: " + std::to_string(rep.failures) + " of " + std::to_string(R) + " replications of '" +
                est.name + "' failed (limit 10%)");

  const std::string prefix = "true:" + est.name + ":";
  const double z = stats::normal_quantile(0.975);
  for (const auto& [key, value] : metas[ok.front()]) {
    if (key.rfind(prefix, 0) != 0) continue;
    ParamReport p;
    p.name = key.substr(prefix.size());
    p.truth = std::stod(value);
    if (!draws[ok.front()]->fit.has(p.name)) continue;
    double sum = 0.0, sq = 0.0, se_sum = 0.0;
    std::size_t covered = 0;
    for (std::size_t r : ok) {
      const FitResult& f = draws[r]->fit;
      const double b = f.b(p.name), s = f.se(p.name);
      sum += b;
      sq += (b - p.truth) * (b - p.truth);
      se_sum += s;
      if (std::abs(b - p.truth) <= z * s) ++covered;
    }
    const double n = static_cast<double>(ok.size());
    p.mean_estimate = sum / n;
    p.bias = p.mean_estimate - p.truth;
    p.rmse = std::sqrt(sq / n);
    p.mean_se = se_sum / n;
    double var = 0.0;
    for (std::size_t r : ok) {
      const double d = draws[r]->fit.b(p.name) - p.mean_estimate;
      var += d * d;
    }
    p.mc_se = ok.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
    if (ok.size() > 1) p.coverage = static_cast<double>(covered) / n;
    rep.params.push_back(p);
  }
  if (!est.test_name.empty()) {
    std::size_t rejected = 0, tested = 0;
    for (std::size_t r : ok)
      if (draws[r]->test_p && !is_missing(*draws[r]->test_p)) {
        ++tested;
        if (*draws[r]->test_p < 0.05) ++rejected;
      }
    if (tested > 0) rep.rejection_rate = static_cast<double>(rejected) / static_cast<double>(tested);
  }
  return rep;
}

inline McReport monte_carlo(const DgpConfig& cfg, const std::string& estimator, int reps, std::uint64_t seed,
                            unsigned jobs = 1) {
  const auto& reg = mc_estimators();
  auto it = reg.find(estimator);
  if (it == reg.end()) {
    std::string known;
    for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
    throw ValidationError("monte_carlo: unknown estimator '" + estimator + "' (known: " + known + ")");
  }
  return monte_carlo(cfg, it->second, reps, seed, jobs);
}

}  // namespace cdmkit
