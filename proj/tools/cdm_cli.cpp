#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdmkit/montecarlo.hpp"
#include "cdmkit/pipeline.hpp"

using namespace cdmkit;

namespace {

void add_dgp_options(CLI::App* app, DgpConfig& c) {
  app->add_option("--entities", c.n_entities, "number of firms")->check(CLI::PositiveNumber);
  app->add_option("--periods", c.n_periods, "years per firm")->check(CLI::PositiveNumber);
  app->add_option("--first-year", c.first_year, "first calendar year");
  app->add_option("--rho", c.selection.rho, "selection-error correlation")->check(CLI::Range(-1.0, 1.0));
  app->add_option("--alpha", c.counts.alpha, "NB2 overdispersion (0 gives Poisson)")->check(CLI::NonNegativeNumber);
  app->add_option("--effect-corr", c.productivity.effect_corr, "entity effect correlation with lnCAPINT")
      ->check(CLI::Range(-1.0, 1.0));
  app->add_flag("--extended", c.productivity.extended, "green/non-green productivity form");
  app->add_option("--treatment-shift", c.treatment.shift, "lnVA location effect of GREEN");
  app->add_option("--treatment-scale", c.treatment.scale, "lnVA noise scale for GREEN")->check(CLI::PositiveNumber);
}

json report_json(const McReport& r) {
  json params = json::array();
  for (const auto& p : r.params)
    params.push_back({{"name", p.name},
                      {"truth", p.truth},
                      {"mean_estimate", p.mean_estimate},
                      {"bias", p.bias},
                      {"mc_se", p.mc_se},
                      {"rmse", p.rmse},
                      {"mean_se", p.mean_se},
                      {"coverage", p.coverage ? json(*p.coverage) : json(nullptr)}});
  json j{{"estimator", r.estimator}, {"reps", r.reps}, {"seed", r.seed}, {"failures", r.failures}, {"params", params}};
  if (!r.test_name.empty()) {
    j["test"] = r.test_name;
    j["rejection_rate"] = r.rejection_rate ? json(*r.rejection_rate) : json(nullptr);
  }
  return j;
}

void print_report(const McReport& r) {
  std::printf("%s: %d replications (seed %llu), %zu failed\n", r.estimator.c_str(), r.reps,
              static_cast<unsigned long long>(r.seed), r.failures);
  std::printf("%-14s %10s %10s %10s %10s %10s %10s %9s\n", "parameter", "truth", "mean", "bias", "mc_se", "rmse",
              "mean_se", "coverage");
  for (const auto& p : r.params)
    std::printf("%-14s %10.4f %10.4f %10.4f %10.4f %10.4f %10.4f %9s\n", p.name.c_str(), p.truth, p.mean_estimate,
                p.bias, p.mc_se, p.rmse, p.mean_se, p.coverage ? detail::fixed(*p.coverage, 3).c_str() : "n/a");
  if (!r.test_name.empty() && r.rejection_rate)
    std::printf("%s: rejection rate at 5%% = %.3f\n", r.test_name.c_str(), *r.rejection_rate);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CDM panel pipeline: Heckman R&D, patent counts, productivity, quantile effects"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run the pipeline from a JSON configuration");
  std::string config_path;
  std::vector<std::string> stages;
  RunOptions opt;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string output_dir;
  run->add_option("config", config_path, "configuration file")->required()->check(CLI::ExistingFile);
  auto* stages_opt = run->add_option("--stages", stages, "subset of stage1,stage2,stage3,uqr,treat,cqr")->delimiter(',');
  auto* seed_opt = run->add_option("--seed", seed, "override the configured seed");
  auto* jobs_opt = run->add_option("--jobs", jobs, "worker threads (0 = all cores)");
  auto* out_opt = run->add_option("--output-dir", output_dir, "override the output directory");

  auto* sim = app.add_subcommand("simulate", "write a synthetic firm panel as CSV");
  DgpConfig sim_cfg;
  std::string sim_out;
  add_dgp_options(sim, sim_cfg);
  sim->add_option("--seed", sim_cfg.seed, "generator seed");
  sim->add_option("-o,--out", sim_out, "output CSV path")->required();

  auto* mc = app.add_subcommand("montecarlo", "Monte Carlo study of one estimator on the synthetic panel");
  DgpConfig mc_cfg;
  std::string estimator, mc_out;
  int reps = 200;
  std::uint64_t mc_seed = 1;
  unsigned mc_jobs = 1;
  add_dgp_options(mc, mc_cfg);
  std::string known;
  for (const auto& [k, v] : mc_estimators()) known += (known.empty() ? "" : ", ") + k;
  mc->add_option("-e,--estimator", estimator, "one of: " + known)->required();
  mc->add_option("-r,--reps", reps, "replications")->check(CLI::PositiveNumber);
  mc->add_option("--seed", mc_seed, "master seed");
  mc->add_option("--jobs", mc_jobs, "worker threads (0 = all cores)");
  mc->add_option("-o,--out", mc_out, "write the report as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      if (*stages_opt) opt.stages = stages;
      if (*seed_opt) opt.seed = seed;
      if (*jobs_opt) opt.jobs = jobs;
      if (*out_opt) opt.output_dir = output_dir;
      const PipelineConfig cfg = load_config(config_path, opt);
      const auto res = run_pipeline(cfg);
      for (const auto& s : res.stages) {
        std::size_t n = 0;
        for (const auto& [k, v] : s.n) n = std::max(n, v);
        std::printf("%-7s %-16s %s  N=%zu\n", s.stage.c_str(), s.subsample.c_str(), s.status.c_str(), n);
      }
      std::printf("outputs in %s\n", res.output_dir.string().c_str());
    } else if (*sim) {
      const PanelDataset ds = generate_panel(sim_cfg);
      std::ostringstream os;
      write_csv(os, ds);
      write_atomic(sim_out, os.str());
      std::printf("wrote %zu rows for %zu firms to %s\n", ds.n_rows(), ds.n_entities(), sim_out.c_str());
    } else if (*mc) {
      const McReport r = monte_carlo(mc_cfg, estimator, reps, mc_seed, mc_jobs);
      print_report(r);
      if (!mc_out.empty()) write_atomic(mc_out, report_json(r).dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
