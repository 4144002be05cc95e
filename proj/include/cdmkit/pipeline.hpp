#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cdmkit/count.hpp"
#include "cdmkit/cqr.hpp"
#include "cdmkit/heckman.hpp"
#include "cdmkit/panel.hpp"
#include "cdmkit/parallel.hpp"
#include "cdmkit/productivity.hpp"
#include "cdmkit/rif.hpp"
#include "cdmkit/synth.hpp"
#include "cdmkit/tables.hpp"

namespace cdmkit {

inline constexpr const char* kVersion = "0.1.0";

using json = nlohmann::json;

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> s{"stage1", "stage2", "stage3", "uqr", "treat", "cqr"};
  return s;
}

struct StageError : Error {
  StageError(std::string stage, std::string subsample, const std::string& what)
      : Error("stage '" + stage + "' failed on subsample '" + subsample + "': " + what),
        stage_(std::move(stage)),
        subsample_(std::move(subsample)) {}
  const std::string& stage() const noexcept { return stage_; }
  const std::string& subsample() const noexcept { return subsample_; }

 private:
  std::string stage_, subsample_;
};

// ---------------------------------------------------------------------------
// Configuration

struct Stage1Config {
  HeckmanSpec spec;
  std::string vcov = "bootstrap";
  std::string prediction = "RDINT_hat";
};

struct CountDependent {
  std::string label;   // PAT, ECO, NECO
  std::string column;  // the (rolling-average) count column
  std::string prediction() const { return label + "_hat"; }
  std::string intensity() const { return "ln" + label + "INT_hat"; }
};

struct Stage2Config {
  std::vector<CountDependent> dependents;
  std::vector<std::string> regressors;
  std::vector<CountFamily> families{CountFamily::PoissonFe, CountFamily::Nb2};
  CountFamily predict_family = CountFamily::Nb2;
  CountRounding rounding = CountRounding::Nearest;
  std::string vcov = "analytic";
  std::string employees = "EMP";
  double epsilon = 0.001;
};

struct Stage3Config {
  std::string outcome;
  bool lead = true;
  std::vector<std::string> classical, extended, controls;
  std::string vcov = "bootstrap";
  bool mundlak = true;
};

struct QuantileModel {
  std::string name;
  std::vector<std::string> regressors;
};

struct UqrConfig {
  std::string dependent;
  std::vector<QuantileModel> models;
  QuantileSpec quantiles;
  std::vector<std::string> fe{"entity", "year"};
};

struct TreatConfig {
  std::string dependent;
  TreatmentSpec spec;
  QuantileSpec quantiles;
  std::vector<Weighting> weightings{Weighting::None, Weighting::Ipw};
};

struct CqrConfig {
  std::string dependent;
  std::vector<QuantileModel> models;
  double tau = 0.5;
  std::vector<std::string> fe{"entity", "year"};
};

struct Subsample {
  std::string name;
  std::string filter;  // empty keeps every row
};

struct PipelineConfig {
  std::string input_path;
  std::string entity_col = "firm";
  std::string year_col = "year";
  std::optional<DgpConfig> simulate;
  std::vector<DeriveRule> derives;
  std::vector<Subsample> subsamples{{"full", ""}};
  std::vector<std::string> stages;
  std::optional<Stage1Config> stage1;
  std::optional<Stage2Config> stage2;
  std::optional<Stage3Config> stage3;
  std::optional<UqrConfig> uqr;
  std::optional<TreatConfig> treat;
  std::optional<CqrConfig> cqr;
  int bootstrap_reps = 200;
  std::uint64_t seed = 12345;
  unsigned jobs = 1;
  std::string output_dir = "output";
  TableStyle tables;
  std::filesystem::path base_dir;  // relative input paths resolve here
  json source;                     // effective configuration document

  VcovSpec vcov(const std::string& kind, const std::string& where) const {
    if (kind == "analytic") return VcovSpec::analytic();
    if (kind == "robust") return VcovSpec::robust();
    if (kind == "bootstrap") return VcovSpec::bootstrap(bootstrap_reps, seed, "entity", jobs);
    throw ValidationError("config: " + where + ".vcov must be analytic, robust or bootstrap (got '" + kind + "')");
  }
};

struct RunOptions {
  std::optional<std::vector<std::string>> stages;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::string> output_dir;
};

namespace detail {

inline void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw ValidationError("config: unknown key '" + it.key() + "' in '" + where + "'");
}

template <class T>
T get_or(const json& j, const char* key, T def, const std::string& where) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config: " + where + "." + key + ": " + e.what());
  }
}

template <class T>
T get_req(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError("config: " + where + "." + key + " is required");
  return get_or<T>(j, key, T{}, where);
}

using Strings = std::vector<std::string>;

inline CountFamily parse_family(const std::string& s) {
  if (s == "poisson_fe") return CountFamily::PoissonFe;
  if (s == "nb2") return CountFamily::Nb2;
  throw ValidationError("config: unknown count family '" + s + "' (poisson_fe, nb2)");
}

inline QuantileSpec parse_quantiles(const json& j, const std::string& where) {
  QuantileSpec q;
  q.taus = get_or<std::vector<double>>(j, "taus", default_taus(), where);
  if (j.contains("bandwidth")) {
    const json& b = j.at("bandwidth");
    if (b.is_string() && b.get<std::string>() == "silverman") q.bandwidth = Bandwidth::silverman();
    else if (b.is_number()) q.bandwidth = Bandwidth::fixed(b.get<double>());
    else throw ValidationError("config: " + where + ".bandwidth must be \"silverman\" or a number");
  }
  q.validate();
  return q;
}

inline std::vector<QuantileModel> parse_models(const json& j, const std::string& where) {
  if (!j.contains("models") || !j.at("models").is_array() || j.at("models").empty())
    throw ValidationError("config: " + where + ".models must be a non-empty array");
  std::vector<QuantileModel> out;
  for (const auto& m : j.at("models")) {
    allow_keys(m, where + ".models", {"name", "regressors"});
    out.push_back({get_req<std::string>(m, "name", where + ".models"),
                   get_req<Strings>(m, "regressors", where + ".models")});
  }
  return out;
}

inline DeriveRule parse_derive(const json& j) {
  allow_keys(j, "derives", {"kind", "source", "sources", "target", "periods", "shift", "predicate"});
  const auto kind = get_req<std::string>(j, "kind", "derives");
  const auto target = get_req<std::string>(j, "target", "derives");
  auto src = [&] { return get_req<std::string>(j, "source", "derives"); };
  const int periods = get_or<int>(j, "periods", 1, "derives");
  if (kind == "lag") return DeriveRule::lag(src(), periods, target);
  if (kind == "lead") return DeriveRule::lead(src(), periods, target);
  if (kind == "rolling_mean") return DeriveRule::rolling_mean(src(), periods, target);
  if (kind == "log") return DeriveRule::log(src(), target);
  if (kind == "log_shift") return DeriveRule::log_shift(src(), get_or<double>(j, "shift", 1.0, "derives"), target);
  if (kind == "ratio") {
    const auto s = get_req<Strings>(j, "sources", "derives");
    if (s.size() != 2) throw ValidationError("config: ratio derive needs two sources");
    return DeriveRule::ratio(s[0], s[1], target);
  }
  if (kind == "indicator") return DeriveRule::indicator(get_req<std::string>(j, "predicate", "derives"), target);
  throw ValidationError("config: unknown derive kind '" + kind + "'");
}

inline DgpConfig parse_dgp(const json& j, std::uint64_t seed) {
  allow_keys(j, "input.simulate",
             {"n_entities", "n_periods", "first_year", "seed", "rho", "alpha", "effect_corr", "extended",
              "treatment_shift", "treatment_scale"});
  DgpConfig c;
  const std::string w = "input.simulate";
  c.n_entities = get_or<int>(j, "n_entities", c.n_entities, w);
  c.n_periods = get_or<int>(j, "n_periods", c.n_periods, w);
  c.first_year = get_or<int>(j, "first_year", c.first_year, w);
  c.seed = get_or<std::uint64_t>(j, "seed", seed, w);
  c.selection.rho = get_or<double>(j, "rho", c.selection.rho, w);
  c.counts.alpha = get_or<double>(j, "alpha", c.counts.alpha, w);
  c.productivity.effect_corr = get_or<double>(j, "effect_corr", c.productivity.effect_corr, w);
  c.productivity.extended = get_or<bool>(j, "extended", c.productivity.extended, w);
  c.treatment.shift = get_or<double>(j, "treatment_shift", c.treatment.shift, w);
  c.treatment.scale = get_or<double>(j, "treatment_scale", c.treatment.scale, w);
  c.validate();
  return c;
}

inline TableStyle parse_tables(const json& j) {
  allow_keys(j, "tables", {"stars", "beneath", "digits"});
  TableStyle t;
  if (j.contains("stars")) {
    const json& s = j.at("stars");
    if (s.is_string()) {
      t.stars = StarStyle::named(s.get<std::string>());
    } else if (s.is_array()) {
      std::vector<std::pair<double, std::string>> th;
      for (const auto& e : s) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_string())
          throw ValidationError("config: tables.stars entries must be [p, marker]");
        th.emplace_back(e[0].get<double>(), e[1].get<std::string>());
      }
      t.stars = StarStyle::custom(std::move(th));
    } else {
      throw ValidationError("config: tables.stars must be a style name or [[p, marker], ...]");
    }
  }
  const auto beneath = get_or<std::string>(j, "beneath", "se", "tables");
  if (beneath == "se") t.beneath = TableStyle::Beneath::Se;
  else if (beneath == "t") t.beneath = TableStyle::Beneath::T;
  else throw ValidationError("config: unknown tables.beneath '" + beneath + "' (se, t)");
  t.digits = get_or<int>(j, "digits", 3, "tables");
  if (t.digits < 0 || t.digits > 10) throw ValidationError("config: tables.digits must lie in [0, 10]");
  return t;
}

}  // namespace detail

// Applies command-line overrides to a configuration document so the
// effective document alone reproduces the run.
inline json apply_overrides(json doc, const RunOptions& opt) {
  if (opt.stages) doc["stages"] = *opt.stages;
  if (opt.seed) doc["seed"] = *opt.seed;
  if (opt.jobs) doc["jobs"] = *opt.jobs;
  if (opt.output_dir) doc["output_dir"] = *opt.output_dir;
  return doc;
}

inline PipelineConfig parse_config(const json& doc, std::filesystem::path base_dir = {}) {
  using namespace detail;
  allow_keys(doc, "config",
             {"input", "derives", "subsamples", "stages", "stage1", "stage2", "stage3", "uqr", "treat", "cqr",
              "bootstrap", "seed", "jobs", "output_dir", "tables"});
  PipelineConfig c;
  c.source = doc;
  c.base_dir = std::move(base_dir);
  c.seed = get_or<std::uint64_t>(doc, "seed", c.seed, "config");
  c.jobs = get_or<unsigned>(doc, "jobs", c.jobs, "config");
  c.output_dir = get_or<std::string>(doc, "output_dir", c.output_dir, "config");
  if (doc.contains("bootstrap")) {
    allow_keys(doc["bootstrap"], "bootstrap", {"replications"});
    c.bootstrap_reps = get_or<int>(doc["bootstrap"], "replications", c.bootstrap_reps, "bootstrap");
    if (c.bootstrap_reps < 1) throw ValidationError("config: bootstrap.replications must be >= 1");
  }

  if (!doc.contains("input")) throw ValidationError("config: input section is required");
  const json& in = doc["input"];
  allow_keys(in, "input", {"path", "entity", "year", "simulate"});
  c.entity_col = get_or<std::string>(in, "entity", c.entity_col, "input");
  c.year_col = get_or<std::string>(in, "year", c.year_col, "input");
  if (in.contains("simulate") == in.contains("path"))
    throw ValidationError("config: input needs exactly one of 'path' or 'simulate'");
  if (in.contains("path")) c.input_path = in["path"].get<std::string>();
  else c.simulate = parse_dgp(in["simulate"], c.seed);

  if (doc.contains("derives"))
    for (const auto& d : doc["derives"]) c.derives.push_back(parse_derive(d));
  if (doc.contains("subsamples")) {
    c.subsamples.clear();
    std::set<std::string> seen;
    for (const auto& s : doc["subsamples"]) {
      allow_keys(s, "subsamples", {"name", "filter"});
      Subsample sub{get_req<std::string>(s, "name", "subsamples"), get_or<std::string>(s, "filter", "", "subsamples")};
      if (sub.name.empty() || sub.name.find_first_of("/\\ ") != std::string::npos)
        throw ValidationError("config: subsample name '" + sub.name + "' must be non-empty without spaces or slashes");
      if (!seen.insert(sub.name).second) throw ValidationError("config: duplicate subsample '" + sub.name + "'");
      if (!sub.filter.empty()) Expr::parse(sub.filter);
      c.subsamples.push_back(sub);
    }
    if (c.subsamples.empty()) throw ValidationError("config: subsamples must not be empty");
  }

  if (doc.contains("stage1")) {
    const json& j = doc["stage1"];
    const std::string w = "stage1";
    allow_keys(j, w, {"outcome", "selection", "regressors", "exclusions", "fe", "vcov", "prediction"});
    Stage1Config s;
    s.spec.outcome = get_req<std::string>(j, "outcome", w);
    s.spec.selection = get_req<std::string>(j, "selection", w);
    s.spec.outcome_regressors = get_req<Strings>(j, "regressors", w);
    s.spec.exclusion_restrictions = get_or<Strings>(j, "exclusions", {}, w);
    s.spec.fe_dims = get_or<Strings>(j, "fe", {"year"}, w);
    s.vcov = get_or<std::string>(j, "vcov", s.vcov, w);
    s.spec.vcov = c.vcov(s.vcov, w);
    s.prediction = get_or<std::string>(j, "prediction", s.prediction, w);
    c.stage1 = s;
  }
  if (doc.contains("stage2")) {
    const json& j = doc["stage2"];
    const std::string w = "stage2";
    allow_keys(j, w, {"dependents", "regressors", "families", "predict_family", "rounding", "vcov", "employees",
                      "epsilon"});
    Stage2Config s;
    if (!j.contains("dependents") || !j["dependents"].is_array() || j["dependents"].empty())
      throw ValidationError("config: stage2.dependents must be a non-empty array");
    for (const auto& d : j["dependents"]) {
      if (d.is_string()) {
        s.dependents.push_back({d.get<std::string>(), d.get<std::string>()});
      } else {
        allow_keys(d, "stage2.dependents", {"label", "column"});
        s.dependents.push_back({get_req<std::string>(d, "label", "stage2.dependents"),
                                get_req<std::string>(d, "column", "stage2.dependents")});
      }
    }
    s.regressors = get_req<Strings>(j, "regressors", w);
    if (j.contains("families")) {
      s.families.clear();
      for (const auto& f : get_req<Strings>(j, "families", w)) s.families.push_back(parse_family(f));
      if (s.families.empty()) throw ValidationError("config: stage2.families must not be empty");
    }
    s.predict_family = parse_family(get_or<std::string>(j, "predict_family", "nb2", w));
    if (std::find(s.families.begin(), s.families.end(), s.predict_family) == s.families.end())
      throw ValidationError("config: stage2.predict_family must be one of stage2.families");
    const auto rounding = get_or<std::string>(j, "rounding", "nearest", w);
    if (rounding == "nearest") s.rounding = CountRounding::Nearest;
    else if (rounding == "exact") s.rounding = CountRounding::Exact;
    else throw ValidationError("config: stage2.rounding must be nearest or exact");
    s.vcov = get_or<std::string>(j, "vcov", s.vcov, w);
    c.vcov(s.vcov, w);
    s.employees = get_or<std::string>(j, "employees", s.employees, w);
    s.epsilon = get_or<double>(j, "epsilon", s.epsilon, w);
    if (!(s.epsilon > 0.0)) throw ValidationError("config: stage2.epsilon must be > 0");
    c.stage2 = s;
  }
  if (doc.contains("stage3")) {
    const json& j = doc["stage3"];
    const std::string w = "stage3";
    allow_keys(j, w, {"outcome", "lead", "classical", "extended", "controls", "vcov", "mundlak"});
    Stage3Config s;
    s.outcome = get_req<std::string>(j, "outcome", w);
    s.lead = get_or<bool>(j, "lead", s.lead, w);
    s.classical = get_or<Strings>(j, "classical", {}, w);
    s.extended = get_or<Strings>(j, "extended", {}, w);
    s.controls = get_or<Strings>(j, "controls", {}, w);
    if (s.classical.empty() && s.extended.empty())
      throw ValidationError("config: stage3 needs a classical or an extended model");
    if (!s.classical.empty() && s.classical.size() != 1)
      throw ValidationError("config: stage3.classical takes one patent regressor");
    if (!s.extended.empty() && s.extended.size() != 2)
      throw ValidationError("config: stage3.extended takes two patent regressors");
    s.vcov = get_or<std::string>(j, "vcov", s.vcov, w);
    c.vcov(s.vcov, w);
    s.mundlak = get_or<bool>(j, "mundlak", s.mundlak, w);
    c.stage3 = s;
  }
  if (doc.contains("uqr")) {
    const json& j = doc["uqr"];
    allow_keys(j, "uqr", {"dependent", "models", "taus", "bandwidth", "fe"});
    UqrConfig u;
    u.dependent = get_req<std::string>(j, "dependent", "uqr");
    u.models = parse_models(j, "uqr");
    u.quantiles = parse_quantiles(j, "uqr");
    u.fe = get_or<Strings>(j, "fe", u.fe, "uqr");
    c.uqr = u;
  }
  if (doc.contains("treat")) {
    const json& j = doc["treat"];
    const std::string w = "treat";
    allow_keys(j, w, {"dependent", "treatment", "propensity_regressors", "controls", "fe", "clip", "min_group",
                      "taus", "bandwidth", "weightings"});
    TreatConfig t;
    t.dependent = get_req<std::string>(j, "dependent", w);
    t.spec.treatment = get_req<std::string>(j, "treatment", w);
    t.spec.propensity_regressors = get_or<Strings>(j, "propensity_regressors", {}, w);
    t.spec.controls = get_or<Strings>(j, "controls", {}, w);
    t.spec.fe_dims = get_or<Strings>(j, "fe", t.spec.fe_dims, w);
    if (j.contains("clip")) {
      const auto clip = get_req<std::vector<double>>(j, "clip", w);
      if (clip.size() != 2) throw ValidationError("config: treat.clip must be [low, high]");
      t.spec.clip_low = clip[0];
      t.spec.clip_high = clip[1];
    }
    t.spec.min_group = get_or<std::size_t>(j, "min_group", t.spec.min_group, w);
    t.quantiles = parse_quantiles(j, w);
    if (j.contains("weightings")) {
      t.weightings.clear();
      for (const auto& s : get_req<Strings>(j, "weightings", w)) {
        if (s == "none") t.weightings.push_back(Weighting::None);
        else if (s == "ipw") t.weightings.push_back(Weighting::Ipw);
        else throw ValidationError("config: unknown weighting '" + s + "' (none, ipw)");
      }
      if (t.weightings.empty()) throw ValidationError("config: treat.weightings must not be empty");
    }
    t.spec.validate();
    c.treat = t;
  }
  if (doc.contains("cqr")) {
    const json& j = doc["cqr"];
    allow_keys(j, "cqr", {"dependent", "models", "tau", "fe"});
    CqrConfig q;
    q.dependent = get_req<std::string>(j, "dependent", "cqr");
    q.models = parse_models(j, "cqr");
    q.tau = get_or<double>(j, "tau", q.tau, "cqr");
    if (!(q.tau > 0.0 && q.tau < 1.0)) throw ValidationError("config: cqr.tau must lie in (0, 1)");
    q.fe = get_or<Strings>(j, "fe", q.fe, "cqr");
    c.cqr = q;
  }
  if (doc.contains("tables")) c.tables = parse_tables(doc["tables"]);

  auto configured = [&c](const std::string& s) {
    return (s == "stage1" && c.stage1) || (s == "stage2" && c.stage2) || (s == "stage3" && c.stage3) ||
           (s == "uqr" && c.uqr) || (s == "treat" && c.treat) || (s == "cqr" && c.cqr);
  };
  if (doc.contains("stages")) {
    const auto req = get_req<Strings>(doc, "stages", "config");
    for (const auto& s : req) {
      if (std::find(stage_order().begin(), stage_order().end(), s) == stage_order().end())
        throw ValidationError("config: unknown stage '" + s + "'");
      if (!configured(s)) throw ValidationError("config: stage '" + s + "' requested but not configured");
    }
    for (const auto& s : stage_order())
      if (std::find(req.begin(), req.end(), s) != req.end()) c.stages.push_back(s);
  } else {
    for (const auto& s : stage_order())
      if (configured(s)) c.stages.push_back(s);
  }
  if (c.stages.empty()) throw ValidationError("config: no stages to run");
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + path.string() + "': " + e.what());
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path, const RunOptions& opt = {}) {
  return parse_config(apply_overrides(read_json_file(path), opt), path.parent_path());
}

// ---------------------------------------------------------------------------
// Ingest, derive, and pre-flight validation

inline PanelDataset ingest(const PipelineConfig& c) {
  if (c.simulate) return generate_panel(*c.simulate);
  std::filesystem::path p(c.input_path);
  if (p.is_relative() && !c.base_dir.empty()) p = c.base_dir / p;
  return load_csv(p.string(), c.entity_col, c.year_col);
}

inline PanelDataset apply_derives(PanelDataset ds, const PipelineConfig& c) {
  for (const auto& r : c.derives) ds = derive(ds, r);
  return ds;
}

// Walks derives and requested stages in order, tracking the names each step
// produces, and names the first reference that would not resolve.
inline void preflight(const PanelDataset& raw, const PipelineConfig& c) {
  std::set<std::string> known(raw.column_names().begin(), raw.column_names().end());
  auto resolves = [&](const std::string& v) { return known.count(v) > 0 || raw.resolves(v); };
  auto need = [&](const std::string& where, const std::string& v) {
    if (!resolves(v)) throw ValidationError("pre-flight: " + where + " references unresolved variable '" + v + "'");
  };
  auto need_all = [&](const std::string& where, const std::vector<std::string>& vs) {
    for (const auto& v : vs) need(where, v);
  };
  auto need_dims = [&](const std::string& where, const std::vector<std::string>& dims) {
    for (const auto& d : dims)
      if (d != "entity") need(where, d);
  };
  for (const auto& r : c.derives) {
    need_all("derive '" + r.target + "'", r.sources);
    known.insert(r.target);
  }
  for (const auto& s : c.subsamples)
    if (!s.filter.empty()) need_all("subsample '" + s.name + "'", Expr::parse(s.filter).variables());
  auto wants = [&](const char* s) { return std::find(c.stages.begin(), c.stages.end(), s) != c.stages.end(); };
  if (wants("stage1")) {
    const auto& h = c.stage1->spec;
    need_all("stage1", {h.outcome, h.selection});
    need_all("stage1", h.outcome_regressors);
    need_all("stage1", h.exclusion_restrictions);
    need_dims("stage1", h.fe_dims);
    known.insert(c.stage1->prediction);
  }
  if (wants("stage2")) {
    need_all("stage2", c.stage2->regressors);
    need("stage2", c.stage2->employees);
    for (const auto& d : c.stage2->dependents) need("stage2", d.column);
    for (const auto& d : c.stage2->dependents) {
      known.insert(d.prediction());
      known.insert(d.intensity());
    }
  }
  if (wants("stage3")) {
    const auto& s = *c.stage3;
    need("stage3", s.outcome);
    need_all("stage3", s.classical);
    need_all("stage3", s.extended);
    need_all("stage3", s.controls);
  }
  if (wants("uqr")) {
    need("uqr", c.uqr->dependent);
    for (const auto& m : c.uqr->models) need_all("uqr model '" + m.name + "'", m.regressors);
    need_dims("uqr", c.uqr->fe);
  }
  if (wants("treat")) {
    const auto& t = *c.treat;
    need_all("treat", {t.dependent, t.spec.treatment});
    need_all("treat", t.spec.propensity_regressors);
    need_all("treat", t.spec.controls);
    need_dims("treat", t.spec.fe_dims);
  }
  if (wants("cqr")) {
    need("cqr", c.cqr->dependent);
    for (const auto& m : c.cqr->models) need_all("cqr model '" + m.name + "'", m.regressors);
    need_dims("cqr", c.cqr->fe);
  }
}

// ---------------------------------------------------------------------------
// Output

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out << content;
    out.flush();
    if (!out) throw DataError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

namespace detail {

inline json opt_number(double v) { return is_missing(v) || !std::isfinite(v) ? json(nullptr) : json(v); }

inline json tau_json(std::optional<double> tau) { return tau ? json(*tau) : json(nullptr); }

}  // namespace detail

// One results document: coefficient records and one fit record per model.
struct ResultsDoc {
  std::string stage, subsample;
  std::vector<json> lines;

  void add(const std::string& model, std::optional<double> tau, const FitResult& f,
           const std::vector<std::pair<std::string, std::string>>& diagnostics = {}) {
    for (std::size_t i = 0; i < f.names.size(); ++i) {
      const auto& n = f.names[i];
      lines.push_back({{"stage", stage},
                       {"subsample", subsample},
                       {"model", model},
                       {"tau", detail::tau_json(tau)},
                       {"record", "coef"},
                       {"term", n},
                       {"coef", detail::opt_number(f.b(n))},
                       {"se", detail::opt_number(f.se(n))},
                       {"p", detail::opt_number(f.pvalue(n))}});
    }
    json fit{{"stage", stage},   {"subsample", subsample},   {"model", model},
             {"tau", detail::tau_json(tau)}, {"record", "fit"}, {"n_obs", f.n_obs},
             {"n_dropped", f.n_dropped}, {"se_method", f.se_method}, {"fe", f.fe_dims},
             {"notes", f.notes}, {"warnings", f.warnings}};
    fit["loglik"] = f.loglik ? detail::opt_number(*f.loglik) : json(nullptr);
    fit["wald"] = f.wald ? json{{"chi2", detail::opt_number(f.wald->statistic)},
                                {"df", f.wald->df},
                                {"p", detail::opt_number(f.wald->p)}}
                         : json(nullptr);
    fit["r2"] = f.fit ? detail::opt_number(f.fit->r2) : json(nullptr);
    fit["adj_r2"] = f.fit ? detail::opt_number(f.fit->adj_r2) : json(nullptr);
    if (f.bootstrap_failures) fit["bootstrap_failures"] = f.bootstrap_failures;
    json diag = json::object();
    for (const auto& [k, v] : diagnostics) diag[k] = v;
    fit["diagnostics"] = diag;
    lines.push_back(std::move(fit));
  }

  std::string text() const {
    std::string s;
    for (const auto& l : lines) s += l.dump() + "\n";
    return s;
  }
};

struct StageRecord {
  std::string stage, subsample;
  std::string status;  // ok or failed
  std::map<std::string, std::size_t> n;
  std::vector<std::string> files;
  std::string error;
};

struct PipelineResult {
  std::filesystem::path output_dir;
  std::vector<StageRecord> stages;
  json manifest;
};

namespace detail {

inline std::string tau_header(double tau) { return "Q" + std::to_string(static_cast<int>(std::lround(tau * 100.0))); }

inline std::string fmt(double v, int digits = 3) { return fixed(v, digits); }

// Regressor rows of a per-tau fit family as plot data.
inline std::string plot_csv(const std::map<double, FitResult>& fits, const std::vector<std::string>& regressors) {
  const double z = stats::normal_quantile(0.975);
  std::string s = "regressor,tau,estimate,ci_low,ci_high\n";
  for (const auto& r : regressors)
    for (const auto& [tau, f] : fits) {
      if (!f.has(r)) continue;
      const double b = f.b(r), se = f.se(r);
      s += r + ',' + format_double(tau) + ',' + format_double(b) + ',' + format_double(b - z * se) + ',' +
           format_double(b + z * se) + '\n';
    }
  return s;
}

class StageRunner {
 public:
  StageRunner(const PipelineConfig& c, const std::filesystem::path& out, std::string subsample, unsigned jobs)
      : c_(c), out_(out), sub_(std::move(subsample)), jobs_(jobs) {}

  void run(const std::string& stage, PanelDataset& ds, StageRecord& rec) {
    ResultsDoc doc{stage, sub_, {}};
    if (stage == "stage1") stage1(ds, doc, rec);
    else if (stage == "stage2") stage2(ds, doc, rec);
    else if (stage == "stage3") stage3(ds, doc, rec);
    else if (stage == "uqr") uqr(ds, doc, rec);
    else if (stage == "treat") treat(ds, doc, rec);
    else if (stage == "cqr") cqr(ds, doc, rec);
    put(rec, "results/" + stage + "__" + sub_ + ".jsonl", doc.text());
  }

 private:
  const PipelineConfig& c_;
  std::filesystem::path out_;
  std::string sub_;
  unsigned jobs_;

  VcovSpec vcov(const std::string& kind, const std::string& where) const {
    VcovSpec v = c_.vcov(kind, where);
    v.jobs = jobs_;
    return v;
  }

  void put(StageRecord& rec, const std::string& rel, const std::string& content) {
    write_atomic(out_ / rel, content);
    rec.files.push_back(rel);
  }

  std::string table_file(const std::string& family) const { return "tables/" + family + "__" + sub_ + ".txt"; }

  std::string title(const std::string& what) const { return what + " (subsample: " + sub_ + ")"; }

  void stage1(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    HeckmanSpec spec = c_.stage1->spec;
    spec.vcov = vcov(c_.stage1->vcov, "stage1");
    const HeckmanFit h = heckman_two_step(ds, spec);
    std::vector<std::pair<std::string, std::string>> diag{
        {"lambda", fmt(h.lambda)}, {"rho", fmt(h.rho)}, {"sigma", fmt(h.sigma)}, {"Mean VIF", fmt(h.mean_vif, 2)},
        {"Selected", std::to_string(h.n_selected)}, {"Censored", std::to_string(h.n_censored)}};
    doc.add("selection", std::nullopt, h.probit);
    doc.add("outcome", std::nullopt, h.outcome, diag);
    rec.n["selection"] = h.probit.n_obs;
    rec.n["outcome"] = h.outcome.n_obs;
    Table t{title("R&D equation: Heckman two-step"),
            {{spec.selection + " (selection)", h.probit, {}}, {spec.outcome + " (outcome)", h.outcome, diag}}};
    put(rec, table_file("rd"), render_table(t, c_.tables));
    ds = with_heckman_prediction(ds, h, c_.stage1->prediction);
  }

  void stage2(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    const auto& s = *c_.stage2;
    Table t{title("Patent equations: Poisson FE and NB2"), {}};
    for (const auto& dep : s.dependents) {
      std::optional<CountFit> chosen;
      for (auto fam : s.families) {
        CountSpec cs;
        cs.dependent = dep.column;
        cs.regressors = s.regressors;
        cs.family = fam;
        cs.rounding = s.rounding;
        cs.vcov = vcov(s.vcov, "stage2");
        CountFit f = count_fit(ds, cs);
        std::vector<std::pair<std::string, std::string>> diag;
        if (f.alpha) diag.emplace_back("alpha", fmt(*f.alpha));
        if (f.dropped_zero_entities) diag.emplace_back("Dropped all-zero entities", std::to_string(f.dropped_zero_entities));
        const std::string model = dep.label + ":" + family_tag(fam);
        doc.add(model, std::nullopt, f.base, diag);
        rec.n[model] = f.base.n_obs;
        t.columns.push_back({dep.label + (fam == CountFamily::PoissonFe ? " Poisson" : " NB2"), f.base, diag});
        if (fam == s.predict_family) chosen = std::move(f);
      }
      CalibrationRule rule{dep.column, s.epsilon, s.employees};
      auto pred = calibrate_predictions(*chosen, ds, rule);
      auto intensity = patent_intensity(pred, ds.column(s.employees), s.epsilon);
      ds = ds.with_column(dep.prediction(), std::move(pred), "calibrated " + family_tag(s.predict_family) + " prediction")
               .with_column(dep.intensity(), std::move(intensity), "log predicted patent intensity");
    }
    put(rec, table_file("patent"), render_table(t, c_.tables));
  }

  void stage3(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    const auto& s = *c_.stage3;
    Table t{title("Productivity equation: two-way FE"), {}};
    auto one = [&](const std::string& name, const std::vector<std::string>& patents) {
      ProdSpec p;
      p.outcome = s.outcome;
      p.lead = s.lead;
      p.patent_regressors = patents;
      p.controls = s.controls;
      p.vcov = vcov(s.vcov, "stage3");
      FitResult f = fe_ols(ds, p);
      std::vector<std::pair<std::string, std::string>> diag;
      if (s.mundlak) {
        MundlakResult m = mundlak_test(ds, p);
        diag.emplace_back("Mundlak chi2", fmt(m.chi2, 2) + " (" + std::to_string(m.df) + ")");
        diag.emplace_back("Mundlak p", fmt(m.p));
        for (const auto& w : m.warnings) f.warnings.push_back("mundlak: " + w);
      }
      doc.add(name, std::nullopt, f, diag);
      rec.n[name] = f.n_obs;
      t.columns.push_back({name == "classical" ? "Classical" : "Extended", f, diag});
    };
    if (!s.classical.empty()) one("classical", s.classical);
    if (!s.extended.empty()) one("extended", s.extended);
    put(rec, table_file("productivity"), render_table(t, c_.tables));
  }

  Table tau_table(const std::string& what, const std::map<double, FitResult>& fits) const {
    Table t{title(what), {}};
    for (const auto& [tau, f] : fits) {
      std::vector<std::pair<std::string, std::string>> diag;
      for (const auto& [k, label] : {std::pair<std::string, std::string>{"q_hat", "Quantile"},
                                     {"q_hat_treated", "Quantile (T = 1)"},
                                     {"q_hat_control", "Quantile (T = 0)"}}) {
        auto it = f.notes.find(k);
        if (it != f.notes.end()) diag.emplace_back(label, fmt(std::stod(it->second)));
      }
      t.columns.push_back({tau_header(tau), f, diag});
    }
    return t;
  }

  void uqr(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    const auto& u = *c_.uqr;
    std::string text;
    for (const auto& m : u.models) {
      const auto fits = uqr_fit(ds, u.dependent, m.regressors, u.quantiles, u.fe, jobs_);
      for (const auto& [tau, f] : fits) {
        doc.add(m.name, tau, f);
        rec.n[m.name + ":" + tau_header(tau)] = f.n_obs;
      }
      text += (text.empty() ? "" : "\n") +
              render_table(tau_table("Unconditional quantile regression, " + m.name + " model", fits), c_.tables);
      put(rec, "plots/uqr__" + sub_ + "__" + m.name + ".csv", plot_csv(fits, m.regressors));
    }
    put(rec, table_file("uqr"), text);
  }

  void treat(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    const auto& t = *c_.treat;
    std::string text;
    for (auto w : t.weightings) {
      TreatmentSpec spec = t.spec;
      spec.weighting = w;
      const std::string name = w == Weighting::Ipw ? "ipw" : "unweighted";
      const auto fits = rif_treatment_fit(ds, t.dependent, spec, t.quantiles, jobs_);
      for (const auto& [tau, f] : fits) {
        doc.add(name, tau, f);
        rec.n[name + ":" + tau_header(tau)] = f.n_obs;
      }
      const std::string what = w == Weighting::Ipw ? "RIF treatment effects, IPW" : "RIF treatment effects, no weighting";
      text += (text.empty() ? "" : "\n") + render_table(tau_table(what, fits), c_.tables);
      put(rec, "plots/treat__" + sub_ + "__" + name + ".csv", plot_csv(fits, {t.spec.treatment}));
    }
    put(rec, table_file("rif_treat"), text);
  }

  void cqr(PanelDataset& ds, ResultsDoc& doc, StageRecord& rec) {
    const auto& q = *c_.cqr;
    Table t{title("Conditional quantile regression, tau = " + format_double(q.tau)), {}};
    for (const auto& m : q.models) {
      CqrSpec spec;
      spec.dependent = q.dependent;
      spec.regressors = m.regressors;
      spec.tau = q.tau;
      spec.fe_dims = q.fe;
      spec.vcov = vcov("bootstrap", "cqr");
      FitResult f = cqr_fit(ds, spec);
      std::vector<std::pair<std::string, std::string>> diag;
      if (auto it = f.notes.find("check_loss"); it != f.notes.end())
        diag.emplace_back("Check loss", fmt(std::stod(it->second)));
      doc.add(m.name, q.tau, f, diag);
      rec.n[m.name] = f.n_obs;
      t.columns.push_back({m.name, f, diag});
    }
    put(rec, table_file("cqr"), render_table(t, c_.tables));
  }
};

}  // namespace detail

// ingest -> derive -> pre-flight -> per subsample: stage1 .. cqr. A stage
// failure stops that subsample; outputs already written are kept, the
// manifest records the failure, and the first failure is rethrown.
inline PipelineResult run_pipeline(const PipelineConfig& c) {
  const PanelDataset raw = ingest(c);
  preflight(raw, c);
  const PanelDataset base = apply_derives(raw, c);

  const std::filesystem::path out(c.output_dir);
  std::filesystem::create_directories(out);

  const std::size_t ns = c.subsamples.size();
  const unsigned outer = c.jobs == 0 ? 0 : std::max(1u, std::min<unsigned>(c.jobs, static_cast<unsigned>(ns)));
  const unsigned inner = c.jobs == 0 ? 0 : std::max(1u, c.jobs / std::max(1u, outer));
  std::vector<std::vector<StageRecord>> records(ns);
  std::vector<std::size_t> sub_rows(ns, 0);
  parallel_for(ns, outer, [&](std::size_t i) {
    const auto& sub = c.subsamples[i];
    std::string stage = "ingest";
    try {
      PanelDataset ds = sub.filter.empty() ? base : filter_rows(base, sub.filter);
      sub_rows[i] = ds.n_rows();
      detail::StageRunner runner(c, out, sub.name, inner);
      for (const auto& s : c.stages) {
        stage = s;
        StageRecord rec{s, sub.name, "ok", {}, {}, {}};
        try {
          runner.run(s, ds, rec);
        } catch (const std::exception& e) {
          rec.status = "failed";
          rec.error = e.what();
          records[i].push_back(rec);
          return;
        }
        records[i].push_back(rec);
      }
    } catch (const std::exception& e) {
      records[i].push_back({stage, sub.name, "failed", {}, {}, e.what()});
    }
  });

  PipelineResult res;
  res.output_dir = out;
  std::string data_csv;
  {
    std::ostringstream os;
    write_csv(os, raw);
    data_csv = os.str();
  }
  json m;
  m["tool"] = "cdmkit";
  m["config"] = c.source;
  m["config_hash"] = sha256_hex(c.source.dump());
  m["seed"] = c.seed;
  m["bootstrap_replications"] = c.bootstrap_reps;
  m["versions"] = {{"cdmkit", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"boost", BOOST_LIB_VERSION},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  m["input"] = {{"source", c.simulate ? "simulate" : c.input_path},
                {"rows", raw.n_rows()},
                {"entities", raw.n_entities()},
                {"data_hash", sha256_hex(data_csv)}};
  json subs = json::array();
  for (std::size_t i = 0; i < ns; ++i)
    subs.push_back({{"name", c.subsamples[i].name}, {"filter", c.subsamples[i].filter}, {"rows", sub_rows[i]}});
  m["subsamples"] = subs;
  json stages = json::array();
  const StageRecord* first_failure = nullptr;
  for (const auto& recs : records)
    for (const auto& r : recs) {
      res.stages.push_back(r);
      json s{{"stage", r.stage}, {"subsample", r.subsample}, {"status", r.status}, {"n", r.n}, {"files", r.files}};
      if (!r.error.empty()) s["error"] = r.error;
      stages.push_back(s);
    }
  for (const auto& r : res.stages)
    if (r.status != "ok" && !first_failure) first_failure = &r;
  m["stages"] = stages;
  m["status"] = first_failure ? "failed" : "ok";
  write_atomic(out / "manifest.json", m.dump(2) + "\n");
  res.manifest = m;
  if (first_failure) throw StageError(first_failure->stage, first_failure->subsample, first_failure->error);
  return res;
}

}  // namespace cdmkit
