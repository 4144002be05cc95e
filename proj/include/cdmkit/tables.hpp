#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdmkit/estim.hpp"

namespace cdmkit {

// Ordered (p, marker) pairs; a coefficient gets the marker of the smallest
// threshold its p-value falls below.
struct StarStyle {
  std::vector<std::pair<double, std::string>> thresholds;

  static StarStyle uqr() { return {{{0.001, "***"}, {0.01, "**"}, {0.05, "*"}, {0.1, "+"}}}; }
  static StarStyle table1() { return {{{0.001, "***"}, {0.01, "**"}, {0.05, "*"}}}; }

  static StarStyle named(const std::string& name) {
    if (name == "uqr" || name == "default") return uqr();
    if (name == "table1") return table1();
    throw ValidationError("tables: unknown star style '" + name + "' (known: uqr, table1)");
  }

  static StarStyle custom(std::vector<std::pair<double, std::string>> t) {
    std::sort(t.begin(), t.end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!(t[i].first > 0.0 && t[i].first < 1.0))
        throw ValidationError("tables: star threshold must lie in (0, 1)");
      if (t[i].second.empty()) throw ValidationError("tables: empty star marker");
      if (i > 0 && t[i].first == t[i - 1].first) throw ValidationError("tables: duplicate star threshold");
    }
    return {std::move(t)};
  }

  std::string marker(double p) const {
    if (is_missing(p)) return {};
    for (const auto& [t, m] : thresholds)
      if (p < t) return m;
    return {};
  }

  std::string legend() const {
    std::string s;
    for (const auto& [t, m] : thresholds) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s p<%g", m.c_str(), t);
      s += (s.empty() ? "" : ", ") + std::string(buf);
    }
    return s;
  }
};

struct TableStyle {
  enum class Beneath { Se, T };
  StarStyle stars = StarStyle::uqr();
  Beneath beneath = Beneath::Se;
  int digits = 3;
};

struct TableColumn {
  std::string header;
  FitResult fit;
  // Extra diagnostic rows, e.g. ("alpha", "0.812").
  std::vector<std::pair<std::string, std::string>> extra;
};

struct Table {
  std::string title;
  std::vector<TableColumn> columns;
};

namespace detail {

inline std::string fixed(double v, int digits) {
  if (is_missing(v)) return ".";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-') s.erase(0, 1);
  return s;
}

inline bool is_indicator_term(const std::string& name) { return name.find('=') != std::string::npos; }

inline std::string fe_label(const std::string& dim) {
  if (dim == "entity") return "Individual FE";
  if (dim == "year") return "Time FE";
  return dim + " FE";
}

inline bool absorbs(const FitResult& f, const std::string& dim) {
  if (std::find(f.fe_dims.begin(), f.fe_dims.end(), dim) != f.fe_dims.end()) return true;
  const std::string prefix = dim + "=";
  return std::any_of(f.names.begin(), f.names.end(),
                     [&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
}

}  // namespace detail

// Coefficient cells with "(se)" or "(t)" beneath, FE footer rows, fit
// diagnostics, N, and the star legend.
inline std::string render_table(const Table& t, const TableStyle& style) {
  std::vector<std::string> terms;
  bool has_cons = false;
  std::vector<std::string> dims;
  for (const auto& c : t.columns) {
    for (const auto& n : c.fit.names) {
      if (n == kIntercept) {
        has_cons = true;
      } else if (detail::is_indicator_term(n)) {
        const std::string d = n.substr(0, n.find('='));
        if (std::find(dims.begin(), dims.end(), d) == dims.end()) dims.push_back(d);
      } else if (std::find(terms.begin(), terms.end(), n) == terms.end()) {
        terms.push_back(n);
      }
    }
    for (const auto& d : c.fit.fe_dims)
      if (std::find(dims.begin(), dims.end(), d) == dims.end()) dims.push_back(d);
  }
  if (has_cons) terms.push_back(kIntercept);
  std::stable_sort(dims.begin(), dims.end(), [](const std::string& a, const std::string& b) {
    auto rank = [](const std::string& d) { return d == "entity" ? 0 : d == "year" ? 1 : 2; };
    return rank(a) < rank(b);
  });

  using Row = std::vector<std::string>;
  std::vector<Row> body;
  const std::size_t nc = t.columns.size();
  for (const auto& term : terms) {
    Row top{term}, below{""};
    for (const auto& c : t.columns) {
      if (!c.fit.has(term)) {
        top.emplace_back();
        below.emplace_back();
        continue;
      }
      const double b = c.fit.b(term), se = c.fit.se(term);
      top.push_back(detail::fixed(b, style.digits) + style.stars.marker(c.fit.pvalue(term)));
      const double beneath = style.beneath == TableStyle::Beneath::Se ? se : (se > 0.0 ? b / se : kMissing);
      below.push_back("(" + detail::fixed(beneath, style.digits) + ")");
    }
    body.push_back(std::move(top));
    body.push_back(std::move(below));
  }

  std::vector<Row> footer;
  for (const auto& d : dims) {
    Row r{detail::fe_label(d)};
    for (const auto& c : t.columns) r.push_back(detail::absorbs(c.fit, d) ? "Y" : "N");
    footer.push_back(std::move(r));
  }
  auto optional_row = [&](const std::string& label, auto get) {
    Row r{label};
    bool any = false;
    for (const auto& c : t.columns) {
      std::optional<std::string> v = get(c);
      any = any || v.has_value();
      r.push_back(v.value_or(""));
    }
    if (any) footer.push_back(std::move(r));
  };
  optional_row("Wald chi2", [](const TableColumn& c) -> std::optional<std::string> {
    if (!c.fit.wald) return std::nullopt;
    return detail::fixed(c.fit.wald->statistic, 2) + " (" + std::to_string(c.fit.wald->df) + ")";
  });
  optional_row("Prob > chi2", [](const TableColumn& c) -> std::optional<std::string> {
    if (!c.fit.wald) return std::nullopt;
    return detail::fixed(c.fit.wald->p, 3);
  });
  optional_row("Adj. R2", [](const TableColumn& c) -> std::optional<std::string> {
    if (!c.fit.fit) return std::nullopt;
    return detail::fixed(c.fit.fit->adj_r2, 3);
  });
  optional_row("Log-likelihood", [](const TableColumn& c) -> std::optional<std::string> {
    if (!c.fit.loglik) return std::nullopt;
    return detail::fixed(*c.fit.loglik, 2);
  });
  std::vector<std::string> extra_labels;
  for (const auto& c : t.columns)
    for (const auto& [k, v] : c.extra)
      if (std::find(extra_labels.begin(), extra_labels.end(), k) == extra_labels.end()) extra_labels.push_back(k);
  for (const auto& label : extra_labels)
    optional_row(label, [&label](const TableColumn& c) -> std::optional<std::string> {
      for (const auto& [k, v] : c.extra)
        if (k == label) return v;
      return std::nullopt;
    });
  {
    Row r{"N"};
    for (const auto& c : t.columns) r.push_back(std::to_string(c.fit.n_obs));
    footer.push_back(std::move(r));
  }

  Row header{""};
  for (const auto& c : t.columns) header.push_back(c.header);
  std::vector<std::size_t> width(nc + 1, 0);
  auto widen = [&](const Row& r) {
    for (std::size_t j = 0; j < r.size(); ++j) width[j] = std::max(width[j], r[j].size());
  };
  widen(header);
  for (const auto& r : body) widen(r);
  for (const auto& r : footer) widen(r);

  std::size_t total = width[0];
  for (std::size_t j = 1; j <= nc; ++j) total += width[j] + 2;
  auto line = [&](const Row& r) {
    std::string s = r[0] + std::string(width[0] - r[0].size(), ' ');
    for (std::size_t j = 1; j <= nc; ++j) s += std::string(width[j] + 2 - r[j].size(), ' ') + r[j];
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };
  const std::string rule(total, '-');
  std::string out = t.title + "\n" + rule + "\n" + line(header) + rule + "\n";
  for (const auto& r : body) out += line(r);
  out += rule + "\n";
  for (const auto& r : footer) out += line(r);
  out += rule + "\n";
  out += style.beneath == TableStyle::Beneath::Se ? "Standard errors in parenthesis\n" : "t statistics in parenthesis\n";
  out += style.stars.legend() + "\n";
  return out;
}

}  // namespace cdmkit
