#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdmkit/error.hpp"
#include "cdmkit/expr.hpp"
#include "cdmkit/stats.hpp"

namespace cdmkit {

using stats::is_missing;
using stats::kMissing;

// Long-format entity x year panel. Columns are stored densely against a
// shared row index sorted by (entity, year); missing values are NaN.
// Instances are immutable once built: every transform returns a new dataset.
class PanelDataset {
 public:
  struct Key {
    std::string entity;
    int year;
  };

  PanelDataset() = default;

  // Builds from unsorted keys and column values aligned to those keys.
  static PanelDataset build(const std::vector<Key>& keys,
                            std::vector<std::pair<std::string, std::vector<double>>> columns,
                            std::string entity_label = "entity", std::string year_label = "year") {
    PanelDataset ds;
    ds.entity_label_ = std::move(entity_label);
    ds.year_label_ = std::move(year_label);
    const std::size_t n = keys.size();
    for (const auto& [name, values] : columns) {
      if (values.size() != n)
        throw DataError("column '" + name + "' has " + std::to_string(values.size()) +
                        " values for " + std::to_string(n) + " keys");
    }

    std::vector<std::string> names;
    names.reserve(n);
    for (const auto& k : keys) names.push_back(k.entity);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    ds.entities_ = std::move(names);

    std::vector<std::uint32_t> ent(n);
    for (std::size_t i = 0; i < n; ++i) ent[i] = ds.entity_id(keys[i].entity).value();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::pair(ent[a], keys[a].year) < std::pair(ent[b], keys[b].year);
    });
    for (std::size_t i = 1; i < n; ++i) {
      const auto a = order[i - 1], b = order[i];
      if (ent[a] == ent[b] && keys[a].year == keys[b].year)
        throw DataError("duplicate key (" + keys[b].entity + ", " + std::to_string(keys[b].year) +
                        ")");
    }
    ds.row_entity_.resize(n);
    ds.row_year_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      ds.row_entity_[i] = ent[order[i]];
      ds.row_year_[i] = keys[order[i]].year;
    }
    for (auto& [name, values] : columns) {
      std::vector<double> sorted(n);
      for (std::size_t i = 0; i < n; ++i) sorted[i] = values[order[i]];
      ds.add_column_inplace(name, std::move(sorted));
    }
    ds.reindex();
    return ds;
  }

  std::size_t n_rows() const noexcept { return row_year_.size(); }
  std::size_t n_entities() const noexcept { return entities_.size(); }
  std::size_t n_columns() const noexcept { return names_.size(); }
  bool empty() const noexcept { return row_year_.empty(); }

  const std::vector<std::string>& entities() const noexcept { return entities_; }
  int first_year() const noexcept { return first_year_; }
  int last_year() const noexcept { return last_year_; }
  // Contiguous period range covered by the rows.
  std::vector<int> periods() const {
    std::vector<int> out;
    if (empty()) return out;
    for (int y = first_year_; y <= last_year_; ++y) out.push_back(y);
    return out;
  }

  std::uint32_t entity_of(std::size_t row) const { return row_entity_[row]; }
  const std::string& entity_name(std::size_t row) const { return entities_[row_entity_[row]]; }
  int year_of(std::size_t row) const { return row_year_[row]; }
  const std::string& entity_label() const noexcept { return entity_label_; }
  const std::string& year_label() const noexcept { return year_label_; }

  std::optional<std::uint32_t> entity_id(const std::string& name) const {
    auto it = std::lower_bound(entities_.begin(), entities_.end(), name);
    if (it == entities_.end() || *it != name) return std::nullopt;
    return static_cast<std::uint32_t>(it - entities_.begin());
  }

  // Rows of entity e occupy [entity_begin(e), entity_end(e)).
  std::size_t entity_begin(std::uint32_t e) const { return entity_start_[e]; }
  std::size_t entity_end(std::uint32_t e) const { return entity_start_[e + 1]; }

  std::optional<std::size_t> find_row(std::uint32_t entity, int year) const {
    const auto b = row_year_.begin() + static_cast<std::ptrdiff_t>(entity_begin(entity));
    const auto e = row_year_.begin() + static_cast<std::ptrdiff_t>(entity_end(entity));
    auto it = std::lower_bound(b, e, year);
    if (it == e || *it != year) return std::nullopt;
    return static_cast<std::size_t>(it - row_year_.begin());
  }

  bool has_column(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& column_names() const noexcept { return names_; }

  std::span<const double> column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown column '" + name + "'");
    return data_[it->second];
  }

  // Numeric view of a column or the implicit "year" index.
  std::vector<double> values_of(const std::string& name) const {
    if (has_column(name)) {
      auto c = column(name);
      return {c.begin(), c.end()};
    }
    if (name == year_label_ || name == "year") {
      return {row_year_.begin(), row_year_.end()};
    }
    throw DataError("unknown column '" + name + "'");
  }
  bool resolves(const std::string& name) const {
    return has_column(name) || name == year_label_ || name == "year";
  }

  // Returns a copy with one more column; values aligned to this row order.
  PanelDataset with_column(const std::string& name, std::vector<double> values,
                           std::string note = {}) const {
    if (values.size() != n_rows())
      throw DataError("with_column '" + name + "': size mismatch");
    PanelDataset out = *this;
    out.add_column_inplace(name, std::move(values));
    if (!note.empty()) out.notes_[name] = std::move(note);
    return out;
  }

  // Returns a copy with an existing column's values replaced.
  PanelDataset with_replaced(const std::string& name, std::vector<double> values) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown column '" + name + "'");
    if (values.size() != n_rows()) throw DataError("with_replaced: size mismatch");
    PanelDataset out = *this;
    out.data_[it->second] = std::move(values);
    return out;
  }

  // Subset of rows (indices ascending), shrinking entities and periods.
  PanelDataset select_rows(std::span<const std::size_t> rows) const {
    std::vector<Key> keys;
    keys.reserve(rows.size());
    for (auto r : rows) keys.push_back({entity_name(r), year_of(r)});
    std::vector<std::pair<std::string, std::vector<double>>> cols;
    for (std::size_t c = 0; c < names_.size(); ++c) {
      std::vector<double> v;
      v.reserve(rows.size());
      for (auto r : rows) v.push_back(data_[c][r]);
      cols.emplace_back(names_[c], std::move(v));
    }
    PanelDataset out = build(keys, std::move(cols), entity_label_, year_label_);
    out.notes_ = notes_;
    out.meta_ = meta_;
    return out;
  }

  // Group codes for a fixed-effect dimension: "entity", "year", or a
  // categorical column. Codes are dense in [0, G); -1 marks missing.
  std::vector<int> group_codes(const std::string& dim, int* n_groups = nullptr) const {
    std::vector<int> codes(n_rows(), -1);
    if (dim == "entity" || dim == entity_label_) {
      for (std::size_t r = 0; r < n_rows(); ++r) codes[r] = static_cast<int>(row_entity_[r]);
      if (n_groups) *n_groups = static_cast<int>(n_entities());
      return codes;
    }
    std::vector<double> v;
    if (!has_column(dim) && (dim == "year" || dim == year_label_)) {
      v.assign(row_year_.begin(), row_year_.end());
    } else {
      auto c = column(dim);
      v.assign(c.begin(), c.end());
    }
    std::vector<double> levels;
    for (double x : v)
      if (!is_missing(x)) levels.push_back(x);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    for (std::size_t r = 0; r < n_rows(); ++r) {
      if (is_missing(v[r])) continue;
      codes[r] = static_cast<int>(std::lower_bound(levels.begin(), levels.end(), v[r]) -
                                  levels.begin());
    }
    if (n_groups) *n_groups = static_cast<int>(levels.size());
    return codes;
  }
  // Level values matching group_codes (entity dimension returns indices).
  std::vector<double> group_levels(const std::string& dim) const {
    if (dim == "entity" || dim == entity_label_) {
      std::vector<double> out(n_entities());
      std::iota(out.begin(), out.end(), 0.0);
      return out;
    }
    std::vector<double> v = values_of(dim);
    std::vector<double> levels;
    for (double x : v)
      if (!is_missing(x)) levels.push_back(x);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    return levels;
  }

  const std::map<std::string, std::string>& meta() const noexcept { return meta_; }
  const std::map<std::string, std::string>& notes() const noexcept { return notes_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  PanelDataset with_meta(const std::string& key, std::string value) const {
    PanelDataset out = *this;
    out.meta_[key] = std::move(value);
    return out;
  }
  PanelDataset with_warning(std::string w) const {
    PanelDataset out = *this;
    out.warnings_.push_back(std::move(w));
    return out;
  }

 private:
  void add_column_inplace(const std::string& name, std::vector<double> values) {
    if (name.empty()) throw DataError("column names must be non-empty");
    if (index_.count(name)) throw DataError("column '" + name + "' already exists");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    data_.push_back(std::move(values));
  }

  void reindex() {
    entity_start_.assign(entities_.size() + 1, 0);
    for (auto e : row_entity_) ++entity_start_[e + 1];
    for (std::size_t e = 0; e < entities_.size(); ++e) entity_start_[e + 1] += entity_start_[e];
    if (row_year_.empty()) {
      first_year_ = last_year_ = 0;
    } else {
      auto [lo, hi] = std::minmax_element(row_year_.begin(), row_year_.end());
      first_year_ = *lo;
      last_year_ = *hi;
    }
  }

  std::string entity_label_ = "entity";
  std::string year_label_ = "year";
  std::vector<std::string> entities_;
  std::vector<std::uint32_t> row_entity_;
  std::vector<int> row_year_;
  std::vector<std::size_t> entity_start_;
  int first_year_ = 0;
  int last_year_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> data_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, std::string> notes_;
  std::map<std::string, std::string> meta_;
  std::vector<std::string> warnings_;
};

// ---------------------------------------------------------------------------
// Delimited text I/O

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string format_double(double v) {
  if (is_missing(v)) return {};
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace detail

inline PanelDataset read_csv(std::istream& in, const std::string& entity_col,
                             const std::string& year_col, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  auto find_col = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(source + ": header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t ecol = find_col(entity_col);
  const std::size_t ycol = find_col(year_col);

  std::vector<std::size_t> var_cols;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != ecol && c != ycol) var_cols.push_back(c);

  std::vector<PanelDataset::Key> keys;
  std::vector<std::vector<double>> values(var_cols.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError(source + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " fields, expected " +
                      std::to_string(header.size()));
    const std::string ytxt = detail::trim(cells[ycol]);
    int year = 0;
    auto [p, ec] = std::from_chars(ytxt.data(), ytxt.data() + ytxt.size(), year);
    if (ec != std::errc() || p != ytxt.data() + ytxt.size())
      throw DataError(source + ": non-integer year '" + ytxt + "' on line " +
                      std::to_string(line_no));
    keys.push_back({detail::trim(cells[ecol]), year});
    for (std::size_t j = 0; j < var_cols.size(); ++j) {
      const std::string cell = detail::trim(cells[var_cols[j]]);
      if (cell.empty() || cell == ".") {
        values[j].push_back(kMissing);
        continue;
      }
      double v = 0.0;
      auto [q, ec2] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec2 != std::errc() || q != cell.data() + cell.size())
        throw DataError(source + ": non-numeric value '" + cell + "' in column '" +
                        header[var_cols[j]] + "' on line " + std::to_string(line_no));
      values[j].push_back(v);
    }
  }
  std::vector<std::pair<std::string, std::vector<double>>> cols;
  for (std::size_t j = 0; j < var_cols.size(); ++j)
    cols.emplace_back(header[var_cols[j]], std::move(values[j]));
  PanelDataset ds = PanelDataset::build(keys, std::move(cols), entity_col, year_col);
  return ds.with_meta("source", source).with_meta("rows", std::to_string(keys.size()));
}

inline PanelDataset load_csv(const std::string& path, const std::string& entity_col,
                             const std::string& year_col) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_csv(in, entity_col, year_col, path);
}

inline void write_csv(std::ostream& out, const PanelDataset& ds) {
  out << detail::csv_quote(ds.entity_label()) << ',' << detail::csv_quote(ds.year_label());
  for (const auto& n : ds.column_names()) out << ',' << detail::csv_quote(n);
  out << '\n';
  std::vector<std::span<const double>> cols;
  for (const auto& n : ds.column_names()) cols.push_back(ds.column(n));
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    out << detail::csv_quote(ds.entity_name(r)) << ',' << ds.year_of(r);
    for (const auto& c : cols) out << ',' << detail::format_double(c[r]);
    out << '\n';
  }
}

inline void save_csv(const std::string& path, const PanelDataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, ds);
}

// ---------------------------------------------------------------------------
// Derived variables

struct DeriveRule {
  enum class Kind { Lag, Lead, RollingMean, Log, LogShift, Ratio, Indicator };

  Kind kind = Kind::Log;
  std::vector<std::string> sources;
  std::string target;
  int periods = 1;       // lag/lead distance or rolling window
  double shift = 1.0;    // log_shift constant
  std::string predicate; // indicator expression

  static DeriveRule lag(std::string src, int k, std::string target) {
    return {Kind::Lag, {std::move(src)}, std::move(target), k, 0.0, {}};
  }
  static DeriveRule lead(std::string src, int k, std::string target) {
    return {Kind::Lead, {std::move(src)}, std::move(target), k, 0.0, {}};
  }
  static DeriveRule rolling_mean(std::string src, int w, std::string target) {
    return {Kind::RollingMean, {std::move(src)}, std::move(target), w, 0.0, {}};
  }
  static DeriveRule log(std::string src, std::string target) {
    return {Kind::Log, {std::move(src)}, std::move(target), 1, 0.0, {}};
  }
  static DeriveRule log_shift(std::string src, double c, std::string target) {
    return {Kind::LogShift, {std::move(src)}, std::move(target), 1, c, {}};
  }
  static DeriveRule ratio(std::string num, std::string den, std::string target) {
    return {Kind::Ratio, {std::move(num), std::move(den)}, std::move(target), 1, 0.0, {}};
  }
  static DeriveRule indicator(std::string predicate, std::string target) {
    DeriveRule r{Kind::Indicator, {}, std::move(target), 1, 0.0, std::move(predicate)};
    r.sources = Expr::parse(r.predicate).variables();
    return r;
  }

  std::string describe() const {
    switch (kind) {
      case Kind::Lag: return "lag(" + sources[0] + ", " + std::to_string(periods) + ")";
      case Kind::Lead: return "lead(" + sources[0] + ", " + std::to_string(periods) + ")";
      case Kind::RollingMean:
        return "rolling_mean(" + sources[0] + ", " + std::to_string(periods) + ")";
      case Kind::Log: return "log(" + sources[0] + ")";
      case Kind::LogShift: return "log_shift(" + sources[0] + ", " + detail::format_double(shift) + ")";
      case Kind::Ratio: return "ratio(" + sources[0] + ", " + sources[1] + ")";
      case Kind::Indicator: return "indicator(" + predicate + ")";
    }
    return {};
  }
};

namespace detail {

// Evaluates an expression per row; missing referenced values propagate.
inline std::vector<double> eval_rows(const PanelDataset& ds, const Expr& expr) {
  std::vector<std::vector<double>> cols;
  for (const auto& v : expr.variables()) {
    if (!ds.resolves(v)) throw DataError("expression references unknown column '" + v + "'");
    cols.push_back(ds.values_of(v));
  }
  std::vector<double> out(ds.n_rows());
  std::vector<double> row(cols.size());
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    for (std::size_t j = 0; j < cols.size(); ++j) row[j] = cols[j][r];
    out[r] = expr.eval(row);
  }
  return out;
}

}  // namespace detail

inline PanelDataset derive(const PanelDataset& ds, const DeriveRule& rule) {
  using Kind = DeriveRule::Kind;
  if (rule.target.empty()) throw ValidationError("derive: empty target name");
  if (ds.has_column(rule.target))
    throw ValidationError("derive: target '" + rule.target + "' collides with an existing column");
  if ((rule.kind == Kind::Lag || rule.kind == Kind::Lead || rule.kind == Kind::RollingMean) &&
      rule.periods < 1)
    throw ValidationError("derive: period parameter must be >= 1 for " + rule.describe());
  if (rule.kind == Kind::LogShift && !(rule.shift > 0.0))
    throw ValidationError("derive: log_shift constant must be > 0");
  if (rule.kind != Kind::Indicator) {
    for (const auto& s : rule.sources)
      if (!ds.resolves(s)) throw DataError("derive: unknown source column '" + s + "'");
  }

  const std::size_t n = ds.n_rows();
  std::vector<double> out(n, kMissing);
  switch (rule.kind) {
    case Kind::Lag:
    case Kind::Lead: {
      const auto src = ds.values_of(rule.sources[0]);
      const int shift = rule.kind == Kind::Lag ? -rule.periods : rule.periods;
      for (std::size_t r = 0; r < n; ++r) {
        if (auto s = ds.find_row(ds.entity_of(r), ds.year_of(r) + shift)) out[r] = src[*s];
      }
      break;
    }
    case Kind::RollingMean: {
      const auto src = ds.values_of(rule.sources[0]);
      for (std::size_t r = 0; r < n; ++r) {
        double sum = 0.0;
        int count = 0;
        const auto e = ds.entity_of(r);
        for (std::size_t s = ds.entity_begin(e); s < ds.entity_end(e); ++s) {
          const int lag = ds.year_of(r) - ds.year_of(s);
          if (lag < 0 || lag >= rule.periods || is_missing(src[s])) continue;
          sum += src[s];
          ++count;
        }
        if (count > 0) out[r] = sum / count;
      }
      break;
    }
    case Kind::Log:
    case Kind::LogShift: {
      const auto src = ds.values_of(rule.sources[0]);
      const double c = rule.kind == Kind::Log ? 0.0 : rule.shift;
      for (std::size_t r = 0; r < n; ++r) {
        if (is_missing(src[r])) continue;
        const double x = src[r] + c;
        if (!(x > 0.0))
          throw DataError("derive " + rule.describe() + ": non-positive value " +
                          detail::format_double(src[r]) + " at (" + ds.entity_name(r) + ", " +
                          std::to_string(ds.year_of(r)) + ")");
        out[r] = std::log(x);
      }
      break;
    }
    case Kind::Ratio: {
      const auto num = ds.values_of(rule.sources[0]);
      const auto den = ds.values_of(rule.sources[1]);
      for (std::size_t r = 0; r < n; ++r) {
        if (is_missing(num[r]) || is_missing(den[r]) || den[r] == 0.0) continue;
        out[r] = num[r] / den[r];
      }
      break;
    }
    case Kind::Indicator: {
      const Expr expr = Expr::parse(rule.predicate);
      const auto v = detail::eval_rows(ds, expr);
      for (std::size_t r = 0; r < n; ++r)
        out[r] = is_missing(v[r]) ? kMissing : (v[r] != 0.0 ? 1.0 : 0.0);
      break;
    }
  }
  return ds.with_column(rule.target, std::move(out), rule.describe());
}

// Keeps rows where the predicate is true; rows where it is missing are dropped.
inline PanelDataset filter_rows(const PanelDataset& ds, const std::string& predicate) {
  const Expr expr = Expr::parse(predicate);
  const auto v = detail::eval_rows(ds, expr);
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < ds.n_rows(); ++r)
    if (Expr::truthy(v[r])) keep.push_back(r);
  PanelDataset out = ds.select_rows(keep).with_meta("filter", predicate);
  if (out.empty()) out = out.with_warning("filter '" + predicate + "' retained no rows");
  return out;
}

}  // namespace cdmkit
