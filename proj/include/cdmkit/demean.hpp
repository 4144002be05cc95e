#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdmkit/error.hpp"
#include "cdmkit/panel.hpp"

namespace cdmkit {

struct DemeanOptions {
  double tol = 1e-10;
  int max_sweeps = 1000;
};

// A fixed-effect dimension restricted to an estimation sample: dense codes
// in [0, levels) for each sample row.
struct FactorCodes {
  std::vector<int> code;
  int levels = 0;
};

// Recodes `raw` (one entry per sample row, all >= 0) to dense codes.
inline FactorCodes compact_codes(std::span<const int> raw) {
  FactorCodes f;
  int max_raw = -1;
  for (int c : raw) max_raw = std::max(max_raw, c);
  std::vector<int> map(static_cast<std::size_t>(max_raw + 1), -1);
  f.code.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    int& m = map[static_cast<std::size_t>(raw[i])];
    if (m < 0) m = f.levels++;
    f.code[i] = m;
  }
  return f;
}

// Sweeps out (weighted) group means of every column of `m` for each factor.
// A single factor is exact in one pass; several factors alternate until the
// largest change in a sweep falls below tol. Returns the number of sweeps.
inline int demean_inplace(Eigen::Ref<Eigen::MatrixXd> m, const std::vector<FactorCodes>& factors,
                          std::span<const double> weights = {}, const DemeanOptions& opt = {}) {
  if (factors.empty() || m.rows() == 0) return 0;
  const Eigen::Index n = m.rows();
  const bool weighted = !weights.empty();
  std::vector<Eigen::MatrixXd> sums(factors.size());
  std::vector<Eigen::VectorXd> wsum(factors.size());
  for (std::size_t f = 0; f < factors.size(); ++f) {
    wsum[f] = Eigen::VectorXd::Zero(factors[f].levels);
    for (Eigen::Index i = 0; i < n; ++i)
      wsum[f](factors[f].code[i]) += weighted ? weights[static_cast<std::size_t>(i)] : 1.0;
  }
  const int max_sweeps = factors.size() == 1 ? 1 : opt.max_sweeps;
  double change = 0.0;
  for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
    change = 0.0;
    for (std::size_t f = 0; f < factors.size(); ++f) {
      const auto& code = factors[f].code;
      Eigen::MatrixXd& s = sums[f];
      s.setZero(factors[f].levels, m.cols());
      for (Eigen::Index i = 0; i < n; ++i) {
        const double w = weighted ? weights[static_cast<std::size_t>(i)] : 1.0;
        s.row(code[i]) += w * m.row(i);
      }
      for (int g = 0; g < factors[f].levels; ++g) {
        if (wsum[f](g) > 0.0) s.row(g) /= wsum[f](g);
      }
      for (Eigen::Index i = 0; i < n; ++i) m.row(i) -= s.row(code[i]);
      change = std::max(change, s.cwiseAbs().maxCoeff());
    }
    if (factors.size() == 1 || change < opt.tol) return sweep;
  }
  throw ConvergenceError("within_demean: no convergence after " + std::to_string(max_sweeps) +
                             " sweeps (last change " + std::to_string(change) + ")",
                         change);
}

// Replaces `columns` by their within-transformed values over `dims`
// ("entity", "year" or categorical columns). Rows missing any named column or
// dimension key are set to missing.
inline PanelDataset within_demean(const PanelDataset& ds, const std::vector<std::string>& columns,
                                  const std::vector<std::string>& dims,
                                  const DemeanOptions& opt = {}) {
  if (dims.empty()) throw ValidationError("within_demean: at least one dimension required");
  if (columns.empty()) return ds;
  std::vector<std::vector<int>> raw_codes;
  for (const auto& d : dims) raw_codes.push_back(ds.group_codes(d));
  std::vector<std::vector<double>> cols;
  for (const auto& c : columns) cols.push_back(ds.values_of(c));

  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    bool ok = true;
    for (const auto& c : cols) ok = ok && !is_missing(c[r]);
    for (const auto& g : raw_codes) ok = ok && g[r] >= 0;
    if (ok) rows.push_back(r);
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cols[j][rows[i]];
  std::vector<FactorCodes> factors;
  for (const auto& g : raw_codes) {
    std::vector<int> sub(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) sub[i] = g[rows[i]];
    factors.push_back(compact_codes(sub));
  }
  demean_inplace(m, factors, {}, opt);

  PanelDataset out = ds;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    std::vector<double> v(ds.n_rows(), kMissing);
    for (std::size_t i = 0; i < rows.size(); ++i)
      v[rows[i]] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    out = out.with_replaced(columns[j], std::move(v));
  }
  return out;
}

}  // namespace cdmkit
