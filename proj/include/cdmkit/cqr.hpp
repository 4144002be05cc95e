#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cdmkit/estim.hpp"

namespace cdmkit {

struct CqrSpec {
  std::string dependent;
  std::vector<std::string> regressors;
  double tau = 0.5;
  // "entity" is absorbed exactly inside each IRLS step, which is the same
  // solution as entity indicator columns; other dimensions enter as indicators.
  std::vector<std::string> fe_dims = {"entity", "year"};
  bool intercept = true;
  VcovSpec vcov = VcovSpec::bootstrap(200, 12345);
  int max_iter = 200;  // per smoothing stage

  bool absorbs_entity() const { return std::find(fe_dims.begin(), fe_dims.end(), "entity") != fe_dims.end(); }

  void validate(const PanelDataset& ds) const {
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("cqr: tau outside (0,1)");
    if (vcov.kind != VcovKind::ClusterBootstrap) throw ValidationError("cqr: standard errors require a cluster bootstrap");
    vcov.validate();
    if (max_iter < 1) throw ValidationError("cqr: max_iter must be positive");
    ModelSpec{dependent, regressors, intercept, fe_dims}.validate(ds);
  }
};

inline double check_loss(const VectorXd& u, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) s += u(i) * (tau - (u(i) < 0.0 ? 1.0 : 0.0));
  return s;
}

struct CqrSolution {
  VectorXd beta;
  VectorXd resid;  // y - X beta - entity effect
  double loss = 0.0;
  bool nonunique = false;
  bool polished = false;
  int iterations = 0;
};

namespace detail {

// Weighted LS of z on X with optional exact absorption of one grouping.
// Returns coefficients; `resid` receives z - fitted (including group means).
inline VectorXd wls_absorb(const MatrixXd& X, const VectorXd& z, const VectorXd& w, const std::vector<int>& groups,
                           int n_groups, VectorXd& resid) {
  MatrixXd Xd = X;
  VectorXd zd = z;
  if (n_groups > 0) {
    MatrixXd sx = MatrixXd::Zero(n_groups, X.cols());
    VectorXd sz = VectorXd::Zero(n_groups), sw = VectorXd::Zero(n_groups);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const int g = groups[static_cast<std::size_t>(i)];
      sx.row(g) += w(i) * X.row(i);
      sz(g) += w(i) * z(i);
      sw(g) += w(i);
    }
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const int g = groups[static_cast<std::size_t>(i)];
      Xd.row(i) -= sx.row(g) / sw(g);
      zd(i) -= sz(g) / sw(g);
    }
  }
  const MatrixXd XtW = Xd.transpose() * w.asDiagonal();
  const VectorXd beta = (XtW * Xd).ldlt().solve(XtW * zd);
  resid = zd - Xd * beta;
  return beta;
}

// Basic solution through the k smallest-residual rows that form a
// nonsingular system.
inline std::optional<VectorXd> basic_solution(const MatrixXd& X, const VectorXd& y, const VectorXd& u) {
  const Eigen::Index k = X.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(X.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return std::abs(u(a)) < std::abs(u(b)); });
  MatrixXd A(0, k);
  VectorXd b(0);
  for (Eigen::Index i : order) {
    MatrixXd A2(A.rows() + 1, k);
    A2 << A, X.row(i);
    Eigen::FullPivLU<MatrixXd> lu(A2);
    lu.setThreshold(1e-10);
    if (lu.rank() == A2.rows()) {
      A = A2;
      VectorXd b2(b.size() + 1);
      b2 << b, y(i);
      b = b2;
      if (A.rows() == k) break;
    }
  }
  if (A.rows() < k) return std::nullopt;
  return VectorXd(A.partialPivLu().solve(b));
}

// True when the check loss is flat along some coordinate direction at beta.
inline bool flat_at(const MatrixXd& X, const VectorXd& u, double tau, double zero_tol) {
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    for (double sgn : {1.0, -1.0}) {
      double d = 0.0;
      for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double xv = sgn * X(i, j);
        if (std::abs(u(i)) <= zero_tol)
          d += -xv * (tau - (-xv < 0.0 ? 1.0 : 0.0));
        else
          d += -xv * (tau - (u(i) < 0.0 ? 1.0 : 0.0));
      }
      if (std::abs(d) <= 1e-9 * (1.0 + X.col(j).cwiseAbs().sum())) return true;
    }
  }
  return false;
}

}  // namespace detail

namespace detail {

// Smoothed check loss phi(u) = 0.5 sqrt(u^2 + d^2) + c u, c = tau - 0.5.
struct Smoothed {
  const MatrixXd& X;
  const VectorXd& y;
  const std::vector<int>& groups;
  int n_groups;
  double c;
  double d;

  VectorXd resid(const VectorXd& beta, const VectorXd& alpha) const {
    VectorXd u = y - X * beta;
    if (n_groups > 0)
      for (Eigen::Index i = 0; i < u.size(); ++i) u(i) -= alpha(groups[static_cast<std::size_t>(i)]);
    return u;
  }
  double value(const VectorXd& u) const {
    double f = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) f += 0.5 * std::sqrt(u(i) * u(i) + d * d) + c * u(i);
    return f;
  }
};

// One Newton step on (beta, alpha) with the entity block eliminated by its
// Schur complement. Returns false when the system is not usable.
inline bool newton_direction(const Smoothed& s, const VectorXd& u, VectorXd& dbeta, VectorXd& dalpha) {
  const Eigen::Index n = s.X.rows(), k = s.X.cols();
  VectorXd h(n), g(n);  // second and first derivative of phi at u
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = std::sqrt(u(i) * u(i) + s.d * s.d);
    g(i) = 0.5 * u(i) / r + s.c;
    h(i) = 0.5 * s.d * s.d / (r * r * r);
  }
  // Descent direction solves H step = -grad with grad_beta = -X'g.
  MatrixXd A = s.X.transpose() * h.asDiagonal() * s.X;
  VectorXd rb = s.X.transpose() * g;
  dalpha.resize(s.n_groups);
  if (s.n_groups > 0) {
    MatrixXd B = MatrixXd::Zero(k, s.n_groups);
    VectorXd D = VectorXd::Zero(s.n_groups), ra = VectorXd::Zero(s.n_groups);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int grp = s.groups[static_cast<std::size_t>(i)];
      B.col(grp) += h(i) * s.X.row(i).transpose();
      D(grp) += h(i);
      ra(grp) += g(i);
    }
    const VectorXd Dinv = D.cwiseInverse();
    A -= B * Dinv.asDiagonal() * B.transpose();
    rb -= B * Dinv.cwiseProduct(ra);
    Eigen::LDLT<MatrixXd> ldlt(0.5 * (A + A.transpose()));
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
    dbeta = ldlt.solve(rb);
    dalpha = Dinv.cwiseProduct(ra - B.transpose() * dbeta);
  } else {
    Eigen::LDLT<MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
    dbeta = ldlt.solve(rb);
  }
  return dbeta.allFinite() && dalpha.allFinite();
}

// Majorise-minimise (IRLS) step, always a descent step.
inline void mm_step(const Smoothed& s, const VectorXd& u, VectorXd& beta, VectorXd& alpha) {
  const Eigen::Index n = u.size();
  VectorXd w(n), r;
  for (Eigen::Index i = 0; i < n; ++i) w(i) = 0.5 / std::sqrt(u(i) * u(i) + s.d * s.d);
  const VectorXd z = s.y + s.c * w.cwiseInverse();
  beta = wls_absorb(s.X, z, w, s.groups, s.n_groups, r);
  if (s.n_groups > 0) {
    VectorXd num = VectorXd::Zero(s.n_groups), den = VectorXd::Zero(s.n_groups);
    const VectorXd e = z - s.X * beta;
    for (Eigen::Index i = 0; i < n; ++i) {
      num(s.groups[static_cast<std::size_t>(i)]) += w(i) * e(i);
      den(s.groups[static_cast<std::size_t>(i)]) += w(i);
    }
    alpha = num.cwiseQuotient(den);
  }
}

}  // namespace detail

// Minimises sum rho_tau(y - X b - a_g) through a sequence of smoothed losses
// 0.5 sqrt(u^2 + d^2) + (tau - 0.5) u, with d annealed from 1e-2 to 1e-6
// times the mean absolute OLS residual. Each stage runs damped Newton with
// an IRLS fallback until the coefficient max-change is below
// 1e-8 (1 + max|b|). Without groups the result is polished to the nearest
// basic solution when that does not raise the exact loss; a flat optimum
// keeps the smoothed (midpoint) solution.
inline CqrSolution cqr_solve(const MatrixXd& X, const VectorXd& y, double tau, const std::vector<int>& groups = {},
                             int n_groups = 0, int max_iter = 200) {
  const Eigen::Index n = X.rows();
  VectorXd w = VectorXd::Ones(n), r(n);
  VectorXd beta = detail::wls_absorb(X, y, w, groups, n_groups, r);
  VectorXd alpha = VectorXd::Zero(n_groups);
  if (n_groups > 0) {
    VectorXd cnt = VectorXd::Zero(n_groups);
    const VectorXd e = y - X * beta;
    for (Eigen::Index i = 0; i < n; ++i) {
      alpha(groups[static_cast<std::size_t>(i)]) += e(i);
      cnt(groups[static_cast<std::size_t>(i)]) += 1.0;
    }
    alpha = alpha.cwiseQuotient(cnt);
  }
  double scale = r.cwiseAbs().mean();
  if (!(scale > 0.0)) scale = 1.0;
  CqrSolution sol;
  double change = 0.0;
  VectorXd u;
  for (double delta = 1e-2; delta >= 1e-6 * (1.0 - 1e-9); delta /= 10.0) {
    const detail::Smoothed sm{X, y, groups, n_groups, tau - 0.5, delta * scale};
    bool converged = false;
    u = sm.resid(beta, alpha);
    double f = sm.value(u);
    for (int it = 0; it < max_iter; ++it, ++sol.iterations) {
      VectorXd db, da, nb = beta, na = alpha;
      bool moved = false;
      if (detail::newton_direction(sm, u, db, da)) {
        for (double t = 1.0; t > 1e-12; t *= 0.5) {
          nb = beta + t * db;
          na = alpha + t * da;
          const VectorXd nu = sm.resid(nb, na);
          const double nf = sm.value(nu);
          if (nf <= f) {
            moved = true;
            break;
          }
        }
      }
      if (!moved) {
        nb = beta;
        na = alpha;
        detail::mm_step(sm, u, nb, na);
      }
      change = (nb - beta).cwiseAbs().maxCoeff();
      beta = nb;
      alpha = na;
      u = sm.resid(beta, alpha);
      f = sm.value(u);
      if (change < 1e-8 * (1.0 + beta.cwiseAbs().maxCoeff())) {
        converged = true;
        break;
      }
    }
    if (!converged && delta < 1e-5)
      throw ConvergenceError("cqr: no convergence, final coefficient change " + detail::format_double(change), change);
  }
  sol.beta = beta;
  sol.resid = u;
  sol.loss = check_loss(u, tau);
  if (n_groups == 0) {
    if (auto b = detail::basic_solution(X, y, u)) {
      const VectorXd ub = y - X * *b;
      const double lb = check_loss(ub, tau);
      if (lb <= sol.loss * (1.0 + 1e-9) + 1e-300) {
        const double zero_tol = 1e-10 * (1.0 + y.cwiseAbs().maxCoeff());
        sol.nonunique = detail::flat_at(X, ub, tau, zero_tol);
        if (!sol.nonunique) {
          sol.beta = *b;
          sol.resid = ub;
          sol.loss = lb;
          sol.polished = true;
        }
      }
    }
  }
  return sol;
}

namespace detail {

struct CqrDesign {
  Design d;
  std::vector<int> groups;
  int n_groups = 0;
};

inline CqrDesign cqr_design(const PanelDataset& ds, const CqrSpec& spec) {
  DesignRequest req;
  req.dependent = spec.dependent;
  req.regressors = spec.regressors;
  req.intercept = spec.intercept && !spec.absorbs_entity();
  for (const auto& f : spec.fe_dims)
    if (f != "entity") req.indicator_dims.push_back(f);
  req.cluster = "entity";
  CqrDesign out{build_design(ds, req)};
  const Eigen::Index n = out.d.X.rows(), k = out.d.X.cols();
  if (k == 0) throw ValidationError("cqr: no coefficients to estimate beyond the entity effects");
  if (spec.absorbs_entity()) {
    const auto fc = compact_codes(out.d.cluster);
    out.groups = fc.code;
    out.n_groups = fc.levels;
  }
  if (n <= k + out.n_groups)
    throw DataError("cqr: " + std::to_string(n) + " complete cases for " + std::to_string(k + out.n_groups) +
                    " parameters");
  if (spec.absorbs_entity()) {
    // Rank check on the entity-demeaned design.
    MatrixXd means = MatrixXd::Zero(out.n_groups, k);
    VectorXd count = VectorXd::Zero(out.n_groups);
    for (Eigen::Index i = 0; i < n; ++i) {
      means.row(out.groups[static_cast<std::size_t>(i)]) += out.d.X.row(i);
      count(out.groups[static_cast<std::size_t>(i)]) += 1.0;
    }
    MatrixXd Xd = out.d.X;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int g = out.groups[static_cast<std::size_t>(i)];
      Xd.row(i) -= means.row(g) / count(g);
    }
    if (const auto bad = first_dependent_column(Xd.transpose() * Xd); bad >= 0)
      throw CollinearityError("cqr: '" + out.d.names[static_cast<std::size_t>(bad)] +
                                  "' is collinear with earlier columns or the entity effects",
                              out.d.names[static_cast<std::size_t>(bad)]);
  } else if (const auto bad = first_dependent_column(out.d.X.transpose() * out.d.X); bad >= 0) {
    throw CollinearityError("cqr: '" + out.d.names[static_cast<std::size_t>(bad)] + "' is collinear with earlier columns",
                            out.d.names[static_cast<std::size_t>(bad)]);
  }
  return out;
}

}  // namespace detail

// Point estimates only, by name.
inline std::pair<std::vector<std::string>, CqrSolution> cqr_coefficients(const PanelDataset& ds, const CqrSpec& spec) {
  auto cd = detail::cqr_design(ds, spec);
  auto sol = cqr_solve(cd.d.X, cd.d.y, spec.tau, cd.groups, cd.n_groups, spec.max_iter);
  return {cd.d.names, std::move(sol)};
}

inline FitResult cqr_fit(const PanelDataset& ds, const CqrSpec& spec) {
  spec.validate(ds);
  auto cd = detail::cqr_design(ds, spec);
  const CqrSolution sol = cqr_solve(cd.d.X, cd.d.y, spec.tau, cd.groups, cd.n_groups, spec.max_iter);
  FitResult f;
  f.names = cd.d.names;
  f.coef = sol.beta;
  f.n_obs = static_cast<std::size_t>(cd.d.X.rows());
  f.n_dropped = cd.d.n_dropped;
  f.fe_dims = spec.fe_dims;
  const auto names = f.names;
  auto bs = bootstrap_vcov(
      [&](const PanelDataset& b) {
        auto [bn, bsol] = cqr_coefficients(b, spec);
        VectorXd v(static_cast<Eigen::Index>(names.size()));
        for (std::size_t j = 0; j < names.size(); ++j) {
          auto it = std::find(bn.begin(), bn.end(), names[j]);
          v(static_cast<Eigen::Index>(j)) = it == bn.end() ? stats::kMissing : bsol.beta(it - bn.begin());
        }
        return v;
      },
      ds, spec.vcov);
  f.vcov = bs.vcov;
  f.bootstrap_failures = bs.failures;
  f.se_method = spec.vcov.tag();
  f.notes["dependent"] = spec.dependent;
  f.notes["tau"] = detail::format_double(spec.tau);
  f.notes["check_loss"] = detail::format_double(sol.loss);
  f.notes["nonunique"] = sol.nonunique ? "true" : "false";
  if (sol.nonunique) f.warnings.push_back("check-loss optimum is not unique; reporting the smoothed midpoint");
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

}  // namespace cdmkit
