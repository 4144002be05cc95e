#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "cdmkit/error.hpp"

namespace cdmkit::stats {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) noexcept { return std::isnan(v); }

inline double normal_pdf(double z) noexcept {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

inline double normal_cdf(double z) noexcept {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DataError("normal_quantile: p must lie in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// Upper tail of chi-square with `df` degrees of freedom.
inline double chi2_upper(double x, double df) {
  if (x <= 0.0) return 1.0;
  return boost::math::cdf(
      boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

// Two-sided p-value for a z statistic, or a t statistic when dof is finite.
inline double two_sided_p(double stat, double dof = std::numeric_limits<double>::infinity()) {
  if (std::isnan(stat)) return kMissing;
  const double a = std::abs(stat);
  if (std::isinf(dof) || dof <= 0.0) return std::erfc(a / std::numbers::sqrt2);
  return 2.0 * boost::math::cdf(
                   boost::math::complement(boost::math::students_t_distribution<double>(dof), a));
}

// Mills ratio (1 - Phi(x)) / phi(x) for x > 0 by Lentz continued fraction.
inline double mills_ratio_upper(double x) {
  // R(x) = 1/(x+ 1/(x+ 2/(x+ 3/(x+ ...))))
  constexpr double tiny = 1e-300;
  double f = x;
  double c = x;
  double d = 0.0;
  for (int k = 1; k < 500; ++k) {
    d = x + k * d;
    if (std::abs(d) < tiny) d = tiny;
    c = x + k / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return 1.0 / f;
}

// Inverse Mills ratio phi(z)/Phi(z). Finite input only.
inline double inverse_mills(double z) {
  if (!std::isfinite(z)) throw DataError("inverse_mills: non-finite index");
  if (z < -30.0) {
    // phi(z)/Phi(z) = 1 / R(-z) with R the upper-tail Mills ratio.
    return 1.0 / mills_ratio_upper(-z);
  }
  return normal_pdf(z) / normal_cdf(z);
}

// log Phi(z), accurate in the lower tail.
inline double log_normal_cdf(double z) {
  if (z < -30.0)
    return -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi) +
           std::log(mills_ratio_upper(-z));
  return std::log(normal_cdf(z));
}

}  // namespace cdmkit::stats
