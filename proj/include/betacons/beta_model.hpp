#pragma once

// Beta consensus model: annotator moments -> Beta shapes by moment matching,
// and the closed-form descriptors that follow from the shapes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "betacons/errors.hpp"
#include "betacons/special_fns.hpp"

namespace betacons {

inline constexpr double kDefaultClampEpsilon = 1e-4;

/// Empirical mean and standard deviation of annotator values in [0, 1].
struct MomentPair {
  double mu = 0.5;
  double sigma = 0.0;

  double variance() const noexcept { return sigma * sigma; }
  // Largest variance any distribution on [0, 1] with this mean can have.
  double variance_bound() const noexcept { return mu * (1.0 - mu); }

  // 0 < mu < 1 and 0 < sigma^2 < mu (1 - mu).
  bool valid() const noexcept {
    const double v = variance();
    return mu > 0.0 && mu < 1.0 && v > 0.0 && v < variance_bound();
  }

  friend bool operator==(const MomentPair&, const MomentPair&) = default;
};

/// Shape pair of a Beta distribution; both shapes strictly positive.
class BetaParams {
 public:
  BetaParams(double alpha, double beta) : alpha_(alpha), beta_(beta) {
    if (!std::isfinite(alpha) || !std::isfinite(beta) || !(alpha > 0.0) || !(beta > 0.0)) {
      throw DomainError("BetaParams: shapes must be finite and positive, got alpha=" +
                        detail::fmt_real(alpha) + ", beta=" + detail::fmt_real(beta));
    }
  }

  double alpha() const noexcept { return alpha_; }
  double beta() const noexcept { return beta_; }
  // Precision (concentration) alpha + beta.
  double phi() const noexcept { return alpha_ + beta_; }

  static BetaParams uniform() { return {1.0, 1.0}; }

  friend bool operator==(const BetaParams&, const BetaParams&) = default;

 private:
  double alpha_;
  double beta_;
};

struct DescriptorSet {
  double mean = 0.0;
  double std = 0.0;
  double skew = 0.0;
  double kurt_ex = 0.0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

/// Divide-by-N (population) or divide-by-(N-1) (sample) spread.
enum class StdConvention { kPopulation, kSample };

/// Mean and standard deviation of one window's annotator values, before any
/// clamping. Population convention unless asked otherwise.
inline MomentPair consensus_moments(std::span<const double> annotations,
                                    StdConvention convention = StdConvention::kPopulation) {
  if (annotations.size() < 2) {
    throw InsufficientData("consensus_moments: need at least 2 annotations, got " +
                           std::to_string(annotations.size()));
  }
  for (double a : annotations) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw DomainError("consensus_moments: annotation outside [0, 1]: " + detail::fmt_real(a));
    }
  }
  if (std::all_of(annotations.begin(), annotations.end(), [&](double a) { return a == annotations[0]; })) {
    return {annotations[0], 0.0};
  }
  const auto n = static_cast<double>(annotations.size());
  double mean = 0.0;
  for (double a : annotations) mean += a;
  mean /= n;
  double ss = 0.0;
  for (double a : annotations) ss += (a - mean) * (a - mean);
  const double denom = convention == StdConvention::kPopulation ? n : n - 1.0;
  return {mean, std::sqrt(ss / denom)};
}

/// Pushes raw moments into the valid region: mu into [eps, 1 - eps] and
/// sigma^2 into [eps, 1 - eps] * mu (1 - mu). Identity on already-valid
/// moments that sit inside those margins.
inline MomentPair clamp_moments(const MomentPair& raw, double epsilon = kDefaultClampEpsilon) {
  if (!(epsilon > 0.0 && epsilon < 0.5)) {
    throw DomainError("clamp_moments: epsilon must lie in (0, 0.5), got " + detail::fmt_real(epsilon));
  }
  if (!std::isfinite(raw.mu) || !std::isfinite(raw.sigma)) {
    throw DomainError("clamp_moments: non-finite moments");
  }
  const double mu = std::clamp(raw.mu, epsilon, 1.0 - epsilon);
  const double bound = mu * (1.0 - mu);
  const double var = std::clamp(raw.sigma * raw.sigma, epsilon * bound, (1.0 - epsilon) * bound);
  return {mu, std::sqrt(var)};
}

/// Beta shapes whose mean and variance equal the given moments:
/// phi = mu (1 - mu) / sigma^2 - 1, alpha = mu phi, beta = (1 - mu) phi.
inline BetaParams moment_match(const MomentPair& m) {
  if (!(m.mu > 0.0 && m.mu < 1.0)) {
    throw ValidityError("moment_match: requires 0 < mu < 1, got mu=" + detail::fmt_real(m.mu));
  }
  const double var = m.variance();
  if (!(var > 0.0)) {
    throw ValidityError("moment_match: requires sigma^2 > 0, got sigma=" + detail::fmt_real(m.sigma));
  }
  if (!(var < m.variance_bound())) {
    throw ValidityError("moment_match: requires sigma^2 < mu(1-mu), got sigma^2=" + detail::fmt_real(var) +
                        " >= " + detail::fmt_real(m.variance_bound()));
  }
  const double phi = m.variance_bound() / var - 1.0;
  const double alpha = m.mu * phi;
  const double beta = (1.0 - m.mu) * phi;
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw ValidityError("moment_match: shapes not positive (alpha=" + detail::fmt_real(alpha) +
                        ", beta=" + detail::fmt_real(beta) + ")");
  }
  return {alpha, beta};
}

struct MeanStd {
  double mean;
  double std;
};

inline MeanStd beta_mean_std(const BetaParams& p) {
  const double a = p.alpha();
  const double b = p.beta();
  const double s = a + b;
  return {a / s, std::sqrt(a * b / (s * s * (s + 1.0)))};
}

inline double beta_skewness(const BetaParams& p) {
  const double a = p.alpha();
  const double b = p.beta();
  const double s = a + b;
  return 2.0 * (b - a) * std::sqrt(s + 1.0) / ((s + 2.0) * std::sqrt(a * b));
}

inline double beta_excess_kurtosis(const BetaParams& p) {
  const double a = p.alpha();
  const double b = p.beta();
  const double s = a + b;
  const double d = a - b;
  return 6.0 * (d * d * (s + 1.0) - a * b * (s + 2.0)) / (a * b * (s + 2.0) * (s + 3.0));
}

/// Exact quantile by inverting the Beta CDF.
inline double beta_quantile(const BetaParams& p, double prob) {
  return inv_reg_inc_beta(prob, p.alpha(), p.beta());
}

/// Closed-form median approximation (alpha - 1/3) / (alpha + beta - 2/3).
/// Approximate only, and only defined for alpha, beta > 1; use
/// beta_quantile(p, 0.5) for the exact median.
inline double beta_median_approx(const BetaParams& p) {
  if (!(p.alpha() > 1.0) || !(p.beta() > 1.0)) {
    throw DomainError("beta_median_approx: requires alpha > 1 and beta > 1, got alpha=" +
                      detail::fmt_real(p.alpha()) + ", beta=" + detail::fmt_real(p.beta()));
  }
  return (p.alpha() - 1.0 / 3.0) / (p.alpha() + p.beta() - 2.0 / 3.0);
}

inline double beta_log_pdf(const BetaParams& p, double x) {
  const double a = p.alpha();
  const double b = p.beta();
  if (!(x >= 0.0 && x <= 1.0)) {
    throw DomainError("beta_pdf: x must lie in [0, 1], got " + detail::fmt_real(x));
  }
  if (x == 0.0 || x == 1.0) {
    const double shape = x == 0.0 ? a : b;
    if (shape < 1.0) {
      throw DomainError("beta_pdf: density diverges at x=" + detail::fmt_real(x) +
                        " for shape " + detail::fmt_real(shape));
    }
    if (shape > 1.0) return -std::numeric_limits<double>::infinity();
    return -log_beta(a, b);  // shape exactly 1 at this end
  }
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - log_beta(a, b);
}

inline double beta_pdf(const BetaParams& p, double x) { return std::exp(beta_log_pdf(p, x)); }

inline DescriptorSet descriptors(const BetaParams& p) {
  const auto [mean, sd] = beta_mean_std(p);
  DescriptorSet d;
  d.mean = mean;
  d.std = sd;
  d.skew = beta_skewness(p);
  d.kurt_ex = beta_excess_kurtosis(p);
  d.median = beta_quantile(p, 0.5);
  d.q25 = beta_quantile(p, 0.25);
  d.q75 = beta_quantile(p, 0.75);
  return d;
}

/// Moments -> clamp -> Beta, the path shared by targets and predictions.
inline BetaParams fit_beta(const MomentPair& raw, double epsilon = kDefaultClampEpsilon) {
  return moment_match(clamp_moments(raw, epsilon));
}

}  // namespace betacons
