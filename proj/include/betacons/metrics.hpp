#pragma once

// Agreement, divergence and significance measures used by the evaluation
// protocol.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "betacons/beta_model.hpp"
#include "betacons/errors.hpp"
#include "betacons/special_fns.hpp"

namespace betacons {

/// Predictions and targets of equal, non-zero length with finite values.
class PairedSeries {
 public:
  PairedSeries(std::span<const double> predictions, std::span<const double> targets)
      : predictions_(predictions), targets_(targets) {
    if (predictions.size() != targets.size()) {
      throw ShapeError("PairedSeries: length mismatch (" + std::to_string(predictions.size()) + " vs " +
                       std::to_string(targets.size()) + ")");
    }
    if (predictions.empty()) throw ShapeError("PairedSeries: empty series");
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      if (!std::isfinite(predictions[i]) || !std::isfinite(targets[i])) {
        throw DomainError("PairedSeries: non-finite value at index " + std::to_string(i));
      }
    }
  }

  std::span<const double> predictions() const noexcept { return predictions_; }
  std::span<const double> targets() const noexcept { return targets_; }
  std::size_t size() const noexcept { return predictions_.size(); }

 private:
  std::span<const double> predictions_;
  std::span<const double> targets_;
};

struct CccResult {
  double value = 0.0;
  // Both series constant with equal means: 0/0, reported as 0.
  bool degenerate = false;
};

/// Concordance correlation coefficient with population moments:
/// 2 cov / (var_x + var_y + (mean_x - mean_y)^2).
inline CccResult ccc(const PairedSeries& s) {
  if (s.size() < 2) throw ShapeError("ccc: need at least 2 paired values");
  const auto x = s.predictions();
  const auto y = s.targets();
  const auto n = static_cast<double>(s.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double vx = 0.0;
  double vy = 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= n;
  vy /= n;
  cov /= n;
  const auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
  };
  const bool cx = constant(x);
  const bool cy = constant(y);
  if (cx && cy) return {0.0, true};
  if (cx || cy) return {0.0, false};
  const double denom = vx + vy + (mx - my) * (mx - my);
  return {std::clamp(2.0 * cov / denom, -1.0, 1.0), false};
}

inline CccResult ccc(std::span<const double> predictions, std::span<const double> targets) {
  return ccc(PairedSeries(predictions, targets));
}

inline double mse(const PairedSeries& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double d = s.predictions()[i] - s.targets()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(s.size());
}

inline double mse(std::span<const double> predictions, std::span<const double> targets) {
  return mse(PairedSeries(predictions, targets));
}

/// KL(p || q) between two Beta distributions in closed form.
inline double kl_beta(const BetaParams& p, const BetaParams& q) {
  const double ap = p.alpha();
  const double bp = p.beta();
  const double aq = q.alpha();
  const double bq = q.beta();
  if (ap == aq && bp == bq) return 0.0;
  const double kl = log_beta(aq, bq) - log_beta(ap, bp) + (ap - aq) * digamma(ap) + (bp - bq) * digamma(bp) +
                    (aq - ap + bq - bp) * digamma(ap + bp);
  // Rounding can leave a tiny negative value for near-identical shapes.
  return std::max(kl, 0.0);
}

enum class WilcoxonMethod { kAuto, kExact, kNormal };

struct WilcoxonResult {
  // min(T+, T-), the usual two-sided statistic.
  double statistic = 0.0;
  double t_plus = 0.0;
  double p_value = 1.0;
  std::size_t n_effective = 0;
  bool exact = false;
  // All differences zero.
  bool degenerate = false;
};

inline constexpr std::size_t kWilcoxonMinPairs = 6;
inline constexpr std::size_t kWilcoxonExactMax = 20;

namespace detail {

// Average ranks of |d| (1-based), ties sharing the mean rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Exact null distribution of T+ for the given ranks. Ranks are multiples of
// 1/2, so the distribution is tabulated over doubled rank sums.
inline double exact_two_sided(std::span<const double> ranks, double t_plus) {
  std::vector<int> twice(ranks.size());
  int total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    twice[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
    total += twice[i];
  }
  std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
  counts[0] = 1.0;
  int reach = 0;
  for (int r : twice) {
    for (int s = reach; s >= 0; --s) {
      if (counts[static_cast<std::size_t>(s)] != 0.0) counts[static_cast<std::size_t>(s + r)] += counts[static_cast<std::size_t>(s)];
    }
    reach += r;
  }
  const int t = static_cast<int>(std::lround(2.0 * t_plus));
  double lower = 0.0;
  double upper = 0.0;
  for (int s = 0; s <= total; ++s) {
    if (s <= t) lower += counts[static_cast<std::size_t>(s)];
    if (s >= t) upper += counts[static_cast<std::size_t>(s)];
  }
  const double all = std::ldexp(1.0, static_cast<int>(ranks.size()));
  return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

inline double normal_two_sided(std::span<const double> abs_diffs, std::span<const double> ranks, double t_plus) {
  const auto n = static_cast<double>(ranks.size());
  const double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  // Tie correction: sum over tie groups of (t^3 - t) / 48.
  std::vector<double> sorted(abs_diffs.begin(), abs_diffs.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const auto t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  if (var <= 0.0) return 1.0;
  const double dev = std::max(0.0, std::abs(t_plus - mean) - 0.5);
  const double z = dev / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace detail

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are dropped,
/// ties get average ranks. The exact null distribution is used up to 20
/// non-zero pairs, the normal approximation (tie and continuity corrected)
/// beyond that.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                           WilcoxonMethod method = WilcoxonMethod::kAuto) {
  if (a.size() != b.size()) {
    throw ShapeError("wilcoxon_signed_rank: length mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  std::vector<double> diffs;
  diffs.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw DomainError("wilcoxon_signed_rank: non-finite value at index " + std::to_string(i));
    }
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  WilcoxonResult result;
  result.n_effective = diffs.size();
  if (diffs.empty()) {
    result.degenerate = true;
    return result;
  }
  if (diffs.size() < kWilcoxonMinPairs) {
    throw InsufficientData("wilcoxon_signed_rank: need at least " + std::to_string(kWilcoxonMinPairs) +
                           " non-zero differences, got " + std::to_string(diffs.size()));
  }
  std::vector<double> abs_diffs(diffs.size());
  std::transform(diffs.begin(), diffs.end(), abs_diffs.begin(), [](double d) { return std::abs(d); });
  const auto ranks = detail::average_ranks(abs_diffs);
  double t_plus = 0.0;
  double t_minus = 0.0;
  for (std::size_t i = 0; i < diffs.size(); ++i) (diffs[i] > 0.0 ? t_plus : t_minus) += ranks[i];
  result.t_plus = t_plus;
  result.statistic = std::min(t_plus, t_minus);
  const bool use_exact = method == WilcoxonMethod::kExact ||
                         (method == WilcoxonMethod::kAuto && diffs.size() <= kWilcoxonExactMax);
  result.exact = use_exact;
  result.p_value = use_exact ? detail::exact_two_sided(ranks, t_plus)
                             : detail::normal_two_sided(abs_diffs, ranks, t_plus);
  return result;
}

}  // namespace betacons
