#pragma once

// Subject-independent cross-validation grid over variants, feature sets,
// folds and seeds; CCC / descriptor / KL reports, Wilcoxon significance and
// density dumps.

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "betacons/beta_model.hpp"
#include "betacons/csv.hpp"
#include "betacons/errors.hpp"
#include "betacons/metrics.hpp"
#include "betacons/nn.hpp"
#include "betacons/pipeline.hpp"
#include "betacons/rng.hpp"
#include "json.hpp"

namespace betacons {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Folds ---------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignment;
  std::vector<FoldSplit> folds;

  /// Throws unless every split is a subject-disjoint partition.
  void check() const {
    for (std::size_t i = 0; i < folds.size(); ++i) {
      const auto& f = folds[i];
      std::set<std::string> seen;
      for (const auto* part : {&f.train, &f.validation, &f.test}) {
        for (const auto& s : *part) {
          if (!seen.insert(s).second) {
            throw DomainError("fold " + std::to_string(i) + ": subject " + s + " appears in more than one split");
          }
        }
      }
      if (seen.size() != assignment.size()) throw DomainError("fold " + std::to_string(i) + ": splits do not cover all subjects");
      if (f.train.empty() || f.validation.empty() || f.test.empty()) {
        throw DomainError("fold " + std::to_string(i) + ": empty split");
      }
    }
  }
};

/// Seeded shuffle then round-robin assignment; test = fold i, validation =
/// fold (i + 1) mod k, train = the rest.
inline FoldPlan make_folds(std::vector<std::string> subjects, int k, std::uint64_t seed) {
  if (k < 3) throw DomainError("make_folds: k must be >= 3, got " + std::to_string(k));
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (subjects.size() < static_cast<std::size_t>(k)) {
    throw InsufficientData("make_folds: " + std::to_string(subjects.size()) + " subjects cannot fill " +
                           std::to_string(k) + " folds");
  }
  Rng rng(seed, {fnv1a("folds")});
  rng.shuffle(std::span<std::string>(subjects));
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  std::vector<std::vector<std::string>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const int f = static_cast<int>(i % static_cast<std::size_t>(k));
    plan.assignment[subjects[i]] = f;
    members[static_cast<std::size_t>(f)].push_back(subjects[i]);
  }
  for (auto& m : members) std::sort(m.begin(), m.end());
  for (int i = 0; i < k; ++i) {
    FoldSplit split;
    const int v = (i + 1) % k;
    split.test = members[static_cast<std::size_t>(i)];
    split.validation = members[static_cast<std::size_t>(v)];
    for (int j = 0; j < k; ++j) {
      if (j == i || j == v) continue;
      const auto& m = members[static_cast<std::size_t>(j)];
      split.train.insert(split.train.end(), m.begin(), m.end());
    }
    std::sort(split.train.begin(), split.train.end());
    plan.folds.push_back(std::move(split));
  }
  plan.check();
  return plan;
}

// Configuration -------------------------------------------------------------

enum class Descriptor { kMean, kStd, kMedian, kQ25, kQ75, kSkew, kKurt };
inline constexpr std::array<Descriptor, 7> kAllDescriptors = {Descriptor::kMean,   Descriptor::kStd,
                                                              Descriptor::kMedian, Descriptor::kQ25,
                                                              Descriptor::kQ75,    Descriptor::kSkew,
                                                              Descriptor::kKurt};

inline std::string descriptor_name(Descriptor d) {
  static const char* names[] = {"mean", "std", "median", "q25", "q75", "skew", "kurt"};
  return names[static_cast<int>(d)];
}

inline Descriptor parse_descriptor(const std::string& s) {
  for (auto d : kAllDescriptors) {
    if (descriptor_name(d) == s) return d;
  }
  throw DomainError("unknown descriptor '" + s + "' (expected mean, std, median, q25, q75, skew or kurt)");
}

inline double descriptor_value(const DescriptorSet& ds, Descriptor d) {
  switch (d) {
    case Descriptor::kMean: return ds.mean;
    case Descriptor::kStd: return ds.std;
    case Descriptor::kMedian: return ds.median;
    case Descriptor::kQ25: return ds.q25;
    case Descriptor::kQ75: return ds.q75;
    case Descriptor::kSkew: return ds.skew;
    case Descriptor::kKurt: return ds.kurt_ex;
  }
  return kNaN;
}

enum class PredictorMode { kTrained, kOracle, kConstant };
enum class KlDirection { kTruthPred, kPredTruth };
enum class CccPooling { kPooled, kPerSubject };

inline std::string kl_direction_name(KlDirection d) { return d == KlDirection::kTruthPred ? "truth||pred" : "pred||truth"; }
inline std::string pooling_name(CccPooling p) { return p == CccPooling::kPooled ? "pooled" : "per_subject"; }
inline std::string mode_name(PredictorMode m) {
  return m == PredictorMode::kTrained ? "trained" : (m == PredictorMode::kOracle ? "oracle" : "constant");
}

struct FeatureSet {
  std::string name;
  std::vector<std::string> modalities;
};

/// Each modality on its own plus a "fusion" set of all of them when there is
/// more than one.
inline std::vector<FeatureSet> default_feature_sets(const Dataset& ds) {
  std::vector<FeatureSet> out;
  std::vector<std::string> all;
  for (const auto& m : ds.modalities) {
    out.push_back({m.name, {m.name}});
    all.push_back(m.name);
  }
  if (all.size() > 1) out.push_back({"fusion", all});
  return out;
}

struct ExperimentConfig {
  int k = 5;
  int n_seeds = 10;
  std::uint64_t master_seed = 1;
  int fold_limit = 0;  // run only the first N folds; 0 = all
  TrainConfig train;
  std::vector<VariantKind> variants = {VariantKind::kIndependent, VariantKind::kSharedFirst, VariantKind::kFullyShared};
  std::vector<Descriptor> baseline_targets = {kAllDescriptors.begin(), kAllDescriptors.end()};
  std::vector<FeatureSet> feature_sets;  // empty: default_feature_sets
  std::string target_name = "consensus";
  PredictorMode mode = PredictorMode::kTrained;
  KlDirection kl_direction = KlDirection::kTruthPred;
  CccPooling pooling = CccPooling::kPooled;
  double significance_level = 0.05;
  int jobs = 1;
  bool keep_predictions = true;  // seed 0 only

  void validate() const {
    auto fail = [](const std::string& what) { throw DomainError("ExperimentConfig: " + what); };
    if (k < 3) fail("k must be >= 3");
    if (n_seeds < 1) fail("n_seeds must be positive");
    if (fold_limit < 0 || fold_limit > k) fail("fold_limit must lie in [0, k]");
    if (jobs < 1) fail("jobs must be positive");
    if (!(significance_level > 0.0 && significance_level < 1.0)) fail("significance_level must lie in (0, 1)");
    for (auto v : variants) {
      if (v == VariantKind::kBaseline) fail("B is configured through baseline_targets, not variants");
    }
    if (variants.empty() && baseline_targets.empty()) fail("nothing to run");
    train.validate();
  }
};

// Results -------------------------------------------------------------------

struct KlStats {
  double mean_pred = kNaN;     // mean D(., .) between truth and prediction
  double mean_uniform = kNaN;  // same direction with Beta(1,1) in place of the prediction
  std::size_t n_below = 0;     // windows where the prediction beats the uniform reference
};

struct CellResult {
  std::string variant;  // M_I, M_S, M_F or B
  std::optional<Descriptor> descriptor;  // B only
  std::string features;
  int fold = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  int epochs = 0;
  int best_epoch = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  double ccc_mu = kNaN;
  double ccc_sigma = kNaN;
  std::array<double, 7> descriptor_ccc = {kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN};
  KlStats kl_truth_pred;
  KlStats kl_pred_truth;

  // Seed-0 predictions on the test windows (dataset sample indices).
  std::vector<std::size_t> test_samples;
  std::vector<double> mu_hat;
  std::vector<double> sigma_hat;

  std::string name() const { return descriptor ? variant + "(" + descriptor_name(*descriptor) + ")" : variant; }
  const KlStats& kl(KlDirection d) const { return d == KlDirection::kTruthPred ? kl_truth_pred : kl_pred_truth; }
};

struct Comparison {
  std::string competitor;
  double mean_score = kNaN;
  double p_value = kNaN;
  std::size_t n_pairs = 0;
  std::string status;  // best, tied, worse, inconclusive
};

struct SignificanceEntry {
  std::string features;
  std::string metric;
  bool higher_is_better = true;
  std::string best;
  std::vector<Comparison> comparisons;
};

struct ExperimentReport {
  ExperimentConfig config;
  FoldPlan plan;
  std::vector<FeatureSet> feature_sets;
  std::size_t n_samples = 0;
  std::vector<CellResult> cells;
  std::vector<SignificanceEntry> significance;

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return !c.ok; }));
  }
  int folds_run() const { return config.fold_limit == 0 ? config.k : config.fold_limit; }
  std::size_t expected_cells() const {
    return feature_sets.size() * (config.variants.size() + config.baseline_targets.size()) *
           static_cast<std::size_t>(folds_run()) * static_cast<std::size_t>(config.n_seeds);
  }
};

// Grid ----------------------------------------------------------------------

namespace detail {

struct FoldData {
  std::vector<std::size_t> train, val, test;
  Normalization norm;
  Eigen::MatrixXd x_train, x_val, x_test;
};

inline Eigen::MatrixXd feature_matrix(const Dataset& ds, const std::vector<std::size_t>& idx,
                                      const std::vector<ModalityBlock>& blocks) {
  Eigen::Index width = 0;
  for (const auto& b : blocks) width += b.dim;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Eigen::Index col = 0;
    for (const auto& b : blocks) {
      x.row(static_cast<Eigen::Index>(i)).segment(col, b.dim) = ds.samples[idx[i]].features.segment(b.offset, b.dim).transpose();
      col += b.dim;
    }
  }
  return x;
}

inline double group_ccc(const std::vector<double>& pred, const std::vector<double>& truth,
                        const std::vector<std::string>* groups, CccPooling pooling) {
  if (pooling == CccPooling::kPooled || groups == nullptr) return ccc(pred, truth).value;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& slot = by[(*groups)[i]];
    slot.first.push_back(pred[i]);
    slot.second.push_back(truth[i]);
  }
  double acc = 0.0;
  int n = 0;
  for (const auto& [g, v] : by) {
    if (v.first.size() < 2) continue;
    acc += ccc(v.first, v.second).value;
    ++n;
  }
  if (n == 0) throw InsufficientData("per-subject CCC: no subject with 2 or more test windows");
  return acc / n;
}

struct Task {
  std::size_t feature_set;
  int fold;
  int seed_index;
  std::optional<VariantKind> variant;
  std::optional<Descriptor> descriptor;
};

}  // namespace detail

/// Trains and evaluates every (feature set, variant or baseline target, fold,
/// seed) cell. Cell failures are recorded and the grid continues.
inline ExperimentReport run_grid(const Dataset& ds, const ExperimentConfig& cfg) {
  cfg.validate();
  if (ds.samples.empty()) throw InsufficientData("run_grid: empty dataset");
  ExperimentReport report;
  report.config = cfg;
  report.n_samples = ds.samples.size();
  report.feature_sets = cfg.feature_sets.empty() ? default_feature_sets(ds) : cfg.feature_sets;
  report.plan = make_folds(ds.subjects(), cfg.k, cfg.master_seed);
  const int n_folds = report.folds_run();

  // Ground-truth Beta and descriptors per sample.
  std::vector<BetaParams> truth;
  std::vector<DescriptorSet> truth_desc;
  truth.reserve(ds.samples.size());
  truth_desc.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    truth.push_back(moment_match(s.target));
    truth_desc.push_back(descriptors(truth.back()));
  }

  // Per (feature set, fold) normalised matrices.
  std::vector<std::vector<detail::FoldData>> folds(report.feature_sets.size());
  for (std::size_t f = 0; f < report.feature_sets.size(); ++f) {
    std::vector<ModalityBlock> blocks;
    for (const auto& m : report.feature_sets[f].modalities) blocks.push_back(ds.modality(m));
    for (int i = 0; i < n_folds; ++i) {
      detail::FoldData fd;
      const auto& split = report.plan.folds[static_cast<std::size_t>(i)];
      const std::set<std::string> tr(split.train.begin(), split.train.end());
      const std::set<std::string> va(split.validation.begin(), split.validation.end());
      const std::set<std::string> te(split.test.begin(), split.test.end());
      for (std::size_t n = 0; n < ds.samples.size(); ++n) {
        const auto& sid = ds.samples[n].subject_id;
        const int hits = int(tr.contains(sid)) + int(va.contains(sid)) + int(te.contains(sid));
        if (hits != 1) throw DomainError("fold " + std::to_string(i) + ": subject " + sid + " not in exactly one split");
        (tr.contains(sid) ? fd.train : va.contains(sid) ? fd.val : fd.test).push_back(n);
      }
      if (fd.train.empty() || fd.val.empty() || fd.test.empty()) {
        throw InsufficientData("fold " + std::to_string(i) + " of feature set " + report.feature_sets[f].name +
                               " has an empty split");
      }
      fd.x_train = detail::feature_matrix(ds, fd.train, blocks);
      fd.norm = Normalization::fit(fd.x_train);
      fd.x_train = fd.norm.apply(fd.x_train);
      fd.x_val = fd.norm.apply(detail::feature_matrix(ds, fd.val, blocks));
      fd.x_test = fd.norm.apply(detail::feature_matrix(ds, fd.test, blocks));
      folds[f].push_back(std::move(fd));
    }
  }

  std::vector<detail::Task> tasks;
  for (std::size_t f = 0; f < report.feature_sets.size(); ++f) {
    auto push = [&](std::optional<VariantKind> v, std::optional<Descriptor> d) {
      for (int i = 0; i < n_folds; ++i) {
        for (int s = 0; s < cfg.n_seeds; ++s) tasks.push_back({f, i, s, v, d});
      }
    };
    for (auto v : cfg.variants) push(v, std::nullopt);
    for (auto d : cfg.baseline_targets) push(VariantKind::kBaseline, d);
  }

  auto run_task = [&](const detail::Task& t) {
    const auto& fd = folds[t.feature_set][static_cast<std::size_t>(t.fold)];
    CellResult c;
    c.variant = variant_name(*t.variant);
    c.descriptor = t.descriptor;
    c.features = report.feature_sets[t.feature_set].name;
    c.fold = t.fold;
    c.seed_index = t.seed_index;
    c.seed = cfg.master_seed + static_cast<std::uint64_t>(t.seed_index);
    c.n_train = fd.train.size();
    c.n_val = fd.val.size();
    c.n_test = fd.test.size();
    std::vector<std::string> groups;
    for (auto n : fd.test) groups.push_back(ds.samples[n].subject_id);
    try {
      TrainConfig tc = cfg.train;
      tc.seed = c.seed;
      const NetworkVariant nv{*t.variant, static_cast<int>(fd.x_train.cols())};
      if (*t.variant == VariantKind::kBaseline) {
        const Descriptor d = *t.descriptor;
        auto target = [&](const std::vector<std::size_t>& idx) {
          Eigen::MatrixXd y(static_cast<Eigen::Index>(idx.size()), 1);
          for (std::size_t i = 0; i < idx.size(); ++i) y(static_cast<Eigen::Index>(i), 0) = descriptor_value(truth_desc[idx[i]], d);
          return y;
        };
        const Eigen::MatrixXd y_train = target(fd.train);
        const Eigen::MatrixXd y_test = target(fd.test);
        const double y_mean = y_train.mean();
        double y_std = std::sqrt((y_train.array() - y_mean).square().mean());
        if (!(y_std > 0.0)) y_std = 1.0;
        Eigen::VectorXd pred(static_cast<Eigen::Index>(fd.test.size()));
        if (cfg.mode == PredictorMode::kOracle) {
          pred = y_test.col(0);
        } else if (cfg.mode == PredictorMode::kConstant) {
          pred.setConstant(y_mean);
        } else {
          auto net = Network::build(nv, c.seed);
          const Eigen::MatrixXd y_val = target(fd.val);
          const auto hist = train(net, fd.x_train, (y_train.array() - y_mean) / y_std, fd.x_val,
                                  (y_val.array() - y_mean) / y_std, tc);
          c.epochs = hist.epochs_run;
          c.best_epoch = hist.best_epoch;
          pred = (net.forward(fd.x_test).col(0).array() * y_std + y_mean).matrix();
          if (!pred.allFinite()) throw TrainingError("non-finite predictions");
        }
        const std::vector<double> p(pred.data(), pred.data() + pred.size());
        const std::vector<double> y(y_test.data(), y_test.data() + y_test.size());
        const double v = detail::group_ccc(p, y, &groups, cfg.pooling);
        c.descriptor_ccc[static_cast<std::size_t>(d)] = v;
        if (d == Descriptor::kMean) c.ccc_mu = v;
        if (d == Descriptor::kStd) c.ccc_sigma = v;
        if (cfg.keep_predictions && t.seed_index == 0) {
          c.test_samples = fd.test;
          c.mu_hat = p;
        }
        return c;
      }

      Eigen::MatrixXd pred(static_cast<Eigen::Index>(fd.test.size()), 2);
      auto moments = [&](const std::vector<std::size_t>& idx) {
        Eigen::MatrixXd y(static_cast<Eigen::Index>(idx.size()), 2);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          y(static_cast<Eigen::Index>(i), 0) = ds.samples[idx[i]].target.mu;
          y(static_cast<Eigen::Index>(i), 1) = ds.samples[idx[i]].target.sigma;
        }
        return y;
      };
      const Eigen::MatrixXd y_test = moments(fd.test);
      if (cfg.mode == PredictorMode::kOracle) {
        pred = y_test;
      } else if (cfg.mode == PredictorMode::kConstant) {
        const Eigen::RowVector2d m = moments(fd.train).colwise().mean();
        pred.rowwise() = m;
      } else {
        auto net = Network::build(nv, c.seed);
        const auto hist = train(net, fd.x_train, moments(fd.train), fd.x_val, moments(fd.val), tc);
        c.epochs = hist.epochs_run;
        c.best_epoch = hist.best_epoch;
        pred = net.forward(fd.x_test);
        if (!pred.allFinite()) throw TrainingError("non-finite predictions");
      }
      std::vector<double> mu_hat(pred.col(0).data(), pred.col(0).data() + pred.rows());
      std::vector<double> sigma_hat(pred.col(1).data(), pred.col(1).data() + pred.rows());
      std::vector<double> mu(y_test.col(0).data(), y_test.col(0).data() + y_test.rows());
      std::vector<double> sigma(y_test.col(1).data(), y_test.col(1).data() + y_test.rows());
      c.ccc_mu = detail::group_ccc(mu_hat, mu, &groups, cfg.pooling);
      c.ccc_sigma = detail::group_ccc(sigma_hat, sigma, &groups, cfg.pooling);

      std::array<std::vector<double>, 7> dp;
      std::array<std::vector<double>, 7> dt;
      const BetaParams uniform = BetaParams::uniform();
      double tp = 0.0, tu = 0.0, pt = 0.0, ut = 0.0;
      for (std::size_t i = 0; i < fd.test.size(); ++i) {
        const auto n = fd.test[i];
        const BetaParams pb = fit_beta({mu_hat[i], sigma_hat[i]}, ds.clamp_epsilon);
        const DescriptorSet pd = descriptors(pb);
        for (auto d : kAllDescriptors) {
          dp[static_cast<std::size_t>(d)].push_back(descriptor_value(pd, d));
          dt[static_cast<std::size_t>(d)].push_back(descriptor_value(truth_desc[n], d));
        }
        const double a = kl_beta(truth[n], pb);
        const double au = kl_beta(truth[n], uniform);
        const double b = kl_beta(pb, truth[n]);
        const double bu = kl_beta(uniform, truth[n]);
        tp += a;
        tu += au;
        pt += b;
        ut += bu;
        if (a < au) ++c.kl_truth_pred.n_below;
        if (b < bu) ++c.kl_pred_truth.n_below;
      }
      const auto nt = static_cast<double>(fd.test.size());
      c.kl_truth_pred.mean_pred = tp / nt;
      c.kl_truth_pred.mean_uniform = tu / nt;
      c.kl_pred_truth.mean_pred = pt / nt;
      c.kl_pred_truth.mean_uniform = ut / nt;
      for (auto d : kAllDescriptors) {
        const auto j = static_cast<std::size_t>(d);
        c.descriptor_ccc[j] = detail::group_ccc(dp[j], dt[j], &groups, cfg.pooling);
      }
      if (cfg.keep_predictions && t.seed_index == 0) {
        c.test_samples = fd.test;
        c.mu_hat = std::move(mu_hat);
        c.sigma_hat = std::move(sigma_hat);
      }
    } catch (const Error& e) {
      c.ok = false;
      c.error = e.what();
      c.ccc_mu = c.ccc_sigma = kNaN;
      c.descriptor_ccc.fill(kNaN);
      c.kl_truth_pred = {};
      c.kl_pred_truth = {};
      c.test_samples.clear();
      c.mu_hat.clear();
      c.sigma_hat.clear();
    }
    return c;
  };

  report.cells.resize(tasks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        report.cells[i] = run_task(tasks[i]);
      } catch (...) {
        std::lock_guard lock(fatal_mu);
        if (!fatal) fatal = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(tasks.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (fatal) std::rethrow_exception(fatal);
  if (report.cells.size() != report.expected_cells()) throw DomainError("run_grid: incomplete grid");
  return report;
}

// Significance --------------------------------------------------------------

namespace detail {

// Per-seed score (mean over folds) for every competitor; NaN when any fold
// of that seed failed.
using ScoreTable = std::map<std::string, std::vector<double>>;

inline void add_score(ScoreTable& t, const std::string& who, int seed, int n_seeds, int n_folds, double v) {
  auto& vec = t[who];
  if (vec.empty()) vec.assign(static_cast<std::size_t>(n_seeds), 0.0);
  vec[static_cast<std::size_t>(seed)] += v / n_folds;
}

inline SignificanceEntry compare(const std::string& features, const std::string& metric, bool higher,
                                 const ScoreTable& table, double level) {
  SignificanceEntry e;
  e.features = features;
  e.metric = metric;
  e.higher_is_better = higher;
  auto mean_of = [](const std::vector<double>& v) {
    double acc = 0.0;
    std::size_t n = 0;
    for (double x : v) {
      if (std::isfinite(x)) {
        acc += x;
        ++n;
      }
    }
    return n == 0 ? kNaN : acc / static_cast<double>(n);
  };
  double best_score = kNaN;
  for (const auto& [who, v] : table) {
    const double m = mean_of(v);
    if (!std::isfinite(m)) continue;
    if (!std::isfinite(best_score) || (higher ? m > best_score : m < best_score)) {
      best_score = m;
      e.best = who;
    }
  }
  for (const auto& [who, v] : table) {
    Comparison c;
    c.competitor = who;
    c.mean_score = mean_of(v);
    if (e.best.empty() || !std::isfinite(c.mean_score)) {
      c.status = "inconclusive";
    } else if (who == e.best) {
      c.status = "best";
    } else {
      const auto& b = table.at(e.best);
      std::vector<double> x, y;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i]) && std::isfinite(b[i])) {
          x.push_back(v[i]);
          y.push_back(b[i]);
        }
      }
      c.n_pairs = x.size();
      if (x.size() < kWilcoxonMinPairs) {
        c.status = "inconclusive";
      } else {
        try {
          const auto w = wilcoxon_signed_rank(x, y);
          c.p_value = w.p_value;
          c.status = w.p_value < level ? "worse" : "tied";
        } catch (const InsufficientData&) {
          c.status = "inconclusive";
        }
      }
    }
    e.comparisons.push_back(std::move(c));
  }
  return e;
}

}  // namespace detail

/// Wilcoxon comparisons against the best competitor per (feature set,
/// metric). Scores are fold-averaged per seed, so each comparison has one
/// pair per seed.
inline void significance(ExperimentReport& report, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("significance: level must lie in (0, 1)");
  report.config.significance_level = level;
  report.significance.clear();
  const int n_seeds = report.config.n_seeds;
  const int n_folds = report.folds_run();
  const KlDirection dir = report.config.kl_direction;
  for (const auto& fs : report.feature_sets) {
    detail::ScoreTable mu, sigma, kl;
    std::array<detail::ScoreTable, 7> desc;
    for (const auto& c : report.cells) {
      if (c.features != fs.name) continue;
      const double fail = c.ok ? 0.0 : kNaN;
      if (c.variant == "B") {
        const auto d = *c.descriptor;
        const double v = c.descriptor_ccc[static_cast<std::size_t>(d)] + fail;
        if (d == Descriptor::kMean) detail::add_score(mu, "B", c.seed_index, n_seeds, n_folds, v);
        else if (d == Descriptor::kStd) detail::add_score(sigma, "B", c.seed_index, n_seeds, n_folds, v);
        else detail::add_score(desc[static_cast<std::size_t>(d)], "B", c.seed_index, n_seeds, n_folds, v);
        continue;
      }
      detail::add_score(mu, c.variant, c.seed_index, n_seeds, n_folds, c.ccc_mu + fail);
      detail::add_score(sigma, c.variant, c.seed_index, n_seeds, n_folds, c.ccc_sigma + fail);
      for (auto d : {Descriptor::kMedian, Descriptor::kQ25, Descriptor::kQ75, Descriptor::kSkew, Descriptor::kKurt}) {
        detail::add_score(desc[static_cast<std::size_t>(d)], c.variant, c.seed_index, n_seeds, n_folds,
                          c.descriptor_ccc[static_cast<std::size_t>(d)] + fail);
      }
      detail::add_score(kl, c.variant, c.seed_index, n_seeds, n_folds, c.kl(dir).mean_pred + fail);
      detail::add_score(kl, "uniform", c.seed_index, n_seeds,
                        n_folds * static_cast<int>(report.config.variants.size()), c.kl(dir).mean_uniform + fail);
    }
    if (!mu.empty()) report.significance.push_back(detail::compare(fs.name, "ccc_mu", true, mu, level));
    if (!sigma.empty()) report.significance.push_back(detail::compare(fs.name, "ccc_sigma", true, sigma, level));
    for (auto d : {Descriptor::kMedian, Descriptor::kQ25, Descriptor::kQ75, Descriptor::kSkew, Descriptor::kKurt}) {
      const auto& t = desc[static_cast<std::size_t>(d)];
      if (!t.empty()) report.significance.push_back(detail::compare(fs.name, "ccc_" + descriptor_name(d), true, t, level));
    }
    if (!kl.empty()) report.significance.push_back(detail::compare(fs.name, "kl", false, kl, level));
  }
}

// Report files --------------------------------------------------------------

namespace detail {

inline void cell_prefix(csv::Writer& w, const CellResult& c, const std::string& target) {
  w.field(c.variant).field(c.features).field(target).field(c.fold).field(c.seed_index);
  w.field(c.ok ? std::string("ok") : "failed: " + c.error).field(c.n_test);
}

}  // namespace detail

inline void write_moments_csv(std::ostream& out, const ExperimentReport& r) {
  csv::Writer w(out);
  for (const char* h : {"variant", "features", "target", "fold", "seed", "status", "n_test", "epochs", "best_epoch", "moment", "ccc"}) w.field(std::string(h));
  w.end_row();
  for (const auto& c : r.cells) {
    auto row = [&](const char* moment, double v) {
      detail::cell_prefix(w, c, r.config.target_name);
      w.field(c.epochs).field(c.best_epoch).field(std::string(moment)).field(v);
      w.end_row();
    };
    if (c.variant == "B") {
      if (*c.descriptor == Descriptor::kMean) row("mu", c.ccc_mu);
      if (*c.descriptor == Descriptor::kStd) row("sigma", c.ccc_sigma);
      continue;
    }
    row("mu", c.ccc_mu);
    row("sigma", c.ccc_sigma);
  }
}

inline void write_descriptors_csv(std::ostream& out, const ExperimentReport& r) {
  csv::Writer w(out);
  for (const char* h : {"variant", "features", "target", "fold", "seed", "status", "n_test", "descriptor", "path", "ccc"}) w.field(std::string(h));
  w.end_row();
  for (const auto& c : r.cells) {
    for (auto d : {Descriptor::kMedian, Descriptor::kQ25, Descriptor::kQ75, Descriptor::kSkew, Descriptor::kKurt}) {
      if (c.variant == "B" && *c.descriptor != d) continue;
      detail::cell_prefix(w, c, r.config.target_name);
      w.field(descriptor_name(d)).field(std::string(c.variant == "B" ? "point" : "beta"));
      w.field(c.descriptor_ccc[static_cast<std::size_t>(d)]);
      w.end_row();
    }
  }
}

inline void write_kl_csv(std::ostream& out, const ExperimentReport& r) {
  csv::Writer w(out);
  for (const char* h : {"variant", "features", "target", "fold", "seed", "status", "n_test", "direction", "kl_pred",
                        "kl_uniform", "n_pred_below_uniform"}) w.field(std::string(h));
  w.end_row();
  for (const auto& c : r.cells) {
    if (c.variant == "B") continue;
    for (auto dir : {KlDirection::kTruthPred, KlDirection::kPredTruth}) {
      const auto& k = c.kl(dir);
      detail::cell_prefix(w, c, r.config.target_name);
      w.field(kl_direction_name(dir)).field(k.mean_pred).field(k.mean_uniform).field(k.n_below);
      w.end_row();
    }
  }
}

namespace detail {

inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace detail

inline nlohmann::json summary_json(const ExperimentReport& r) {
  using nlohmann::json;
  const auto& cfg = r.config;
  json variants = json::array();
  for (auto v : cfg.variants) variants.push_back(variant_name(v));
  json baselines = json::array();
  for (auto d : cfg.baseline_targets) baselines.push_back(descriptor_name(d));
  json sets = json::array();
  for (const auto& fs : r.feature_sets) sets.push_back({{"name", fs.name}, {"modalities", fs.modalities}});
  json folds = json::array();
  for (const auto& f : r.plan.folds) folds.push_back({{"train", f.train}, {"validation", f.validation}, {"test", f.test}});

  // Mean of each headline metric per (feature set, competitor).
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::pair<double, int>>> agg;
  for (const auto& c : r.cells) {
    if (!c.ok) continue;
    auto& slot = agg[{c.features, c.name()}];
    auto add = [&](const std::string& k, double v) {
      if (!std::isfinite(v)) return;
      slot[k].first += v;
      slot[k].second += 1;
    };
    add("ccc_mu", c.ccc_mu);
    add("ccc_sigma", c.ccc_sigma);
    for (auto d : {Descriptor::kMedian, Descriptor::kQ25, Descriptor::kQ75, Descriptor::kSkew, Descriptor::kKurt}) {
      add("ccc_" + descriptor_name(d), c.descriptor_ccc[static_cast<std::size_t>(d)]);
    }
    if (c.variant != "B") {
      const auto& k = c.kl(cfg.kl_direction);
      add("kl_pred", k.mean_pred);
      add("kl_uniform", k.mean_uniform);
      add("frac_pred_below_uniform", static_cast<double>(k.n_below) / static_cast<double>(c.n_test));
    }
  }
  json means = json::array();
  for (const auto& [key, metrics] : agg) {
    json m;
    for (const auto& [name, acc] : metrics) m[name] = acc.first / acc.second;
    means.push_back({{"features", key.first}, {"competitor", key.second}, {"means", m}});
  }
  json sig = json::array();
  for (const auto& e : r.significance) {
    json comps = json::array();
    for (const auto& c : e.comparisons) {
      comps.push_back({{"competitor", c.competitor},
                       {"mean", detail::num(c.mean_score)},
                       {"p_value", detail::num(c.p_value)},
                       {"n_pairs", c.n_pairs},
                       {"status", c.status}});
    }
    sig.push_back({{"features", e.features},
                   {"metric", e.metric},
                   {"higher_is_better", e.higher_is_better},
                   {"best", e.best},
                   {"comparisons", comps}});
  }
  json failures = json::array();
  for (const auto& c : r.cells) {
    if (!c.ok) {
      failures.push_back({{"cell", c.name()}, {"features", c.features}, {"fold", c.fold}, {"seed", c.seed_index}, {"error", c.error}});
    }
  }
  return {{"format", "betacons-report"},
          {"version", 1},
          {"target", cfg.target_name},
          {"master_seed", cfg.master_seed},
          {"k", cfg.k},
          {"folds_run", r.folds_run()},
          {"n_seeds", cfg.n_seeds},
          {"seeds", "master_seed + 0.." + std::to_string(cfg.n_seeds - 1)},
          {"mode", mode_name(cfg.mode)},
          {"kl_direction", kl_direction_name(cfg.kl_direction)},
          {"ccc_pooling", pooling_name(cfg.pooling)},
          {"significance_level", cfg.significance_level},
          {"variants", variants},
          {"baseline_targets", baselines},
          {"feature_sets", sets},
          {"folds", folds},
          {"n_samples", r.n_samples},
          {"cells", r.cells.size()},
          {"expected_cells", r.expected_cells()},
          {"failed_cells", r.failures()},
          {"failures", failures},
          {"means", means},
          {"significance", sig}};
}

/// Writes moments_ccc.csv, descriptors_ccc.csv, kl.csv and summary.json.
inline void write_reports(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto emit = [&](const char* name, auto&& fn) {
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    fn(out);
    out.flush();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
  };
  emit("moments_ccc.csv", [&](std::ostream& o) { write_moments_csv(o, r); });
  emit("descriptors_ccc.csv", [&](std::ostream& o) { write_descriptors_csv(o, r); });
  emit("kl.csv", [&](std::ostream& o) { write_kl_csv(o, r); });
  emit("summary.json", [&](std::ostream& o) { o << summary_json(r).dump(2) << '\n'; });
}

// Cell (de)serialisation for re-reporting -----------------------------------

inline nlohmann::json cells_json(const ExperimentReport& r) {
  using nlohmann::json;
  json cells = json::array();
  for (const auto& c : r.cells) {
    json dc = json::array();
    for (double v : c.descriptor_ccc) dc.push_back(detail::num(v));
    auto kl = [](const KlStats& k) {
      return json{{"mean_pred", detail::num(k.mean_pred)}, {"mean_uniform", detail::num(k.mean_uniform)}, {"n_below", k.n_below}};
    };
    cells.push_back({{"variant", c.variant},
                     {"descriptor", c.descriptor ? json(descriptor_name(*c.descriptor)) : json(nullptr)},
                     {"features", c.features},
                     {"fold", c.fold},
                     {"seed_index", c.seed_index},
                     {"seed", c.seed},
                     {"ok", c.ok},
                     {"error", c.error},
                     {"epochs", c.epochs},
                     {"best_epoch", c.best_epoch},
                     {"n_train", c.n_train},
                     {"n_val", c.n_val},
                     {"n_test", c.n_test},
                     {"ccc_mu", detail::num(c.ccc_mu)},
                     {"ccc_sigma", detail::num(c.ccc_sigma)},
                     {"descriptor_ccc", dc},
                     {"kl_truth_pred", kl(c.kl_truth_pred)},
                     {"kl_pred_truth", kl(c.kl_pred_truth)}});
  }
  json variants = json::array();
  for (auto v : r.config.variants) variants.push_back(variant_name(v));
  json baselines = json::array();
  for (auto d : r.config.baseline_targets) baselines.push_back(descriptor_name(d));
  json sets = json::array();
  for (const auto& fs : r.feature_sets) sets.push_back({{"name", fs.name}, {"modalities", fs.modalities}});
  return {{"format", "betacons-cells"},
          {"version", 1},
          {"k", r.config.k},
          {"n_seeds", r.config.n_seeds},
          {"master_seed", r.config.master_seed},
          {"fold_limit", r.config.fold_limit},
          {"target", r.config.target_name},
          {"mode", mode_name(r.config.mode)},
          {"kl_direction", kl_direction_name(r.config.kl_direction)},
          {"ccc_pooling", pooling_name(r.config.pooling)},
          {"variants", variants},
          {"baseline_targets", baselines},
          {"feature_sets", sets},
          {"n_samples", r.n_samples},
          {"cells", cells}};
}

inline ExperimentReport report_from_json(const nlohmann::json& j, std::vector<std::string> subjects = {}) {
  ExperimentReport r;
  try {
    if (j.at("format") != "betacons-cells") throw SchemaError("not a betacons cells file");
    auto& cfg = r.config;
    cfg.k = j.at("k").get<int>();
    cfg.n_seeds = j.at("n_seeds").get<int>();
    cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
    cfg.fold_limit = j.at("fold_limit").get<int>();
    cfg.target_name = j.at("target").get<std::string>();
    const auto mode = j.at("mode").get<std::string>();
    cfg.mode = mode == "oracle" ? PredictorMode::kOracle : mode == "constant" ? PredictorMode::kConstant : PredictorMode::kTrained;
    cfg.kl_direction = j.at("kl_direction") == "pred||truth" ? KlDirection::kPredTruth : KlDirection::kTruthPred;
    cfg.pooling = j.at("ccc_pooling") == "per_subject" ? CccPooling::kPerSubject : CccPooling::kPooled;
    cfg.variants.clear();
    for (const auto& v : j.at("variants")) cfg.variants.push_back(parse_variant(v.get<std::string>()));
    cfg.baseline_targets.clear();
    for (const auto& d : j.at("baseline_targets")) cfg.baseline_targets.push_back(parse_descriptor(d.get<std::string>()));
    for (const auto& fs : j.at("feature_sets")) {
      r.feature_sets.push_back({fs.at("name").get<std::string>(), fs.at("modalities").get<std::vector<std::string>>()});
    }
    r.n_samples = j.at("n_samples").get<std::size_t>();
    auto real = [](const nlohmann::json& v) { return v.is_null() ? kNaN : v.get<double>(); };
    auto kl = [&](const nlohmann::json& v) {
      return KlStats{real(v.at("mean_pred")), real(v.at("mean_uniform")), v.at("n_below").get<std::size_t>()};
    };
    for (const auto& c : j.at("cells")) {
      CellResult x;
      x.variant = c.at("variant").get<std::string>();
      if (!c.at("descriptor").is_null()) x.descriptor = parse_descriptor(c.at("descriptor").get<std::string>());
      x.features = c.at("features").get<std::string>();
      x.fold = c.at("fold").get<int>();
      x.seed_index = c.at("seed_index").get<int>();
      x.seed = c.at("seed").get<std::uint64_t>();
      x.ok = c.at("ok").get<bool>();
      x.error = c.at("error").get<std::string>();
      x.epochs = c.at("epochs").get<int>();
      x.best_epoch = c.at("best_epoch").get<int>();
      x.n_train = c.at("n_train").get<std::size_t>();
      x.n_val = c.at("n_val").get<std::size_t>();
      x.n_test = c.at("n_test").get<std::size_t>();
      x.ccc_mu = real(c.at("ccc_mu"));
      x.ccc_sigma = real(c.at("ccc_sigma"));
      for (std::size_t i = 0; i < 7; ++i) x.descriptor_ccc[i] = real(c.at("descriptor_ccc").at(i));
      x.kl_truth_pred = kl(c.at("kl_truth_pred"));
      x.kl_pred_truth = kl(c.at("kl_pred_truth"));
      r.cells.push_back(std::move(x));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed cells file: ") + e.what());
  }
  if (!subjects.empty()) r.plan = make_folds(std::move(subjects), r.config.k, r.config.master_seed);
  return r;
}

// Density dumps -------------------------------------------------------------

struct WindowRef {
  std::string subject_id;
  std::int64_t window_index = 0;
};

/// Parses "SUBJECT:INDEX".
inline WindowRef parse_window_ref(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw DomainError("window id '" + s + "' must look like SUBJECT:INDEX");
  }
  WindowRef w;
  w.subject_id = s.substr(0, colon);
  const std::string idx = s.substr(colon + 1);
  const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), w.window_index);
  if (ec != std::errc() || ptr != idx.data() + idx.size()) throw DomainError("window id '" + s + "': bad index");
  return w;
}

/// 512 points on (0, 1): a cubic edge-clustered grid plus normal-spaced
/// quantile levels of both distributions.
inline std::vector<double> density_grid(const BetaParams& a, const BetaParams& b, std::size_t n = 512) {
  constexpr int kQuantiles = 96;
  constexpr double kZ = 7.0;
  const std::size_t n_edge = n - 2 * kQuantiles;
  std::vector<double> xs;
  xs.reserve(n);
  for (std::size_t i = 0; i < n_edge; ++i) {
    const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n_edge);
    const double t3 = t * t * t;
    const double u3 = (1.0 - t) * (1.0 - t) * (1.0 - t);
    xs.push_back(t3 / (t3 + u3));
  }
  for (const auto& p : {a, b}) {
    for (int j = 0; j < kQuantiles; ++j) {
      const double z = -kZ + 2.0 * kZ * j / (kQuantiles - 1);
      xs.push_back(beta_quantile(p, 0.5 * std::erfc(-z / std::numbers::sqrt2)));
    }
  }
  std::sort(xs.begin(), xs.end());
  std::vector<double> out;
  out.reserve(n);
  for (double x : xs) {
    if (x > 0.0 && x < 1.0 && (out.empty() || x > out.back())) out.push_back(x);
  }
  // Refill duplicates by bisecting the widest gaps.
  while (out.size() < n) {
    std::size_t widest = 0;
    double gap = out.front();
    for (std::size_t i = 1; i < out.size(); ++i) {
      if (out[i] - out[i - 1] > gap) {
        gap = out[i] - out[i - 1];
        widest = i;
      }
    }
    if (1.0 - out.back() > gap) {
      out.push_back(0.5 * (out.back() + 1.0));
    } else {
      const double lo = widest == 0 ? 0.0 : out[widest - 1];
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(widest), 0.5 * (lo + out[widest]));
    }
  }
  return out;
}

inline void write_density_csv(std::ostream& out, const BetaParams& truth, const BetaParams& pred) {
  csv::Writer w(out);
  for (const char* h : {"x", "pdf_true", "pdf_pred", "alpha_true", "beta_true", "alpha_pred", "beta_pred"}) w.field(std::string(h));
  w.end_row();
  for (double x : density_grid(truth, pred)) {
    w.field(x).field(beta_pdf(truth, x)).field(beta_pdf(pred, x));
    w.field(truth.alpha()).field(truth.beta()).field(pred.alpha()).field(pred.beta());
    w.end_row();
  }
}

/// For each selected window, writes density_<variant>_<features>_<subject>_<index>.csv
/// from the seed-0 cell whose test fold holds that window. Returns the paths.
inline std::vector<std::filesystem::path> emit_density_data(const ExperimentReport& r, const Dataset& ds,
                                                            const std::vector<WindowRef>& windows,
                                                            const std::filesystem::path& dir,
                                                            const std::string& variant = "M_F",
                                                            const std::string& features = "") {
  const std::string fs_name = features.empty() ? (r.feature_sets.empty() ? "" : r.feature_sets.back().name) : features;
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& w : windows) {
    std::optional<std::size_t> sample;
    for (std::size_t n = 0; n < ds.samples.size(); ++n) {
      if (ds.samples[n].subject_id == w.subject_id && ds.samples[n].window_index == w.window_index) {
        sample = n;
        break;
      }
    }
    if (!sample) {
      throw DomainError("no window " + w.subject_id + ":" + std::to_string(w.window_index) + " in the dataset");
    }
    const CellResult* cell = nullptr;
    std::size_t pos = 0;
    for (const auto& c : r.cells) {
      if (c.variant != variant || c.features != fs_name || c.seed_index != 0 || !c.ok) continue;
      auto it = std::find(c.test_samples.begin(), c.test_samples.end(), *sample);
      if (it != c.test_samples.end()) {
        cell = &c;
        pos = static_cast<std::size_t>(it - c.test_samples.begin());
        break;
      }
    }
    if (cell == nullptr) {
      throw DomainError("window " + w.subject_id + ":" + std::to_string(w.window_index) + " has no stored " + variant +
                        " prediction for feature set '" + fs_name + "'");
    }
    const BetaParams truth = moment_match(ds.samples[*sample].target);
    const BetaParams pred = fit_beta({cell->mu_hat[pos], cell->sigma_hat[pos]}, ds.clamp_epsilon);
    const auto path = dir / ("density_" + variant + "_" + fs_name + "_" + w.subject_id + "_" +
                             std::to_string(w.window_index) + ".csv");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    write_density_csv(out, truth, pred);
    out.flush();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace betacons
