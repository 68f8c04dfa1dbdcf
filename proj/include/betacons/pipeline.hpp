#pragma once

// Windowing and alignment: frame-level feature streams and per-annotator
// traces are cut into overlapping fixed-length windows on a shared time grid
// (window k covers [k * stride, k * stride + window_len)), features are
// averaged per window, and each window's annotator values are reduced to a
// clamped (mu, sigma) consensus target.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "betacons/beta_model.hpp"
#include "betacons/errors.hpp"

namespace betacons {

// Slack for comparing timestamps against window edges.
inline constexpr double kTimeTolerance = 1e-9;

struct WindowConfig {
  double window_len = 3.0;
  double stride = 0.4;
  double label_lo = 0.0;
  double label_hi = 1.0;

  void validate() const {
    if (!(stride > 0.0) || !(window_len > 0.0) || stride > window_len) {
      throw DomainError("WindowConfig: need 0 < stride <= window_len, got stride=" + detail::fmt_real(stride) +
                        ", window_len=" + detail::fmt_real(window_len));
    }
    if (!(label_hi > label_lo)) {
      throw DomainError("WindowConfig: label range must satisfy hi > lo, got [" + detail::fmt_real(label_lo) +
                        ", " + detail::fmt_real(label_hi) + "]");
    }
  }

  double start(std::int64_t index) const { return static_cast<double>(index) * stride; }
};

/// Indices k of every window fully covered by [t_first, t_last]: start >= t_first
/// and start + window_len <= t_last. The final window must be fully covered.
inline std::vector<std::int64_t> enumerate_windows(double t_first, double t_last, const WindowConfig& cfg) {
  cfg.validate();
  std::vector<std::int64_t> out;
  if (!(t_last >= t_first)) return out;
  const auto k_min = static_cast<std::int64_t>(std::ceil((t_first - kTimeTolerance) / cfg.stride));
  const auto k_max = static_cast<std::int64_t>(std::floor((t_last - cfg.window_len + kTimeTolerance) / cfg.stride));
  for (std::int64_t k = k_min; k <= k_max; ++k) out.push_back(k);
  return out;
}

/// Feature frames of one modality for one subject.
struct FrameSeries {
  std::string subject_id;
  std::string modality;
  std::vector<double> timestamps;
  Eigen::MatrixXd features;  // frames x dim

  Eigen::Index dim() const { return features.cols(); }

  void validate() const {
    if (static_cast<Eigen::Index>(timestamps.size()) != features.rows()) {
      throw ShapeError("FrameSeries " + subject_id + "/" + modality + ": " + std::to_string(timestamps.size()) +
                       " timestamps but " + std::to_string(features.rows()) + " feature rows");
    }
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (!(timestamps[i] > timestamps[i - 1])) {
        throw SchemaError("FrameSeries " + subject_id + "/" + modality +
                          ": timestamps not strictly increasing at t=" + detail::fmt_real(timestamps[i]));
      }
    }
  }
};

/// One annotator's trace for one subject.
struct AnnotationTrace {
  std::string subject_id;
  std::string annotator_id;
  std::vector<double> timestamps;
  std::vector<double> values;

  void validate() const {
    if (timestamps.size() != values.size()) {
      throw ShapeError("AnnotationTrace " + subject_id + "/" + annotator_id + ": length mismatch");
    }
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (!(timestamps[i] > timestamps[i - 1])) {
        throw SchemaError("AnnotationTrace " + subject_id + "/" + annotator_id +
                          ": timestamps not strictly increasing at t=" + detail::fmt_real(timestamps[i]));
      }
    }
  }
};

struct WindowReport {
  std::size_t candidates = 0;
  std::size_t emitted = 0;
  std::size_t skipped_empty = 0;
  std::vector<std::string> warnings;
};

struct WindowMean {
  std::int64_t index = 0;
  double start = 0.0;
  Eigen::VectorXd mean;
  std::size_t n_frames = 0;
};

struct WindowedFeatures {
  std::vector<WindowMean> windows;
  WindowReport report;
};

namespace detail {

// [begin, end) positions of timestamps inside [start, start + len).
inline std::pair<std::size_t, std::size_t> frames_in_window(const std::vector<double>& ts, double start, double len) {
  const auto lo = std::lower_bound(ts.begin(), ts.end(), start - kTimeTolerance);
  const auto hi = std::lower_bound(lo, ts.end(), start + len - kTimeTolerance);
  return {static_cast<std::size_t>(lo - ts.begin()), static_cast<std::size_t>(hi - ts.begin())};
}

}  // namespace detail

/// Per-window feature means. Frames with any non-finite value are dropped
/// before averaging; windows left without frames are skipped and counted.
inline WindowedFeatures window_features(const FrameSeries& series, const WindowConfig& cfg) {
  cfg.validate();
  series.validate();
  WindowedFeatures out;
  if (series.timestamps.empty()) {
    out.report.warnings.push_back("empty feature series " + series.subject_id + "/" + series.modality);
    return out;
  }
  const Eigen::Index dim = series.dim();
  std::vector<char> usable(series.timestamps.size());
  for (std::size_t i = 0; i < usable.size(); ++i) {
    usable[i] = series.features.row(static_cast<Eigen::Index>(i)).allFinite() ? 1 : 0;
  }
  const auto indices = enumerate_windows(series.timestamps.front(), series.timestamps.back(), cfg);
  out.report.candidates = indices.size();
  for (std::int64_t k : indices) {
    const double start = cfg.start(k);
    const auto [b, e] = detail::frames_in_window(series.timestamps, start, cfg.window_len);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim);
    std::size_t n = 0;
    for (std::size_t i = b; i < e; ++i) {
      if (!usable[i]) continue;
      acc += series.features.row(static_cast<Eigen::Index>(i)).transpose();
      ++n;
    }
    if (n == 0) {
      ++out.report.skipped_empty;
      continue;
    }
    out.windows.push_back({k, start, acc / static_cast<double>(n), n});
  }
  out.report.emitted = out.windows.size();
  if (out.report.skipped_empty > 0) {
    out.report.warnings.push_back(series.subject_id + "/" + series.modality + ": " +
                                  std::to_string(out.report.skipped_empty) + " window(s) without usable frames skipped");
  }
  return out;
}

inline double rescale_value(double v, double lo, double hi) { return (v - lo) / (hi - lo); }
inline double unrescale_value(double v, double lo, double hi) { return lo + v * (hi - lo); }

/// Linear map of raw labels from [lo, hi] onto [0, 1].
inline AnnotationTrace rescale_annotations(const AnnotationTrace& trace, double lo, double hi) {
  if (!(hi > lo)) {
    throw DomainError("rescale_annotations: need hi > lo, got [" + detail::fmt_real(lo) + ", " +
                      detail::fmt_real(hi) + "]");
  }
  AnnotationTrace out = trace;
  for (std::size_t i = 0; i < trace.values.size(); ++i) {
    const double v = trace.values[i];
    if (!(v >= lo && v <= hi)) {
      throw DomainError("rescale_annotations: value " + detail::fmt_real(v) + " outside [" + detail::fmt_real(lo) +
                        ", " + detail::fmt_real(hi) + "] for subject " + trace.subject_id + ", annotator " +
                        trace.annotator_id + " at t=" + detail::fmt_real(trace.timestamps.at(i)));
    }
    out.values[i] = std::clamp(rescale_value(v, lo, hi), 0.0, 1.0);
  }
  return out;
}

struct ConsensusWindow {
  std::int64_t index = 0;
  double start = 0.0;
  MomentPair raw;     // before clamping
  MomentPair target;  // clamped, strictly valid
  int n_annotators = 0;
};

struct ConsensusResult {
  std::vector<ConsensusWindow> windows;
  std::size_t dropped_insufficient = 0;
  std::vector<std::string> warnings;
};

/// Per-window consensus for one subject. Each annotator's samples inside the
/// window are averaged to one value first; moments are then taken across
/// annotators and clamped. Annotators without samples in a window are left
/// out; windows with fewer than two contributors are dropped.
inline ConsensusResult window_consensus(const std::vector<AnnotationTrace>& traces, const WindowConfig& cfg,
                                        double epsilon = kDefaultClampEpsilon,
                                        StdConvention convention = StdConvention::kPopulation) {
  cfg.validate();
  if (traces.size() < 2) {
    throw InsufficientData("window_consensus: need at least 2 annotator traces, got " +
                           std::to_string(traces.size()));
  }
  double t_first = std::numeric_limits<double>::infinity();
  double t_last = -std::numeric_limits<double>::infinity();
  for (const auto& tr : traces) {
    tr.validate();
    if (tr.subject_id != traces.front().subject_id) {
      throw DomainError("window_consensus: traces from different subjects (" + traces.front().subject_id + ", " +
                        tr.subject_id + ")");
    }
    for (double v : tr.values) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw DomainError("window_consensus: annotator " + tr.annotator_id + " has value " + detail::fmt_real(v) +
                          " outside [0, 1]; rescale first");
      }
    }
    if (tr.timestamps.empty()) continue;
    t_first = std::min(t_first, tr.timestamps.front());
    t_last = std::max(t_last, tr.timestamps.back());
  }
  ConsensusResult out;
  if (!(t_last >= t_first)) {
    out.warnings.push_back("subject " + traces.front().subject_id + ": no annotation samples");
    return out;
  }
  std::vector<double> per_annotator;
  per_annotator.reserve(traces.size());
  for (std::int64_t k : enumerate_windows(t_first, t_last, cfg)) {
    const double start = cfg.start(k);
    per_annotator.clear();
    for (const auto& tr : traces) {
      const auto [b, e] = detail::frames_in_window(tr.timestamps, start, cfg.window_len);
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t i = b; i < e; ++i) {
        if (!std::isfinite(tr.values[i])) continue;
        acc += tr.values[i];
        ++n;
      }
      if (n > 0) per_annotator.push_back(acc / static_cast<double>(n));
    }
    if (per_annotator.size() < 2) {
      ++out.dropped_insufficient;
      continue;
    }
    const MomentPair raw = consensus_moments(per_annotator, convention);
    out.windows.push_back({k, start, raw, clamp_moments(raw, epsilon), static_cast<int>(per_annotator.size())});
  }
  if (out.dropped_insufficient > 0) {
    out.warnings.push_back("subject " + traces.front().subject_id + ": " + std::to_string(out.dropped_insufficient) +
                           " window(s) with fewer than 2 annotators dropped");
  }
  return out;
}

struct WindowedSample {
  std::string subject_id;
  std::int64_t window_index = 0;
  double window_start = 0.0;
  Eigen::VectorXd features;
  MomentPair target;  // clamped
  MomentPair raw;     // before clamping
  int n_annotators = 0;
};

struct ModalityBlock {
  std::string name;
  Eigen::Index dim = 0;
  Eigen::Index offset = 0;  // first column in the concatenated feature vector
};

struct BuildReport {
  std::size_t windows_skipped_empty = 0;
  std::size_t windows_dropped_annotators = 0;
  std::size_t feature_windows_unmatched = 0;
  std::size_t consensus_windows_unmatched = 0;
  std::vector<std::string> subjects_without_annotations;
  std::vector<std::string> subjects_without_features;
  std::vector<std::string> warnings;
};

struct Dataset {
  std::vector<ModalityBlock> modalities;
  std::vector<WindowedSample> samples;  // ordered by (subject_id, window_index)
  WindowConfig window;
  double clamp_epsilon = kDefaultClampEpsilon;
  StdConvention convention = StdConvention::kPopulation;
  BuildReport report;

  Eigen::Index feature_dim() const {
    Eigen::Index d = 0;
    for (const auto& m : modalities) d += m.dim;
    return d;
  }

  std::vector<std::string> subjects() const {
    std::set<std::string> s;
    for (const auto& w : samples) s.insert(w.subject_id);
    return {s.begin(), s.end()};
  }

  const ModalityBlock& modality(const std::string& name) const {
    for (const auto& m : modalities) {
      if (m.name == name) return m;
    }
    throw DomainError("dataset has no modality '" + name + "'");
  }
};

/// Joins windowed features (concatenated across the selected modalities, in
/// selection order) with per-window consensus targets on (subject, window).
/// An empty selection means every modality, in name order.
inline Dataset build_dataset(const std::vector<FrameSeries>& features, const std::vector<AnnotationTrace>& annotations,
                             const WindowConfig& cfg, std::vector<std::string> modalities = {},
                             double epsilon = kDefaultClampEpsilon,
                             StdConvention convention = StdConvention::kPopulation) {
  cfg.validate();
  std::map<std::string, std::map<std::string, const FrameSeries*>> by_subject;
  std::map<std::string, Eigen::Index> dims;
  for (const auto& fs : features) {
    auto& slot = by_subject[fs.subject_id][fs.modality];
    if (slot != nullptr) {
      throw SchemaError("duplicate feature series for subject " + fs.subject_id + ", modality " + fs.modality);
    }
    slot = &fs;
    auto [it, inserted] = dims.emplace(fs.modality, fs.dim());
    if (!inserted && it->second != fs.dim()) {
      throw ShapeError("modality " + fs.modality + " has inconsistent dimensionality (" + std::to_string(it->second) +
                       " vs " + std::to_string(fs.dim()) + ")");
    }
  }
  if (modalities.empty()) {
    for (const auto& [name, d] : dims) modalities.push_back(name);
  }
  Dataset ds;
  ds.window = cfg;
  ds.clamp_epsilon = epsilon;
  ds.convention = convention;
  Eigen::Index offset = 0;
  for (const auto& name : modalities) {
    auto it = dims.find(name);
    if (it == dims.end()) throw DomainError("build_dataset: no feature series for modality '" + name + "'");
    ds.modalities.push_back({name, it->second, offset});
    offset += it->second;
  }

  std::map<std::string, std::vector<AnnotationTrace>> traces_by_subject;
  for (const auto& tr : annotations) {
    traces_by_subject[tr.subject_id].push_back(rescale_annotations(tr, cfg.label_lo, cfg.label_hi));
  }
  for (const auto& [subject, _] : by_subject) {
    if (!traces_by_subject.contains(subject)) ds.report.subjects_without_annotations.push_back(subject);
  }
  for (const auto& [subject, _] : traces_by_subject) {
    if (!by_subject.contains(subject)) ds.report.subjects_without_features.push_back(subject);
  }

  bool any_overlap = false;
  for (const auto& [subject, traces] : traces_by_subject) {
    auto fit = by_subject.find(subject);
    if (fit == by_subject.end()) continue;
    any_overlap = true;
    auto consensus = window_consensus(traces, cfg, epsilon, convention);
    ds.report.windows_dropped_annotators += consensus.dropped_insufficient;
    for (auto& w : consensus.warnings) ds.report.warnings.push_back(std::move(w));

    std::vector<std::map<std::int64_t, Eigen::VectorXd>> per_modality;
    bool complete = true;
    for (const auto& block : ds.modalities) {
      auto sit = fit->second.find(block.name);
      if (sit == fit->second.end()) {
        ds.report.warnings.push_back("subject " + subject + " lacks modality " + block.name + "; skipped");
        complete = false;
        break;
      }
      auto wf = window_features(*sit->second, cfg);
      ds.report.windows_skipped_empty += wf.report.skipped_empty;
      for (auto& w : wf.report.warnings) ds.report.warnings.push_back(std::move(w));
      std::map<std::int64_t, Eigen::VectorXd> m;
      for (auto& w : wf.windows) m.emplace(w.index, std::move(w.mean));
      per_modality.push_back(std::move(m));
    }
    if (!complete) continue;

    std::set<std::int64_t> consensus_keys;
    for (const auto& cw : consensus.windows) {
      consensus_keys.insert(cw.index);
      bool joined = true;
      for (const auto& m : per_modality) {
        if (!m.contains(cw.index)) {
          joined = false;
          break;
        }
      }
      if (!joined) {
        ++ds.report.consensus_windows_unmatched;
        continue;
      }
      WindowedSample s;
      s.subject_id = subject;
      s.window_index = cw.index;
      s.window_start = cw.start;
      s.features.resize(ds.feature_dim());
      for (std::size_t j = 0; j < per_modality.size(); ++j) {
        s.features.segment(ds.modalities[j].offset, ds.modalities[j].dim) = per_modality[j].at(cw.index);
      }
      s.target = cw.target;
      s.raw = cw.raw;
      s.n_annotators = cw.n_annotators;
      ds.samples.push_back(std::move(s));
    }
    for (const auto& m : per_modality) {
      for (const auto& [k, _] : m) {
        if (!consensus_keys.contains(k)) ++ds.report.feature_windows_unmatched;
      }
    }
  }
  if (!any_overlap) {
    throw InsufficientData("build_dataset: feature and annotation files share no subjects (empty dataset)");
  }
  if (ds.samples.empty()) throw InsufficientData("build_dataset: no windows survived alignment (empty dataset)");
  return ds;
}

}  // namespace betacons
