#pragma once

// File formats: frame features, annotation traces, synthetic ground truth,
// windowed datasets and their JSON manifests.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "betacons/csv.hpp"
#include "betacons/errors.hpp"
#include "betacons/pipeline.hpp"
#include "betacons/synthetic.hpp"
#include "json.hpp"

namespace betacons::io {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Features ------------------------------------------------------------------

inline void write_features(std::ostream& out, const std::vector<FrameSeries>& series) {
  Eigen::Index width = 0;
  for (const auto& s : series) width = std::max(width, s.dim());
  csv::Writer w(out);
  w.field("subject_id").field("modality").field("timestamp");
  for (Eigen::Index j = 0; j < width; ++j) w.field("f" + std::to_string(j));
  w.end_row();
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.timestamps.size(); ++i) {
      w.field(s.subject_id).field(s.modality).field(s.timestamps[i]);
      for (Eigen::Index j = 0; j < width; ++j) {
        if (j < s.dim()) w.field(s.features(static_cast<Eigen::Index>(i), j));
        else w.field(std::string());
      }
      w.end_row();
    }
  }
}

/// Rows are grouped by (subject_id, modality) in order of first appearance.
/// A modality's dimensionality is its count of non-empty feature fields.
inline std::vector<FrameSeries> parse_features(const csv::Table& t) {
  t.require_prefix({"subject_id", "modality", "timestamp"});
  const std::size_t n_feat = t.header().size() - 3;
  if (n_feat == 0) throw SchemaError(t.source() + ":1: no feature columns (expected f0, f1, ...)");
  for (std::size_t j = 0; j < n_feat; ++j) {
    if (t.header()[3 + j] != "f" + std::to_string(j)) {
      throw SchemaError(t.source() + ":1: column " + std::to_string(4 + j) + " should be 'f" + std::to_string(j) +
                        "', got '" + t.header()[3 + j] + "'");
    }
  }
  struct Acc {
    FrameSeries fs;
    std::vector<std::vector<double>> rows;
    std::size_t dim = 0;
  };
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<Acc> accs;
  std::map<std::string, std::size_t> modality_dim;
  for (const auto& row : t.rows()) {
    const std::string& sid = t.field(row, 0);
    const std::string& mod = t.field(row, 1);
    if (sid.empty()) throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": empty subject_id");
    if (mod.empty()) throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": empty modality");
    std::size_t dim = 0;
    while (dim < n_feat && 3 + dim < row.fields.size() && !row.fields[3 + dim].empty()) ++dim;
    for (std::size_t j = dim; j < n_feat && 3 + j < row.fields.size(); ++j) {
      if (!row.fields[3 + j].empty()) {
        throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": gap in feature fields at f" +
                          std::to_string(dim));
      }
    }
    if (dim == 0) throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": row has no feature values");
    auto [mit, fresh] = modality_dim.emplace(mod, dim);
    if (!fresh && mit->second != dim) {
      throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": modality '" + mod + "' has " +
                        std::to_string(dim) + " features here but " + std::to_string(mit->second) + " earlier");
    }
    auto [it, inserted] = index.emplace(std::make_pair(sid, mod), accs.size());
    if (inserted) {
      accs.push_back({});
      accs.back().fs.subject_id = sid;
      accs.back().fs.modality = mod;
      accs.back().dim = dim;
    }
    Acc& acc = accs[it->second];
    acc.fs.timestamps.push_back(t.number(row, 2));
    std::vector<double> v(dim);
    for (std::size_t j = 0; j < dim; ++j) v[j] = t.number(row, 3 + j);
    acc.rows.push_back(std::move(v));
  }
  std::vector<FrameSeries> out;
  out.reserve(accs.size());
  for (auto& acc : accs) {
    acc.fs.features.resize(static_cast<Eigen::Index>(acc.rows.size()), static_cast<Eigen::Index>(acc.dim));
    for (std::size_t i = 0; i < acc.rows.size(); ++i) {
      for (std::size_t j = 0; j < acc.dim; ++j) acc.fs.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = acc.rows[i][j];
    }
    try {
      acc.fs.validate();
    } catch (const Error& e) {
      throw SchemaError(t.source() + ": " + e.what());
    }
    out.push_back(std::move(acc.fs));
  }
  return out;
}

inline std::vector<FrameSeries> read_features(const std::string& path) { return parse_features(csv::read_file(path)); }

// Annotations ---------------------------------------------------------------

inline void write_annotations(std::ostream& out, const std::vector<AnnotationTrace>& traces) {
  csv::Writer w(out);
  w.field("subject_id").field("annotator_id").field("timestamp").field("value");
  w.end_row();
  for (const auto& tr : traces) {
    for (std::size_t i = 0; i < tr.timestamps.size(); ++i) {
      w.field(tr.subject_id).field(tr.annotator_id).field(tr.timestamps[i]).field(tr.values[i]);
      w.end_row();
    }
  }
}

inline std::vector<AnnotationTrace> parse_annotations(const csv::Table& t) {
  t.require_prefix({"subject_id", "annotator_id", "timestamp", "value"});
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<AnnotationTrace> out;
  for (const auto& row : t.rows()) {
    const std::string& sid = t.field(row, 0);
    const std::string& aid = t.field(row, 1);
    if (sid.empty() || aid.empty()) {
      throw SchemaError(t.source() + ":" + std::to_string(row.line) + ": empty subject_id or annotator_id");
    }
    auto [it, inserted] = index.emplace(std::make_pair(sid, aid), out.size());
    if (inserted) {
      out.emplace_back();
      out.back().subject_id = sid;
      out.back().annotator_id = aid;
    }
    out[it->second].timestamps.push_back(t.number(row, 2));
    out[it->second].values.push_back(t.number(row, 3));
  }
  if (out.empty()) {
    throw InsufficientData(t.source() + ": no annotations; at least 2 annotators per subject are required");
  }
  for (auto& tr : out) {
    try {
      tr.validate();
    } catch (const Error& e) {
      throw SchemaError(t.source() + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<AnnotationTrace> read_annotations(const std::string& path) {
  const std::string text = slurp(path);
  if (csv::trim(text).empty()) {
    throw InsufficientData(path + ": empty annotation file; at least 2 annotators per subject are required");
  }
  std::istringstream in(text);
  return parse_annotations(csv::read(in, path));
}

// Ground truth --------------------------------------------------------------

inline void write_ground_truth(std::ostream& out, const std::vector<GroundTruthWindow>& gt) {
  csv::Writer w(out);
  w.field("subject_id").field("window_start").field("mu_true").field("sigma_true");
  w.end_row();
  for (const auto& g : gt) {
    w.field(g.subject_id).field(g.window_start).field(g.truth.mu).field(g.truth.sigma);
    w.end_row();
  }
}

// Datasets ------------------------------------------------------------------

inline std::string convention_name(StdConvention c) { return c == StdConvention::kPopulation ? "population" : "sample"; }

inline StdConvention parse_convention(const std::string& s) {
  if (s == "population") return StdConvention::kPopulation;
  if (s == "sample") return StdConvention::kSample;
  throw DomainError("unknown std convention '" + s + "' (expected population or sample)");
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  csv::Writer w(out);
  w.field("subject_id").field("window_index").field("window_start").field("n_annotators");
  w.field("mu").field("sigma").field("mu_raw").field("sigma_raw");
  for (Eigen::Index j = 0; j < ds.feature_dim(); ++j) w.field("x" + std::to_string(j));
  w.end_row();
  for (const auto& s : ds.samples) {
    w.field(s.subject_id).field(static_cast<long long>(s.window_index)).field(s.window_start).field(s.n_annotators);
    w.field(s.target.mu).field(s.target.sigma).field(s.raw.mu).field(s.raw.sigma);
    for (Eigen::Index j = 0; j < s.features.size(); ++j) w.field(s.features[j]);
    w.end_row();
  }
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : ds.modalities) mods.push_back({{"name", m.name}, {"dim", m.dim}, {"offset", m.offset}});
  return {{"format", "betacons-dataset"},
          {"version", 1},
          {"label_range", {ds.window.label_lo, ds.window.label_hi}},
          {"window", {{"window_len", ds.window.window_len}, {"stride", ds.window.stride}}},
          {"modalities", mods},
          {"feature_dim", ds.feature_dim()},
          {"clamp_epsilon", ds.clamp_epsilon},
          {"std_convention", convention_name(ds.convention)},
          {"n_samples", ds.samples.size()},
          {"subjects", ds.subjects()},
          {"report",
           {{"windows_skipped_empty", ds.report.windows_skipped_empty},
            {"windows_dropped_annotators", ds.report.windows_dropped_annotators},
            {"feature_windows_unmatched", ds.report.feature_windows_unmatched},
            {"consensus_windows_unmatched", ds.report.consensus_windows_unmatched},
            {"subjects_without_annotations", ds.report.subjects_without_annotations},
            {"subjects_without_features", ds.report.subjects_without_features}}}};
}

inline std::filesystem::path manifest_path_for(const std::filesystem::path& dataset_csv) {
  auto p = dataset_csv;
  p.replace_extension(".manifest.json");
  return p;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& csv_path) {
  {
    auto out = open_out(csv_path);
    write_dataset(out, ds);
    finish(out, csv_path);
  }
  const auto mpath = manifest_path_for(csv_path);
  auto out = open_out(mpath);
  out << dataset_manifest(ds).dump(2) << '\n';
  finish(out, mpath);
}

/// Reads a dataset CSV together with its manifest (same stem,
/// `.manifest.json`).
inline Dataset load_dataset(const std::filesystem::path& csv_path) {
  const auto mpath = manifest_path_for(csv_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(slurp(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(mpath.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.window.window_len = m.at("window").at("window_len").get<double>();
    ds.window.stride = m.at("window").at("stride").get<double>();
    ds.window.label_lo = m.at("label_range").at(0).get<double>();
    ds.window.label_hi = m.at("label_range").at(1).get<double>();
    ds.clamp_epsilon = m.at("clamp_epsilon").get<double>();
    ds.convention = parse_convention(m.at("std_convention").get<std::string>());
    for (const auto& mod : m.at("modalities")) {
      ds.modalities.push_back({mod.at("name").get<std::string>(), mod.at("dim").get<Eigen::Index>(),
                               mod.at("offset").get<Eigen::Index>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(mpath.string() + ": " + e.what());
  }
  const auto t = csv::read_file(csv_path.string());
  t.require_prefix({"subject_id", "window_index", "window_start", "n_annotators", "mu", "sigma", "mu_raw", "sigma_raw"});
  const Eigen::Index dim = ds.feature_dim();
  if (static_cast<Eigen::Index>(t.header().size()) != 8 + dim) {
    throw SchemaError(csv_path.string() + ":1: expected " + std::to_string(dim) + " feature columns per manifest, got " +
                      std::to_string(static_cast<Eigen::Index>(t.header().size()) - 8));
  }
  for (const auto& row : t.rows()) {
    WindowedSample s;
    s.subject_id = t.field(row, 0);
    s.window_index = static_cast<std::int64_t>(t.number(row, 1));
    s.window_start = t.number(row, 2);
    s.n_annotators = static_cast<int>(t.number(row, 3));
    s.target = {t.number(row, 4), t.number(row, 5)};
    s.raw = {t.number(row, 6), t.number(row, 7)};
    if (!s.target.valid()) {
      throw SchemaError(csv_path.string() + ":" + std::to_string(row.line) + ": target moments violate validity");
    }
    s.features.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j) s.features[j] = t.number(row, 8 + static_cast<std::size_t>(j));
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw InsufficientData(csv_path.string() + ": dataset has no samples");
  return ds;
}

}  // namespace betacons::io
