// betacons command-line tool: synth, build, fit, run, report.

#include <charconv>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "betacons/beta_model.hpp"
#include "betacons/csv.hpp"
#include "betacons/errors.hpp"
#include "betacons/experiments.hpp"
#include "betacons/io.hpp"
#include "betacons/pipeline.hpp"
#include "betacons/synthetic.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace betacons;

namespace {

constexpr const char* kOutputRootEnv = "BETACONS_OUTPUT_ROOT";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(csv::trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!csv::trim(cur).empty() || !out.empty()) out.push_back(csv::trim(cur));
  return out;
}

// Flag values are kept as strings and converted to the type of the default.
class ParamSet {
 public:
  ParamSet(CLI::App* app, json defaults) : app_(app), defaults_(std::move(defaults)) {}

  void opt(const std::string& key, const std::string& flag, const std::string& help) {
    storage_.emplace_back();
    std::string desc = help + " [default: " + defaults_.at(key).dump() + "]";
    entries_.push_back({key, app_->add_option(flag, storage_.back(), desc), nullptr});
  }

  void flag(const std::string& key, const std::string& flag, const std::string& help) {
    bools_.push_back(false);
    entries_.push_back({key, app_->add_flag(flag, bools_.back(), help), &bools_.back()});
  }

  /// defaults < config section < flags.
  json resolve(const json& section) const {
    json out = defaults_;
    if (section.is_object()) {
      for (const auto& [k, v] : section.items()) {
        if (!out.contains(k)) throw UsageError("config: unknown key '" + k + "' for " + app_->get_name());
        out[k] = v;
      }
    }
    std::size_t si = 0;
    for (const auto& e : entries_) {
      if (e.flag_value != nullptr) {
        if (e.option->count() > 0) out[e.key] = true;
        continue;
      }
      const std::string& raw = storage_[si++];
      if (e.option->count() == 0) continue;
      out[e.key] = convert(e.key, raw);
    }
    return out;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* option;
    bool* flag_value;
  };

  json convert(const std::string& key, const std::string& raw) const {
    const json& def = defaults_.at(key);
    auto bad = [&] { return UsageError("--" + key + ": cannot parse '" + raw + "'"); };
    if (def.is_number_unsigned()) {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc() || p != raw.data() + raw.size()) throw bad();
      return v;
    }
    if (def.is_number_integer()) {
      long long v = 0;
      auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc() || p != raw.data() + raw.size()) throw bad();
      return v;
    }
    if (def.is_number_float()) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc() || p != raw.data() + raw.size()) throw bad();
      return v;
    }
    if (def.is_array()) return split_list(raw);
    if (def.is_boolean()) {
      if (raw == "true" || raw == "1") return true;
      if (raw == "false" || raw == "0") return false;
      throw bad();
    }
    return raw;
  }

  CLI::App* app_;
  json defaults_;
  std::vector<Entry> entries_;
  std::deque<std::string> storage_;
  std::deque<bool> bools_;
};

struct Global {
  std::string config_path;
  std::string output_root;
  json config = json::object();
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(io::slurp(path));
  } catch (const json::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
  if (!j.is_object()) throw SchemaError(path + ": config must be a JSON object");
  // A run manifest can be replayed as a config file.
  if (j.contains("subcommand") && j.contains("resolved")) {
    json c;
    c[j["subcommand"].get<std::string>()] = j["resolved"];
    if (j.contains("output_root")) c["output_root"] = j["output_root"];
    return c;
  }
  return j;
}

fs::path output_root(const Global& g) {
  if (!g.output_root.empty()) return g.output_root;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  if (g.config.contains("output_root")) return g.config["output_root"].get<std::string>();
  return "betacons_out";
}

fs::path resolve_out(const Global& g, const std::string& out) {
  fs::path p(out);
  return p.is_absolute() ? p : output_root(g) / p;
}

void write_json(const fs::path& path, const json& j) {
  auto out = io::open_out(path);
  out << j.dump(2) << '\n';
  io::finish(out, path);
}

/// Written into the output directory before any computation starts.
void write_manifest(const Global& g, const std::string& sub, const json& resolved, const fs::path& out_dir) {
  try {
    fs::create_directories(out_dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create output directory '" + out_dir.string() + "': " + e.code().message());
  }
  json m = {{"subcommand", sub},
            {"config_file", g.config_path},
            {"resolved", resolved},
            {"master_seed", resolved.contains("seed") ? resolved["seed"] : json(nullptr)},
            {"output_dir", out_dir.string()},
            {"output_root", output_root(g).string()},
            {"tool_version", BETACONS_VERSION}};
  write_json(out_dir / "run_manifest.json", m);
}

WindowConfig window_from(const json& r) {
  WindowConfig w;
  w.window_len = r.at("window_len").get<double>();
  w.stride = r.at("stride").get<double>();
  w.label_lo = r.at("label_lo").get<double>();
  w.label_hi = r.at("label_hi").get<double>();
  w.validate();
  return w;
}

json window_defaults() {
  WindowConfig w;
  return {{"window_len", w.window_len}, {"stride", w.stride}, {"label_lo", w.label_lo}, {"label_hi", w.label_hi}};
}

void add_window_opts(ParamSet& p) {
  p.opt("window_len", "--window-len", "window length in seconds");
  p.opt("stride", "--stride", "window shift in seconds");
  p.opt("label_lo", "--label-lo", "lower end of the raw annotation scale");
  p.opt("label_hi", "--label-hi", "upper end of the raw annotation scale");
}

// Writes through a temporary file so a failure leaves no partial output.
template <class Fn>
void write_atomic(const fs::path& path, Fn&& fn) {
  const fs::path tmp = path.string() + ".tmp";
  {
    auto out = io::open_out(tmp);
    fn(out);
    io::finish(out, tmp);
  }
  fs::rename(tmp, path);
}

// synth ---------------------------------------------------------------------

json synth_defaults() {
  SyntheticConfig c;
  json j = {{"subjects", c.n_subjects},
            {"duration", c.duration},
            {"frame_rate", c.frame_rate},
            {"annotators", c.n_annotators},
            {"feature_dim", c.feature_dim},
            {"latent_dim", c.latent_dim},
            {"noise_std", c.noise_std},
            {"modalities", c.n_modalities},
            {"spread_lo", c.spread_lo},
            {"spread_hi", c.spread_hi},
            {"persistence", c.annotator_persistence},
            {"bias_std", c.annotator_bias_std},
            {"identity_map", c.identity_map},
            {"seed", c.seed},
            {"out", "synth"}};
  j.update(window_defaults());
  return j;
}

int cmd_synth(const Global& g, const json& r) {
  SyntheticConfig c;
  c.n_subjects = r.at("subjects").get<int>();
  c.duration = r.at("duration").get<double>();
  c.frame_rate = r.at("frame_rate").get<double>();
  c.n_annotators = r.at("annotators").get<int>();
  c.feature_dim = r.at("feature_dim").get<int>();
  c.latent_dim = r.at("latent_dim").get<int>();
  c.noise_std = r.at("noise_std").get<double>();
  c.n_modalities = r.at("modalities").get<int>();
  c.spread_lo = r.at("spread_lo").get<double>();
  c.spread_hi = r.at("spread_hi").get<double>();
  c.annotator_persistence = r.at("persistence").get<double>();
  c.annotator_bias_std = r.at("bias_std").get<double>();
  c.identity_map = r.at("identity_map").get<bool>();
  c.seed = r.at("seed").get<std::uint64_t>();
  c.window = window_from(r);
  c.validate();
  const fs::path dir = resolve_out(g, r.at("out").get<std::string>());
  write_manifest(g, "synth", r, dir);

  const auto data = generate(c);
  write_atomic(dir / "features.csv", [&](std::ostream& o) { io::write_features(o, data.features); });
  write_atomic(dir / "annotations.csv", [&](std::ostream& o) { io::write_annotations(o, data.annotations); });
  write_atomic(dir / "ground_truth.csv", [&](std::ostream& o) { io::write_ground_truth(o, data.ground_truth); });
  std::size_t frames = 0;
  for (const auto& f : data.features) frames += f.timestamps.size();
  std::size_t labels = 0;
  for (const auto& a : data.annotations) labels += a.timestamps.size();
  std::cout << "subjects: " << c.n_subjects << "\nfeature rows: " << frames << "\nannotation rows: " << labels
            << "\nground-truth windows: " << data.ground_truth.size() << "\noutput: " << dir.string() << "\n";
  return 0;
}

// build ---------------------------------------------------------------------

json build_defaults() {
  json j = {{"features", ""},
            {"annotations", ""},
            {"modalities", json::array()},
            {"epsilon", kDefaultClampEpsilon},
            {"convention", "population"},
            {"out", "build"}};
  j.update(window_defaults());
  return j;
}

std::string require_path(const json& r, const char* key) {
  std::string p = r.at(key).get<std::string>();
  if (p.empty()) throw UsageError(std::string("--") + key + " is required");
  return p;
}

int cmd_build(const Global& g, const json& r) {
  const std::string feat = require_path(r, "features");
  const std::string ann = require_path(r, "annotations");
  const WindowConfig w = window_from(r);
  const fs::path dir = resolve_out(g, r.at("out").get<std::string>());
  write_manifest(g, "build", r, dir);

  const auto features = io::read_features(feat);
  const auto annotations = io::read_annotations(ann);
  const auto ds = build_dataset(features, annotations, w, r.at("modalities").get<std::vector<std::string>>(),
                                r.at("epsilon").get<double>(), io::parse_convention(r.at("convention").get<std::string>()));
  io::save_dataset(ds, dir / "dataset.csv");
  for (const auto& warning : ds.report.warnings) std::cerr << "warning: " << warning << "\n";
  std::cout << "samples: " << ds.samples.size() << "\nsubjects: " << ds.subjects().size()
            << "\nfeature_dim: " << ds.feature_dim() << "\noutput: " << (dir / "dataset.csv").string() << "\n";
  return 0;
}

// fit -----------------------------------------------------------------------

json fit_defaults() {
  json j = {{"annotations", ""}, {"epsilon", kDefaultClampEpsilon}, {"convention", "population"}, {"out", "fit"}};
  j.update(window_defaults());
  return j;
}

int cmd_fit(const Global& g, const json& r) {
  const std::string ann = require_path(r, "annotations");
  const WindowConfig w = window_from(r);
  const double eps = r.at("epsilon").get<double>();
  const auto conv = io::parse_convention(r.at("convention").get<std::string>());
  const fs::path dir = resolve_out(g, r.at("out").get<std::string>());
  write_manifest(g, "fit", r, dir);

  const auto traces = io::read_annotations(ann);
  std::map<std::string, std::vector<AnnotationTrace>> by_subject;
  for (const auto& t : traces) by_subject[t.subject_id].push_back(rescale_annotations(t, w.label_lo, w.label_hi));
  std::size_t rows = 0;
  std::size_t flagged = 0;
  write_atomic(dir / "beta_fit.csv", [&](std::ostream& o) {
    csv::Writer wr(o);
    for (const char* h : {"subject_id", "window_index", "window_start", "n_annotators", "mu", "sigma", "mu_raw",
                          "sigma_raw", "alpha", "beta", "mean", "std", "skew", "kurt_ex", "median", "q25", "q75",
                          "clamped", "near_degenerate"}) {
      wr.field(std::string(h));
    }
    wr.end_row();
    for (const auto& [subject, ts] : by_subject) {
      const auto cons = window_consensus(ts, w, eps, conv);
      for (const auto& warning : cons.warnings) std::cerr << "warning: " << warning << "\n";
      for (const auto& cw : cons.windows) {
        const BetaParams p = moment_match(cw.target);
        const DescriptorSet d = descriptors(p);
        const bool clamped = !(cw.raw == cw.target);
        // Unanimous or near-unanimous windows sit on the clamp boundary.
        const bool degenerate = clamped || cw.raw.sigma == 0.0;
        wr.field(subject).field(static_cast<long long>(cw.index)).field(cw.start).field(cw.n_annotators);
        wr.field(cw.target.mu).field(cw.target.sigma).field(cw.raw.mu).field(cw.raw.sigma);
        wr.field(p.alpha()).field(p.beta());
        wr.field(d.mean).field(d.std).field(d.skew).field(d.kurt_ex).field(d.median).field(d.q25).field(d.q75);
        wr.field(clamped ? 1 : 0).field(degenerate ? 1 : 0);
        wr.end_row();
        ++rows;
        flagged += degenerate ? 1 : 0;
      }
    }
  });
  if (rows == 0) throw InsufficientData(ann + ": no window has annotations from at least 2 annotators");
  std::cout << "windows: " << rows << "\nnear-degenerate: " << flagged << "\noutput: " << (dir / "beta_fit.csv").string()
            << "\n";
  return 0;
}

// run -----------------------------------------------------------------------

json run_defaults() {
  ExperimentConfig c;
  json variants = json::array();
  for (auto v : c.variants) variants.push_back(variant_name(v));
  json baselines = json::array();
  for (auto d : c.baseline_targets) baselines.push_back(descriptor_name(d));
  return {{"dataset", ""},
          {"folds", c.k},
          {"seeds", c.n_seeds},
          {"seed", c.master_seed},
          {"fold_limit", c.fold_limit},
          {"variants", variants},
          {"baselines", baselines},
          {"feature_sets", json::array()},
          {"target", c.target_name},
          {"oracle", false},
          {"constant", false},
          {"kl_direction", kl_direction_name(c.kl_direction)},
          {"pooling", pooling_name(c.pooling)},
          {"level", c.significance_level},
          {"learning_rate", c.train.learning_rate},
          {"batch_size", c.train.batch_size},
          {"epochs", c.train.max_epochs},
          {"patience", c.train.patience},
          {"jobs", 0},
          {"density_windows", json::array()},
          {"density_count", 3},
          {"density_variant", "M_F"},
          {"out", "run"}};
}

// "name=mod0+mod1" or a bare modality name.
FeatureSet parse_feature_set(const std::string& s) {
  const auto eq = s.find('=');
  FeatureSet f;
  f.name = eq == std::string::npos ? s : s.substr(0, eq);
  const std::string mods = eq == std::string::npos ? s : s.substr(eq + 1);
  std::string cur;
  for (char c : mods + "+") {
    if (c == '+') {
      if (!cur.empty()) f.modalities.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (f.name.empty() || f.modalities.empty()) throw UsageError("bad feature set '" + s + "' (use NAME=MOD+MOD)");
  return f;
}

ExperimentConfig experiment_from(const json& r) {
  ExperimentConfig c;
  c.k = r.at("folds").get<int>();
  c.n_seeds = r.at("seeds").get<int>();
  c.master_seed = r.at("seed").get<std::uint64_t>();
  c.fold_limit = r.at("fold_limit").get<int>();
  c.variants.clear();
  for (const auto& v : r.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
  c.baseline_targets.clear();
  for (const auto& d : r.at("baselines")) c.baseline_targets.push_back(parse_descriptor(d.get<std::string>()));
  for (const auto& f : r.at("feature_sets")) c.feature_sets.push_back(parse_feature_set(f.get<std::string>()));
  c.target_name = r.at("target").get<std::string>();
  const bool oracle = r.at("oracle").get<bool>();
  const bool constant = r.at("constant").get<bool>();
  if (oracle && constant) throw UsageError("--oracle and --constant are mutually exclusive");
  c.mode = oracle ? PredictorMode::kOracle : constant ? PredictorMode::kConstant : PredictorMode::kTrained;
  const auto dir = r.at("kl_direction").get<std::string>();
  if (dir != "truth||pred" && dir != "pred||truth") throw UsageError("--kl-direction must be truth||pred or pred||truth");
  c.kl_direction = dir == "truth||pred" ? KlDirection::kTruthPred : KlDirection::kPredTruth;
  const auto pool = r.at("pooling").get<std::string>();
  if (pool != "pooled" && pool != "per_subject") throw UsageError("--pooling must be pooled or per_subject");
  c.pooling = pool == "pooled" ? CccPooling::kPooled : CccPooling::kPerSubject;
  c.significance_level = r.at("level").get<double>();
  c.train.learning_rate = r.at("learning_rate").get<double>();
  c.train.batch_size = r.at("batch_size").get<int>();
  c.train.max_epochs = r.at("epochs").get<int>();
  c.train.patience = r.at("patience").get<int>();
  const int jobs = r.at("jobs").get<int>();
  c.jobs = jobs > 0 ? jobs : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  return c;
}

void print_summary(const ExperimentReport& rep) {
  const json s = summary_json(rep);
  std::cout << "cells: " << rep.cells.size() << " (failed " << rep.failures() << ")\n";
  for (const auto& m : s["means"]) {
    std::cout << "  " << std::left << std::setw(10) << m["features"].get<std::string>() << std::setw(12)
              << m["competitor"].get<std::string>();
    for (const auto& [k, v] : m["means"].items()) std::cout << " " << k << "=" << csv::format_number(v.get<double>());
    std::cout << "\n";
  }
  for (const auto& e : rep.significance) {
    std::cout << "  [" << e.features << " " << e.metric << "] best=" << e.best;
    for (const auto& c : e.comparisons) {
      if (c.status == "best") continue;
      std::cout << " " << c.competitor << ":" << c.status;
    }
    std::cout << "\n";
  }
}

int cmd_run(const Global& g, const json& r) {
  const std::string dataset = require_path(r, "dataset");
  ExperimentConfig cfg = experiment_from(r);
  cfg.validate();
  const fs::path dir = resolve_out(g, r.at("out").get<std::string>());
  write_manifest(g, "run", r, dir);

  const Dataset ds = io::load_dataset(dataset);
  std::cout << "dataset: " << ds.samples.size() << " samples, " << ds.subjects().size() << " subjects\n";
  ExperimentReport rep = run_grid(ds, cfg);
  significance(rep, cfg.significance_level);
  write_reports(rep, dir);
  write_json(dir / "cells.json", cells_json(rep));

  const std::string dvar = r.at("density_variant").get<std::string>();
  const bool have_variant = std::any_of(cfg.variants.begin(), cfg.variants.end(),
                                        [&](VariantKind v) { return variant_name(v) == dvar; });
  std::vector<WindowRef> windows;
  for (const auto& w : r.at("density_windows")) windows.push_back(parse_window_ref(w.get<std::string>()));
  if (windows.empty() && have_variant) {
    // Evenly spaced test windows of the first fold.
    const auto& test = rep.plan.folds.front().test;
    std::vector<std::size_t> pool;
    for (std::size_t n = 0; n < ds.samples.size(); ++n) {
      if (std::find(test.begin(), test.end(), ds.samples[n].subject_id) != test.end()) pool.push_back(n);
    }
    const int count = r.at("density_count").get<int>();
    for (int i = 0; i < count && !pool.empty(); ++i) {
      const auto& s = ds.samples[pool[(pool.size() * static_cast<std::size_t>(2 * i + 1)) / static_cast<std::size_t>(2 * count)]];
      windows.push_back({s.subject_id, s.window_index});
    }
  }
  if (!windows.empty() && rep.failures() > 0) {
    std::cerr << "warning: density dumps skipped, grid has failed cells\n";
  } else if (!windows.empty()) {
    if (!have_variant) throw UsageError("--density-variant " + dvar + " is not part of the grid");
    const auto files = emit_density_data(rep, ds, windows, dir / "density", dvar);
    std::cout << "density files: " << files.size() << "\n";
  }
  print_summary(rep);
  std::cout << "output: " << dir.string() << "\n";
  if (rep.failures() > 0) {
    std::cerr << "error: " << rep.failures() << " of " << rep.cells.size() << " cells failed\n";
    for (const auto& c : rep.cells) {
      if (!c.ok) std::cerr << "  " << c.name() << " " << c.features << " fold " << c.fold << " seed " << c.seed_index << ": " << c.error << "\n";
    }
    return static_cast<int>(ExitCode::kNumeric);
  }
  return 0;
}

// report --------------------------------------------------------------------

json report_defaults() { return {{"run", ""}, {"level", 0.05}, {"out", ""}}; }

int cmd_report(const Global& g, const json& r) {
  const fs::path run_dir = require_path(r, "run");
  const std::string out = r.at("out").get<std::string>();
  const fs::path dir = out.empty() ? run_dir : resolve_out(g, out);
  json cells;
  try {
    cells = json::parse(io::slurp(run_dir / "cells.json"));
  } catch (const json::exception& e) {
    throw SchemaError((run_dir / "cells.json").string() + ": " + e.what());
  }
  write_manifest(g, "report", r, dir);
  std::vector<std::string> subjects;
  const fs::path man = run_dir / "run_manifest.json";
  if (fs::exists(man)) {
    // Rebuild the fold plan from the dataset the run used.
    const json m = json::parse(io::slurp(man));
    const fs::path dpath = m.at("resolved").at("dataset").get<std::string>();
    if (fs::exists(io::manifest_path_for(dpath))) {
      subjects = json::parse(io::slurp(io::manifest_path_for(dpath))).at("subjects").get<std::vector<std::string>>();
    }
  }
  ExperimentReport rep = report_from_json(cells, subjects);
  significance(rep, r.at("level").get<double>());
  write_reports(rep, dir);
  print_summary(rep);
  std::cout << "output: " << dir.string() << "\n";
  return rep.failures() > 0 ? static_cast<int>(ExitCode::kNumeric) : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Beta consensus modelling of multi-annotator signals"};
  app.set_version_flag("--version", BETACONS_VERSION);
  app.require_subcommand(1);
  Global g;
  app.add_option("-c,--config", g.config_path, "JSON config file (or a run_manifest.json to replay)");
  app.add_option("--output-root", g.output_root,
                 std::string("root for relative output directories (overrides $") + kOutputRootEnv + ")");

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-annotator dataset");
  ParamSet ps(synth, synth_defaults());
  ps.opt("subjects", "--subjects", "number of subjects");
  ps.opt("duration", "--duration", "seconds per subject");
  ps.opt("frame_rate", "--frame-rate", "frames per second");
  ps.opt("annotators", "--annotators", "annotators per subject");
  ps.opt("feature_dim", "--feature-dim", "features per modality");
  ps.opt("latent_dim", "--latent-dim", "nuisance drivers");
  ps.opt("noise_std", "--noise", "feature noise std");
  ps.opt("modalities", "--modalities", "number of modalities");
  ps.opt("spread_lo", "--spread-lo", "lower relative spread");
  ps.opt("spread_hi", "--spread-hi", "upper relative spread");
  ps.opt("persistence", "--persistence", "annotator correlation time in seconds");
  ps.opt("bias_std", "--bias", "per-annotator bias std");
  ps.flag("identity_map", "--identity-map", "features expose mu*, sigma* directly");
  ps.opt("seed", "--seed", "master seed");
  add_window_opts(ps);
  ps.opt("out", "-o,--out", "output directory (relative to the output root)");

  auto* build = app.add_subcommand("build", "window features and annotations into a dataset");
  ParamSet pb(build, build_defaults());
  pb.opt("features", "--features", "feature CSV");
  pb.opt("annotations", "--annotations", "annotation CSV");
  pb.opt("modalities", "--modalities", "comma-separated modalities to concatenate (default all)");
  pb.opt("epsilon", "--epsilon", "moment clamp margin");
  pb.opt("convention", "--convention", "population or sample std");
  add_window_opts(pb);
  pb.opt("out", "-o,--out", "output directory");

  auto* fit = app.add_subcommand("fit", "per-window Beta fits and descriptors from annotations");
  ParamSet pf(fit, fit_defaults());
  pf.opt("annotations", "--annotations", "annotation CSV");
  pf.opt("epsilon", "--epsilon", "moment clamp margin");
  pf.opt("convention", "--convention", "population or sample std");
  add_window_opts(pf);
  pf.opt("out", "-o,--out", "output directory");

  auto* run = app.add_subcommand("run", "cross-validated training and evaluation grid");
  ParamSet pr(run, run_defaults());
  pr.opt("dataset", "--dataset", "dataset CSV from build");
  pr.opt("folds", "--folds", "number of folds");
  pr.opt("seeds", "--seeds", "seeds per cell");
  pr.opt("seed", "--seed", "master seed");
  pr.opt("fold_limit", "--fold-limit", "run only the first N folds (0 = all)");
  pr.opt("variants", "--variants", "comma-separated subset of M_I,M_S,M_F");
  pr.opt("baselines", "--baselines", "comma-separated B targets (mean,std,median,q25,q75,skew,kurt)");
  pr.opt("feature_sets", "--feature-sets", "comma-separated NAME=MOD+MOD sets (default each modality + fusion)");
  pr.opt("target", "--target", "target label used in reports");
  pr.flag("oracle", "--oracle", "predict the test targets themselves");
  pr.flag("constant", "--constant", "predict training-fold means");
  pr.opt("kl_direction", "--kl-direction", "truth||pred or pred||truth");
  pr.opt("pooling", "--pooling", "pooled or per_subject CCC");
  pr.opt("level", "--level", "significance level");
  pr.opt("learning_rate", "--lr", "Adam learning rate");
  pr.opt("batch_size", "--batch-size", "mini-batch size");
  pr.opt("epochs", "--epochs", "maximum epochs");
  pr.opt("patience", "--patience", "early-stopping patience");
  pr.opt("jobs", "-j,--jobs", "parallel cells (0 = available cores)");
  pr.opt("density_windows", "--density-windows", "comma-separated SUBJECT:INDEX windows for density dumps");
  pr.opt("density_count", "--density-count", "windows picked automatically when none are given");
  pr.opt("density_variant", "--density-variant", "variant whose predictions are dumped");
  pr.opt("out", "-o,--out", "output directory");

  auto* report = app.add_subcommand("report", "recompute significance and report tables for a finished run");
  ParamSet pp(report, report_defaults());
  pp.opt("run", "--run", "run output directory");
  pp.opt("level", "--level", "significance level");
  pp.opt("out", "-o,--out", "output directory (default: the run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    g.config = load_config(g.config_path);
    auto section = [&](const char* name) { return g.config.contains(name) ? g.config[name] : json::object(); };
    if (synth->parsed()) return cmd_synth(g, ps.resolve(section("synth")));
    if (build->parsed()) return cmd_build(g, pb.resolve(section("build")));
    if (fit->parsed()) return cmd_fit(g, pf.resolve(section("fit")));
    if (run->parsed()) return cmd_run(g, pr.resolve(section("run")));
    if (report->parsed()) return cmd_report(g, pp.resolve(section("report")));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(exit_code_for(e));
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}
