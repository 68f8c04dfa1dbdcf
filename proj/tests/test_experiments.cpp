#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "betacons/csv.hpp"
#include "betacons/experiments.hpp"
#include "betacons/io.hpp"
#include "betacons/synthetic.hpp"

using namespace betacons;
namespace fs = std::filesystem;

namespace {

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    SyntheticConfig c;
    c.n_subjects = 8;
    c.duration = 60.0;
    c.feature_dim = 4;
    const auto d = generate(c);
    return build_dataset(d.features, d.annotations, c.window);
  }();
  return ds;
}

ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.k = 4;
  c.n_seeds = 2;
  c.variants = {VariantKind::kFullyShared};
  c.baseline_targets = {Descriptor::kMedian};
  c.train.max_epochs = 3;
  c.train.batch_size = 64;
  return c;
}

std::vector<std::string> subject_names(int n) {
  std::vector<std::string> s;
  for (int i = 0; i < n; ++i) s.push_back(synthetic_subject_id(i));
  return s;
}

std::string slurp_dir(const fs::path& dir) {
  std::string all;
  for (const char* f : {"moments_ccc.csv", "descriptors_ccc.csv", "kl.csv", "summary.json"}) {
    all += io::slurp(dir / f);
  }
  return all;
}

CellResult fake_cell(const std::string& variant, int fold, int seed, double ccc_mu) {
  CellResult c;
  c.variant = variant;
  c.features = "fs";
  c.fold = fold;
  c.seed_index = seed;
  c.ccc_mu = ccc_mu;
  c.ccc_sigma = ccc_mu;
  c.descriptor_ccc.fill(ccc_mu);
  c.kl_truth_pred = {1.0 - ccc_mu, 2.0, 1};
  c.kl_pred_truth = c.kl_truth_pred;
  c.n_test = 1;
  return c;
}

ExperimentReport fake_report(int n_seeds, const std::function<double(const std::string&, int)>& score) {
  ExperimentReport r;
  r.config.k = 3;
  r.config.n_seeds = n_seeds;
  r.config.variants = {VariantKind::kIndependent, VariantKind::kFullyShared};
  r.config.baseline_targets = {};
  r.feature_sets = {{"fs", {"m"}}};
  for (const char* v : {"M_I", "M_F"}) {
    for (int f = 0; f < 3; ++f) {
      for (int s = 0; s < n_seeds; ++s) r.cells.push_back(fake_cell(v, f, s, score(v, s)));
    }
  }
  return r;
}

const Comparison& find(const SignificanceEntry& e, const std::string& who) {
  for (const auto& c : e.comparisons) {
    if (c.competitor == who) return c;
  }
  throw std::runtime_error("missing competitor " + who);
}

}  // namespace

TEST(Folds, TenSubjectsFiveFolds) {
  const auto plan = make_folds(subject_names(10), 5, 1);
  ASSERT_EQ(plan.folds.size(), 5U);
  std::map<int, int> per_fold;
  for (const auto& [s, f] : plan.assignment) ++per_fold[f];
  for (const auto& [f, n] : per_fold) EXPECT_EQ(n, 2);
  for (const auto& f : plan.folds) {
    EXPECT_EQ(f.test.size(), 2U);
    EXPECT_EQ(f.validation.size(), 2U);
    EXPECT_EQ(f.train.size(), 6U);
    std::set<std::string> tr(f.train.begin(), f.train.end());
    for (const auto& s : f.test) EXPECT_FALSE(tr.contains(s));
    for (const auto& s : f.validation) EXPECT_FALSE(tr.contains(s));
  }
}

TEST(Folds, EverySubjectTestedOnce) {
  const auto plan = make_folds(subject_names(23), 5, 9);
  std::map<std::string, int> tested;
  for (const auto& f : plan.folds) {
    for (const auto& s : f.test) ++tested[s];
  }
  EXPECT_EQ(tested.size(), 23U);
  for (const auto& [s, n] : tested) EXPECT_EQ(n, 1);
}

TEST(Folds, SeededAndOrderInvariant) {
  auto names = subject_names(12);
  const auto a = make_folds(names, 5, 4);
  std::reverse(names.begin(), names.end());
  const auto b = make_folds(names, 5, 4);
  EXPECT_EQ(a.assignment, b.assignment);
  const auto c = make_folds(names, 5, 5);
  EXPECT_NE(a.assignment, c.assignment);
}

TEST(Folds, Errors) {
  EXPECT_THROW(make_folds(subject_names(4), 5, 1), InsufficientData);
  EXPECT_THROW(make_folds(subject_names(10), 2, 1), DomainError);
}

TEST(Descriptors, NamesRoundTrip) {
  for (auto d : kAllDescriptors) EXPECT_EQ(parse_descriptor(descriptor_name(d)), d);
  EXPECT_THROW(parse_descriptor("mode"), DomainError);
}

TEST(Grid, OraclePredictor) {
  auto cfg = quick_config();
  cfg.mode = PredictorMode::kOracle;
  cfg.baseline_targets = {Descriptor::kMedian, Descriptor::kSkew};
  const auto r = run_grid(small_dataset(), cfg);
  EXPECT_EQ(r.cells.size(), r.expected_cells());
  for (const auto& c : r.cells) {
    ASSERT_TRUE(c.ok) << c.error;
    if (c.variant == "B") {
      EXPECT_NEAR(c.descriptor_ccc[static_cast<std::size_t>(*c.descriptor)], 1.0, 1e-12);
      continue;
    }
    EXPECT_NEAR(c.ccc_mu, 1.0, 1e-12);
    EXPECT_NEAR(c.ccc_sigma, 1.0, 1e-12);
    for (double v : c.descriptor_ccc) EXPECT_NEAR(v, 1.0, 1e-9);
    EXPECT_LE(c.kl_truth_pred.mean_pred, 1e-12);
    EXPECT_LE(c.kl_pred_truth.mean_pred, 1e-12);
    EXPECT_GT(c.kl_truth_pred.mean_uniform, 0.0);
  }
}

TEST(Grid, ConstantPredictor) {
  auto cfg = quick_config();
  cfg.mode = PredictorMode::kConstant;
  const auto r = run_grid(small_dataset(), cfg);
  for (const auto& c : r.cells) {
    ASSERT_TRUE(c.ok) << c.error;
    if (c.variant == "B") {
      EXPECT_EQ(c.descriptor_ccc[static_cast<std::size_t>(Descriptor::kMedian)], 0.0);
      continue;
    }
    EXPECT_EQ(c.ccc_mu, 0.0);
    EXPECT_EQ(c.ccc_sigma, 0.0);
    for (double v : c.descriptor_ccc) EXPECT_EQ(v, 0.0);
  }
}

TEST(Grid, SubjectIndependentSplits) {
  const auto& ds = small_dataset();
  const auto r = run_grid(ds, quick_config());
  for (const auto& c : r.cells) {
    const auto& split = r.plan.folds[static_cast<std::size_t>(c.fold)];
    EXPECT_EQ(c.n_train + c.n_val + c.n_test, ds.samples.size());
    for (auto n : c.test_samples) {
      EXPECT_NE(std::find(split.test.begin(), split.test.end(), ds.samples[n].subject_id), split.test.end());
    }
    if (c.seed_index == 0) {
      EXPECT_EQ(c.test_samples.size(), c.n_test);
    } else {
      EXPECT_TRUE(c.test_samples.empty());
    }
  }
}

TEST(Grid, FeatureSets) {
  const auto& ds = small_dataset();
  const auto sets = default_feature_sets(ds);
  ASSERT_EQ(sets.size(), 3U);
  EXPECT_EQ(sets.back().name, "fusion");
  EXPECT_EQ(sets.back().modalities.size(), 2U);
  auto cfg = quick_config();
  cfg.feature_sets = {{"only1", {"mod1"}}};
  const auto r = run_grid(ds, cfg);
  for (const auto& c : r.cells) EXPECT_EQ(c.features, "only1");
  cfg.feature_sets = {{"bad", {"nope"}}};
  EXPECT_THROW(run_grid(ds, cfg), DomainError);
}

TEST(Grid, TrainingFailureRecorded) {
  auto cfg = quick_config();
  cfg.train.learning_rate = 1e300;
  cfg.variants = {VariantKind::kFullyShared};
  cfg.baseline_targets = {Descriptor::kMedian};
  const auto r = run_grid(small_dataset(), cfg);
  EXPECT_EQ(r.cells.size(), r.expected_cells());
  EXPECT_GT(r.failures(), 0U);
  for (const auto& c : r.cells) {
    if (!c.ok) {
      EXPECT_FALSE(c.error.empty());
      EXPECT_TRUE(std::isnan(c.ccc_mu));
    }
  }
}

TEST(Grid, ThreadCountDoesNotChangeResults) {
  auto cfg = quick_config();
  cfg.jobs = 1;
  const auto a = run_grid(small_dataset(), cfg);
  cfg.jobs = 3;
  const auto b = run_grid(small_dataset(), cfg);
  EXPECT_EQ(cells_json(a).dump(), cells_json(b).dump());
}

TEST(Grid, NoiselessSyntheticLearnsMean) {
  SyntheticConfig sc;
  sc.n_subjects = 10;
  sc.duration = 240.0;
  sc.noise_std = 0.0;
  const auto d = generate(sc);
  const auto ds = build_dataset(d.features, d.annotations, sc.window);
  ExperimentConfig cfg;
  cfg.n_seeds = 3;
  cfg.variants = {VariantKind::kFullyShared};
  cfg.baseline_targets = {};
  cfg.feature_sets = {{"fusion", {"mod0", "mod1"}}};
  const auto r = run_grid(ds, cfg);
  double acc = 0.0;
  for (const auto& c : r.cells) {
    ASSERT_TRUE(c.ok) << c.error;
    acc += c.ccc_mu;
  }
  EXPECT_GE(acc / static_cast<double>(r.cells.size()), 0.95);
}

TEST(Significance, IdenticalScoresTie) {
  auto r = fake_report(10, [](const std::string&, int s) { return 0.5 + 0.01 * s; });
  significance(r, 0.05);
  ASSERT_FALSE(r.significance.empty());
  for (const auto& e : r.significance) {
    for (const auto& c : e.comparisons) {
      if (c.status == "best") continue;
      if (c.competitor == "uniform") continue;
      EXPECT_EQ(c.status, "tied");
      EXPECT_EQ(c.p_value, 1.0);
    }
  }
}

TEST(Significance, DisjointScoresSignificant) {
  auto r = fake_report(10, [](const std::string& v, int s) { return (v == "M_F" ? 0.8 : 0.5) + 0.001 * s; });
  significance(r, 0.05);
  const auto& e = r.significance.front();
  EXPECT_EQ(e.metric, "ccc_mu");
  EXPECT_EQ(e.best, "M_F");
  const auto& c = find(e, "M_I");
  EXPECT_EQ(c.status, "worse");
  EXPECT_NEAR(c.p_value, 2.0 / 1024.0, 1e-12);
  EXPECT_EQ(c.n_pairs, 10U);
}

TEST(Significance, OneSeedInconclusive) {
  auto r = fake_report(1, [](const std::string& v, int) { return v == "M_F" ? 0.8 : 0.5; });
  significance(r, 0.05);
  EXPECT_EQ(find(r.significance.front(), "M_I").status, "inconclusive");
  EXPECT_THROW(significance(r, 0.0), DomainError);
}

TEST(Significance, KlUsesUniformReference) {
  auto r = fake_report(10, [](const std::string& v, int s) { return (v == "M_F" ? 0.8 : 0.5) + 0.001 * s; });
  significance(r, 0.05);
  const auto& kl = r.significance.back();
  EXPECT_EQ(kl.metric, "kl");
  EXPECT_FALSE(kl.higher_is_better);
  EXPECT_EQ(kl.best, "M_F");
  EXPECT_EQ(find(kl, "uniform").status, "worse");
  EXPECT_NEAR(find(kl, "uniform").mean_score, 2.0, 1e-12);
}

TEST(Reports, FilesAndReload) {
  const auto& ds = small_dataset();
  auto r = run_grid(ds, quick_config());
  significance(r, 0.05);
  const auto dir = fs::temp_directory_path() / "betacons_reports";
  fs::remove_all(dir);
  write_reports(r, dir / "a");
  for (const char* f : {"moments_ccc.csv", "descriptors_ccc.csv", "kl.csv", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  const auto moments = csv::read_file((dir / "a" / "moments_ccc.csv").string());
  EXPECT_EQ(moments.rows().size(), r.cells.size());

  auto back = report_from_json(nlohmann::json::parse(cells_json(r).dump()), ds.subjects());
  significance(back, 0.05);
  write_reports(back, dir / "b");
  EXPECT_EQ(slurp_dir(dir / "a"), slurp_dir(dir / "b"));
}

TEST(Density, GridAndIntegration) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const BetaParams a{std::exp(rng.uniform(0.0, std::log(200.0))), std::exp(rng.uniform(0.0, std::log(200.0)))};
    const BetaParams b{std::exp(rng.uniform(0.0, std::log(200.0))), std::exp(rng.uniform(0.0, std::log(200.0)))};
    const auto xs = density_grid(a, b);
    ASSERT_EQ(xs.size(), 512U);
    for (std::size_t j = 1; j < xs.size(); ++j) ASSERT_GT(xs[j], xs[j - 1]);
    for (const auto& p : {a, b}) {
      double area = 0.0;
      for (std::size_t j = 1; j < xs.size(); ++j) {
        area += 0.5 * (xs[j] - xs[j - 1]) * (beta_pdf(p, xs[j]) + beta_pdf(p, xs[j - 1]));
      }
      EXPECT_NEAR(area, 1.0, 1e-3) << p.alpha() << "," << p.beta();
    }
  }
}

TEST(Density, CsvColumns) {
  std::stringstream same;
  write_density_csv(same, {6.0, 14.0}, {6.0, 14.0});
  const auto t = csv::read(same, "mem");
  ASSERT_EQ(t.rows().size(), 512U);
  for (const auto& row : t.rows()) EXPECT_EQ(t.field(row, 1), t.field(row, 2));

  std::stringstream uni;
  write_density_csv(uni, BetaParams::uniform(), {2.0, 5.0});
  const auto u = csv::read(uni, "mem");
  for (const auto& row : u.rows()) EXPECT_DOUBLE_EQ(u.number(row, 1), 1.0);
}

TEST(Density, EmitFromGrid) {
  const auto& ds = small_dataset();
  auto cfg = quick_config();
  const auto r = run_grid(ds, cfg);
  const auto dir = fs::temp_directory_path() / "betacons_density";
  fs::remove_all(dir);
  const auto& s = ds.samples[ds.samples.size() / 2];
  const auto files = emit_density_data(r, ds, {{s.subject_id, s.window_index}}, dir);
  ASSERT_EQ(files.size(), 1U);
  EXPECT_TRUE(fs::exists(files.front()));
  EXPECT_NE(files.front().filename().string().find("M_F_fusion_" + s.subject_id), std::string::npos);
  EXPECT_THROW(emit_density_data(r, ds, {{"nobody", 0}}, dir), DomainError);
  EXPECT_THROW(emit_density_data(r, ds, {{s.subject_id, s.window_index}}, dir, "M_I"), DomainError);
}

TEST(Density, WindowRefParsing) {
  const auto w = parse_window_ref("S003:17");
  EXPECT_EQ(w.subject_id, "S003");
  EXPECT_EQ(w.window_index, 17);
  EXPECT_THROW(parse_window_ref("S003"), DomainError);
  EXPECT_THROW(parse_window_ref("S003:x"), DomainError);
  EXPECT_THROW(parse_window_ref(":3"), DomainError);
}
