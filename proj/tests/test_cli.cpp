#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "betacons/csv.hpp"
#include "betacons/io.hpp"
#include "json.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using betacons::csv::read_file;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / "betacons_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = "cd " + work_dir().string() + " && " + env + " " + BETACONS_CLI + " " + args +
                          " >> cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path out(const std::string& rel) { return work_dir() / "betacons_out" / rel; }

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream o(p);
  o << s;
}

std::string synth_small(const std::string& name) {
  EXPECT_EQ(run("synth --subjects 6 --duration 40 --feature-dim 3 -o " + name), 0);
  return out(name).string();
}

void constant_annotations(const fs::path& p, const std::vector<double>& values) {
  std::string s = "subject_id,annotator_id,timestamp,value\n";
  for (std::size_t a = 0; a < values.size(); ++a) {
    for (int i = 0; i <= 250; ++i) {
      s += "S,A" + std::to_string(a) + "," + std::to_string(i * 0.04) + "," + std::to_string(values[a]) + "\n";
    }
  }
  write_text(p, s);
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("synth --no-such-flag"), 1);
  EXPECT_EQ(run("synth --subjects many"), 1);
  EXPECT_EQ(run("build"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, SynthRowCountsAndDeterminism) {
  const auto a = synth_small("s1");
  const auto b = synth_small("s2");
  for (const char* f : {"features.csv", "annotations.csv", "ground_truth.csv"}) {
    EXPECT_EQ(betacons::io::slurp(fs::path(a) / f), betacons::io::slurp(fs::path(b) / f)) << f;
  }
  // 40 s at 25 fps -> 1000 frames per subject; 2 modalities; 6 annotators.
  EXPECT_EQ(read_file(a + "/features.csv").rows().size(), 6U * 2U * 1000U);
  EXPECT_EQ(read_file(a + "/annotations.csv").rows().size(), 6U * 6U * 1000U);
  EXPECT_EQ(read_file(a + "/ground_truth.csv").rows().size(), 6U * oracle::count_windows(0.0, 39.96, 3.0, 0.4));
  EXPECT_TRUE(fs::exists(fs::path(a) / "run_manifest.json"));
  EXPECT_FALSE(fs::exists(fs::path(a) / "features.csv.tmp"));
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto root = work_dir() / "envroot";
  EXPECT_EQ(run("synth --subjects 2 --duration 10 -o e", "BETACONS_OUTPUT_ROOT=" + root.string()), 0);
  EXPECT_TRUE(fs::exists(root / "e" / "features.csv"));
  const auto flag_root = work_dir() / "flagroot";
  EXPECT_EQ(run("--output-root " + flag_root.string() + " synth --subjects 2 --duration 10 -o e",
                "BETACONS_OUTPUT_ROOT=" + root.string()),
            0);
  EXPECT_TRUE(fs::exists(flag_root / "e" / "features.csv"));
}

TEST(Cli, ConfigFileAndPrecedence) {
  write_text(work_dir() / "cfg.json", R"({"synth": {"subjects": 3, "duration": 12, "seed": 5}})");
  EXPECT_EQ(run("-c cfg.json synth --subjects 2 -o c"), 0);
  const auto m = nlohmann::json::parse(betacons::io::slurp(out("c/run_manifest.json")));
  EXPECT_EQ(m["resolved"]["subjects"], 2);
  EXPECT_EQ(m["resolved"]["duration"], 12);
  EXPECT_EQ(m["master_seed"], 5);
  write_text(work_dir() / "bad.json", R"({"synth": {"subjcts": 3}})");
  EXPECT_EQ(run("-c bad.json synth"), 1);
  write_text(work_dir() / "broken.json", "{");
  EXPECT_EQ(run("-c broken.json synth"), 2);
}

TEST(Cli, BuildCountsAndErrors) {
  const auto s = synth_small("s3");
  EXPECT_EQ(run("build --features " + s + "/features.csv --annotations " + s + "/annotations.csv -o b3"), 0);
  EXPECT_EQ(read_file(out("b3/dataset.csv").string()).rows().size(), 6U * oracle::count_windows(0.0, 39.96, 3.0, 0.4));
  EXPECT_TRUE(fs::exists(out("b3/dataset.manifest.json")));

  write_text(work_dir() / "hdr.csv", "subject_id,annotator,timestamp,value\nS,A,0,0.5\n");
  EXPECT_EQ(run("build --features " + s + "/features.csv --annotations hdr.csv -o bad1"), 2);
  // The manifest is written before any input is read.
  EXPECT_TRUE(fs::exists(out("bad1/run_manifest.json")));
  write_text(work_dir() / "empty.csv", "");
  EXPECT_EQ(run("build --features " + s + "/features.csv --annotations empty.csv -o bad2"), 2);
  EXPECT_EQ(run("build --features missing.csv --annotations empty.csv -o bad3"), 2);
  EXPECT_EQ(run("build --features " + s + "/features.csv --annotations " + s + "/annotations.csv --stride 9 -o bad4"), 2);
}

TEST(Cli, FitExamples) {
  constant_annotations(work_dir() / "pair.csv", {0.4, 0.6});
  EXPECT_EQ(run("fit --annotations pair.csv -o f1"), 0);
  const auto t = read_file(out("f1/beta_fit.csv").string());
  ASSERT_FALSE(t.rows().empty());
  const auto col = [&](const char* name) { return t.column(name); };
  for (const auto& row : t.rows()) {
    EXPECT_NEAR(t.number(row, col("alpha")), 12.0, 1e-9);
    EXPECT_NEAR(t.number(row, col("beta")), 12.0, 1e-9);
    EXPECT_EQ(t.field(row, col("near_degenerate")), "0");
  }

  constant_annotations(work_dir() / "same.csv", {0.3, 0.3, 0.3});
  EXPECT_EQ(run("fit --annotations same.csv -o f2"), 0);
  const auto u = read_file(out("f2/beta_fit.csv").string());
  for (const auto& row : u.rows()) {
    EXPECT_EQ(u.field(row, u.column("near_degenerate")), "1");
    EXPECT_GT(u.number(row, u.column("sigma")), 0.0);
  }

  constant_annotations(work_dir() / "spread.csv", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
  EXPECT_EQ(run("fit --annotations spread.csv -o f3"), 0);
  const auto v = read_file(out("f3/beta_fit.csv").string());
  for (const auto& row : v.rows()) EXPECT_NEAR(v.number(row, v.column("skew")), 0.0, 1e-9);
}

TEST(Cli, RunOracleReportsPerfectAgreement) {
  const auto s = synth_small("s4");
  ASSERT_EQ(run("build --features " + s + "/features.csv --annotations " + s + "/annotations.csv -o b4"), 0);
  const std::string ds = out("b4/dataset.csv").string();
  EXPECT_EQ(run("run --dataset " + ds + " --oracle --folds 3 --seeds 2 --variants M_F --baselines median -o r4"), 0);
  const auto t = read_file(out("r4/moments_ccc.csv").string());
  ASSERT_FALSE(t.rows().empty());
  for (const auto& row : t.rows()) {
    EXPECT_EQ(t.field(row, t.column("variant")), "M_F");
    EXPECT_NEAR(t.number(row, t.column("ccc")), 1.0, 1e-12);
  }
  EXPECT_EQ(t.rows().size(), 3U * 3U * 2U * 2U);
  for (const char* f : {"descriptors_ccc.csv", "kl.csv", "summary.json", "cells.json", "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(out("r4") / f)) << f;
  }
  EXPECT_FALSE(fs::is_empty(out("r4/density")));
  EXPECT_EQ(run("run --dataset " + ds + " --oracle --constant -o r5"), 1);
  EXPECT_EQ(run("run --dataset " + ds + " --folds 2 -o r6"), 2);
}

TEST(Cli, RerunFromManifestIsIdentical) {
  const auto s = synth_small("s5");
  ASSERT_EQ(run("build --features " + s + "/features.csv --annotations " + s + "/annotations.csv -o b5"), 0);
  const std::string ds = out("b5/dataset.csv").string();
  ASSERT_EQ(run("run --dataset " + ds + " --folds 3 --seeds 2 --epochs 3 --variants M_F,M_S --baselines median -o r7"), 0);
  ASSERT_EQ(run("-c " + out("r7/run_manifest.json").string() + " run -o r8"), 0);
  for (const char* f : {"moments_ccc.csv", "descriptors_ccc.csv", "kl.csv", "summary.json", "cells.json"}) {
    EXPECT_EQ(betacons::io::slurp(out("r7") / f), betacons::io::slurp(out("r8") / f)) << f;
  }
  ASSERT_EQ(run("report --run " + out("r7").string() + " -o rep7"), 0);
  for (const char* f : {"moments_ccc.csv", "descriptors_ccc.csv", "kl.csv", "summary.json"}) {
    EXPECT_EQ(betacons::io::slurp(out("r7") / f), betacons::io::slurp(out("rep7") / f)) << f;
  }
}

TEST(Cli, TrainingFailureExitCode) {
  const auto s = synth_small("s6");
  ASSERT_EQ(run("build --features " + s + "/features.csv --annotations " + s + "/annotations.csv -o b6"), 0);
  EXPECT_EQ(run("run --dataset " + out("b6/dataset.csv").string() +
                " --folds 3 --seeds 1 --epochs 2 --lr 1e300 --variants M_F --baselines median -o r9"),
            3);
  EXPECT_TRUE(fs::exists(out("r9/cells.json")));
}

TEST(Cli, UnwritableOutput) {
  EXPECT_EQ(run("--output-root /proc/betacons synth --subjects 2 --duration 10 -o x"), 2);
  EXPECT_FALSE(fs::exists("/proc/betacons"));
}
