// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "ssm/cli.hpp"

namespace ssm::cli {
namespace {

namespace fs = std::filesystem;

constexpr const char* kTinyConfig = R"({
  "schedule": {"epochs": 2, "batch_dfer": 6, "batch_au": 16},
  "world": {"au_samples": 96, "fe_samples": 48, "frames": 4}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("ssm_cli_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    config_ = (root_ / "tiny.json").string();
    io::write_file_atomic(config_, kTinyConfig);
    unsetenv("SSM_SEED");
  }
  void TearDown() override { unsetenv("SSM_SEED"); }

  int call(std::vector<std::string> args) {
    args.insert(args.begin(), "ssm_cli");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  nlohmann::json manifest(const std::string& dir) const {
    return nlohmann::json::parse(io::read_file(root_ / dir / "manifest.json"));
  }

  fs::path root_;
  std::string config_;
  std::ostringstream out_, err_;
};

TEST_F(Cli, GenDataWritesDatasetAndManifest) {
  ASSERT_EQ(call({"gen-data", "--config", config_, "--out", path("w")}), kSuccess) << err_.str();
  const auto m = manifest("w");
  EXPECT_EQ(m.at("subcommand"), "gen-data");
  EXPECT_EQ(m.at("files"), nlohmann::json({"dataset.ssmdata", "config.json"}));
  EXPECT_EQ(m.at("counts").at("expression_train"), 24);
  EXPECT_EQ(m.at("config").at("schedule").at("epochs"), 2);
  EXPECT_EQ(m.at("config").at("lambda"), 2.0);  // defaults are materialized
  EXPECT_EQ(io::read_file(root_ / "w" / "dataset.ssmdata").substr(0, 8), "SSMDATA1");
  EXPECT_FALSE(fs::exists(path("w.partial")));
}

TEST_F(Cli, ExistingRunDirectoryNeedsForce) {
  ASSERT_EQ(call({"gen-data", "-c", config_, "-o", path("w")}), kSuccess);
  EXPECT_EQ(call({"gen-data", "-c", config_, "-o", path("w")}), kValidation);
  EXPECT_NE(err_.str().find("--force"), std::string::npos);
  EXPECT_EQ(call({"gen-data", "-c", config_, "-o", path("w"), "--force"}), kSuccess);
}

TEST_F(Cli, OutputParentsAreCreated) {
  EXPECT_EQ(call({"gen-data", "-c", config_, "-o", path("a/b/c")}), kSuccess) << err_.str();
  EXPECT_TRUE(fs::exists(root_ / "a/b/c/manifest.json"));
}

TEST_F(Cli, MalformedConfigNamesKeyAndLine) {
  io::write_file_atomic(path("bad.json"), "{\n  \"schedule\": {\n    \"epocs\": 3\n  }\n}\n");
  EXPECT_EQ(call({"train", "-c", path("bad.json"), "-o", path("t")}), kValidation);
  EXPECT_NE(err_.str().find("'schedule.epocs' (line 3)"), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(path("t")));
  EXPECT_FALSE(fs::exists(path("t.partial")));
}

TEST_F(Cli, UsageErrorsAreValidationFailures) {
  EXPECT_EQ(call({}), kValidation);
  EXPECT_EQ(call({"train"}), kValidation);  // --out is required
  EXPECT_EQ(call({"ablate", "-c", config_, "-o", path("a"), "--grid", "everything"}), kValidation);
  EXPECT_EQ(call({"train", "-c", path("missing.json"), "-o", path("t")}), kValidation);
  EXPECT_EQ(call({"--help"}), kSuccess);
}

TEST_F(Cli, RuntimeFailuresExitTwoAndLeaveNothingBehind) {
  io::write_file_atomic(path("junk.ckpt"), "not a checkpoint");
  EXPECT_EQ(call({"evaluate", "-c", config_, "-o", path("e"), "--checkpoint", path("junk.ckpt")}), kRuntime);
  EXPECT_FALSE(fs::exists(path("e")));
  EXPECT_FALSE(fs::exists(path("e.partial")));
}

TEST_F(Cli, TrainWritesArtifactsAndEvaluateReproducesMetrics) {
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("t")}), kSuccess) << err_.str();
  const auto m = manifest("t");
  for (const char* f : {"checkpoint.ssmckpt", "metrics/au.json", "metrics/expression.json", "summary.json",
                        "loss_curve.csv", "heatmaps/au_to_exp.csv", "heatmaps/exp_to_au.csv", "config.json"}) {
    EXPECT_TRUE(fs::exists(root_ / "t" / f)) << f;
    EXPECT_NE(std::find(m.at("files").begin(), m.at("files").end(), f), m.at("files").end()) << f;
  }
  // After training the two matrices are no longer transposes of each other.
  EXPECT_GT(m.at("mapping").at("transpose_frobenius_distance").get<double>(), 0.0);

  ASSERT_EQ(call({"evaluate", "-c", config_, "-o", path("e"), "--checkpoint", path("t/checkpoint.ssmckpt")}),
            kSuccess)
      << err_.str();
  EXPECT_EQ(io::read_file(root_ / "e/metrics/au.json"), io::read_file(root_ / "t/metrics/au.json"));
  EXPECT_EQ(io::read_file(root_ / "e/metrics/expression.json"), io::read_file(root_ / "t/metrics/expression.json"));
}

TEST_F(Cli, TrainingFromGeneratedDataMatchesInlineGeneration) {
  ASSERT_EQ(call({"gen-data", "-c", config_, "-o", path("w")}), kSuccess);
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("a")}), kSuccess);
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("b"), "--data", path("w/dataset.ssmdata")}), kSuccess);
  EXPECT_EQ(io::read_file(root_ / "a/checkpoint.ssmckpt"), io::read_file(root_ / "b/checkpoint.ssmckpt"));
}

TEST_F(Cli, RepeatedRunsAreBitwiseIdentical) {
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("a")}), kSuccess);
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("b")}), kSuccess);
  for (const char* f : {"checkpoint.ssmckpt", "metrics/au.json", "metrics/expression.json", "summary.json"}) {
    EXPECT_EQ(io::read_file(root_ / "a" / f), io::read_file(root_ / "b" / f)) << f;
  }
}

TEST_F(Cli, SeedOverridePrecedence) {
  setenv("SSM_SEED", "9", 1);
  ASSERT_EQ(call({"gen-data", "-c", config_, "-o", path("env")}), kSuccess);
  EXPECT_EQ(manifest("env").at("config").at("seed"), 9);
  ASSERT_EQ(call({"gen-data", "-c", config_, "-o", path("flag"), "--seed", "4"}), kSuccess);
  EXPECT_EQ(manifest("flag").at("config").at("seed"), 4);
  setenv("SSM_SEED", "nine", 1);
  EXPECT_EQ(call({"gen-data", "-c", config_, "-o", path("bad")}), kValidation);
}

TEST_F(Cli, GradCheckPassesAndNamesWorstParameter) {
  ASSERT_EQ(call({"grad-check", "-c", config_, "--coordinates", "4"}), kSuccess) << out_.str();
  EXPECT_NE(out_.str().find("worst parameter: "), std::string::npos);
  EXPECT_NE(out_.str().find("dpm.w_au_to_exp"), std::string::npos);
  EXPECT_NE(out_.str().find("encoder.moe.gamma"), std::string::npos);
}

TEST_F(Cli, AblateComponentGridEmitsFourConfigurationsPerTask) {
  ASSERT_EQ(call({"ablate", "-c", config_, "-o", path("a"), "--grid", "component", "--seeds", "2"}), kSuccess)
      << err_.str();
  const auto table = nlohmann::json::parse(io::read_file(root_ / "a/ablation_component.json"));
  ASSERT_EQ(table.at("rows").size(), 8u);
  EXPECT_EQ(table.at("rows")[0].at("seeds"), nlohmann::json({1, 2}));
  EXPECT_EQ(manifest("a").at("seeds"), nlohmann::json({1, 2}));
}

TEST_F(Cli, SeedListIsExtendedWhenMoreSeedsAreRequested) {
  trainer::ExperimentConfig c;
  c.seeds = {3, 8};
  EXPECT_EQ(ablation_seeds(c, 0), (std::vector<std::uint64_t>{3, 8}));
  EXPECT_EQ(ablation_seeds(c, 1), (std::vector<std::uint64_t>{3}));
  EXPECT_EQ(ablation_seeds(c, 4), (std::vector<std::uint64_t>{3, 8, 9, 10}));
}

TEST_F(Cli, ExportedInitialHeatmapShowsPriorMixing) {
  ASSERT_EQ(call({"export-mapping", "-c", config_, "-o", path("x")}), kSuccess) << err_.str();
  const LabeledMatrix ae = parse_csv(io::read_file(root_ / "x/au_to_exp.csv"));
  ASSERT_EQ(ae.corner, "expression");
  ASSERT_EQ(ae.rows.front(), "Happiness");
  const auto col = [&](const std::string& au) {
    return static_cast<std::size_t>(std::find(ae.cols.begin(), ae.cols.end(), au) - ae.cols.begin());
  };
  EXPECT_NEAR(ae.values(0, col("AU6")), 0.5, 1e-9);
  EXPECT_NEAR(ae.values(0, col("AU12")), 0.5, 1e-9);
  EXPECT_LE(ae.values(0, col("AU1")), 1e-20);
  EXPECT_EQ(manifest("x").at("view"), "post-softmax");
  EXPECT_EQ(manifest("x").at("transpose_frobenius_distance"), 0.0);

  const LabeledMatrix ea = parse_csv(io::read_file(root_ / "x/exp_to_au.csv"));
  EXPECT_EQ(ea.values.rows(), 12u);
  EXPECT_EQ(ea.values.cols(), 7u);
  EXPECT_EQ(ea.cols.front(), "Happiness");

  ASSERT_EQ(call({"export-mapping", "-c", config_, "-o", path("raw"), "--pre-softmax"}), kSuccess);
  const LabeledMatrix raw = parse_csv(io::read_file(root_ / "raw/au_to_exp.csv"));
  EXPECT_EQ(raw.values(0, col("AU6")), 0.5);
  EXPECT_EQ(raw.values(0, col("AU1")), 0.0);
  EXPECT_EQ(manifest("raw").at("view"), "pre-softmax");
}

TEST_F(Cli, HeatmapCsvRoundTripsWithinTolerance) {
  ASSERT_EQ(call({"train", "-c", config_, "-o", path("t")}), kSuccess);
  trainer::ExperimentConfig c = trainer::parse_config(kTinyConfig);
  trainer::RunState s = trainer::load_checkpoint(c, root_ / "t/checkpoint.ssmckpt");
  const Tensor mixing = s.model->mapping()->au_to_exp_mixing();
  const LabeledMatrix back = parse_csv(io::read_file(root_ / "t/heatmaps/au_to_exp.csv"));
  ASSERT_EQ(back.values.shape(), mixing.shape());
  for (std::size_t i = 0; i < mixing.size(); ++i) EXPECT_NEAR(back.values[i], mixing[i], 1e-9);
  const Tensor ea = s.model->mapping()->exp_to_au_mixing();
  const LabeledMatrix back_ea = parse_csv(io::read_file(root_ / "t/heatmaps/exp_to_au.csv"));
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_NEAR(back_ea.values[i], ea[i], 1e-9);
}

TEST_F(Cli, ExportMappingRejectsVariantsWithoutMatrices) {
  io::write_file_atomic(path("lin.json"), R"({"dpm": {"mode": "linear"}})");
  EXPECT_EQ(call({"export-mapping", "-c", path("lin.json"), "-o", path("x")}), kValidation);
  io::write_file_atomic(path("base.json"), R"({"variant": "baseline"})");
  EXPECT_EQ(call({"export-mapping", "-c", path("base.json"), "-o", path("y")}), kValidation);
}

TEST(CsvFormat, NineSignificantDigits) {
  EXPECT_EQ(format_value(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(format_value(2.5104448e-24), "2.5104448e-24");
  EXPECT_EQ(format_value(0.5), "0.5");
}

#ifdef SSM_CLI_PATH
TEST(CliProcess, ExitCodesFromTheInstalledBinary) {
  const std::string bin = SSM_CLI_PATH;
  EXPECT_EQ(std::system((bin + " --help > /dev/null").c_str()), 0);
  const int bad = std::system((bin + " no-such-command > /dev/null 2>&1").c_str());
  ASSERT_TRUE(WIFEXITED(bad));
  EXPECT_EQ(WEXITSTATUS(bad), kValidation);
}
#endif

}  // namespace
}  // namespace ssm::cli
