#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Invocation {
  int exit_code = -1;
  std::string output;  // stdout and stderr
};

Invocation invoke(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "mfuse_cli_test_output.txt";
  const std::string cmd = std::string("\"") + MFUSE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Invocation r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  r.output = os.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mfuse_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static nlohmann::json tiny() {
    return nlohmann::json::parse(R"({
      "data": {"n_classes": 4, "train_per_class": 10, "val_per_class": 3, "test_per_class": 4,
               "image_size": 24, "seq_len": 8, "seed": 5},
      "model": {"image": {"widths": [4, 6, 8], "feature_dim": 6}, "text": {"widths": [8, 8]}},
      "train": {"regime": "EAML_TrKLD", "batch_size": 8, "initial_lr": 0.02, "max_epochs": 2, "seed": 1}
    })");
  }

  static nlohmann::json tiny_inter() {
    nlohmann::json j = tiny();
    j["data"].erase("n_classes");
    j["data"]["class_names"] = "rvl_cdip";
    j["data"]["train_per_class"] = 3;
    j["data"]["val_per_class"] = 1;
    j["data"]["test_per_class"] = 1;
    j["evaluation"] = {{"mode", "inter"},
                       {"mapping", std::string(MFUSE_SOURCE_DIR) + "/data/tobacco_to_rvl.csv"},
                       {"source_classes", "tobacco3482"},
                       {"per_class", 2},
                       {"seed", 3}};
    return j;
  }

  fs::path write_config(const std::string& name, const nlohmann::json& j) const {
    const fs::path p = dir_ / (name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, ValidateAcceptsGoodConfig) {
  const auto r = invoke("validate \"" + write_config("good", tiny()).string() + "\"");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.output, "OK\n");
}

TEST_F(CliTest, ValidateAcceptsShippedConfigs) {
  for (const auto& e : fs::directory_iterator(fs::path(MFUSE_SOURCE_DIR) / "configs")) {
    const auto r = invoke("validate \"" + e.path().string() + "\"");
    EXPECT_EQ(r.exit_code, 0) << e.path() << ": " << r.output;
  }
}

TEST_F(CliTest, BadWeightNamesItsKey) {
  nlohmann::json j = tiny();
  j["train"]["weights"] = {1.2, 0.0, 0.0};
  const auto r = invoke("validate \"" + write_config("weights", j).string() + "\"");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("train.weights"), std::string::npos) << r.output;
}

TEST_F(CliTest, UnknownKeyNamesItsPath) {
  nlohmann::json j = tiny();
  j["train"]["learning_rate"] = 0.1;
  const auto r = invoke("validate \"" + write_config("unknown", j).string() + "\"");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("train.learning_rate"), std::string::npos) << r.output;
}

TEST_F(CliTest, MissingMappingFileNamesThePath) {
  nlohmann::json j = tiny_inter();
  j["evaluation"]["mapping"] = "no_such_mapping.csv";
  const auto r = invoke("validate \"" + write_config("mapping", j).string() + "\"");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("evaluation.mapping"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("no_such_mapping.csv"), std::string::npos) << r.output;
}

TEST_F(CliTest, UsageErrorsExitWithTwo) {
  EXPECT_EQ(invoke("run").exit_code, 2);
  EXPECT_EQ(invoke("bogus").exit_code, 2);
  const auto cfg = write_config("usage", tiny()).string();
  const auto r = invoke("run \"" + cfg + "\" --regime NOPE --quiet");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("NOPE"), std::string::npos);
  EXPECT_EQ(invoke("help").exit_code, 2);
  EXPECT_EQ(invoke("--help").exit_code, 0);
}

TEST_F(CliTest, RunIsByteDeterministic) {
  const auto cfg = write_config("det", tiny()).string();
  for (const char* out : {"a", "b"})
    ASSERT_EQ(invoke("run \"" + cfg + "\" --quiet --out \"" + (dir_ / out).string() + "\"").exit_code, 0);
  for (const char* f : {"train_log.jsonl", "model.ckpt", "reports.json", "per_class_table.csv", "summary.csv",
                        "pr_curves_fusion.csv", "confusion_image.csv"}) {
    const std::string a = slurp(dir_ / "a" / f), b = slurp(dir_ / "b" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, b) << f;
  }
  EXPECT_TRUE(fs::exists(dir_ / "a" / "provenance.json"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "plots" / "confusion_fusion.svg"));
}

TEST_F(CliTest, SeedOverrideChangesTheRun) {
  const auto cfg = write_config("seed", tiny()).string();
  ASSERT_EQ(invoke("run \"" + cfg + "\" --quiet --out \"" + (dir_ / "a").string() + "\"").exit_code, 0);
  ASSERT_EQ(invoke("run \"" + cfg + "\" --quiet --seed 2 --out \"" + (dir_ / "b").string() + "\"").exit_code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "b" / "model.ckpt"));
  const auto prov = nlohmann::json::parse(slurp(dir_ / "b" / "provenance.json"));
  EXPECT_EQ(prov["seeds"], nlohmann::json::array({2}));
}

TEST_F(CliTest, OutRootEnvironmentVariable) {
  const auto cfg = write_config("envcfg", tiny()).string();
  const fs::path root = dir_ / "root";
  const std::string cmd = "MFUSE_OUT_ROOT=\"" + root.string() + "\" \"" + MFUSE_CLI_PATH + "\" run \"" + cfg +
                          "\" --quiet > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(root / "envcfg" / "reports.json"));
}

TEST_F(CliTest, InterModeReportsMappedClasses) {
  const auto cfg = write_config("inter", tiny_inter()).string();
  const fs::path out = dir_ / "out";
  const auto r = invoke("run \"" + cfg + "\" --quiet --out \"" + out.string() + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto reports = nlohmann::json::parse(slurp(out / "reports.json"));
  ASSERT_EQ(reports.size(), 3u);
  for (const auto& rep : reports) {
    EXPECT_EQ(rep["classes"].size(), 9u);
    EXPECT_EQ(rep["n_samples"], 18);  // 9 mapped source classes x 2, Note dropped
    ASSERT_EQ(rep["notes"].size(), 1u);
    EXPECT_EQ(rep["notes"][0].get<std::string>().rfind("inter-dataset: ", 0), 0u);
  }
  const std::string table = slurp(out / "per_class_table.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 10);
}

TEST_F(CliTest, CompareTableShape) {
  nlohmann::json j = tiny();
  j["train"]["max_epochs"] = 1;
  j["compare"] = {{"regimes", {"IL", "EAML_TrKLD"}}, {"seeds", {0, 1}}};
  const auto cfg = write_config("cmp", j).string();
  const fs::path out = dir_ / "out";
  const auto r = invoke("compare \"" + cfg + "\" --quiet --out \"" + out.string() + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::istringstream table(slurp(out / "compare_table.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(table, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0],
            "regime,image_accuracy,image_recall,image_precision,text_accuracy,text_recall,text_precision,"
            "fusion_accuracy,fusion_recall,fusion_precision");
  EXPECT_EQ(lines[1].rfind("IL,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("EAML_TrKLD,", 0), 0u);
  for (std::size_t i = 1; i < 3; ++i) EXPECT_EQ(std::count(lines[i].begin(), lines[i].end(), ','), 9);
  const std::string long_csv = slurp(out / "compare_long.csv");
  EXPECT_EQ(std::count(long_csv.begin(), long_csv.end(), '\n'), 1 + 2 * 2 * 3);
  EXPECT_TRUE(fs::exists(out / "compare_table_weighted.csv"));
  EXPECT_TRUE(fs::exists(out / "runs" / "IL_seed1" / "train_log.jsonl"));
}

TEST_F(CliTest, CompareSingleSeedHasZeroSpread) {
  nlohmann::json j = tiny();
  j["train"]["max_epochs"] = 1;
  const auto cfg = write_config("single", j).string();
  const fs::path out = dir_ / "out";
  const auto r =
      invoke("compare \"" + cfg + "\" --quiet --seed 4 --regime IL --regime ML_KLD --out \"" + out.string() + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const std::string table = slurp(out / "compare_table.csv");
  std::size_t cells = 0;
  for (std::size_t at = table.find("\xC2\xB1 0.00"); at != std::string::npos; at = table.find("\xC2\xB1 0.00", at + 1))
    ++cells;
  EXPECT_EQ(cells, 2u * 9u);
}

TEST_F(CliTest, CompareNeedsTwoRegimes) {
  const auto cfg = write_config("one", tiny()).string();
  const auto r = invoke("compare \"" + cfg + "\" --quiet --regime IL --out \"" + (dir_ / "o").string() + "\"");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("at least two regimes"), std::string::npos);
}

TEST_F(CliTest, DivergenceExitsWithThree) {
  nlohmann::json j = tiny();
  j["train"]["initial_lr"] = 1e300;
  const auto r = invoke("run \"" + write_config("diverge", j).string() + "\" --quiet --out \"" +
                        (dir_ / "o").string() + "\"");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("training diverged"), std::string::npos) << r.output;
}
