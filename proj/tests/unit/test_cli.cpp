#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "rattn/cli.hpp"
#include "rattn/metrics.hpp"
#include "test_support.hpp"

namespace rattn {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

// Full-size split files (the loader insists on the official record counts),
// written once for the whole suite.
class CliWithData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("rattn_cli_data_" + std::to_string(::getpid()));
    fs::create_directories(root_);
    write_cifar100_file(root_ / "train.bin", test::toy_dataset(Cifar100Dataset::kTrainRecords, 100, 1));
    write_cifar100_file(root_ / "test.bin", test::toy_dataset(Cifar100Dataset::kTestRecords, 100, 2));
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path write_tiny_config(const fs::path& dir) {
    const fs::path cfg = dir / "tiny.json";
    std::ofstream(cfg) << R"({
      "model": {"variant": 34, "mode": "se_r", "width": 2},
      "train": {"epochs": 2, "batch_size": 32, "decay_epochs": []},
      "data": {"test_subset": 64},
      "seed": 3
    })";
    return cfg;
  }

  static fs::path root_;
};

fs::path CliWithData::root_;

TEST(Cli, CountPrintsTheSeR34Total) {
  const auto r = run({"count", "--variant", "34", "--mode", "se_r", "--r", "8", "--classes", "100"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("26.145M"), std::string::npos) << r.out;
}

TEST(Cli, CountWritesAccountingCsv) {
  test::TempDir dir("cli");
  const auto r = run({"count", "--variant", "50", "--mode", "se", "--out", dir.path().string()});
  EXPECT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir / "accounting.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "layer,kind,params,macs");
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"train", "--bogus"}).code, 2);
  EXPECT_EQ(run({"count", "--variant", "18"}).code, 2);
  EXPECT_EQ(run({"eval"}).code, 2);  // --checkpoint is required
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, MissingCheckpointExitsOne) {
  const auto r = run({"eval", "--checkpoint", "missing.ckpt", "--data", "/nonexistent"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.ckpt"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("not found"), std::string::npos) << r.err;
}

TEST(Cli, BadConfigExitsOneNamingTheKey) {
  test::TempDir dir("cli");
  std::ofstream(dir / "bad.json") << R"({"model": {"mode": "se_r", "aux_positions": [2]}, "loss": {"w1": 0.3, "w2": 0.3}})";
  const auto r = run({"train", "--config", (dir / "bad.json").string(), "--data", "/nonexistent"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("loss.w2"), std::string::npos) << r.err;
}

TEST(Cli, MissingDataRootExitsOne) {
  const char* saved = std::getenv("RESULT_ATTN_DATA");
  const std::string keep = saved ? saved : "";
  ::unsetenv("RESULT_ATTN_DATA");
  const auto r = run({"train", "--max-epochs", "1"});
  if (saved) ::setenv("RESULT_ATTN_DATA", keep.c_str(), 1);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("RESULT_ATTN_DATA"), std::string::npos) << r.err;
}

TEST_F(CliWithData, TrainEvalAnalyzeAndPlot) {
  test::TempDir dir("cli");
  const auto cfg = write_tiny_config(dir.path());
  const fs::path out = dir / "run";
  ::setenv("RESULT_ATTN_DATA", root_.c_str(), 1);  // exercises the fallback
  const auto t = run({"train", "--config", cfg.string(), "--max-epochs", "1", "--subset", "256", "--out",
                      out.string(), "--deterministic"});
  ::unsetenv("RESULT_ATTN_DATA");
  ASSERT_EQ(t.code, 0) << t.err;
  const auto h = read_metrics_csv(out / "metrics.csv");
  ASSERT_EQ(h.epochs.size(), 1u);
  EXPECT_EQ(h.epochs[0].epoch, 1u);
  for (const char* f : {"checkpoint.ckpt", "config.json", "metrics.svg", "summary.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }

  const auto ckpt = (out / "checkpoint.ckpt").string();
  const auto e = run({"eval", "--checkpoint", ckpt, "--data", root_.string(), "--subset", "100"});
  EXPECT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("accuracy"), std::string::npos);

  const auto a = run({"analyze-attention", "--checkpoint", ckpt, "--data", root_.string(), "--stage", "3",
                      "--batch", "8", "--out", out.string()});
  EXPECT_EQ(a.code, 0) << a.err;
  std::ifstream in(out / "attention_stage3.csv");
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "module,mean_std");
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6u);

  const auto p = run({"plot", (out / "metrics.csv").string(), "--out", (dir / "c.svg").string()});
  EXPECT_EQ(p.code, 0) << p.err;
  EXPECT_TRUE(fs::exists(dir / "c.svg"));

  // Resuming continues after the stored epoch.
  const auto r = run({"train", "--config", cfg.string(), "--data", root_.string(), "--subset", "256", "--out",
                      out.string(), "--checkpoint", ckpt, "--deterministic"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_metrics_csv(out / "metrics.csv").epochs.size(), 2u);
}

TEST_F(CliWithData, SameSeedGivesByteIdenticalMetrics) {
  test::TempDir dir("cli");
  const auto cfg = write_tiny_config(dir.path());
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = dir / ("run" + std::to_string(i));
    const auto t = run({"train", "--config", cfg.string(), "--data", root_.string(), "--max-epochs", "1",
                        "--subset", "96", "--out", out.string(), "--deterministic"});
    ASSERT_EQ(t.code, 0) << t.err;
    std::ifstream in(out / "metrics.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    csv[i] = ss.str();
  }
  EXPECT_EQ(csv[0], csv[1]);
}

}  // namespace
}  // namespace rattn
