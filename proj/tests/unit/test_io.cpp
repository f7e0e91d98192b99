#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "rattn/checkpoint.hpp"
#include "rattn/config.hpp"
#include "rattn/metrics.hpp"
#include "test_support.hpp"

namespace rattn {
namespace {

namespace fs = std::filesystem;
using test::TempDir;

std::vector<char> read_bytes(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------- CIFAR-100

TEST(Cifar, RecordLayoutArithmetic) {
  EXPECT_EQ(Cifar100Dataset::kRecordBytes, 3074u);
  EXPECT_EQ(expected_records(Split::Train) * Cifar100Dataset::kRecordBytes, 153700000u);
  EXPECT_EQ(expected_records(Split::Test), 10000u);
}

TEST(Cifar, FileRoundTripIsByteExact) {
  TempDir dir("cifar");
  const auto d = test::toy_dataset(25, 100, 1);
  write_cifar100_file(dir / "x.bin", d);
  const auto bytes = read_bytes(dir / "x.bin");
  ASSERT_EQ(bytes.size(), 25 * 3074u);
  const auto back = parse_cifar100_file(dir / "x.bin", 25);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.fine, d.fine);
  EXPECT_EQ(back.coarse, d.coarse);
  const auto rec = serialize_record(back, 0);
  EXPECT_TRUE(std::equal(rec.begin(), rec.end(), reinterpret_cast<const std::uint8_t*>(bytes.data())));
  EXPECT_EQ(rec[0], d.coarse[0]);
  EXPECT_EQ(rec[1], d.fine[0]);
  EXPECT_EQ(rec[2], d.image(0)[0]);      // first red pixel
  EXPECT_EQ(rec[2 + 1024], d.image(0)[1024]);  // first green pixel
}

TEST(Cifar, TruncatedFileReportsExpectedAndActualBytes) {
  TempDir dir("cifar");
  write_cifar100_file(dir / "x.bin", test::toy_dataset(10, 100, 2));
  fs::resize_file(dir / "x.bin", 10 * 3074 - 5);
  try {
    parse_cifar100_file(dir / "x.bin", 10);
    FAIL() << "no error";
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("30740"), std::string::npos) << msg;
    EXPECT_NE(msg.find("30735"), std::string::npos) << msg;
  }
}

TEST(Cifar, MissingFileAndBadLabelsAreIngestionErrors) {
  TempDir dir("cifar");
  EXPECT_THROW(load_cifar100(dir.path(), Split::Test), IngestionError);
  auto d = test::toy_dataset(3, 100, 3);
  d.fine[1] = 100;
  write_cifar100_file(dir / "bad.bin", d);
  EXPECT_THROW(parse_cifar100_file(dir / "bad.bin", 3), IngestionError);
}

TEST(Cifar, LocatesTheExtractedSubdirectory) {
  TempDir dir("cifar");
  fs::create_directories(dir / "cifar-100-binary");
  std::ofstream(dir / "cifar-100-binary" / "test.bin").put('x');
  EXPECT_EQ(locate_split(dir.path(), Split::Test), dir / "cifar-100-binary" / "test.bin");
}

TEST(Cifar, ChannelMeansAreCachedBesideTheData) {
  TempDir dir("cifar");
  const auto d = test::toy_dataset(20, 100, 4);
  write_cifar100_file(dir / "train.bin", d);
  const auto m1 = cached_channel_means(dir.path(), d);
  EXPECT_TRUE(fs::exists(dir / "channel_means.json"));
  EXPECT_EQ(m1, compute_channel_means(d));
  // A second call reads the cache; the values survive a round trip exactly.
  EXPECT_EQ(cached_channel_means(dir.path(), d), m1);
}

TEST(Cifar, SubsetIsSeededSortedAndDistinct) {
  const auto d = test::toy_dataset(200, 100, 5);
  const auto a = subset(d, 50, 9), b = subset(d, 50, 9), c = subset(d, 50, 10);
  EXPECT_EQ(a.size(), 50u);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_EQ(subset(d, 0, 1).size(), 200u);
  EXPECT_EQ(subset(d, 500, 1).size(), 200u);
}

// ---------------------------------------------------------------- metrics CSV

TEST(MetricsCsv, RoundTripIsExact) {
  TempDir dir("metrics");
  TrainingHistory h;
  h.epochs.push_back({1, 4.605170185988091, 99.0, 98.5, 0.1, 12.25});
  h.epochs.push_back({2, 1.0 / 3.0, 12.5, 20.0, 0.02, 0.0});
  write_metrics_csv(dir / "m.csv", h);
  EXPECT_EQ(read_metrics_csv(dir / "m.csv"), h);
  append_metrics_row(dir / "m.csv", {3, 0.25, 1.0, 2.0, 0.004, 1.0});
  EXPECT_EQ(read_metrics_csv(dir / "m.csv").epochs.size(), 3u);
  std::ifstream in(dir / "m.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kMetricsHeader);
}

TEST(MetricsCsv, MalformedRowsAreRejected) {
  EXPECT_THROW(parse_metrics_row("1,2,3"), InvalidInput);
  EXPECT_THROW(parse_metrics_row("1,x,3,4,5,6"), InvalidInput);
}

// ---------------------------------------------------------------- config

TEST(Config, EmptyFileGivesDefaults) {
  const auto cfg = parse_config("{}");
  EXPECT_EQ(cfg.model, ModelSpec::make(34, ModelMode::SeR));
  EXPECT_EQ(cfg.train.loss.aux, (std::vector<double>{0.3, 0.3}));
  EXPECT_EQ(cfg.train.epochs, 200u);
  EXPECT_EQ(cfg, RunConfig::defaults());
}

TEST(Config, ReferenceSeR50Defaults) {
  const auto cfg = parse_config(R"({"model": {"variant": 50, "mode": "se_r"}, "loss": {"w1": 0.3, "w2": 0.3}})");
  EXPECT_EQ(cfg.model.reduction_ratio, 8u);
  EXPECT_DOUBLE_EQ(cfg.model.aux_dropout, 0.7);
  EXPECT_EQ(cfg.model.aux_positions, (std::vector<int>{2, 3}));
  EXPECT_EQ(cfg.train.loss.aux, (std::vector<double>{0.3, 0.3}));
}

TEST(Config, EveryAblationKnobIsReachable) {
  const auto cfg = parse_config(R"({
    "model": {"variant": 101, "mode": "se_r", "reduction_ratio": 16, "aux_dropout": 0.5,
              "aux_positions": [3], "routing": {"3": [4]}},
    "loss": {"w1": 0.4}, "seed": 5})");
  EXPECT_EQ(cfg.model.reduction_ratio, 16u);
  EXPECT_EQ(cfg.model.aux_positions, (std::vector<int>{3}));
  EXPECT_EQ(cfg.model.sources_for(4), (std::vector<int>{3}));
  EXPECT_EQ(cfg.train.seed, 5u);
}

TEST(Config, CustomPositionsRouteToTheNextStage) {
  const auto cfg = parse_config(R"({"model": {"mode": "se_r", "aux_positions": [1]}, "loss": {"w1": 0.3}})");
  EXPECT_EQ(cfg.model.sources_for(2), (std::vector<int>{1}));
}

void expect_config_error(const std::string& text, const std::string& key) {
  try {
    parse_config(text);
    FAIL() << "accepted: " << text;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
  }
}

TEST(Config, ErrorsNameTheKey) {
  expect_config_error(R"({"model": {"mode": "se_r", "aux_positions": [2]}, "loss": {"w1": 0.3, "w2": 0.3}})",
                      "loss.w2");
  expect_config_error(R"({"model": {"colour": 1}})", "model.colour");
  expect_config_error(R"({"train": {"augment": {"spin": true}}})", "train.augment.spin");
  expect_config_error(R"({"model": {"mode": "se_x"}})", "model.mode");
  expect_config_error(R"({"model": {"reduction_ratio": -4}})", "model.reduction_ratio");
  expect_config_error(R"({"model": {"mode": "se_a", "routing": {"2": [3]}}})", "model.routing");
  expect_config_error(R"({"train": {"momentum": 1.5}})", "train.momentum");
  expect_config_error(R"({"loss": {"w2": 0.3}})", "loss.w1");
  expect_config_error("{not json", "JSON");
}

TEST(Config, SerializeParseIsIdentity) {
  const std::vector<std::string> texts{
      "{}",
      R"({"model": {"variant": 50, "mode": "se_a", "aux_dropout": 0.9}, "loss": {"w1": 0.1, "w2": 0.2},
          "train": {"epochs": 7, "decay_epochs": [3, 5], "augment": {"rotate": false}},
          "data": {"root": "/d", "subset": 10}, "output": {"dir": "o"}, "seed": 3})",
      R"({"model": {"variant": 101, "mode": "se"}})"};
  for (const auto& t : texts) {
    const auto cfg = parse_config(t);
    EXPECT_EQ(parse_config(serialize_config(cfg)), cfg) << t;
  }
}

TEST(Config, ShippedExperimentConfigsParse) {
  const fs::path dir = fs::path(RATTN_SOURCE_DIR) / "configs";
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
    ++n;
  }
  EXPECT_GT(n, 20u);
}

// ---------------------------------------------------------------- checkpoint

ModelSpec tiny_spec() {
  ModelSpec s = ModelSpec::make(34, ModelMode::SeR, 2, 10);
  s.width = 2;
  return s;
}

TEST(Checkpoint, ModelRoundTripRestoresOutputs) {
  TempDir dir("ckpt");
  Model<float> a(tiny_spec(), 1);
  const auto x = test::random_tensor<float>({2, 32, 32, 3}, 2);
  a.forward(x, Pass::train(3));  // moves the batch-norm running statistics
  Checkpoint ck;
  ck.spec = a.spec();
  ck.epoch = 4;
  ck.rng = Rng(5).state();
  ck.means = ChannelMeans{{0.1, 0.2, 0.3}};
  store_model(a, ck);
  write_checkpoint(dir / "m.ckpt", ck);

  const auto back = read_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.spec, a.spec());
  EXPECT_EQ(back.epoch, 4u);
  EXPECT_EQ(back.rng, ck.rng);
  EXPECT_EQ(back.means, ck.means);
  Model<float> b = load_model(dir / "m.ckpt");
  EXPECT_TRUE(test::bitwise_equal(a.forward(x, Pass::eval()).main_logits, b.forward(x, Pass::eval()).main_logits));
}

TEST(Checkpoint, DamagedFilesAreIoErrors) {
  TempDir dir("ckpt");
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IoError);
  std::ofstream(dir / "bad.ckpt") << "NOTACKPT-------";
  EXPECT_THROW(read_checkpoint(dir / "bad.ckpt"), IoError);

  Model<float> a(tiny_spec(), 1);
  Checkpoint ck;
  ck.spec = a.spec();
  store_model(a, ck);
  write_checkpoint(dir / "m.ckpt", ck);
  fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") - 100);
  EXPECT_THROW(read_checkpoint(dir / "m.ckpt"), IoError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  Model<float> a(tiny_spec(), 1);
  Checkpoint ck;
  ck.spec = a.spec();
  store_model(a, ck);
  auto other = tiny_spec();
  other.width = 4;
  Model<float> b(other, 1);
  EXPECT_THROW(restore_model(ck, b), IoError);
}

}  // namespace

// Needs the official files; RATTN_REAL_CIFAR100 names their directory.
TEST(ChannelMeansReal, MatchStoredConstants) {
  const char* root = std::getenv("RATTN_REAL_CIFAR100");
  if (root == nullptr || *root == '\0') GTEST_SKIP() << "RATTN_REAL_CIFAR100 not set";
  const auto means = compute_channel_means(load_cifar100(root, Split::Train));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(means.rgb[c], kCifar100Means[c], 1e-3) << c;
}

}  // namespace rattn
