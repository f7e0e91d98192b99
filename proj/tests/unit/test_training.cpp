#include <gtest/gtest.h>

#include "rattn/checkpoint.hpp"
#include "rattn/metrics.hpp"
#include "rattn/synthetic.hpp"
#include "rattn/training.hpp"
#include "test_support.hpp"

namespace rattn {
namespace {

using test::random_tensor;

// ---------------------------------------------------------------- schedule

TEST(LrSchedule, StepDecayValuesAreExact) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_at(59, 0, 391, cfg), 0.1);
  EXPECT_EQ(lr_at(60, 0, 391, cfg), 0.02);
  EXPECT_EQ(lr_at(119, 390, 391, cfg), 0.02);
  EXPECT_EQ(lr_at(120, 0, 391, cfg), 0.004);
  EXPECT_EQ(lr_at(160, 0, 391, cfg), 0.0008);
  EXPECT_EQ(lr_at(199, 390, 391, cfg), 0.0008);
}

TEST(LrSchedule, DecayEpochsMustFallInsideTheRun) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.decay_epochs = {2, 5};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.decay_epochs = {3, 2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.decay_epochs = {2, 4};
  EXPECT_NO_THROW(cfg.validate());
}

TEST(LrSchedule, WarmupIsLinearPerStepAndReachesBase) {
  const TrainConfig cfg;
  const std::size_t spe = 391;
  for (std::size_t s = 0; s < spe; ++s) EXPECT_NEAR(lr_at(0, s, spe, cfg), 0.1 * double(s + 1) / spe, 1e-15);
  EXPECT_EQ(lr_at(0, spe - 1, spe, cfg), 0.1);
  EXPECT_EQ(lr_at(1, 0, spe, cfg), 0.1);
  EXPECT_THROW(lr_at(0, spe, spe, cfg), InvalidInput);
}

// ---------------------------------------------------------------- loss

TEST(CombinedLoss, WeightedSum) {
  EXPECT_NEAR(combine_losses(1.0, {2.0, 3.0}, LossWeights{{0.3, 0.2}}), 2.2, 1e-12);
  EXPECT_EQ(combine_losses(1.25, {2.0, 3.0}, LossWeights{{0.0, 0.0}}), 1.25);
  EXPECT_THROW(combine_losses(1.0, {2.0}, LossWeights{{0.3, 0.2}}), InvalidInput);
}

TEST(CombinedLoss, ZeroWeightsEqualMainCrossEntropyExactly) {
  const auto main = random_tensor<double>(vec_shape(4, 7), 1, -3, 3);
  const std::vector<Tensor<double>> aux{random_tensor<double>(vec_shape(4, 7), 2), random_tensor<double>(vec_shape(4, 7), 3)};
  const std::vector<int> y{0, 6, 3, 3};
  Tensor<double> d_main;
  std::vector<Tensor<double>> d_aux;
  const auto l = combined_loss(main, aux, y, LossWeights{{0.0, 0.0}}, &d_main, &d_aux);
  Tensor<double> g;
  EXPECT_EQ(l.total, cross_entropy(main, y, &g));
  EXPECT_TRUE(test::bitwise_equal(d_main, g));
  for (const auto& d : d_aux)
    for (double v : d.values()) EXPECT_EQ(v, 0.0);
}

TEST(CombinedLoss, AuxGradientsAreScaledByTheirWeight) {
  const auto main = random_tensor<double>(vec_shape(3, 5), 4);
  const std::vector<Tensor<double>> aux{random_tensor<double>(vec_shape(3, 5), 5)};
  const std::vector<int> y{1, 2, 3};
  Tensor<double> d_main, g;
  std::vector<Tensor<double>> d_aux;
  const auto l = combined_loss(main, aux, y, LossWeights{{0.4}}, &d_main, &d_aux);
  const double aux_loss = cross_entropy(aux[0], y, &g);
  EXPECT_NEAR(l.total, l.main + 0.4 * aux_loss, 1e-14);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(d_aux[0][i], 0.4 * g[i], 1e-15);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Tensor<double> z(vec_shape(2, 100), 0.0);
  EXPECT_NEAR(cross_entropy(z, {0, 99}), std::log(100.0), 1e-12);
  EXPECT_THROW(cross_entropy(z, {0, 100}), InvalidInput);
}

// ---------------------------------------------------------------- augmentation

std::vector<std::uint8_t> gradient_image() {
  std::vector<std::uint8_t> img(Cifar100Dataset::kImageBytes);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>((i * 7 + i / 1024 * 50) % 256);
  return img;
}

TEST(Augment, IdentityParamsEqualPlainNormalization) {
  const auto img = gradient_image();
  const ChannelMeans means{{0.5, 0.4, 0.3}};
  std::vector<float> a(3072), b(3072);
  apply_augment(img.data(), AugmentParams::identity(4), 4, means, a.data());
  to_unit_hwc(img.data(), b.data());
  normalize(b.data(), 1024, means);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Augment, FlipMirrorsColumns) {
  const auto img = gradient_image();
  const ChannelMeans means{{0.0, 0.0, 0.0}};
  std::vector<float> plain(3072), flipped(3072);
  apply_augment(img.data(), AugmentParams::identity(4), 4, means, plain.data());
  AugmentParams p = AugmentParams::identity(4);
  p.flip = true;
  apply_augment(img.data(), p, 4, means, flipped.data());
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(flipped[(y * 32 + x) * 3 + c], plain[(y * 32 + 31 - x) * 3 + c]);
}

TEST(Augment, CropShiftsAndZeroFills) {
  const auto img = gradient_image();
  const ChannelMeans means{{0.0, 0.0, 0.0}};
  std::vector<float> plain(3072), shifted(3072);
  apply_augment(img.data(), AugmentParams::identity(4), 4, means, plain.data());
  apply_augment(img.data(), AugmentParams{0, 8, false, 0.0}, 4, means, shifted.data());
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = shifted[(y * 32 + x) * 3 + c];
        if (y < 4 || x >= 28) EXPECT_EQ(v, 0.0f);
        else EXPECT_EQ(v, plain[((y - 4) * 32 + x + 4) * 3 + c]);
      }
}

TEST(Augment, MeanImageNormalizesToZero) {
  Cifar100Dataset d;
  std::vector<std::uint8_t> img(3072);
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(img.begin() + c * 1024, 1024, static_cast<std::uint8_t>(60 + 70 * c));
  d.push_back(0, 0, img.data());
  const auto means = compute_channel_means(d);
  std::vector<float> out(3072);
  Rng rng(1);
  AugmentConfig no_geometry;
  no_geometry.crop = no_geometry.flip = no_geometry.rotate = false;
  augment(img.data(), no_geometry, means, rng, out.data());
  for (float v : out) EXPECT_NEAR(v, 0.0f, 1e-7);
}

TEST(Augment, NormalizeWithoutMeansIsAConfigError) {
  std::vector<float> px(3, 0.5f);
  EXPECT_THROW(normalize(px.data(), 1, std::nullopt), ConfigError);
}

TEST(Augment, SameSeedSameOutput) {
  const auto data = test::toy_dataset(1, 4, 9);
  AugmentConfig cfg;
  const ChannelMeans means{{0.5, 0.5, 0.5}};
  std::vector<float> a(3 * 32 * 32), b(a.size());
  Rng r1(17), r2(17);
  for (int i = 0; i < 20; ++i) {
    augment(data.image(0), cfg, means, r1, a.data());
    augment(data.image(0), cfg, means, r2, b.data());
    ASSERT_EQ(a, b) << i;
  }
}

TEST(Augment, SampledParamsStayInRange) {
  AugmentConfig cfg;
  Rng rng(3);
  bool saw_flip = false, saw_plain = false;
  for (int i = 0; i < 2000; ++i) {
    const auto p = sample_augment(cfg, rng);
    EXPECT_LE(p.top, 2 * cfg.pad);
    EXPECT_LE(p.left, 2 * cfg.pad);
    EXPECT_LE(std::abs(p.degrees), cfg.max_degrees);
    (p.flip ? saw_flip : saw_plain) = true;
  }
  EXPECT_TRUE(saw_flip && saw_plain);
}

// ---------------------------------------------------------------- optimizer

TEST(SgdStep, ZeroGradientAndNoDecayLeavesParamsUnchanged) {
  Param<float> p("w", {1, 1, 1, 4});
  p.value = random_tensor<float>(p.value.shape(), 1);
  const auto before = p.value;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Sgd sgd({&p}, cfg);
  for (int i = 0; i < 5; ++i) sgd.step(0.1);
  EXPECT_TRUE(test::bitwise_equal(before, p.value));
}

TEST(SgdStep, NesterovAndPlainUpdatesByHand) {
  for (bool nesterov : {true, false}) {
    Param<float> p("w", {1, 1, 1, 1});
    p.value[0] = 1.0f;
    TrainConfig cfg;
    cfg.nesterov = nesterov;
    cfg.weight_decay = 0.5;
    cfg.momentum = 0.9;
    Sgd sgd({&p}, cfg);
    p.grad[0] = 0.2f;
    sgd.step(0.1);  // g = 0.2 + 0.5 = 0.7, v = 0.7
    const float expect1 = nesterov ? 1.0f - 0.1f * (0.7f + 0.9f * 0.7f) : 1.0f - 0.1f * 0.7f;
    EXPECT_FLOAT_EQ(p.value[0], expect1);
  }
}

TEST(SgdStep, DecayNormFalseExemptsBatchNormParams) {
  Param<float> norm("bn.weight", {1, 1, 1, 1}, true), conv("conv.weight", {1, 1, 1, 1});
  norm.value[0] = conv.value[0] = 1.0f;
  TrainConfig cfg;
  cfg.decay_norm = false;
  cfg.weight_decay = 0.1;
  Sgd sgd({&norm, &conv}, cfg);
  sgd.step(0.5);
  EXPECT_EQ(norm.value[0], 1.0f);
  EXPECT_LT(conv.value[0], 1.0f);
}

// ---------------------------------------------------------------- loop

ModelSpec tiny_spec(ModelMode mode) {
  ModelSpec s = ModelSpec::make(34, mode, 2, 100);
  s.width = 2;
  return s;
}

TrainConfig tiny_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.eval_batch_size = 32;
  cfg.decay_epochs = {};
  cfg.base_lr = 0.05;
  cfg.warmup_epochs = 0;
  cfg.loss = LossWeights{{0.3, 0.3}};
  cfg.seed = 11;
  return cfg;
}

TEST(Evaluate, IndependentOfBatchSize) {
  const auto data = test::toy_dataset(50, 4, 1);
  Model<float> m(tiny_spec(ModelMode::SeR), 2);
  const auto means = compute_channel_means(data);
  EXPECT_EQ(evaluate(m, data, means, 7), evaluate(m, data, means, 256));
}

TEST(Evaluate, ConstantPredictionScoresItsClassShare) {
  const auto data = test::toy_dataset(40, 4, 2);
  Model<float> m(tiny_spec(ModelMode::Se), 3);
  for (auto* p : m.parameters()) {
    if (p->name == "fc.bias") p->value[0] = 1e6f;
  }
  EXPECT_DOUBLE_EQ(evaluate(m, data, compute_channel_means(data)), 25.0);
}

// An untrained network is close to chance on 100 balanced classes.
TEST(Evaluate, RandomInitIsNearChance) {
  const auto data = make_synthetic_cifar100(10000, 5, 6);
  auto spec = ModelSpec::make(34, ModelMode::SeR, 8, 100);
  spec.width = 4;
  Model<float> m(spec, 7);
  const double acc = evaluate(m, data, compute_channel_means(data), 500);
  EXPECT_GE(acc, 0.4);
  EXPECT_LE(acc, 2.5);
}

TEST(TrainerLoop, LossDecreasesOnALearnableToyTask) {
  const auto data = test::toy_dataset(96, 4, 3);
  Model<float> m(tiny_spec(ModelMode::SeR), 4);
  TrainOptions opts;
  opts.deterministic = true;
  const auto h = train(m, data, data, tiny_config(4), compute_channel_means(data), opts);
  ASSERT_EQ(h.epochs.size(), 4u);
  for (const auto& e : h.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
  EXPECT_LT(h.epochs.back().train_loss, h.epochs.front().train_loss);
}

TEST(TrainerLoop, WritesMetricsAndCheckpoint) {
  test::TempDir dir("train");
  const auto data = test::toy_dataset(32, 4, 4);
  Model<float> m(tiny_spec(ModelMode::SeA), 5);
  TrainOptions opts;
  opts.out_dir = dir.path();
  opts.deterministic = true;
  auto cfg = tiny_config(2);
  cfg.checkpoint_every = 1;
  const auto h = train(m, data, data, cfg, compute_channel_means(data), opts);
  EXPECT_EQ(read_metrics_csv(dir / "metrics.csv"), h);
  const auto ck = read_checkpoint(dir / "checkpoint.ckpt");
  EXPECT_EQ(ck.epoch, 2u);
  EXPECT_EQ(ck.history, h);
  ASSERT_TRUE(ck.train.has_value());
  EXPECT_EQ(*ck.train, cfg);
}

TEST(TrainerLoop, ResumeReproducesAnUninterruptedRun) {
  test::TempDir dir("resume");
  const auto data = test::toy_dataset(48, 4, 5);
  const auto means = compute_channel_means(data);
  const auto cfg = tiny_config(3);
  TrainOptions opts;
  opts.deterministic = true;

  Model<float> straight(tiny_spec(ModelMode::SeR), 6);
  Trainer t1(straight, cfg, means);
  const auto full = t1.run(data, data, opts);

  Model<float> first(tiny_spec(ModelMode::SeR), 6);
  Trainer t2(first, cfg, means);
  auto part = opts;
  part.max_epochs = 1;
  t2.run(data, data, part);
  t2.save_checkpoint(dir / "one.ckpt");

  Model<float> resumed(tiny_spec(ModelMode::SeR), 999);
  Trainer t3(resumed, cfg, means);
  t3.load_checkpoint(dir / "one.ckpt");
  const auto rest = t3.run(data, data, opts);
  EXPECT_EQ(rest, full);
  auto pa = straight.parameters(), pb = resumed.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(test::bitwise_equal(pa[i]->value, pb[i]->value)) << pa[i]->name;
}

// Zero aux weights still leave SE_R different from SE_A: the heads keep
// feeding attention even when their losses are switched off.
TEST(TrainerLoop, SeRWithZeroAuxWeightsDiffersFromSeA) {
  const auto data = test::toy_dataset(32, 4, 6);
  const auto means = compute_channel_means(data);
  auto cfg = tiny_config(1);
  cfg.loss = LossWeights{{0.0, 0.0}};
  TrainOptions opts;
  opts.deterministic = true;
  Model<float> r(tiny_spec(ModelMode::SeR), 7), a(tiny_spec(ModelMode::SeA), 7);
  const auto hr = train(r, data, data, cfg, means, opts);
  const auto ha = train(a, data, data, cfg, means, opts);
  EXPECT_NE(hr.epochs[0].train_loss, ha.epochs[0].train_loss);
}

TEST(TrainerLoop, RejectsLossArityMismatch) {
  Model<float> m(tiny_spec(ModelMode::SeR), 1);
  auto cfg = tiny_config(1);
  cfg.loss = LossWeights{{0.3}};
  EXPECT_THROW(Trainer(m, cfg, ChannelMeans{}), ConfigError);
}

}  // namespace
}  // namespace rattn
