#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rattn/cifar.hpp"
#include "rattn/model.hpp"

namespace rattn {

/// Auxiliary loss weights, ordered like the aux positions (nearest the input first).
struct LossWeights {
  std::vector<double> aux;
  bool operator==(const LossWeights&) const = default;
};

struct AugmentConfig {
  bool crop = true;
  std::size_t pad = 4;
  bool flip = true;
  bool rotate = true;
  double max_degrees = 15.0;
  bool operator==(const AugmentConfig&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 256;
  double base_lr = 0.1;
  std::vector<std::size_t> decay_epochs{60, 120, 160};
  double decay_factor = 5.0;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  bool nesterov = true;
  std::size_t warmup_epochs = 1;
  bool decay_norm = true;  // false keeps batch-norm scale/shift out of weight decay
  std::size_t checkpoint_every = 10;  // epochs; 0 = only the final checkpoint
  std::uint64_t seed = 0;
  AugmentConfig augment;
  LossWeights loss;

  /// Throws ConfigError naming the field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------- losses

/// Mean cross-entropy over the batch, computed in double. When `grad` is given
/// it receives scale * d(loss)/d(logits).
template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad = nullptr,
                     double scale = 1.0);

/// main + sum_k w_k * aux_k.
double combine_losses(double main, const std::vector<double>& aux, const LossWeights& w);

struct LossBreakdown {
  double total = 0.0;
  double main = 0.0;
  std::vector<double> aux;
};

/// Weighted loss of a model output. Gradients w.r.t. every logit tensor are
/// written when the pointers are given.
template <typename T>
LossBreakdown combined_loss(const Tensor<T>& main_logits, const std::vector<Tensor<T>>& aux_logits,
                            const std::vector<int>& labels, const LossWeights& w, Tensor<T>* d_main = nullptr,
                            std::vector<Tensor<T>>* d_aux = nullptr);

// ---------------------------------------------------------------- schedule

/// Per-step linear warmup over the first warmup_epochs, then step decay.
double lr_at(std::size_t epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch, const TrainConfig& cfg);

// ---------------------------------------------------------------- images

/// One draw of the random augmentation.
struct AugmentParams {
  std::size_t top = 4;   // crop offset into the padded image
  std::size_t left = 4;
  bool flip = false;
  double degrees = 0.0;

  static AugmentParams identity(std::size_t pad = 4) { return {pad, pad, false, 0.0}; }
};

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng);

/// Pixels of one CHW 8-bit record as a 32x32x3 HWC image on [0, 1].
void to_unit_hwc(const std::uint8_t* chw, float* hwc);

/// Subtracts the channel means in place (HWC). Throws ConfigError without means.
void normalize(float* hwc, std::size_t pixels, const std::optional<ChannelMeans>& means);

/// Zero-pad + crop, horizontal flip, bilinear rotation about the centre with
/// zero fill, then mean subtraction. `out` is 32x32x3 HWC.
void apply_augment(const std::uint8_t* chw, const AugmentParams& p, std::size_t pad, const ChannelMeans& means,
                   float* out);

/// sample_augment + apply_augment with the switches of `cfg`.
void augment(const std::uint8_t* chw, const AugmentConfig& cfg, const ChannelMeans& means, Rng& rng, float* out);

/// Normalized (non-augmented) batch of the given dataset indices.
Tensor<float> make_batch(const Cifar100Dataset& data, const std::vector<std::size_t>& indices,
                         const ChannelMeans& means);

// ---------------------------------------------------------------- optimizer

/// SGD with (Nesterov) momentum and L2 weight decay folded into the gradient:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)   (Nesterov)
///                                        p -= lr * v              (plain)
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<Param<float>*> params, const TrainConfig& cfg);

  void step(double lr);
  std::vector<Tensor<float>>& momentum() { return velocity_; }
  const std::vector<Tensor<float>>& momentum() const { return velocity_; }

 private:
  std::vector<Param<float>*> params_;
  std::vector<Tensor<float>> velocity_;
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
  bool nesterov_ = true;
  bool decay_norm_ = true;
};

// ---------------------------------------------------------------- loop

struct EpochRecord {
  std::size_t epoch = 0;     // 1-based
  double train_loss = 0.0;   // mean combined loss per sample
  double train_err = 0.0;    // percent, main head, training mode
  double test_err = 0.0;     // percent
  double lr = 0.0;           // rate used by the epoch's last step
  double seconds = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;

  double final_accuracy() const { return epochs.empty() ? 0.0 : 100.0 - epochs.back().test_err; }
  double best_accuracy() const;
  bool operator==(const TrainingHistory&) const = default;
};

/// Top-1 accuracy in percent over the whole split, eval mode, no augmentation.
double evaluate(Model<float>& model, const Cifar100Dataset& data, const ChannelMeans& means,
                std::size_t batch_size = 256);

struct TrainOptions {
  std::filesystem::path out_dir;   // metrics.csv and checkpoints; empty = no files
  bool deterministic = false;      // single thread, seconds column written as 0
  std::size_t max_epochs = 0;      // stop after this many epochs in total (0 = cfg.epochs)
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Owns the optimizer state of one model. The trainer's own generator draws
/// one key per epoch; shuffling, augmentation and dropout masks derive from it.
class Trainer {
 public:
  Trainer(Model<float>& model, const TrainConfig& cfg, ChannelMeans means);

  /// Runs epochs [history.size(), limit) and returns the full history.
  TrainingHistory run(const Cifar100Dataset& train, const Cifar100Dataset& test, const TrainOptions& opts);

  /// One epoch; exposed for tests.
  EpochRecord train_epoch(const Cifar100Dataset& train, std::size_t epoch);

  void save_checkpoint(const std::filesystem::path& file) const;
  /// Restores weights, momentum, the generator and the history.
  void load_checkpoint(const std::filesystem::path& file);

  const TrainingHistory& history() const { return history_; }
  const TrainConfig& config() const { return cfg_; }
  Sgd& optimizer() { return sgd_; }

 private:
  Model<float>& model_;
  TrainConfig cfg_;
  ChannelMeans means_;
  Sgd sgd_;
  Rng rng_;
  TrainingHistory history_;
};

/// Builds a Trainer and runs it.
TrainingHistory train(Model<float>& model, const Cifar100Dataset& train_set, const Cifar100Dataset& test_set,
                      const TrainConfig& cfg, const ChannelMeans& means, const TrainOptions& opts = {});

}  // namespace rattn
