#include "rattn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <omp.h>

#include "rattn/checkpoint.hpp"
#include "rattn/metrics.hpp"

namespace rattn {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (eval_batch_size == 0) throw ConfigError("train.eval_batch_size must be positive");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train.base_lr must be positive");
  if (!(decay_factor > 0.0) || !std::isfinite(decay_factor)) throw ConfigError("train.decay_factor must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) {
      throw ConfigError("train.decay_epochs must be strictly increasing");
    }
    if (decay_epochs[i] >= epochs) throw ConfigError("train.decay_epochs must be below train.epochs");
  }
  if (warmup_epochs > epochs) throw ConfigError("train.warmup_epochs exceeds train.epochs");
  if (augment.pad > 16) throw ConfigError("train.augment.pad must be <= 16");
  if (!(augment.max_degrees >= 0.0 && augment.max_degrees <= 180.0)) {
    throw ConfigError("train.augment.max_degrees must be in [0, 180]");
  }
  for (std::size_t k = 0; k < loss.aux.size(); ++k) {
    if (!(loss.aux[k] >= 0.0) || !std::isfinite(loss.aux[k])) {
      throw ConfigError("loss.w" + std::to_string(k + 1) + " must be a nonnegative number");
    }
  }
}

// ---------------------------------------------------------------- losses

template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad, double scale) {
  const std::size_t N = logits.n(), n = logits.c();
  if (logits.size() != N * n || N == 0) throw InvalidInput("cross entropy: logits must be (batch, 1, 1, classes)");
  if (labels.size() != N) {
    throw InvalidInput("cross entropy: " + std::to_string(labels.size()) + " labels for a batch of " +
                       std::to_string(N));
  }
  if (grad != nullptr) *grad = Tensor<T>(logits.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < N; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= n) {
      throw InvalidInput("cross entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(n) + ")");
    }
    const T* row = logits.data() + b * n;
    double mx = row[0];
    for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) sum += std::exp(static_cast<double>(row[k]) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row[y]);
    if (grad != nullptr) {
      T* g = grad->data() + b * n;
      const double f = scale / static_cast<double>(N);
      for (std::size_t k = 0; k < n; ++k) {
        const double p = std::exp(static_cast<double>(row[k]) - lse);
        g[k] = static_cast<T>(f * (p - (static_cast<int>(k) == y ? 1.0 : 0.0)));
      }
    }
  }
  return total / static_cast<double>(N);
}

double combine_losses(double main, const std::vector<double>& aux, const LossWeights& w) {
  if (aux.size() != w.aux.size()) {
    throw InvalidInput("combined loss: " + std::to_string(aux.size()) + " auxiliary losses but " +
                       std::to_string(w.aux.size()) + " weights");
  }
  double total = main;
  for (std::size_t k = 0; k < aux.size(); ++k) total += w.aux[k] * aux[k];
  return total;
}

template <typename T>
LossBreakdown combined_loss(const Tensor<T>& main_logits, const std::vector<Tensor<T>>& aux_logits,
                            const std::vector<int>& labels, const LossWeights& w, Tensor<T>* d_main,
                            std::vector<Tensor<T>>* d_aux) {
  if (aux_logits.size() != w.aux.size()) {
    throw InvalidInput("combined loss: " + std::to_string(aux_logits.size()) + " auxiliary heads but " +
                       std::to_string(w.aux.size()) + " weights");
  }
  LossBreakdown out;
  out.main = cross_entropy(main_logits, labels, d_main);
  if (d_aux != nullptr) d_aux->assign(aux_logits.size(), Tensor<T>());
  for (std::size_t k = 0; k < aux_logits.size(); ++k) {
    out.aux.push_back(
        cross_entropy(aux_logits[k], labels, d_aux != nullptr ? &(*d_aux)[k] : nullptr, w.aux[k]));
  }
  out.total = combine_losses(out.main, out.aux, w);
  return out;
}

// ---------------------------------------------------------------- schedule

double lr_at(std::size_t epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch, const TrainConfig& cfg) {
  if (steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch) {
    throw InvalidInput("lr_at: step " + std::to_string(step_in_epoch) + " outside an epoch of " +
                       std::to_string(steps_per_epoch) + " steps");
  }
  if (epoch < cfg.warmup_epochs) {
    const double done = static_cast<double>(epoch * steps_per_epoch + step_in_epoch + 1);
    const double span = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
    // base * (done / span) rather than (base * done) / span: the last warmup
    // step then yields base exactly.
    return cfg.base_lr * (done / span);
  }
  const auto k = std::count_if(cfg.decay_epochs.begin(), cfg.decay_epochs.end(),
                               [&](std::size_t d) { return d <= epoch; });
  return cfg.base_lr / std::pow(cfg.decay_factor, static_cast<double>(k));
}

// ---------------------------------------------------------------- images

namespace {

constexpr std::size_t kSide = Cifar100Dataset::kSide;
constexpr std::size_t kPlane = kSide * kSide;

// HWC image on [0, 1] in double; rotation and mean subtraction happen here so
// a constant image equal to the means normalizes to exact zeros.
using Image = std::array<double, kPlane * 3>;

void load_unit(const std::uint8_t* chw, Image& out) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < kPlane; ++p) out[p * 3 + c] = chw[c * kPlane + p] / 255.0;
}

void rotate(const Image& in, double degrees, Image& out) {
  const double rad = degrees * std::acos(-1.0) / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double centre = (static_cast<double>(kSide) - 1.0) / 2.0;
  auto at = [&](long y, long x, std::size_t c) {
    if (y < 0 || x < 0 || y >= static_cast<long>(kSide) || x >= static_cast<long>(kSide)) return 0.0;
    return in[(static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)) * 3 + c];
  };
  for (std::size_t i = 0; i < kSide; ++i) {
    for (std::size_t j = 0; j < kSide; ++j) {
      // Inverse map: output pixel -> source position. Positive angles turn the
      // picture counter-clockwise as displayed (y axis pointing down).
      const double dx = static_cast<double>(j) - centre, dy = static_cast<double>(i) - centre;
      const double xs = cs * dx - sn * dy + centre;
      const double ys = sn * dx + cs * dy + centre;
      const double x0 = std::floor(xs), y0 = std::floor(ys);
      const double fx = xs - x0, fy = ys - y0;
      const long xi = static_cast<long>(x0), yi = static_cast<long>(y0);
      for (std::size_t c = 0; c < 3; ++c) {
        out[(i * kSide + j) * 3 + c] = (1 - fy) * ((1 - fx) * at(yi, xi, c) + fx * at(yi, xi + 1, c)) +
                                       fy * ((1 - fx) * at(yi + 1, xi, c) + fx * at(yi + 1, xi + 1, c));
      }
    }
  }
}

void subtract_means(const Image& in, const ChannelMeans& means, float* out) {
  for (std::size_t p = 0; p < kPlane; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[p * 3 + c] = static_cast<float>(in[p * 3 + c] - means.rgb[c]);
}

}  // namespace

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng) {
  // Every draw is taken regardless of the switches so that turning one
  // augmentation off does not shift the others.
  const std::size_t span = 2 * cfg.pad + 1;
  AugmentParams p;
  p.top = static_cast<std::size_t>(rng.below(span));
  p.left = static_cast<std::size_t>(rng.below(span));
  p.flip = rng.bernoulli(0.5);
  p.degrees = rng.uniform(-cfg.max_degrees, cfg.max_degrees);
  if (!cfg.crop) p.top = p.left = cfg.pad;
  if (!cfg.flip) p.flip = false;
  if (!cfg.rotate) p.degrees = 0.0;
  return p;
}

void to_unit_hwc(const std::uint8_t* chw, float* hwc) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < kPlane; ++p) hwc[p * 3 + c] = static_cast<float>(chw[c * kPlane + p] / 255.0);
}

void normalize(float* hwc, std::size_t pixels, const std::optional<ChannelMeans>& means) {
  if (!means) throw ConfigError("normalize: dataset channel means are not available");
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < 3; ++c) hwc[p * 3 + c] -= static_cast<float>(means->rgb[c]);
}

void apply_augment(const std::uint8_t* chw, const AugmentParams& p, std::size_t pad, const ChannelMeans& means,
                   float* out) {
  if (p.top > 2 * pad || p.left > 2 * pad) throw InvalidInput("augment: crop offset outside the padded image");
  Image src, a, b;
  load_unit(chw, src);
  // Crop from the zero-padded image, with the flip folded into the column index.
  for (std::size_t i = 0; i < kSide; ++i) {
    for (std::size_t j = 0; j < kSide; ++j) {
      const std::size_t jj = p.flip ? kSide - 1 - j : j;
      const long y = static_cast<long>(i + p.top) - static_cast<long>(pad);
      const long x = static_cast<long>(jj + p.left) - static_cast<long>(pad);
      const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(kSide) && x < static_cast<long>(kSide);
      for (std::size_t c = 0; c < 3; ++c) {
        a[(i * kSide + j) * 3 + c] =
            inside ? src[(static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)) * 3 + c] : 0.0;
      }
    }
  }
  if (p.degrees != 0.0) {
    rotate(a, p.degrees, b);
    subtract_means(b, means, out);
  } else {
    subtract_means(a, means, out);
  }
}

void augment(const std::uint8_t* chw, const AugmentConfig& cfg, const ChannelMeans& means, Rng& rng, float* out) {
  apply_augment(chw, sample_augment(cfg, rng), cfg.pad, means, out);
}

Tensor<float> make_batch(const Cifar100Dataset& data, const std::vector<std::size_t>& indices,
                         const ChannelMeans& means) {
  Tensor<float> x({indices.size(), kSide, kSide, 3});
  Image img;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    load_unit(data.image(indices[b]), img);
    subtract_means(img, means, x.sample(b));
  }
  return x;
}

// ---------------------------------------------------------------- optimizer

Sgd::Sgd(std::vector<Param<float>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      momentum_(cfg.momentum),
      weight_decay_(cfg.weight_decay),
      nesterov_(cfg.nesterov),
      decay_norm_(cfg.decay_norm) {
  for (auto* p : params_) velocity_.emplace_back(p->value.shape());
}

void Sgd::step(double lr) {
  const float mu = static_cast<float>(momentum_), rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param<float>& p = *params_[i];
    const float wd = (decay_norm_ || !p.is_norm) ? static_cast<float>(weight_decay_) : 0.0f;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* v = velocity_[i].data();
    const std::size_t n = p.value.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t k = 0; k < n; ++k) {
      const float gk = g[k] + wd * w[k];
      v[k] = mu * v[k] + gk;
      w[k] -= rate * (nesterov_ ? gk + mu * v[k] : v[k]);
    }
  }
}

// ---------------------------------------------------------------- loop

double TrainingHistory::best_accuracy() const {
  double best = 0.0;
  for (const auto& r : epochs) best = std::max(best, 100.0 - r.test_err);
  return best;
}

namespace {

std::vector<int> labels_of(const Cifar100Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<int> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.fine[idx[i]];
  return y;
}

std::size_t argmax_row(const Tensor<float>& logits, std::size_t b) {
  const std::size_t n = logits.c();
  const float* row = logits.data() + b * n;
  return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

}  // namespace

double evaluate(Model<float>& model, const Cifar100Dataset& data, const ChannelMeans& means, std::size_t batch_size) {
  if (data.size() == 0) throw InvalidInput("evaluate: empty dataset");
  if (batch_size == 0) throw InvalidInput("evaluate: batch size must be positive");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto out = model.forward(make_batch(data, idx, means), Pass::eval());
    for (std::size_t b = 0; b < idx.size(); ++b) correct += argmax_row(out.main_logits, b) == data.fine[idx[b]];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

Trainer::Trainer(Model<float>& model, const TrainConfig& cfg, ChannelMeans means)
    : model_(model), cfg_(cfg), means_(means), rng_(cfg.seed) {
  cfg_.validate();
  if (cfg_.loss.aux.size() != model_.aux_count()) {
    throw ConfigError("loss: " + std::to_string(cfg_.loss.aux.size()) + " weights for " +
                      std::to_string(model_.aux_count()) + " auxiliary heads");
  }
  sgd_ = Sgd(model_.parameters(), cfg_);
}

EpochRecord Trainer::train_epoch(const Cifar100Dataset& train, std::size_t epoch) {
  const std::size_t N = train.size();
  if (N == 0) throw InvalidInput("train: empty dataset");
  const std::uint64_t key = rng_.next();

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle(mix_seed(key, 1));
  for (std::size_t i = N - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

  const std::size_t bs = cfg_.batch_size, steps = (N + bs - 1) / bs;
  double loss_sum = 0.0;
  std::size_t wrong = 0;
  EpochRecord rec;
  rec.epoch = epoch + 1;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t start = step * bs, nb = std::min(bs, N - start);
    const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                       order.begin() + static_cast<long>(start + nb));
    Tensor<float> x({nb, kSide, kSide, 3});
    for (std::size_t b = 0; b < nb; ++b) {
      Rng sample_rng(mix_seed(key, 2 + start + b));
      augment(train.image(idx[b]), cfg_.augment, means_, sample_rng, x.sample(b));
    }
    const std::vector<int> y = labels_of(train, idx);

    const std::string where = "epoch " + std::to_string(epoch + 1) + " step " + std::to_string(step + 1);
    try {
      model_.zero_grad();
      const auto out = model_.forward(x, Pass::train(mix_seed(key, 0xD0D0ULL + step)));
      Tensor<float> d_main;
      std::vector<Tensor<float>> d_aux;
      const LossBreakdown loss = combined_loss(out.main_logits, out.aux_logits, y, cfg_.loss, &d_main, &d_aux);
      if (!std::isfinite(loss.total)) throw NumericError("loss is " + std::to_string(loss.total));
      model_.backward(d_main, d_aux);
      rec.lr = lr_at(epoch, step, steps, cfg_);
      sgd_.step(rec.lr);
      loss_sum += loss.total * static_cast<double>(nb);
      for (std::size_t b = 0; b < nb; ++b) wrong += argmax_row(out.main_logits, b) != static_cast<std::size_t>(y[b]);
    } catch (const NumericError& e) {
      throw NumericError(where + ": " + e.what());
    }
  }
  rec.train_loss = loss_sum / static_cast<double>(N);
  rec.train_err = 100.0 * static_cast<double>(wrong) / static_cast<double>(N);
  return rec;
}

TrainingHistory Trainer::run(const Cifar100Dataset& train, const Cifar100Dataset& test, const TrainOptions& opts) {
  const std::size_t limit = opts.max_epochs > 0 ? std::min(cfg_.epochs, opts.max_epochs) : cfg_.epochs;
  if (opts.deterministic) omp_set_num_threads(1);
  fs::path metrics, ckpt;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    metrics = opts.out_dir / "metrics.csv";
    ckpt = opts.out_dir / "checkpoint.ckpt";
    write_metrics_csv(metrics, history_);
  }
  for (std::size_t e = history_.epochs.size(); e < limit; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec = train_epoch(train, e);
    rec.test_err = 100.0 - evaluate(model_, test, means_, cfg_.eval_batch_size);
    rec.seconds =
        opts.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.epochs.push_back(rec);
    if (!metrics.empty()) append_metrics_row(metrics, rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (!ckpt.empty() && cfg_.checkpoint_every > 0 && (e + 1) % cfg_.checkpoint_every == 0) save_checkpoint(ckpt);
  }
  if (!ckpt.empty()) save_checkpoint(ckpt);
  return history_;
}

void Trainer::save_checkpoint(const fs::path& file) const {
  Checkpoint ck;
  ck.spec = model_.spec();
  ck.train = cfg_;
  ck.epoch = history_.epochs.size();
  ck.rng = rng_.state();
  ck.history = history_;
  ck.means = means_;
  store_model(model_, ck);
  const auto params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.emplace_back("momentum/" + params[i]->name, sgd_.momentum()[i]);
  write_checkpoint(file, ck);
}

void Trainer::load_checkpoint(const fs::path& file) {
  const Checkpoint ck = read_checkpoint(file);
  if (!(ck.spec == model_.spec())) throw ConfigError(file.string() + ": checkpoint was written for a different model");
  restore_model(ck, model_);
  const auto params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<float>* m = ck.find("momentum/" + params[i]->name);
    if (m == nullptr || !(m->shape() == params[i]->value.shape())) {
      throw IoError(file.string() + ": missing or mis-shaped momentum for " + params[i]->name);
    }
    sgd_.momentum()[i] = *m;
  }
  rng_.set_state(ck.rng);
  history_ = ck.history;
}

TrainingHistory train(Model<float>& model, const Cifar100Dataset& train_set, const Cifar100Dataset& test_set,
                      const TrainConfig& cfg, const ChannelMeans& means, const TrainOptions& opts) {
  Trainer trainer(model, cfg, means);
  return trainer.run(train_set, test_set, opts);
}

template double cross_entropy<float>(const Tensor<float>&, const std::vector<int>&, Tensor<float>*, double);
template double cross_entropy<double>(const Tensor<double>&, const std::vector<int>&, Tensor<double>*, double);
template LossBreakdown combined_loss<float>(const Tensor<float>&, const std::vector<Tensor<float>>&,
                                            const std::vector<int>&, const LossWeights&, Tensor<float>*,
                                            std::vector<Tensor<float>>*);
template LossBreakdown combined_loss<double>(const Tensor<double>&, const std::vector<Tensor<double>>&,
                                             const std::vector<int>&, const LossWeights&, Tensor<double>*,
                                             std::vector<Tensor<double>>*);

}  // namespace rattn
