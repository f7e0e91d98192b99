#include "rattn/model.hpp"

#include <algorithm>
#include <cmath>

namespace rattn {

std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::Se: return "se";
    case ModelMode::SeA: return "se_a";
    case ModelMode::SeR: return "se_r";
  }
  return "?";
}

std::string to_string(StemKind s) { return s == StemKind::Cifar ? "cifar" : "imagenet"; }
std::string to_string(AttentionInput a) { return a == AttentionInput::Logits ? "logits" : "softmax"; }

ModelMode parse_mode(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (l == "se") return ModelMode::Se;
  if (l == "se_a" || l == "se-a") return ModelMode::SeA;
  if (l == "se_r" || l == "se-r") return ModelMode::SeR;
  throw ConfigError("unknown model mode '" + s + "' (expected se, se_a or se_r)");
}

StemKind parse_stem(const std::string& s) {
  if (s == "cifar") return StemKind::Cifar;
  if (s == "imagenet") return StemKind::ImageNet;
  throw ConfigError("unknown stem '" + s + "' (expected cifar or imagenet)");
}

AttentionInput parse_attention_input(const std::string& s) {
  if (s == "logits") return AttentionInput::Logits;
  if (s == "softmax") return AttentionInput::Softmax;
  throw ConfigError("unknown attention input '" + s + "' (expected logits or softmax)");
}

StagePlan stage_plan(int variant, std::size_t width) {
  StagePlan plan;
  switch (variant) {
    case 34:
      plan.blocks = {3, 4, 6, 3};
      plan.kind = ResidualKind::Basic;
      plan.expansion = 1;
      break;
    case 50:
      plan.blocks = {3, 4, 6, 3};
      plan.kind = ResidualKind::Bottleneck;
      plan.expansion = 4;
      break;
    case 101:
      plan.blocks = {3, 4, 23, 3};
      plan.kind = ResidualKind::Bottleneck;
      plan.expansion = 4;
      break;
    default:
      throw ConfigError("model.variant: unsupported depth " + std::to_string(variant) + " (expected 34, 50 or 101)");
  }
  for (std::size_t s = 0; s < 4; ++s) {
    plan.widths[s] = width << s;
    plan.out_channels[s] = plan.widths[s] * plan.expansion;
  }
  return plan;
}

ModelSpec ModelSpec::make(int variant, ModelMode mode, std::size_t reduction, std::size_t classes) {
  ModelSpec spec;
  spec.variant = variant;
  spec.mode = mode;
  spec.reduction_ratio = reduction;
  spec.num_classes = classes;
  if (mode != ModelMode::Se) spec.aux_positions = {2, 3};
  if (mode == ModelMode::SeR) spec.routing = {{2, {3}}, {3, {4}}};
  return spec;
}

void ModelSpec::validate() const {
  stage_plan(variant, 1);
  if (num_classes == 0) throw ConfigError("model.num_classes must be positive");
  if (reduction_ratio == 0) throw ConfigError("model.reduction_ratio must be positive");
  if (width == 0) throw ConfigError("model.width must be positive");
  if (!(aux_dropout >= 0.0 && aux_dropout < 1.0)) throw ConfigError("model.aux_dropout must be in [0, 1)");
  for (std::size_t i = 0; i < aux_positions.size(); ++i) {
    const int p = aux_positions[i];
    if (p < 1 || p > 3) throw ConfigError("model.aux_positions: stage " + std::to_string(p) + " not in {1,2,3}");
    if (i > 0 && aux_positions[i - 1] >= p) throw ConfigError("model.aux_positions must be strictly increasing");
  }
  switch (mode) {
    case ModelMode::Se:
      if (!aux_positions.empty()) throw ConfigError("model.aux_positions: SE mode has no auxiliary heads");
      if (!routing.empty()) throw ConfigError("model.routing: SE mode cannot route auxiliary results");
      break;
    case ModelMode::SeA:
      if (aux_positions.empty()) throw ConfigError("model.aux_positions: SE_A mode needs at least one head");
      if (!routing.empty()) throw ConfigError("model.routing: SE_A mode keeps auxiliary results out of attention");
      break;
    case ModelMode::SeR:
      if (aux_positions.empty()) throw ConfigError("model.aux_positions: SE_R mode needs at least one head");
      if (routing.empty()) throw ConfigError("model.routing: SE_R mode needs at least one route");
      break;
  }
  for (const auto& [source, targets] : routing) {
    if (std::find(aux_positions.begin(), aux_positions.end(), source) == aux_positions.end()) {
      throw ConfigError("model.routing: no auxiliary head after stage " + std::to_string(source));
    }
    for (int t : targets) {
      if (t <= source || t > 4) {
        throw ConfigError("model.routing: head after stage " + std::to_string(source) + " cannot feed stage " +
                          std::to_string(t));
      }
    }
  }
}

std::vector<int> ModelSpec::sources_for(int stage) const {
  std::vector<int> out;
  for (int p : aux_positions) {
    auto it = routing.find(p);
    if (it != routing.end() && it->second.count(stage) > 0) out.push_back(p);
  }
  return out;
}

template <typename T>
ResidualBlock<T>::ResidualBlock(const std::string& name, ResidualKind kind, std::size_t in_channels,
                                std::size_t width, std::size_t expansion, std::size_t stride, std::size_t extra,
                                std::size_t reduction)
    : name_(name) {
  const std::size_t out = width * expansion;
  if (kind == ResidualKind::Basic) {
    branch.emplace_back(name + ".branch0", kernels::ConvGeometry{in_channels, width, 3, stride, 1}, true);
    branch.emplace_back(name + ".branch1", kernels::ConvGeometry{width, out, 3, 1, 1}, true);
  } else {
    branch.emplace_back(name + ".branch0", kernels::ConvGeometry{in_channels, width, 1, 1, 0}, true);
    branch.emplace_back(name + ".branch1", kernels::ConvGeometry{width, width, 3, stride, 1}, true);
    branch.emplace_back(name + ".branch2", kernels::ConvGeometry{width, out, 1, 1, 0}, true);
  }
  if (stride != 1 || in_channels != out) {
    shortcut = std::make_unique<ConvBnAct<T>>(name + ".shortcut", kernels::ConvGeometry{in_channels, out, 1, stride, 0},
                                              false);
  }
  attention = ChannelAttention<T>(name + ".se", out, extra, reduction);
}

template <typename T>
void ResidualBlock<T>::init(Rng& rng) {
  for (auto& u : branch) u.init(rng);
  if (shortcut) shortcut->init(rng);
  attention.init(rng);
}

template <typename T>
FeatureMap<T> ResidualBlock<T>::forward(const FeatureMap<T>& x, const Tensor<T>* result, const Pass& pass) {
  FeatureMap<T> h = branch.front().forward(x, pass);
  for (std::size_t i = 1; i < branch.size(); ++i) h = branch[i].forward(h, pass);
  FeatureMap<T> a = attention.forward(h, result, pass);
  h = FeatureMap<T>();
  FeatureMap<T> y;
  if (shortcut) {
    kernels::add<T>(a, shortcut->forward(x, pass), y);
  } else {
    kernels::add<T>(a, x, y);
  }
  T* p = y.data();
  const std::size_t n = y.size();
  bool finite = true;
#pragma omp parallel for schedule(static) reduction(&& : finite)
  for (std::size_t i = 0; i < n; ++i) {
    finite = finite && std::isfinite(p[i]);
    p[i] = p[i] > T{0} ? p[i] : T{0};
  }
  if (!finite) throw NumericError(name_ + ": non-finite activation");
  if (pass.record) output_ = y;
  return y;
}

template <typename T>
typename ChannelAttention<T>::Grads ResidualBlock<T>::backward(const FeatureMap<T>& dy) {
  if (output_.empty()) throw InvalidInput(name_ + ": backward without a recorded forward");
  FeatureMap<T> dsum;
  kernels::relu_backward<T>(output_, dy, dsum);
  output_ = FeatureMap<T>();
  auto grads = attention.backward(dsum);
  FeatureMap<T> dh = std::move(grads.du);
  for (std::size_t i = branch.size(); i-- > 0;) dh = branch[i].backward(dh);
  if (shortcut) {
    kernels::accumulate<T>(dh, shortcut->backward(dsum));
  } else {
    kernels::accumulate<T>(dh, dsum);
  }
  grads.du = std::move(dh);
  return grads;
}

template <typename T>
void ResidualBlock<T>::collect(std::vector<Param<T>*>& out) {
  for (auto& u : branch) u.collect(out);
  if (shortcut) shortcut->collect(out);
  attention.collect(out);
}

template <typename T>
void ResidualBlock<T>::collect_buffers(std::vector<NamedTensor<T>>& out) {
  for (auto& u : branch) u.collect_buffers(out);
  if (shortcut) shortcut->collect_buffers(out);
}

template <typename T>
void ResidualBlock<T>::costs(Shape& shape, std::vector<LayerCost>& rows) const {
  const Shape in = shape;
  for (const auto& u : branch) u.costs(shape, rows);
  attention.costs(shape, rows);
  if (shortcut) {
    Shape sc = in;
    shortcut->costs(sc, rows);
  }
  rows.push_back({name_ + ".add", "add", 0, 0});
}

template <typename T>
Model<T>::Model(const ModelSpec& spec, std::uint64_t init_seed) : spec_(spec) {
  spec_.validate();
  plan_ = stage_plan(spec_.variant, spec_.width);
  const std::size_t w = spec_.width;
  if (spec_.stem == StemKind::Cifar) {
    stem_ = ConvBnAct<T>("stem", kernels::ConvGeometry{3, w, 3, 1, 1}, true);
  } else {
    stem_ = ConvBnAct<T>("stem", kernels::ConvGeometry{3, w, 7, 2, 3}, true);
    stem_pool_ = true;
  }
  std::size_t in = w;
  for (int s = 1; s <= 4; ++s) {
    const std::size_t extra = spec_.num_classes * spec_.sources_for(s).size();
    const auto idx = static_cast<std::size_t>(s - 1);
    for (std::size_t b = 0; b < plan_.blocks[idx]; ++b) {
      const std::size_t stride = (b == 0 && s > 1) ? 2 : 1;
      stages_[idx].push_back(std::make_unique<ResidualBlock<T>>(
          "stage" + std::to_string(s) + ".block" + std::to_string(b), plan_.kind, in, plan_.widths[idx],
          plan_.expansion, stride, extra, spec_.reduction_ratio));
      in = plan_.out_channels[idx];
    }
    if (std::find(spec_.aux_positions.begin(), spec_.aux_positions.end(), s) != spec_.aux_positions.end()) {
      AuxHeadGeometry g;
      g.dropout = spec_.aux_dropout;
      aux_heads_.emplace_back("aux" + std::to_string(s), in, spec_.num_classes, g);
    }
  }
  classifier_ = Linear<T>("fc", in, spec_.num_classes);

  Rng rng(init_seed);
  stem_.init(rng);
  for (auto& stage : stages_)
    for (auto& block : stage) block->init(rng);
  for (auto& head : aux_heads_) head.init(rng);
  classifier_.init(rng);
}

template <typename T>
Tensor<T> Model<T>::attention_input_for(int stage, const std::vector<Tensor<T>>& attn_inputs) const {
  const auto sources = spec_.sources_for(stage);
  if (sources.empty()) return {};
  if (sources.size() == 1) {
    const auto i = static_cast<std::size_t>(
        std::find(spec_.aux_positions.begin(), spec_.aux_positions.end(), sources[0]) - spec_.aux_positions.begin());
    return attn_inputs.at(i);
  }
  const std::size_t n = spec_.num_classes, N = attn_inputs.front().n(), width = n * sources.size();
  Tensor<T> out(vec_shape(N, width));
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const auto i = static_cast<std::size_t>(
        std::find(spec_.aux_positions.begin(), spec_.aux_positions.end(), sources[k]) - spec_.aux_positions.begin());
    const Tensor<T>& src = attn_inputs.at(i);
    for (std::size_t b = 0; b < N; ++b) std::copy_n(src.data() + b * n, n, out.data() + b * width + k * n);
  }
  return out;
}

template <typename T>
ForwardOutput<T> Model<T>::forward(const FeatureMap<T>& images, const Pass& pass) {
  const std::size_t min_extent = min_input_extent(spec_.stem);
  if (images.c() != 3 || images.n() == 0 || images.h() < min_extent || images.w() < min_extent) {
    throw InvalidInput("model input must be (n>=1, >=" + std::to_string(min_extent) + ", >=" +
                       std::to_string(min_extent) + ", 3), got " + to_string(images.shape()));
  }
  ForwardOutput<T> out;
  FeatureMap<T> x = stem_.forward(images, pass);
  stem_out_shape_ = x.shape();
  if (stem_pool_) {
    FeatureMap<T> pooled;
    kernels::max_pool_forward<T>(x, 3, 2, 1, pooled, pool_argmax_);
    x = std::move(pooled);
  }
  std::vector<Tensor<T>> attn_inputs(aux_heads_.size());
  std::size_t head = 0;
  for (int s = 1; s <= 4; ++s) {
    const Tensor<T> result = attention_input_for(s, attn_inputs);
    const Tensor<T>* result_ptr = result.empty() ? nullptr : &result;
    for (auto& block : stages_[static_cast<std::size_t>(s - 1)]) x = block->forward(x, result_ptr, pass);
    if (head < aux_heads_.size() && spec_.aux_positions[head] == s) {
      const Pass head_pass{pass.training, pass.record, mix_seed(pass.seed, head + 1)};
      Tensor<T> logits = aux_heads_[head].forward(x, head_pass);
      if (!logits.all_finite()) throw NumericError(aux_heads_[head].name() + ": non-finite logits");
      if (spec_.attention_input == AttentionInput::Softmax) {
        kernels::softmax_forward<T>(logits, attn_inputs[head]);
      } else {
        attn_inputs[head] = logits;
      }
      out.aux_logits.push_back(std::move(logits));
      ++head;
    }
  }
  pool_in_shape_ = x.shape();
  Tensor<T> pooled;
  kernels::global_avg_pool_forward<T>(x, pooled);
  out.main_logits = classifier_.forward(pooled, pass);
  if (!out.main_logits.all_finite()) throw NumericError("fc: non-finite logits");
  recorded_ = pass.record;
  if (pass.record) attn_inputs_ = std::move(attn_inputs);
  return out;
}

template <typename T>
FeatureMap<T> Model<T>::backward(const Tensor<T>& d_main, const std::vector<Tensor<T>>& d_aux, bool need_input_grad) {
  if (!recorded_) throw InvalidInput("model backward requires a recorded forward pass");
  if (!d_aux.empty() && d_aux.size() != aux_heads_.size()) {
    throw InvalidInput("expected " + std::to_string(aux_heads_.size()) + " aux gradients, got " +
                       std::to_string(d_aux.size()));
  }
  recorded_ = false;
  const std::size_t n = spec_.num_classes;
  Tensor<T> dpooled = classifier_.backward(d_main);
  FeatureMap<T> g;
  kernels::global_avg_pool_backward<T>(dpooled, pool_in_shape_, g);

  std::vector<Tensor<T>> d_attn(aux_heads_.size());
  for (int s = 4; s >= 1; --s) {
    const auto sources = spec_.sources_for(s);
    Tensor<T> d_result;
    auto& stage = stages_[static_cast<std::size_t>(s - 1)];
    for (std::size_t b = stage.size(); b-- > 0;) {
      auto grads = stage[b]->backward(g);
      g = std::move(grads.du);
      if (!sources.empty()) {
        if (d_result.empty()) {
          d_result = std::move(grads.dresult);
        } else {
          kernels::accumulate<T>(d_result, grads.dresult);
        }
      }
    }
    if (!sources.empty() && !spec_.detach_aux_into_attention) {
      const std::size_t N = d_result.n(), width = n * sources.size();
      for (std::size_t k = 0; k < sources.size(); ++k) {
        const auto i = static_cast<std::size_t>(
            std::find(spec_.aux_positions.begin(), spec_.aux_positions.end(), sources[k]) -
            spec_.aux_positions.begin());
        if (d_attn[i].empty()) d_attn[i] = Tensor<T>(vec_shape(N, n));
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t c = 0; c < n; ++c) d_attn[i][b * n + c] += d_result[b * width + k * n + c];
      }
    }
    // Head attached after the previous stage.
    for (std::size_t i = 0; i < aux_heads_.size(); ++i) {
      if (spec_.aux_positions[i] != s - 1) continue;
      Tensor<T> d_logits(vec_shape(g.n(), n));
      if (!d_aux.empty() && !d_aux[i].empty()) d_logits = d_aux[i];
      if (!d_attn[i].empty()) {
        if (spec_.attention_input == AttentionInput::Softmax) {
          Tensor<T> dl;
          kernels::softmax_backward<T>(attn_inputs_[i], d_attn[i], dl);
          kernels::accumulate<T>(d_logits, dl);
        } else {
          kernels::accumulate<T>(d_logits, d_attn[i]);
        }
      }
      kernels::accumulate<T>(g, aux_heads_[i].backward(d_logits));
    }
  }
  attn_inputs_.clear();
  if (stem_pool_) {
    FeatureMap<T> dx;
    kernels::max_pool_backward<T>(g, pool_argmax_, stem_out_shape_, dx);
    g = std::move(dx);
  }
  return stem_.backward(g, need_input_grad);
}

template <typename T>
std::vector<Param<T>*> Model<T>::parameters() {
  std::vector<Param<T>*> out;
  stem_.collect(out);
  for (auto& stage : stages_)
    for (auto& block : stage) block->collect(out);
  for (auto& head : aux_heads_) head.collect(out);
  classifier_.collect(out);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::buffers() {
  std::vector<NamedTensor<T>> out;
  stem_.collect_buffers(out);
  for (auto& stage : stages_)
    for (auto& block : stage) block->collect_buffers(out);
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::vector<LayerCost> Model<T>::layer_costs(const Shape& input) const {
  const std::size_t min_extent = min_input_extent(spec_.stem);
  if (input.c != 3 || input.n == 0 || input.h < min_extent || input.w < min_extent) {
    throw InvalidInput("accounting input must be (n>=1, >=" + std::to_string(min_extent) + ", >=" +
                       std::to_string(min_extent) + ", 3), got " + to_string(input));
  }
  std::vector<LayerCost> rows;
  Shape shape = input;
  stem_.costs(shape, rows);
  if (stem_pool_) {
    rows.push_back({"stem.pool", "pool", 0, 0});
    shape.h = (shape.h + 2 - 3) / 2 + 1;
    shape.w = (shape.w + 2 - 3) / 2 + 1;
  }
  std::size_t head = 0;
  for (int s = 1; s <= 4; ++s) {
    for (const auto& block : stages_[static_cast<std::size_t>(s - 1)]) block->costs(shape, rows);
    if (head < aux_heads_.size() && spec_.aux_positions[head] == s) {
      aux_heads_[head].costs(shape, rows);
      ++head;
    }
  }
  rows.push_back({"gap", "pool", 0, 0});
  rows.push_back(classifier_.cost(shape.n));
  return rows;
}

template <typename T>
std::vector<const ChannelAttention<T>*> Model<T>::attention_units(int stage) const {
  if (stage < 1 || stage > 4) throw InvalidInput("stage " + std::to_string(stage) + " has no attention units");
  std::vector<const ChannelAttention<T>*> out;
  for (const auto& block : stages_[static_cast<std::size_t>(stage - 1)]) out.push_back(&block->attention);
  return out;
}

template <typename T>
std::vector<ChannelAttention<T>*> Model<T>::attention_units(int stage) {
  if (stage < 1 || stage > 4) throw InvalidInput("stage " + std::to_string(stage) + " has no attention units");
  std::vector<ChannelAttention<T>*> out;
  for (auto& block : stages_[static_cast<std::size_t>(stage - 1)]) out.push_back(&block->attention);
  return out;
}

template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class Model<float>;
template class Model<double>;

}  // namespace rattn
