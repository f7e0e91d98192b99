#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "rattn/attention.hpp"
#include "rattn/aux_head.hpp"
#include "rattn/layers.hpp"

namespace rattn {

/// SE: plain squeeze-excitation. SE_A: aux heads add losses only.
/// SE_R: aux logits are also fed into later attention units.
enum class ModelMode { Se, SeA, SeR };
enum class StemKind { Cifar, ImageNet };
enum class AttentionInput { Logits, Softmax };
enum class ResidualKind { Basic, Bottleneck };

std::string to_string(ModelMode m);
std::string to_string(StemKind s);
std::string to_string(AttentionInput a);
ModelMode parse_mode(const std::string& s);
StemKind parse_stem(const std::string& s);
AttentionInput parse_attention_input(const std::string& s);

struct StagePlan {
  std::array<std::size_t, 4> blocks{};
  std::array<std::size_t, 4> widths{};        // inner width of each block
  std::array<std::size_t, 4> out_channels{};  // width * expansion
  ResidualKind kind = ResidualKind::Basic;
  std::size_t expansion = 1;
};

/// Block layout for ResNet-34/50/101. `width` is the stage-1 inner width (64 in the standard nets).
StagePlan stage_plan(int variant, std::size_t width = 64);

struct ModelSpec {
  int variant = 34;
  ModelMode mode = ModelMode::Se;
  std::size_t reduction_ratio = 8;
  std::size_t num_classes = 100;
  /// Stages (1-based) after which an auxiliary head is attached, ascending.
  std::vector<int> aux_positions;
  /// Aux stage -> stages whose attention units receive its logits.
  std::map<int, std::set<int>> routing;
  double aux_dropout = 0.7;
  StemKind stem = StemKind::Cifar;
  AttentionInput attention_input = AttentionInput::Logits;
  bool detach_aux_into_attention = false;
  std::size_t width = 64;

  /// Defaults: SE has no heads; SE_A and SE_R put heads after stages 2 and 3;
  /// SE_R routes each head into the stage that follows it.
  static ModelSpec make(int variant, ModelMode mode, std::size_t reduction = 8, std::size_t classes = 100);

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// Aux positions (in order) whose logits feed attention units in `stage`.
  std::vector<int> sources_for(int stage) const;

  bool operator==(const ModelSpec&) const = default;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> main_logits;
  std::vector<Tensor<T>> aux_logits;  // one per aux position, in position order
};

template <typename T>
class ResidualBlock {
 public:
  ResidualBlock(const std::string& name, ResidualKind kind, std::size_t in_channels, std::size_t width,
                std::size_t expansion, std::size_t stride, std::size_t extra, std::size_t reduction);

  void init(Rng& rng);
  FeatureMap<T> forward(const FeatureMap<T>& x, const Tensor<T>* result, const Pass& pass);
  /// Returns (dx, d result).
  typename ChannelAttention<T>::Grads backward(const FeatureMap<T>& dy);

  void collect(std::vector<Param<T>*>& out);
  void collect_buffers(std::vector<NamedTensor<T>>& out);
  void costs(Shape& shape, std::vector<LayerCost>& rows) const;

  const std::string& name() const { return name_; }
  std::vector<ConvBnAct<T>> branch;
  std::unique_ptr<ConvBnAct<T>> shortcut;
  ChannelAttention<T> attention;

 private:
  std::string name_;
  FeatureMap<T> output_;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelSpec& spec, std::uint64_t init_seed = 0);

  const ModelSpec& spec() const { return spec_; }
  const StagePlan& plan() const { return plan_; }

  ForwardOutput<T> forward(const FeatureMap<T>& images, const Pass& pass);

  /// Backward from gradients of the main and aux logits. Parameter gradients
  /// accumulate; the input gradient is returned when requested.
  FeatureMap<T> backward(const Tensor<T>& d_main, const std::vector<Tensor<T>>& d_aux,
                         bool need_input_grad = false);

  std::vector<Param<T>*> parameters();
  std::vector<NamedTensor<T>> buffers();
  void zero_grad();

  /// Per-layer parameter / MAC rows for an input of the given shape.
  std::vector<LayerCost> layer_costs(const Shape& input) const;

  /// Attention units of stage (1..4) in block order.
  std::vector<const ChannelAttention<T>*> attention_units(int stage) const;
  std::vector<ChannelAttention<T>*> attention_units(int stage);

  std::vector<std::unique_ptr<ResidualBlock<T>>>& stage(int s) { return stages_.at(s - 1); }
  AuxHead<T>& aux_head(std::size_t i) { return aux_heads_.at(i); }
  std::size_t aux_count() const { return aux_heads_.size(); }

  static std::size_t min_input_extent(StemKind stem) { return stem == StemKind::Cifar ? 32 : 64; }

 private:
  Tensor<T> attention_input_for(int stage, const std::vector<Tensor<T>>& attn_inputs) const;

  ModelSpec spec_;
  StagePlan plan_;
  ConvBnAct<T> stem_;
  bool stem_pool_ = false;
  std::array<std::vector<std::unique_ptr<ResidualBlock<T>>>, 4> stages_;
  std::vector<AuxHead<T>> aux_heads_;
  Linear<T> classifier_;

  // Recorded forward state.
  Shape pool_in_shape_;
  Shape stem_out_shape_;
  std::vector<std::size_t> pool_argmax_;
  std::vector<Tensor<T>> attn_inputs_;  // per aux: tensor fed into attention (logits or softmax)
  bool recorded_ = false;
};

}  // namespace rattn
