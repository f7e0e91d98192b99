#pragma once

// GoogLeNet-style auxiliary classifier:
//   adaptive avg pool -> 1x1 conv -> ReLU -> flatten -> fc1 -> ReLU -> dropout -> fc2

#include <cstddef>
#include <string>
#include <vector>

#include "rattn/layers.hpp"

namespace rattn {

struct AuxHeadGeometry {
  std::size_t pool_h = 4;
  std::size_t pool_w = 4;
  std::size_t conv_channels = 128;
  std::size_t hidden = 1024;
  double dropout = 0.7;  // drop probability

  std::size_t flat_features() const { return conv_channels * pool_h * pool_w; }
};

/// Closed-form trainable parameter count of a head reading `in_channels` channels.
std::uint64_t aux_head_param_count(std::size_t in_channels, std::size_t classes,
                                   const AuxHeadGeometry& g = {});

template <typename T>
struct AuxHeadParams {
  AuxHeadGeometry geometry;
  Tensor<T> conv_w;  // (conv_channels, 1, 1, in)
  Tensor<T> conv_b;
  Tensor<T> fc1_w;   // (hidden, 1, 1, flat)
  Tensor<T> fc1_b;
  Tensor<T> fc2_w;   // (classes, 1, 1, hidden)
  Tensor<T> fc2_b;

  static AuxHeadParams zeros(std::size_t in_channels, std::size_t classes, const AuxHeadGeometry& g = {});
};

template <typename T>
class AuxHead {
 public:
  AuxHead() = default;
  AuxHead(const std::string& name, std::size_t in_channels, std::size_t classes, const AuxHeadGeometry& g = {});

  void init(Rng& rng);
  /// Dropout is active only when pass.training is set; its mask is keyed by pass.seed.
  Tensor<T> forward(const FeatureMap<T>& u, const Pass& pass);
  FeatureMap<T> backward(const Tensor<T>& dlogits);

  void collect(std::vector<Param<T>*>& out);
  void costs(const Shape& in, std::vector<LayerCost>& rows) const;

  AuxHeadParams<T> params() const;
  void set_params(const AuxHeadParams<T>& p);

  const AuxHeadGeometry& geometry() const { return geometry_; }
  const std::string& name() const { return name_; }

  Conv2d<T> conv;
  Linear<T> fc1;
  Linear<T> fc2;

 private:
  std::string name_;
  AuxHeadGeometry geometry_;
  Shape input_shape_;
  Tensor<T> conv_out_;  // post-ReLU
  Tensor<T> hidden_;    // post-ReLU, pre-dropout
  bool dropout_active_ = false;
  std::uint64_t dropout_seed_ = 0;
};

/// Stateless forward with explicit parameters.
template <typename T>
Tensor<T> aux_head_forward(const FeatureMap<T>& u, const AuxHeadParams<T>& p, bool training,
                           std::uint64_t seed = 0);

}  // namespace rattn
