#pragma once

// Squeeze-and-excitation with an optional auxiliary-result input.
//
// Descriptors and attention weights are batched vectors of shape (n, 1, 1, d).
// The augmented descriptor places the auxiliary result first:
//   z' = [T_0 .. T_{n-1}, z_0 .. z_{C-1}]
// so the first `extra` columns of W1 are the ones that read T.

#include <cstddef>
#include <string>
#include <vector>

#include "rattn/layers.hpp"

namespace rattn {

/// Excitation bottleneck width: floor(channels / reduction), at least 1.
std::size_t excitation_hidden(std::size_t channels, std::size_t reduction);

template <typename T>
struct ExcitationParams {
  Tensor<T> w1;  // (hidden, 1, 1, extra + channels)
  Tensor<T> b1;  // (hidden, 1, 1, 1)
  Tensor<T> w2;  // (channels, 1, 1, hidden)
  Tensor<T> b2;  // (channels, 1, 1, 1)

  /// Zero-filled parameters for a block with `channels` channels and `extra` result inputs.
  static ExcitationParams zeros(std::size_t channels, std::size_t extra, std::size_t reduction);

  std::size_t channels() const { return w2.n(); }
  std::size_t hidden() const { return w1.n(); }
  std::size_t input_width() const { return w1.c(); }
};

template <typename T>
Tensor<T> squeeze(const FeatureMap<T>& u);

/// Concatenates the auxiliary result (leading) with the squeezed descriptor.
template <typename T>
Tensor<T> concat_result(const Tensor<T>& result, const Tensor<T>& z);

/// s = sigmoid(W2 relu(W1 z_in + b1) + b2).
template <typename T>
Tensor<T> excite(const Tensor<T>& z_in, const ExcitationParams<T>& p);

template <typename T>
FeatureMap<T> rescale(const FeatureMap<T>& u, const Tensor<T>& s);

template <typename T>
FeatureMap<T> se_block_forward(const FeatureMap<T>& u, const ExcitationParams<T>& p);

template <typename T>
FeatureMap<T> se_r_block_forward(const FeatureMap<T>& u, const Tensor<T>& result, const ExcitationParams<T>& p);

/// Trainable SE / SE-R unit. With extra == 0 it is a plain SE unit.
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(const std::string& name, std::size_t channels, std::size_t extra, std::size_t reduction);

  /// Linear layers use fan-in uniform init; the sigmoid-side bias starts at zero.
  void init(Rng& rng);

  /// `result` must be non-null exactly when extra() > 0.
  FeatureMap<T> forward(const FeatureMap<T>& u, const Tensor<T>* result, const Pass& pass);

  struct Grads {
    FeatureMap<T> du;
    Tensor<T> dresult;  // empty when extra() == 0
  };
  Grads backward(const FeatureMap<T>& dy);

  void collect(std::vector<Param<T>*>& out);
  void costs(const Shape& in, std::vector<LayerCost>& rows) const;

  ExcitationParams<T> params() const;
  void set_params(const ExcitationParams<T>& p);

  /// Attention weights s from the most recent forward, shape (n, 1, 1, channels).
  const Tensor<T>& weights() const { return s_; }

  std::size_t channels() const { return channels_; }
  std::size_t extra() const { return extra_; }
  const std::string& name() const { return name_; }

  Linear<T> fc1;
  Linear<T> fc2;

 private:
  std::string name_;
  std::size_t channels_ = 0;
  std::size_t extra_ = 0;
  FeatureMap<T> u_;
  Tensor<T> hidden_;  // post-ReLU
  Tensor<T> s_;
};

}  // namespace rattn
