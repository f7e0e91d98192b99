#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rattn/kernels.hpp"
#include "rattn/rng.hpp"
#include "rattn/tensor.hpp"

namespace rattn {

/// How a forward pass runs. `record` keeps whatever backward needs; `seed`
/// drives dropout masks so a pass is a pure function of (input, weights, pass).
struct Pass {
  bool training = false;
  bool record = false;
  std::uint64_t seed = 0;

  static Pass train(std::uint64_t seed) { return {true, true, seed}; }
  static Pass eval() { return {false, false, 0}; }
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool is_norm = false;  // batch-norm scale/shift

  Param() = default;
  Param(std::string n, Shape s, bool norm = false) : name(std::move(n)), value(s), grad(s), is_norm(norm) {}
  void zero_grad() { grad.fill(T{0}); }
};

/// Non-trainable state that still belongs in a checkpoint (batch-norm running statistics).
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

/// One row of an accounting report.
struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, kernels::ConvGeometry g, bool bias);

  /// He-normal fan-in weights, zero bias.
  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, const Pass& pass);
  /// Accumulates parameter gradients; returns dx when `need_input_grad`.
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true);

  void collect(std::vector<Param<T>*>& out);
  LayerCost cost(const Shape& in, Shape& out) const;
  const kernels::ConvGeometry& geometry() const { return geometry_; }

  Param<T> weight;
  Param<T> bias;

 private:
  kernels::ConvGeometry geometry_;
  bool has_bias_ = false;
  Tensor<T> input_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, const Pass& pass);
  Tensor<T> backward(const Tensor<T>& dy);

  /// Normalized input from the last recorded pass.
  const Tensor<T>& xhat() const { return xhat_; }

  void collect(std::vector<Param<T>*>& out);
  void collect_buffers(std::vector<NamedTensor<T>>& out);
  LayerCost cost(const Shape& in) const;

  Param<T> gamma;
  Param<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  std::string name_;
  Tensor<T> xhat_;
  std::vector<T> invstd_;
  bool trained_pass_ = false;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out);

  /// Uniform(+-1/sqrt(fan_in)) for weight and bias.
  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, const Pass& pass);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true);

  void collect(std::vector<Param<T>*>& out);
  LayerCost cost(std::size_t batch = 1) const;
  std::size_t in_features() const { return weight.value.c(); }
  std::size_t out_features() const { return weight.value.n(); }

  Param<T> weight;
  Param<T> bias;

 private:
  Tensor<T> input_;
};

/// Convolution, batch norm and an optional ReLU. The ReLU mask is recomputed
/// from the batch-norm cache, so only the conv input and xhat are kept.
template <typename T>
class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(const std::string& name, kernels::ConvGeometry g, bool relu);

  void init(Rng& rng) { conv.init(rng); }
  Tensor<T> forward(const Tensor<T>& x, const Pass& pass);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true);

  void collect(std::vector<Param<T>*>& out);
  void collect_buffers(std::vector<NamedTensor<T>>& out);
  void costs(Shape& shape, std::vector<LayerCost>& rows) const;

  Conv2d<T> conv;
  BatchNorm2d<T> bn;

 private:
  bool relu_ = true;
};

}  // namespace rattn
