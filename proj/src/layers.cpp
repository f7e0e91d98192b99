#include "rattn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace rattn {

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, kernels::ConvGeometry g, bool bias)
    : weight(name + ".weight", {g.out_channels, g.kernel, g.kernel, g.in_channels}),
      bias(name + ".bias", {bias ? g.out_channels : 0, 1, 1, 1}),
      geometry_(g),
      has_bias_(bias) {}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(geometry_.in_channels * geometry_.kernel * geometry_.kernel);
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : weight.value.values()) v = static_cast<T>(rng.normal() * std);
  bias.value.fill(T{0});
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, const Pass& pass) {
  Tensor<T> y;
  kernels::conv2d_forward<T>(x, weight.value, bias.value.span(), geometry_, y);
  if (pass.record) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (input_.empty()) throw InvalidInput(weight.name + ": backward without a recorded forward");
  Tensor<T> dx;
  kernels::conv2d_backward<T>(input_, weight.value, dy, geometry_, need_input_grad ? &dx : nullptr,
                              weight.grad, bias.grad.span());
  input_ = Tensor<T>();
  return dx;
}

template <typename T>
void Conv2d<T>::collect(std::vector<Param<T>*>& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

template <typename T>
LayerCost Conv2d<T>::cost(const Shape& in, Shape& out) const {
  if (in.c != geometry_.in_channels || !geometry_.fits(in.h) || !geometry_.fits(in.w)) {
    throw InvalidInput(weight.name + ": incompatible input " + to_string(in));
  }
  out = {in.n, geometry_.out_extent(in.h), geometry_.out_extent(in.w), geometry_.out_channels};
  const std::string name = weight.name.substr(0, weight.name.size() - std::string(".weight").size());
  return {name, "conv", weight.value.size() + bias.value.size(),
          static_cast<std::uint64_t>(geometry_.kernel * geometry_.kernel * geometry_.in_channels) * out.size()};
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const std::string& name, std::size_t channels)
    : gamma(name + ".weight", {channels, 1, 1, 1}, true),
      beta(name + ".bias", {channels, 1, 1, 1}, true),
      running_mean({channels, 1, 1, 1}, T{0}),
      running_var({channels, 1, 1, 1}, T{1}),
      name_(name) {
  gamma.value.fill(T{1});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, const Pass& pass) {
  const std::size_t C = gamma.value.size();
  if (x.c() != C) throw InvalidInput(name_ + ": expected " + std::to_string(C) + " channels, got " + to_string(x.shape()));
  Tensor<T> y;
  if (pass.training) {
    std::vector<T> mean(C), var(C);
    kernels::batchnorm_forward_train<T>(x, gamma.value.span(), beta.value.span(), eps, y, xhat_, mean, var);
    const double count = static_cast<double>(x.n() * x.h() * x.w());
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    invstd_.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mean[c]);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * var[c] * unbias);
      invstd_[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
    }
    trained_pass_ = true;
    if (!pass.record) xhat_ = Tensor<T>();
  } else {
    kernels::batchnorm_forward_eval<T>(x, gamma.value.span(), beta.value.span(), running_mean.span(),
                                       running_var.span(), eps, y);
    trained_pass_ = false;
    if (pass.record) {
      invstd_.resize(C);
      for (std::size_t c = 0; c < C; ++c) {
        invstd_[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
      }
      xhat_ = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t c = i % C;
        xhat_[i] = (x[i] - running_mean[c]) * invstd_[c];
      }
    } else {
      xhat_ = Tensor<T>();
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy) {
  if (xhat_.empty()) throw InvalidInput(name_ + ": backward without a recorded forward");
  Tensor<T> dx;
  if (trained_pass_) {
    kernels::batchnorm_backward_train<T>(dy, xhat_, gamma.value.span(), invstd_, dx, gamma.grad.span(),
                                         beta.grad.span());
  } else {
    const std::size_t C = dy.c();
    dx = Tensor<T>(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const std::size_t c = i % C;
      gamma.grad[c] += dy[i] * xhat_[i];
      beta.grad[c] += dy[i];
      dx[i] = dy[i] * gamma.value[c] * invstd_[c];
    }
  }
  xhat_ = Tensor<T>();
  return dx;
}

template <typename T>
void BatchNorm2d<T>::collect(std::vector<Param<T>*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(std::vector<NamedTensor<T>>& out) {
  out.push_back({name_ + ".running_mean", &running_mean});
  out.push_back({name_ + ".running_var", &running_var});
}

template <typename T>
LayerCost BatchNorm2d<T>::cost(const Shape&) const {
  return {name_, "batchnorm", gamma.value.size() + beta.value.size(), 0};
}

template <typename T>
Linear<T>::Linear(const std::string& name, std::size_t in, std::size_t out)
    : weight(name + ".weight", {out, 1, 1, in}), bias(name + ".bias", {out, 1, 1, 1}) {}

template <typename T>
void Linear<T>::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
  for (auto& v : weight.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : bias.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, const Pass& pass) {
  Tensor<T> y;
  kernels::linear_forward<T>(x, weight.value, bias.value.span(), y);
  if (pass.record) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (input_.empty() && input_.n() == 0) throw InvalidInput(weight.name + ": backward without a recorded forward");
  Tensor<T> dx;
  kernels::linear_backward<T>(input_, weight.value, dy, need_input_grad ? &dx : nullptr, weight.grad,
                              bias.grad.span());
  input_ = Tensor<T>();
  return dx;
}

template <typename T>
void Linear<T>::collect(std::vector<Param<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
LayerCost Linear<T>::cost(std::size_t batch) const {
  const std::string name = weight.name.substr(0, weight.name.size() - std::string(".weight").size());
  return {name, "linear", weight.value.size() + bias.value.size(),
          static_cast<std::uint64_t>(in_features() * out_features() * batch)};
}

template <typename T>
ConvBnAct<T>::ConvBnAct(const std::string& name, kernels::ConvGeometry g, bool relu)
    : conv(name + ".conv", g, true), bn(name + ".bn", g.out_channels), relu_(relu) {}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x, const Pass& pass) {
  Tensor<T> y = bn.forward(conv.forward(x, pass), pass);
  if (relu_) {
    T* p = y.data();
    const std::size_t n = y.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > T{0} ? p[i] : T{0};
  }
  return y;
}

template <typename T>
Tensor<T> ConvBnAct<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (!relu_) return conv.backward(bn.backward(dy), need_input_grad);
  Tensor<T> masked(dy.shape());
  const Tensor<T>& xh = bn.xhat();
  if (!(xh.shape() == dy.shape())) throw InvalidInput(bn.gamma.name + ": backward shape mismatch");
  const std::size_t C = dy.c(), R = dy.size() / std::max<std::size_t>(C, 1);
  const T* g = bn.gamma.value.data();
  const T* s = bn.beta.value.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      masked[i] = (g[c] * xh[i] + s[c]) > T{0} ? dy[i] : T{0};
    }
  }
  return conv.backward(bn.backward(masked), need_input_grad);
}

template <typename T>
void ConvBnAct<T>::collect(std::vector<Param<T>*>& out) {
  conv.collect(out);
  bn.collect(out);
}

template <typename T>
void ConvBnAct<T>::collect_buffers(std::vector<NamedTensor<T>>& out) {
  bn.collect_buffers(out);
}

template <typename T>
void ConvBnAct<T>::costs(Shape& shape, std::vector<LayerCost>& rows) const {
  Shape out;
  rows.push_back(conv.cost(shape, out));
  rows.push_back(bn.cost(out));
  shape = out;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Linear<float>;
template class Linear<double>;
template class ConvBnAct<float>;
template class ConvBnAct<double>;

}  // namespace rattn
