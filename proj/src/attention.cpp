#include "rattn/attention.hpp"

#include <algorithm>

namespace rattn {

std::size_t excitation_hidden(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("reduction ratio must be positive");
  return std::max<std::size_t>(1, channels / reduction);
}

template <typename T>
ExcitationParams<T> ExcitationParams<T>::zeros(std::size_t channels, std::size_t extra, std::size_t reduction) {
  const std::size_t hidden = excitation_hidden(channels, reduction);
  return {Tensor<T>({hidden, 1, 1, extra + channels}), Tensor<T>({hidden, 1, 1, 1}),
          Tensor<T>({channels, 1, 1, hidden}), Tensor<T>({channels, 1, 1, 1})};
}

template <typename T>
Tensor<T> squeeze(const FeatureMap<T>& u) {
  Tensor<T> z;
  kernels::global_avg_pool_forward<T>(u, z);
  return z;
}

template <typename T>
Tensor<T> concat_result(const Tensor<T>& result, const Tensor<T>& z) {
  const std::size_t N = z.n(), C = z.size() / std::max<std::size_t>(N, 1);
  const std::size_t n = result.size() == 0 ? 0 : result.size() / N;
  if (result.size() != 0 && (result.n() != N || result.size() != N * n)) {
    throw InvalidInput("concat_result: result " + to_string(result.shape()) + " vs descriptor " +
                       to_string(z.shape()));
  }
  Tensor<T> out(vec_shape(N, n + C));
  for (std::size_t b = 0; b < N; ++b) {
    std::copy_n(result.data() + b * n, n, out.data() + b * (n + C));
    std::copy_n(z.data() + b * C, C, out.data() + b * (n + C) + n);
  }
  return out;
}

template <typename T>
Tensor<T> excite(const Tensor<T>& z_in, const ExcitationParams<T>& p) {
  const std::size_t N = z_in.n();
  if (z_in.size() != N * p.input_width()) {
    throw InvalidInput("excite: descriptor width " + std::to_string(z_in.size() / std::max<std::size_t>(N, 1)) +
                       " does not match W1 width " + std::to_string(p.input_width()));
  }
  Tensor<T> a, h, g, s;
  kernels::linear_forward<T>(z_in, p.w1, p.b1.span(), a);
  kernels::relu_forward<T>(a, h);
  kernels::linear_forward<T>(h, p.w2, p.b2.span(), g);
  kernels::sigmoid_forward<T>(g, s);
  return s;
}

template <typename T>
FeatureMap<T> rescale(const FeatureMap<T>& u, const Tensor<T>& s) {
  FeatureMap<T> y;
  kernels::channel_scale_forward<T>(u, s, y);
  return y;
}

template <typename T>
FeatureMap<T> se_block_forward(const FeatureMap<T>& u, const ExcitationParams<T>& p) {
  return rescale(u, excite(squeeze(u), p));
}

template <typename T>
FeatureMap<T> se_r_block_forward(const FeatureMap<T>& u, const Tensor<T>& result, const ExcitationParams<T>& p) {
  return rescale(u, excite(concat_result(result, squeeze(u)), p));
}

template <typename T>
ChannelAttention<T>::ChannelAttention(const std::string& name, std::size_t channels, std::size_t extra,
                                      std::size_t reduction)
    : fc1(name + ".fc1", extra + channels, excitation_hidden(channels, reduction)),
      fc2(name + ".fc2", excitation_hidden(channels, reduction), channels),
      name_(name),
      channels_(channels),
      extra_(extra) {}

template <typename T>
void ChannelAttention<T>::init(Rng& rng) {
  fc1.init(rng);
  fc2.init(rng);
  fc2.bias.value.fill(T{0});
}

template <typename T>
FeatureMap<T> ChannelAttention<T>::forward(const FeatureMap<T>& u, const Tensor<T>* result, const Pass& pass) {
  if (u.c() != channels_) {
    throw InvalidInput(name_ + ": expected " + std::to_string(channels_) + " channels, got " + to_string(u.shape()));
  }
  if ((extra_ > 0) != (result != nullptr) || (result != nullptr && result->size() != u.n() * extra_)) {
    throw InvalidInput(name_ + ": expected an auxiliary result of width " + std::to_string(extra_));
  }
  Tensor<T> z = squeeze(u);
  if (result != nullptr) z = concat_result(*result, z);
  Tensor<T> a = fc1.forward(z, pass);
  Tensor<T> h;
  kernels::relu_forward<T>(a, h);
  Tensor<T> g = fc2.forward(h, pass);
  kernels::sigmoid_forward<T>(g, s_);
  if (pass.record) {
    u_ = u;
    hidden_ = std::move(h);
  }
  return rescale(u, s_);
}

template <typename T>
typename ChannelAttention<T>::Grads ChannelAttention<T>::backward(const FeatureMap<T>& dy) {
  if (u_.empty()) throw InvalidInput(name_ + ": backward without a recorded forward");
  Grads grads;
  Tensor<T> ds, dg, dh, da;
  kernels::channel_scale_backward<T>(u_, s_, dy, grads.du, ds);
  kernels::sigmoid_backward<T>(s_, ds, dg);
  dh = fc2.backward(dg);
  kernels::relu_backward<T>(hidden_, dh, da);
  Tensor<T> dz = fc1.backward(da);
  // Split the descriptor gradient into the result slice and the squeezed slice.
  const std::size_t N = u_.n(), C = channels_, n = extra_;
  Tensor<T> dsq(vec_shape(N, C));
  if (n > 0) grads.dresult = Tensor<T>(vec_shape(N, n));
  for (std::size_t b = 0; b < N; ++b) {
    std::copy_n(dz.data() + b * (n + C), n, grads.dresult.data() + b * n);
    std::copy_n(dz.data() + b * (n + C) + n, C, dsq.data() + b * C);
  }
  Tensor<T> du_squeeze;
  kernels::global_avg_pool_backward<T>(dsq, u_.shape(), du_squeeze);
  kernels::accumulate<T>(grads.du, du_squeeze);
  u_ = FeatureMap<T>();
  hidden_ = Tensor<T>();
  return grads;
}

template <typename T>
void ChannelAttention<T>::collect(std::vector<Param<T>*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

template <typename T>
void ChannelAttention<T>::costs(const Shape& in, std::vector<LayerCost>& rows) const {
  rows.push_back({name_ + ".squeeze", "pool", 0, 0});
  rows.push_back(fc1.cost(in.n));
  rows.push_back(fc2.cost(in.n));
  rows.push_back({name_ + ".scale", "scale", 0, 0});
}

template <typename T>
ExcitationParams<T> ChannelAttention<T>::params() const {
  return {fc1.weight.value, fc1.bias.value, fc2.weight.value, fc2.bias.value};
}

template <typename T>
void ChannelAttention<T>::set_params(const ExcitationParams<T>& p) {
  if (!(p.w1.shape() == fc1.weight.value.shape()) || !(p.w2.shape() == fc2.weight.value.shape()) ||
      p.b1.size() != fc1.bias.value.size() || p.b2.size() != fc2.bias.value.size()) {
    throw InvalidInput(name_ + ": excitation parameter shapes do not match");
  }
  fc1.weight.value = p.w1;
  fc1.bias.value = Tensor<T>(fc1.bias.value.shape(), p.b1.values());
  fc2.weight.value = p.w2;
  fc2.bias.value = Tensor<T>(fc2.bias.value.shape(), p.b2.values());
}

#define RATTN_INSTANTIATE(T)                                                                         \
  template struct ExcitationParams<T>;                                                               \
  template Tensor<T> squeeze<T>(const FeatureMap<T>&);                                               \
  template Tensor<T> concat_result<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> excite<T>(const Tensor<T>&, const ExcitationParams<T>&);                        \
  template FeatureMap<T> rescale<T>(const FeatureMap<T>&, const Tensor<T>&);                         \
  template FeatureMap<T> se_block_forward<T>(const FeatureMap<T>&, const ExcitationParams<T>&);      \
  template FeatureMap<T> se_r_block_forward<T>(const FeatureMap<T>&, const Tensor<T>&,               \
                                               const ExcitationParams<T>&);                          \
  template class ChannelAttention<T>;

RATTN_INSTANTIATE(float)
RATTN_INSTANTIATE(double)
#undef RATTN_INSTANTIATE

}  // namespace rattn
