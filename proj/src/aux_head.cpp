#include "rattn/aux_head.hpp"

namespace rattn {

std::uint64_t aux_head_param_count(std::size_t in_channels, std::size_t classes, const AuxHeadGeometry& g) {
  const std::uint64_t conv = in_channels * g.conv_channels + g.conv_channels;
  const std::uint64_t fc1 = g.flat_features() * g.hidden + g.hidden;
  const std::uint64_t fc2 = g.hidden * classes + classes;
  return conv + fc1 + fc2;
}

template <typename T>
AuxHeadParams<T> AuxHeadParams<T>::zeros(std::size_t in_channels, std::size_t classes, const AuxHeadGeometry& g) {
  return {g,
          Tensor<T>({g.conv_channels, 1, 1, in_channels}),
          Tensor<T>({g.conv_channels, 1, 1, 1}),
          Tensor<T>({g.hidden, 1, 1, g.flat_features()}),
          Tensor<T>({g.hidden, 1, 1, 1}),
          Tensor<T>({classes, 1, 1, g.hidden}),
          Tensor<T>({classes, 1, 1, 1})};
}

template <typename T>
AuxHead<T>::AuxHead(const std::string& name, std::size_t in_channels, std::size_t classes, const AuxHeadGeometry& g)
    : conv(name + ".conv", kernels::ConvGeometry{in_channels, g.conv_channels, 1, 1, 0}, true),
      fc1(name + ".fc1", g.flat_features(), g.hidden),
      fc2(name + ".fc2", g.hidden, classes),
      name_(name),
      geometry_(g) {
  if (g.dropout < 0.0 || g.dropout >= 1.0) throw ConfigError(name + ": dropout must be in [0, 1)");
}

template <typename T>
void AuxHead<T>::init(Rng& rng) {
  conv.init(rng);
  fc1.init(rng);
  fc2.init(rng);
}

template <typename T>
Tensor<T> AuxHead<T>::forward(const FeatureMap<T>& u, const Pass& pass) {
  if (u.c() != conv.geometry().in_channels) {
    throw InvalidInput(name_ + ": expected " + std::to_string(conv.geometry().in_channels) + " channels, got " +
                       to_string(u.shape()));
  }
  Tensor<T> pooled, c, flat, h, d;
  kernels::adaptive_avg_pool_forward<T>(u, geometry_.pool_h, geometry_.pool_w, pooled);
  kernels::relu_forward<T>(conv.forward(pooled, pass), c);
  flat = c;
  flat.reshape(vec_shape(u.n(), geometry_.flat_features()));
  kernels::relu_forward<T>(fc1.forward(flat, pass), h);
  dropout_active_ = pass.training && geometry_.dropout > 0.0;
  dropout_seed_ = pass.seed;
  if (dropout_active_) {
    kernels::dropout_forward<T>(h, geometry_.dropout, dropout_seed_, d);
  } else {
    d = h;
  }
  Tensor<T> logits = fc2.forward(d, pass);
  if (pass.record) {
    input_shape_ = u.shape();
    conv_out_ = std::move(c);
    hidden_ = std::move(h);
  }
  return logits;
}

template <typename T>
FeatureMap<T> AuxHead<T>::backward(const Tensor<T>& dlogits) {
  if (hidden_.empty()) throw InvalidInput(name_ + ": backward without a recorded forward");
  Tensor<T> dd = fc2.backward(dlogits);
  Tensor<T> dh, dhr, dc, dcr, dpooled, du;
  if (dropout_active_) {
    kernels::dropout_backward<T>(dd, geometry_.dropout, dropout_seed_, dh);
  } else {
    dh = std::move(dd);
  }
  kernels::relu_backward<T>(hidden_, dh, dhr);
  Tensor<T> dflat = fc1.backward(dhr);
  dflat.reshape(conv_out_.shape());
  kernels::relu_backward<T>(conv_out_, dflat, dcr);
  dpooled = conv.backward(dcr);
  kernels::adaptive_avg_pool_backward<T>(dpooled, input_shape_, du);
  conv_out_ = Tensor<T>();
  hidden_ = Tensor<T>();
  return du;
}

template <typename T>
void AuxHead<T>::collect(std::vector<Param<T>*>& out) {
  conv.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

template <typename T>
void AuxHead<T>::costs(const Shape& in, std::vector<LayerCost>& rows) const {
  rows.push_back({name_ + ".pool", "pool", 0, 0});
  Shape pooled{in.n, geometry_.pool_h, geometry_.pool_w, in.c}, out;
  rows.push_back(conv.cost(pooled, out));
  rows.push_back(fc1.cost(in.n));
  rows.push_back(fc2.cost(in.n));
}

template <typename T>
AuxHeadParams<T> AuxHead<T>::params() const {
  return {geometry_,        conv.weight.value, conv.bias.value, fc1.weight.value,
          fc1.bias.value,   fc2.weight.value,  fc2.bias.value};
}

template <typename T>
void AuxHead<T>::set_params(const AuxHeadParams<T>& p) {
  auto assign = [this](Param<T>& dst, const Tensor<T>& src) {
    if (dst.value.size() != src.size()) throw InvalidInput(name_ + ": parameter " + dst.name + " has wrong size");
    dst.value = Tensor<T>(dst.value.shape(), src.values());
  };
  assign(conv.weight, p.conv_w);
  assign(conv.bias, p.conv_b);
  assign(fc1.weight, p.fc1_w);
  assign(fc1.bias, p.fc1_b);
  assign(fc2.weight, p.fc2_w);
  assign(fc2.bias, p.fc2_b);
}

template <typename T>
Tensor<T> aux_head_forward(const FeatureMap<T>& u, const AuxHeadParams<T>& p, bool training, std::uint64_t seed) {
  AuxHead<T> head("aux", p.conv_w.c(), p.fc2_w.n(), p.geometry);
  head.set_params(p);
  return head.forward(u, Pass{training, false, seed});
}

#define RATTN_INSTANTIATE(T)                                                                   \
  template struct AuxHeadParams<T>;                                                            \
  template class AuxHead<T>;                                                                   \
  template Tensor<T> aux_head_forward<T>(const FeatureMap<T>&, const AuxHeadParams<T>&, bool,  \
                                         std::uint64_t);

RATTN_INSTANTIATE(float)
RATTN_INSTANTIATE(double)
#undef RATTN_INSTANTIATE

}  // namespace rattn
