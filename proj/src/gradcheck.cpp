#include "rattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rattn/attention.hpp"
#include "rattn/aux_head.hpp"

namespace rattn {

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Se: return "se";
    case BlockKind::SeR: return "se_r";
    case BlockKind::AuxHead: return "aux_head";
    case BlockKind::LinearToy: return "linear_toy";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& s) {
  if (s == "se") return BlockKind::Se;
  if (s == "se_r") return BlockKind::SeR;
  if (s == "aux_head") return BlockKind::AuxHead;
  if (s == "linear_toy") return BlockKind::LinearToy;
  throw InvalidInput("unknown block kind '" + s + "'");
}

namespace {

using Tensor64 = Tensor<double>;

struct Coordinates {
  std::string name;
  Tensor64* value;
  const Tensor64* grad;
};

double total(const Tensor64& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

void fill_normal(Tensor64& t, Rng& rng, double scale) {
  for (auto& v : t.values()) v = rng.normal() * scale;
}

// Compares each registered gradient with (f(x+eps) - f(x-eps)) / 2eps.
GradCheckResult compare(const std::vector<Coordinates>& coords, const std::function<double()>& loss, double eps) {
  GradCheckResult r;
  for (const auto& c : coords) {
    for (std::size_t i = 0; i < c.value->size(); ++i) {
      const double analytic = (*c.grad)[i];
      if (!std::isfinite(analytic)) {
        throw NumericError("gradient check: non-finite analytic gradient for " + c.name + "[" + std::to_string(i) + "]");
      }
      double& x = (*c.value)[i];
      const double saved = x;
      x = saved + eps;
      const double up = loss();
      x = saved - eps;
      const double down = loss();
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double scale = std::max({std::fabs(analytic), std::fabs(numeric), kGradCheckFloor});
      const double err = std::fabs(analytic - numeric) / scale;
      ++r.coordinates;
      if (err > r.max_relative_error || r.worst.empty()) {
        r.max_relative_error = err;
        r.worst = c.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

void add_params(std::vector<Coordinates>& coords, const std::vector<Param<double>*>& params) {
  for (auto* p : params) coords.push_back({p->name, &p->value, &p->grad});
}

GradCheckResult check_attention(const GradCheckDims& d, bool with_result, double eps, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t extra = with_result ? d.classes : 0;
  ChannelAttention<double> unit("se", d.channels, extra, d.reduction);
  std::vector<Param<double>*> params;
  unit.collect(params);
  for (auto* p : params) fill_normal(p->value, rng, 0.5);

  Tensor64 u({d.batch, d.height, d.width, d.channels});
  fill_normal(u, rng, 1.0);
  Tensor64 result;
  if (with_result) {
    result = Tensor64(vec_shape(d.batch, extra));
    fill_normal(result, rng, 1.0);
  }
  const Tensor64* rp = with_result ? &result : nullptr;

  Tensor64 y = unit.forward(u, rp, Pass::train(seed));
  auto grads = unit.backward(Tensor64(y.shape(), 1.0));

  std::vector<Coordinates> coords;
  add_params(coords, params);
  coords.push_back({"U", &u, &grads.du});
  if (with_result) coords.push_back({"T", &result, &grads.dresult});
  return compare(coords, [&] { return total(unit.forward(u, rp, Pass::eval())); }, eps);
}

GradCheckResult check_aux_head(const GradCheckDims& d, double eps, std::uint64_t seed) {
  Rng rng(seed);
  AuxHeadGeometry g;
  g.pool_h = 2;
  g.pool_w = 2;
  g.conv_channels = 8;
  g.hidden = 16;
  g.dropout = 0.7;
  AuxHead<double> head("aux", d.channels, d.classes, g);
  std::vector<Param<double>*> params;
  head.collect(params);
  for (auto* p : params) fill_normal(p->value, rng, 0.5);

  Tensor64 u({d.batch, d.height, d.width, d.channels});
  fill_normal(u, rng, 1.0);
  // Dropout stays on; the mask is a function of the pass seed, so every
  // perturbed forward sees the same mask as the recorded one.
  const Pass pass = Pass::train(seed);
  const Pass replay{true, false, seed};
  Tensor64 y = head.forward(u, pass);
  Tensor64 du = head.backward(Tensor64(y.shape(), 1.0));

  std::vector<Coordinates> coords;
  add_params(coords, params);
  coords.push_back({"U", &u, &du});
  return compare(coords, [&] { return total(head.forward(u, replay)); }, eps);
}

// Linear -> ReLU -> Linear with every pre-activation kept >= 0.5, so the
// loss is smooth (bilinear) around the evaluation point.
GradCheckResult check_linear_toy(const GradCheckDims& d, double eps, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t in = d.channels, hidden = d.classes + 1, out = d.classes;
  Linear<double> fc1("fc1", in, hidden), fc2("fc2", hidden, out);
  for (auto& v : fc1.weight.value.values()) v = rng.uniform(0.1, 1.0);
  for (auto& v : fc1.bias.value.values()) v = rng.uniform(0.5, 1.0);
  fc2.init(rng);
  Tensor64 x(vec_shape(d.batch, in));
  for (auto& v : x.values()) v = rng.uniform(0.1, 1.0);

  auto run = [&](const Pass& pass) {
    Tensor64 h;
    kernels::relu_forward<double>(fc1.forward(x, pass), h);
    return std::make_pair(fc2.forward(h, pass), h);
  };
  auto [y, h] = run(Pass::train(seed));
  Tensor64 dh = fc2.backward(Tensor64(y.shape(), 1.0));
  Tensor64 dhr;
  kernels::relu_backward<double>(h, dh, dhr);
  Tensor64 dx = fc1.backward(dhr);

  std::vector<Coordinates> coords;
  std::vector<Param<double>*> params;
  fc1.collect(params);
  fc2.collect(params);
  add_params(coords, params);
  coords.push_back({"x", &x, &dx});
  return compare(coords, [&] { return total(run(Pass::eval()).first); }, eps);
}

}  // namespace

GradCheckResult gradient_check_detailed(BlockKind kind, const GradCheckDims& dims, double epsilon,
                                        std::uint64_t seed) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw InvalidInput("gradient check: epsilon " + std::to_string(epsilon) + " outside [1e-6, 1e-3]");
  }
  if (dims.channels == 0 || dims.channels > 8 || dims.height == 0 || dims.height > 4 || dims.width == 0 ||
      dims.width > 4 || dims.classes == 0 || dims.classes > 4 || dims.batch == 0 || dims.batch > 4 ||
      dims.reduction == 0) {
    throw InvalidInput("gradient check: dims outside the toy range (C<=8, H,W<=4, n<=4, batch<=4)");
  }
  switch (kind) {
    case BlockKind::Se: return check_attention(dims, false, epsilon, seed);
    case BlockKind::SeR: return check_attention(dims, true, epsilon, seed);
    case BlockKind::AuxHead: return check_aux_head(dims, epsilon, seed);
    case BlockKind::LinearToy: return check_linear_toy(dims, epsilon, seed);
  }
  throw InvalidInput("gradient check: unknown block kind");
}

double gradient_check(BlockKind kind, const GradCheckDims& dims, double epsilon) {
  return gradient_check_detailed(kind, dims, epsilon).max_relative_error;
}

}  // namespace rattn
