#include <cmath>

#include "rattn/kernels.hpp"

namespace rattn::kernels::reference {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Transpose::No ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Transpose::No ? b[p * ldb + j] : b[j * ldb + p];
        acc += static_cast<double>(av) * bv;
      }
      c[i * ldc + j] = static_cast<T>(alpha * acc + (beta == T{0} ? T{0} : beta * c[i * ldc + j]));
    }
  }
}

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                    const ConvGeometry& g, Tensor<T>& y) {
  const std::size_t oh = g.out_extent(x.h()), ow = g.out_extent(x.w());
  const auto H = static_cast<std::ptrdiff_t>(x.h()), W = static_cast<std::ptrdiff_t>(x.w());
  y = Tensor<T>({x.n(), oh, ow, g.out_channels});
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kh = 0; kh < g.kernel; ++kh)
              for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
                const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
                if (ih < 0 || iw < 0 || ih >= H || iw >= W) continue;
                acc += static_cast<double>(weight(o, kh, kw, ci)) * x(b, ih, iw, ci);
              }
          y(b, i, j, o) = static_cast<T>(acc);
        }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>& dweight, std::span<T> dbias) {
  const std::size_t oh = dy.h(), ow = dy.w();
  const auto H = static_cast<std::ptrdiff_t>(x.h()), W = static_cast<std::ptrdiff_t>(x.w());
  if (dx != nullptr) *dx = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const T gy = dy(b, i, j, o);
          if (!dbias.empty()) dbias[o] += gy;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kh = 0; kh < g.kernel; ++kh)
              for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
                const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
                if (ih < 0 || iw < 0 || ih >= H || iw >= W) continue;
                dweight(o, kh, kw, ci) += gy * x(b, ih, iw, ci);
                if (dx != nullptr) (*dx)(b, ih, iw, ci) += gy * weight(o, kh, kw, ci);
              }
        }
}

template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, Tensor<T>& y) {
  const std::size_t N = x.n(), I = weight.c(), O = weight.n();
  y = Tensor<T>(vec_shape(N, O));
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < I; ++i) acc += static_cast<double>(weight[o * I + i]) * x[b * I + i];
      y[b * O + o] = static_cast<T>(acc);
    }
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, std::span<T> dbias) {
  const std::size_t N = x.n(), I = weight.c(), O = weight.n();
  if (dx != nullptr) *dx = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const T g = dy[b * O + o];
      if (!dbias.empty()) dbias[o] += g;
      for (std::size_t i = 0; i < I; ++i) {
        dweight[o * I + i] += g * x[b * I + i];
        if (dx != nullptr) (*dx)[b * I + i] += g * weight[o * I + i];
      }
    }
}

template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             double eps, Tensor<T>& y, Tensor<T>& xhat, std::span<T> mean,
                             std::span<T> var) {
  y = Tensor<T>(x.shape());
  xhat = Tensor<T>(x.shape());
  const double count = static_cast<double>(x.n() * x.h() * x.w());
  for (std::size_t c = 0; c < x.c(); ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < x.n(); ++b)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) sum += x(b, i, j, c);
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t b = 0; b < x.n(); ++b)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) sq += (x(b, i, j, c) - mu) * (x(b, i, j, c) - mu);
    const double v = sq / count;
    mean[c] = static_cast<T>(mu);
    var[c] = static_cast<T>(v);
    for (std::size_t b = 0; b < x.n(); ++b)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) {
          xhat(b, i, j, c) = static_cast<T>((x(b, i, j, c) - mu) / std::sqrt(v + eps));
          y(b, i, j, c) = gamma[c] * xhat(b, i, j, c) + beta[c];
        }
  }
}

template <typename T>
void batchnorm_backward_train(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma,
                              std::span<const T> invstd, Tensor<T>& dx, std::span<T> dgamma,
                              std::span<T> dbeta) {
  dx = Tensor<T>(dy.shape());
  const double count = static_cast<double>(dy.n() * dy.h() * dy.w());
  for (std::size_t c = 0; c < dy.c(); ++c) {
    double db = 0.0, dg = 0.0;
    for (std::size_t b = 0; b < dy.n(); ++b)
      for (std::size_t i = 0; i < dy.h(); ++i)
        for (std::size_t j = 0; j < dy.w(); ++j) {
          db += dy(b, i, j, c);
          dg += static_cast<double>(dy(b, i, j, c)) * xhat(b, i, j, c);
        }
    dbeta[c] += static_cast<T>(db);
    dgamma[c] += static_cast<T>(dg);
    for (std::size_t b = 0; b < dy.n(); ++b)
      for (std::size_t i = 0; i < dy.h(); ++i)
        for (std::size_t j = 0; j < dy.w(); ++j) {
          const double mean_term = db / count + xhat(b, i, j, c) * dg / count;
          dx(b, i, j, c) = static_cast<T>(gamma[c] * invstd[c] * (dy(b, i, j, c) - mean_term));
        }
  }
}

template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y) {
  if (x.h() * x.w() == 0) throw InvalidInput("global average pool: empty spatial extent");
  y = Tensor<T>(vec_shape(x.n(), x.c()));
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t c = 0; c < x.c(); ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) acc += x(b, i, j, c);
      y[b * x.c() + c] = static_cast<T>(acc / static_cast<double>(x.h() * x.w()));
    }
}

template <typename T>
void adaptive_avg_pool_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, Tensor<T>& y) {
  y = Tensor<T>({x.n(), out_h, out_w, x.c()});
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto h0 = static_cast<std::size_t>(std::floor(double(i) * x.h() / out_h));
          const auto h1 = static_cast<std::size_t>(std::ceil(double(i + 1) * x.h() / out_h));
          const auto w0 = static_cast<std::size_t>(std::floor(double(j) * x.w() / out_w));
          const auto w1 = static_cast<std::size_t>(std::ceil(double(j + 1) * x.w() / out_w));
          double acc = 0.0;
          for (std::size_t r = h0; r < h1; ++r)
            for (std::size_t s = w0; s < w1; ++s) acc += x(b, r, s, c);
          y(b, i, j, c) = static_cast<T>(acc / static_cast<double>((h1 - h0) * (w1 - w0)));
        }
}

template <typename T>
void channel_scale_forward(const Tensor<T>& u, const Tensor<T>& s, Tensor<T>& y) {
  y = Tensor<T>(u.shape());
  for (std::size_t b = 0; b < u.n(); ++b)
    for (std::size_t c = 0; c < u.c(); ++c)
      for (std::size_t i = 0; i < u.h(); ++i)
        for (std::size_t j = 0; j < u.w(); ++j) y(b, i, j, c) = s[b * u.c() + c] * u(b, i, j, c);
}

template <typename T>
void channel_scale_backward(const Tensor<T>& u, const Tensor<T>& s, const Tensor<T>& dy, Tensor<T>& du,
                            Tensor<T>& ds) {
  du = Tensor<T>(u.shape());
  ds = Tensor<T>(vec_shape(u.n(), u.c()));
  for (std::size_t b = 0; b < u.n(); ++b)
    for (std::size_t c = 0; c < u.c(); ++c)
      for (std::size_t i = 0; i < u.h(); ++i)
        for (std::size_t j = 0; j < u.w(); ++j) {
          du(b, i, j, c) = s[b * u.c() + c] * dy(b, i, j, c);
          ds[b * u.c() + c] += dy(b, i, j, c) * u(b, i, j, c);
        }
}

#define RATTN_INSTANTIATE(T)                                                                              \
  template void gemm<T>(Transpose, Transpose, std::size_t, std::size_t, std::size_t, T, const T*,         \
                        std::size_t, const T*, std::size_t, T, T*, std::size_t);                          \
  template void conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,                 \
                                  const ConvGeometry&, Tensor<T>&);                                       \
  template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                   const ConvGeometry&, Tensor<T>*, Tensor<T>&, std::span<T>);            \
  template void linear_forward<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>, Tensor<T>&);    \
  template void linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,      \
                                   Tensor<T>&, std::span<T>);                                             \
  template void batchnorm_forward_train<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,      \
                                           double, Tensor<T>&, Tensor<T>&, std::span<T>, std::span<T>);   \
  template void batchnorm_backward_train<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,       \
                                            std::span<const T>, Tensor<T>&, std::span<T>, std::span<T>);  \
  template void global_avg_pool_forward<T>(const Tensor<T>&, Tensor<T>&);                                 \
  template void adaptive_avg_pool_forward<T>(const Tensor<T>&, std::size_t, std::size_t, Tensor<T>&);     \
  template void channel_scale_forward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                 \
  template void channel_scale_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                          Tensor<T>&, Tensor<T>&);

RATTN_INSTANTIATE(float)
RATTN_INSTANTIATE(double)
#undef RATTN_INSTANTIATE

}  // namespace rattn::kernels::reference
