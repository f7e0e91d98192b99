#include "rattn/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rattn/rng.hpp"

namespace rattn::kernels {

namespace {

// Upper bound on im2row buffer elements; larger batches are processed in chunks.
constexpr std::size_t kRowBudget = std::size_t{1} << 23;
// Rows per partial sum in column reductions. Fixed so that the summation order,
// and therefore the result, does not depend on the thread count.
constexpr std::size_t kReduceBlock = 512;

template <typename T>
void require_same(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) throw InvalidInput(std::string(what) + ": shape " + to_string(a) + " vs " + to_string(b));
}

// out[c] = sum over rows of f(r, c), for a rows x cols matrix.
template <typename F>
void column_sums(std::size_t rows, std::size_t cols, F&& f, std::vector<double>& out) {
  const std::size_t blocks = (rows + kReduceBlock - 1) / kReduceBlock;
  std::vector<double> partial(blocks * cols, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    double* acc = partial.data() + blk * cols;
    const std::size_t r1 = std::min(rows, (blk + 1) * kReduceBlock);
    for (std::size_t r = blk * kReduceBlock; r < r1; ++r) f(r, acc);
  }
  out.assign(cols, 0.0);
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += partial[blk * cols + c];
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

// Unfold samples [b0, b0+nb) into rows of length k*k*in, one row per output pixel.
template <typename T>
void im2row(const Tensor<T>& x, std::size_t b0, std::size_t nb, const ConvGeometry& g, std::size_t oh,
            std::size_t ow, T* rows) {
  const std::size_t H = x.h(), W = x.w(), k = g.kernel, C = g.in_channels, K = k * k * C;
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      T* dst = rows + ((b * oh + i) * ow) * K;
      for (std::size_t j = 0; j < ow; ++j, dst += K) {
        for (std::size_t kh = 0; kh < k; ++kh) {
          const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t kw = 0; kw < k; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
            T* d = dst + (kh * k + kw) * C;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H) || iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) {
              std::fill(d, d + C, T{0});
            } else {
              const T* s = x.pixel(b0 + b, ih, iw);
              std::copy(s, s + C, d);
            }
          }
        }
      }
    }
  }
}

// Fold rows back into dx for samples [b0, b0+nb), overwriting those samples.
template <typename T>
void row2im(const T* rows, std::size_t b0, std::size_t nb, const ConvGeometry& g, std::size_t oh,
            std::size_t ow, Tensor<T>& dx) {
  const std::size_t H = dx.h(), W = dx.w(), k = g.kernel, C = g.in_channels, K = k * k * C;
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < nb; ++b) {
    T* sample = dx.sample(b0 + b);
    std::fill(sample, sample + H * W * C, T{0});
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const T* src = rows + ((b * oh + i) * ow + j) * K;
        for (std::size_t kh = 0; kh < k; ++kh) {
          const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const T* s = src + (kh * k + kw) * C;
            T* d = sample + (ih * W + iw) * C;
            for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeometry& g) {
  if (x.c() != g.in_channels) {
    throw InvalidInput("conv2d: input has " + std::to_string(x.c()) + " channels, expected " +
                       std::to_string(g.in_channels));
  }
  if (!(weight.shape() == Shape{g.out_channels, g.kernel, g.kernel, g.in_channels})) {
    throw InvalidInput("conv2d: weight shape " + to_string(weight.shape()));
  }
  if (!g.fits(x.h()) || !g.fits(x.w()) || g.stride == 0) {
    throw InvalidInput("conv2d: input " + to_string(x.shape()) + " too small for kernel");
  }
}

}  // namespace

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  const auto rows = [](Transpose t, std::size_t r, std::size_t c) { return static_cast<Eigen::Index>(t == Transpose::No ? r : c); };
  Eigen::Map<Matrix, 0, Stride> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n),
                                  Stride(static_cast<Eigen::Index>(ldc)));
  const Eigen::Map<const Matrix, 0, Stride> A(a, rows(ta, m, k), rows(ta, k, m), Stride(static_cast<Eigen::Index>(lda)));
  const Eigen::Map<const Matrix, 0, Stride> B(b, rows(tb, k, n), rows(tb, n, k), Stride(static_cast<Eigen::Index>(ldb)));
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  if (ta == Transpose::No && tb == Transpose::No) {
    C.noalias() += alpha * A * B;
  } else if (ta == Transpose::No) {
    C.noalias() += alpha * A * B.transpose();
  } else if (tb == Transpose::No) {
    C.noalias() += alpha * A.transpose() * B;
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

// Output pixels are GEMM rows: y[pixels x out] = rows[pixels x K] * weight^T.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                    const ConvGeometry& g, Tensor<T>& y) {
  check_conv(x, weight, g);
  const std::size_t N = x.n(), oh = g.out_extent(x.h()), ow = g.out_extent(x.w()), P = oh * ow;
  const std::size_t K = g.in_channels * g.kernel * g.kernel, O = g.out_channels;
  y = Tensor<T>({N, oh, ow, O});
  if (is_pointwise(g)) {
    gemm<T>(Transpose::No, Transpose::Yes, N * P, O, K, T{1}, x.data(), K, weight.data(), K, T{0}, y.data(), O);
  } else {
    const std::size_t chunk = std::max<std::size_t>(1, kRowBudget / (K * P));
    std::vector<T> rows;
    for (std::size_t b0 = 0; b0 < N; b0 += chunk) {
      const std::size_t nb = std::min(chunk, N - b0);
      rows.resize(nb * P * K);
      im2row(x, b0, nb, g, oh, ow, rows.data());
      gemm<T>(Transpose::No, Transpose::Yes, nb * P, O, K, T{1}, rows.data(), K, weight.data(), K, T{0},
              y.sample(b0), O);
    }
  }
  if (!bias.empty()) {
    const std::size_t R = N * P;
    T* out = y.data();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t o = 0; o < O; ++o) out[r * O + o] += bias[o];
    }
  }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>& dweight, std::span<T> dbias) {
  check_conv(x, weight, g);
  const std::size_t N = x.n(), oh = g.out_extent(x.h()), ow = g.out_extent(x.w()), P = oh * ow;
  const std::size_t K = g.in_channels * g.kernel * g.kernel, O = g.out_channels;
  require_same<T>(dy.shape(), Shape{N, oh, ow, O}, "conv2d backward dy");
  require_same<T>(dweight.shape(), weight.shape(), "conv2d backward dweight");
  if (dx != nullptr && !(dx->shape() == x.shape())) *dx = Tensor<T>(x.shape());

  if (!dbias.empty()) {
    std::vector<double> sums;
    const T* g_ = dy.data();
    column_sums(N * P, O, [&](std::size_t r, double* acc) {
      for (std::size_t o = 0; o < O; ++o) acc[o] += g_[r * O + o];
    }, sums);
    for (std::size_t o = 0; o < O; ++o) dbias[o] += static_cast<T>(sums[o]);
  }

  // dW[out x K] += dY^T * rows; the long pixel dimension is the inner product.
  T* dw = dweight.data();
  if (is_pointwise(g)) {
    gemm<T>(Transpose::Yes, Transpose::No, O, K, N * P, T{1}, dy.data(), O, x.data(), K, T{1}, dw, K);
    if (dx != nullptr) {
      gemm<T>(Transpose::No, Transpose::No, N * P, K, O, T{1}, dy.data(), O, weight.data(), K, T{0},
              dx->data(), K);
    }
  } else {
    const std::size_t chunk = std::max<std::size_t>(1, kRowBudget / (K * P));
    std::vector<T> rows;
    for (std::size_t b0 = 0; b0 < N; b0 += chunk) {
      const std::size_t nb = std::min(chunk, N - b0);
      rows.resize(nb * P * K);
      im2row(x, b0, nb, g, oh, ow, rows.data());
      gemm<T>(Transpose::Yes, Transpose::No, O, K, nb * P, T{1}, dy.sample(b0), O, rows.data(), K, T{1}, dw, K);
      if (dx != nullptr) {
        gemm<T>(Transpose::No, Transpose::No, nb * P, K, O, T{1}, dy.sample(b0), O, weight.data(), K, T{0},
                rows.data(), K);
        row2im(rows.data(), b0, nb, g, oh, ow, *dx);
      }
    }
  }
}

template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, Tensor<T>& y) {
  const std::size_t N = x.n(), I = weight.c(), O = weight.n();
  if (x.size() != N * I) {
    throw InvalidInput("linear: input " + to_string(x.shape()) + " does not have " + std::to_string(I) +
                       " features");
  }
  y = Tensor<T>(vec_shape(N, O));
  if (!bias.empty()) {
    for (std::size_t b = 0; b < N; ++b) std::copy(bias.begin(), bias.end(), y.data() + b * O);
  }
  gemm<T>(Transpose::No, Transpose::Yes, N, O, I, T{1}, x.data(), I, weight.data(), I,
          bias.empty() ? T{0} : T{1}, y.data(), O);
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, std::span<T> dbias) {
  const std::size_t N = x.n(), I = weight.c(), O = weight.n();
  if (dy.size() != N * O) throw InvalidInput("linear backward: dy " + to_string(dy.shape()));
  gemm<T>(Transpose::Yes, Transpose::No, O, I, N, T{1}, dy.data(), O, x.data(), I, T{1}, dweight.data(), I);
  if (!dbias.empty()) {
    for (std::size_t o = 0; o < O; ++o) {
      double acc = 0.0;
      for (std::size_t b = 0; b < N; ++b) acc += dy[b * O + o];
      dbias[o] += static_cast<T>(acc);
    }
  }
  if (dx != nullptr) {
    *dx = Tensor<T>(x.shape());
    gemm<T>(Transpose::No, Transpose::No, N, I, O, T{1}, dy.data(), O, weight.data(), I, T{0}, dx->data(), I);
  }
}

template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             double eps, Tensor<T>& y, Tensor<T>& xhat, std::span<T> mean,
                             std::span<T> var) {
  const std::size_t C = x.c(), R = x.n() * x.shape().pixels();
  const double count = static_cast<double>(R);
  y = Tensor<T>(x.shape());
  xhat = Tensor<T>(x.shape());
  const T* src = x.data();
  std::vector<double> mu, sq;
  column_sums(R, C, [&](std::size_t r, double* acc) {
    for (std::size_t c = 0; c < C; ++c) acc[c] += src[r * C + c];
  }, mu);
  for (double& m : mu) m /= count;
  column_sums(R, C, [&](std::size_t r, double* acc) {
    for (std::size_t c = 0; c < C; ++c) {
      const double d = src[r * C + c] - mu[c];
      acc[c] += d * d;
    }
  }, sq);
  std::vector<T> inv(C), mu_t(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double v = sq[c] / count;
    inv[c] = static_cast<T>(1.0 / std::sqrt(v + eps));
    mu_t[c] = static_cast<T>(mu[c]);
    mean[c] = mu_t[c];
    var[c] = static_cast<T>(v);
  }
  T* xh = xhat.data();
  T* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const T v = (src[r * C + c] - mu_t[c]) * inv[c];
      xh[r * C + c] = v;
      dst[r * C + c] = gamma[c] * v + beta[c];
    }
  }
}

template <typename T>
void batchnorm_forward_eval(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                            std::span<const T> running_mean, std::span<const T> running_var, double eps,
                            Tensor<T>& y) {
  const std::size_t C = x.c(), R = x.n() * x.shape().pixels();
  y = Tensor<T>(x.shape());
  std::vector<T> scale(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    scale[c] = static_cast<T>(gamma[c] / std::sqrt(static_cast<double>(running_var[c]) + eps));
    shift[c] = beta[c] - scale[c] * running_mean[c];
  }
  const T* src = x.data();
  T* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) dst[r * C + c] = scale[c] * src[r * C + c] + shift[c];
  }
}

template <typename T>
void batchnorm_backward_train(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma,
                              std::span<const T> invstd, Tensor<T>& dx, std::span<T> dgamma,
                              std::span<T> dbeta) {
  const std::size_t C = dy.c(), R = dy.n() * dy.shape().pixels();
  const double count = static_cast<double>(R);
  require_same<T>(dy.shape(), xhat.shape(), "batchnorm backward");
  dx = Tensor<T>(dy.shape());
  const T* g = dy.data();
  const T* xh = xhat.data();
  std::vector<double> sums;
  column_sums(R, 2 * C, [&](std::size_t r, double* acc) {
    for (std::size_t c = 0; c < C; ++c) {
      acc[c] += g[r * C + c];
      acc[C + c] += static_cast<double>(g[r * C + c]) * xh[r * C + c];
    }
  }, sums);
  // dx = k * (g - mean(g) - xhat * mean(g * xhat)) with k = gamma * invstd.
  std::vector<T> k(C), mean_dy(C), mean_dy_xhat(C);
  for (std::size_t c = 0; c < C; ++c) {
    dbeta[c] += static_cast<T>(sums[c]);
    dgamma[c] += static_cast<T>(sums[C + c]);
    k[c] = static_cast<T>(static_cast<double>(gamma[c]) * invstd[c]);
    mean_dy[c] = static_cast<T>(sums[c] / count);
    mean_dy_xhat[c] = static_cast<T>(sums[C + c] / count);
  }
  T* dst = dx.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      dst[i] = k[c] * (g[i] - mean_dy[c] - xh[i] * mean_dy_xhat[c]);
    }
  }
}

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y) {
  y = Tensor<T>(x.shape());
  const std::size_t n = x.size();
  const T* src = x.data();
  T* dst = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
}

template <typename T>
void relu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
  require_same<T>(y.shape(), dy.shape(), "relu backward");
  dx = Tensor<T>(dy.shape());
  const std::size_t n = dy.size();
  const T* out = y.data();
  const T* g = dy.data();
  T* dst = dx.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) dst[i] = out[i] > T{0} ? g[i] : T{0};
}

template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y) {
  const std::size_t N = x.n(), C = x.c(), P = x.shape().pixels();
  if (P == 0) throw InvalidInput("global average pool: empty spatial extent " + to_string(x.shape()));
  y = Tensor<T>(vec_shape(N, C));
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    const T* src = x.sample(b);
    std::vector<double> acc(C, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) acc[c] += src[p * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) y[b * C + c] = static_cast<T>(acc[c] / static_cast<double>(P));
  }
}

template <typename T>
void global_avg_pool_backward(const Tensor<T>& dy, const Shape& x_shape, Tensor<T>& dx) {
  const std::size_t N = x_shape.n, C = x_shape.c, P = x_shape.pixels();
  if (dy.size() != N * C) throw InvalidInput("global average pool backward: dy " + to_string(dy.shape()));
  dx = Tensor<T>(x_shape);
  const T inv = T{1} / static_cast<T>(P);
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    T* dst = dx.sample(b);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) dst[p * C + c] = dy[b * C + c] * inv;
    }
  }
}

namespace {
struct Bin {
  std::size_t lo, hi;
};
Bin adaptive_bin(std::size_t i, std::size_t in, std::size_t out) {
  return {i * in / out, ((i + 1) * in + out - 1) / out};
}
}  // namespace

template <typename T>
void adaptive_avg_pool_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, Tensor<T>& y) {
  const std::size_t N = x.n(), C = x.c(), H = x.h(), W = x.w();
  if (H == 0 || W == 0 || out_h == 0 || out_w == 0) {
    throw InvalidInput("adaptive average pool: bad extent " + to_string(x.shape()));
  }
  y = Tensor<T>({N, out_h, out_w, C});
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const Bin bh = adaptive_bin(i, H, out_h);
      std::vector<double> acc(C);
      for (std::size_t j = 0; j < out_w; ++j) {
        const Bin bw = adaptive_bin(j, W, out_w);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t r = bh.lo; r < bh.hi; ++r) {
          for (std::size_t s = bw.lo; s < bw.hi; ++s) {
            const T* src = x.pixel(b, r, s);
            for (std::size_t c = 0; c < C; ++c) acc[c] += src[c];
          }
        }
        const double area = static_cast<double>((bh.hi - bh.lo) * (bw.hi - bw.lo));
        T* dst = y.pixel(b, i, j);
        for (std::size_t c = 0; c < C; ++c) dst[c] = static_cast<T>(acc[c] / area);
      }
    }
  }
}

template <typename T>
void adaptive_avg_pool_backward(const Tensor<T>& dy, const Shape& x_shape, Tensor<T>& dx) {
  const std::size_t N = x_shape.n, C = x_shape.c, H = x_shape.h, W = x_shape.w;
  const std::size_t out_h = dy.h(), out_w = dy.w();
  dx = Tensor<T>(x_shape);
  // Bins may overlap along one axis, so each sample is owned by one thread.
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const Bin bh = adaptive_bin(i, H, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const Bin bw = adaptive_bin(j, W, out_w);
        const T inv = T{1} / static_cast<T>((bh.hi - bh.lo) * (bw.hi - bw.lo));
        const T* g = dy.pixel(b, i, j);
        for (std::size_t r = bh.lo; r < bh.hi; ++r) {
          for (std::size_t s = bw.lo; s < bw.hi; ++s) {
            T* dst = dx.pixel(b, r, s);
            for (std::size_t c = 0; c < C; ++c) dst[c] += g[c] * inv;
          }
        }
      }
    }
  }
}

template <typename T>
void max_pool_forward(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad,
                      Tensor<T>& y, std::vector<std::size_t>& argmax) {
  const std::size_t N = x.n(), C = x.c(), H = x.h(), W = x.w();
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) throw InvalidInput("max pool: input too small");
  const std::size_t oh = (H + 2 * pad - kernel) / stride + 1, ow = (W + 2 * pad - kernel) / stride + 1;
  y = Tensor<T>({N, oh, ow, C});
  argmax.assign(y.size(), 0);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t out = ((b * oh + i) * ow + j) * C;
        for (std::size_t c = 0; c < C; ++c) {
          y[out + c] = -std::numeric_limits<T>::infinity();
          argmax[out + c] = b * H * W * C + c;
        }
        for (std::size_t r = 0; r < kernel; ++r) {
          const auto ih = static_cast<std::ptrdiff_t>(i * stride + r) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t s = 0; s < kernel; ++s) {
            const auto iw = static_cast<std::ptrdiff_t>(j * stride + s) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t in = ((b * H + ih) * W + iw) * C;
            for (std::size_t c = 0; c < C; ++c) {
              if (x[in + c] > y[out + c]) {
                y[out + c] = x[in + c];
                argmax[out + c] = in + c;
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void max_pool_backward(const Tensor<T>& dy, const std::vector<std::size_t>& argmax, const Shape& x_shape,
                       Tensor<T>& dx) {
  dx = Tensor<T>(x_shape);
  const std::size_t N = dy.n(), per_sample = dy.shape().sample();
  // Outputs of sample b only route into sample b, so samples are independent.
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t p = b * per_sample; p < (b + 1) * per_sample; ++p) dx[argmax[p]] += dy[p];
  }
}

template <typename T>
void channel_scale_forward(const Tensor<T>& u, const Tensor<T>& s, Tensor<T>& y) {
  const std::size_t N = u.n(), C = u.c(), P = u.shape().pixels();
  if (s.size() != N * C) {
    throw InvalidInput("rescale: " + std::to_string(s.size() / std::max<std::size_t>(N, 1)) +
                       " weights for " + std::to_string(C) + " channels");
  }
  y = Tensor<T>(u.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    const T* sc = s.data() + b * C;
    const T* src = u.sample(b);
    T* dst = y.sample(b);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) dst[p * C + c] = sc[c] * src[p * C + c];
    }
  }
}

template <typename T>
void channel_scale_backward(const Tensor<T>& u, const Tensor<T>& s, const Tensor<T>& dy, Tensor<T>& du,
                            Tensor<T>& ds) {
  const std::size_t N = u.n(), C = u.c(), P = u.shape().pixels();
  require_same<T>(u.shape(), dy.shape(), "rescale backward");
  du = Tensor<T>(u.shape());
  ds = Tensor<T>(vec_shape(N, C));
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    const T* sc = s.data() + b * C;
    const T* src = u.sample(b);
    const T* g = dy.sample(b);
    T* dst = du.sample(b);
    std::vector<double> acc(C, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) {
        dst[p * C + c] = sc[c] * g[p * C + c];
        acc[c] += static_cast<double>(g[p * C + c]) * src[p * C + c];
      }
    }
    for (std::size_t c = 0; c < C; ++c) ds[b * C + c] = static_cast<T>(acc[c]);
  }
}

template <typename T>
void sigmoid_forward(const Tensor<T>& x, Tensor<T>& y) {
  y = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = T{1} / (T{1} + std::exp(-x[i]));
}

template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
  dx = Tensor<T>(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * y[i] * (T{1} - y[i]);
}

template <typename T>
void softmax_forward(const Tensor<T>& x, Tensor<T>& y) {
  const std::size_t N = x.n(), K = N == 0 ? 0 : x.size() / N;
  y = Tensor<T>(x.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    const T* src = x.data() + b * K;
    T* dst = y.data() + b * K;
    const T mx = *std::max_element(src, src + K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += std::exp(static_cast<double>(src[k] - mx));
    for (std::size_t k = 0; k < K; ++k) dst[k] = static_cast<T>(std::exp(static_cast<double>(src[k] - mx)) / total);
  }
}

template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
  require_same<T>(y.shape(), dy.shape(), "softmax backward");
  const std::size_t N = y.n(), K = N == 0 ? 0 : y.size() / N;
  dx = Tensor<T>(y.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < N; ++b) {
    const T* p = y.data() + b * K;
    const T* g = dy.data() + b * K;
    double dot = 0.0;
    for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(p[k]) * g[k];
    for (std::size_t k = 0; k < K; ++k) dx[b * K + k] = static_cast<T>(p[k] * (g[k] - dot));
  }
}

template <typename T>
void add(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  require_same<T>(a.shape(), b.shape(), "add");
  y = Tensor<T>(a.shape());
  const std::size_t n = a.size();
  const T* pa = a.data();
  const T* pb = b.data();
  T* py = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
}

template <typename T>
void accumulate(Tensor<T>& y, const Tensor<T>& x) {
  require_same<T>(y.shape(), x.shape(), "accumulate");
  const std::size_t n = x.size();
  const T* px = x.data();
  T* py = y.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) py[i] += px[i];
}

bool dropout_keeps(double p, std::uint64_t seed, std::size_t index) {
  return unit_from_bits(mix_seed(seed, index)) >= p;
}

template <typename T>
void dropout_forward(const Tensor<T>& x, double p, std::uint64_t seed, Tensor<T>& y) {
  y = Tensor<T>(x.shape());
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = dropout_keeps(p, seed, i) ? x[i] * scale : T{0};
}

template <typename T>
void dropout_backward(const Tensor<T>& dy, double p, std::uint64_t seed, Tensor<T>& dx) {
  dropout_forward(dy, p, seed, dx);
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
  template void batchnorm_forward_eval<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,       \
                                          std::span<const T>, std::span<const T>, double, Tensor<T>&);    \
  template void batchnorm_backward_train<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,       \
                                            std::span<const T>, Tensor<T>&, std::span<T>, std::span<T>);  \
  template void relu_forward<T>(const Tensor<T>&, Tensor<T>&);                                            \
  template void relu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                         \
  template void global_avg_pool_forward<T>(const Tensor<T>&, Tensor<T>&);                                 \
  template void global_avg_pool_backward<T>(const Tensor<T>&, const Shape&, Tensor<T>&);                  \
  template void adaptive_avg_pool_forward<T>(const Tensor<T>&, std::size_t, std::size_t, Tensor<T>&);     \
  template void adaptive_avg_pool_backward<T>(const Tensor<T>&, const Shape&, Tensor<T>&);                \
  template void max_pool_forward<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t, Tensor<T>&,  \
                                    std::vector<std::size_t>&);                                           \
  template void max_pool_backward<T>(const Tensor<T>&, const std::vector<std::size_t>&, const Shape&,     \
                                     Tensor<T>&);                                                         \
  template void channel_scale_forward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                 \
  template void channel_scale_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                          Tensor<T>&, Tensor<T>&);                                        \
  template void sigmoid_forward<T>(const Tensor<T>&, Tensor<T>&);                                         \
  template void sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                      \
  template void softmax_forward<T>(const Tensor<T>&, Tensor<T>&);                                         \
  template void softmax_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                      \
  template void add<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                                   \
  template void accumulate<T>(Tensor<T>&, const Tensor<T>&);                                              \
  template void dropout_forward<T>(const Tensor<T>&, double, std::uint64_t, Tensor<T>&);                  \
  template void dropout_backward<T>(const Tensor<T>&, double, std::uint64_t, Tensor<T>&);

RATTN_INSTANTIATE(float)
RATTN_INSTANTIATE(double)
#undef RATTN_INSTANTIATE

}  // namespace rattn::kernels
