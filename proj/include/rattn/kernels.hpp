#pragma once

// Numeric kernels over NHWC tensors.
//
// Two implementations share every signature: `rattn::kernels` holds the
// OpenMP/BLAS versions used by the layers, `rattn::kernels::reference` holds
// straightforward serial loops. The reference set is kept for tests and the
// benchmark; nothing in the library calls it.
//
// Backward kernels accumulate into parameter gradients (dw, db) and overwrite
// input gradients (dx). Parallel loops only ever partition independent
// outputs, so results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>

#include "rattn/tensor.hpp"

namespace rattn::kernels {

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_extent(std::size_t in) const { return (in + 2 * pad - kernel) / stride + 1; }
  bool fits(std::size_t in) const { return in + 2 * pad >= kernel; }
};

enum class Transpose { No, Yes };

/// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// weight: (out, k, k, in), i.e. one row of k*k*in values per output channel;
// bias: empty or out_channels values.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                    const ConvGeometry& g, Tensor<T>& y);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>& dweight, std::span<T> dbias);

// x: (n, 1, 1, in) or any tensor whose per-sample size equals `in`; weight: (out, 1, 1, in).
template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, Tensor<T>& y);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, std::span<T> dbias);

/// Training-mode batch norm. Writes y, the normalized input xhat, and per-channel
/// batch mean / biased variance.
template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             double eps, Tensor<T>& y, Tensor<T>& xhat, std::span<T> mean,
                             std::span<T> var);
template <typename T>
void batchnorm_forward_eval(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                            std::span<const T> running_mean, std::span<const T> running_var, double eps,
                            Tensor<T>& y);
/// Backward through training-mode batch norm given the cached xhat and 1/sqrt(var+eps).
template <typename T>
void batchnorm_backward_train(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma,
                              std::span<const T> invstd, Tensor<T>& dx, std::span<T> dgamma,
                              std::span<T> dbeta);

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y);
/// dx = dy where y > 0.
template <typename T>
void relu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

/// Per-channel spatial mean: (n,h,w,c) -> (n,1,1,c).
template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void global_avg_pool_backward(const Tensor<T>& dy, const Shape& x_shape, Tensor<T>& dx);

/// Adaptive average pooling with PyTorch bin edges floor(i*H/oh) .. ceil((i+1)*H/oh).
template <typename T>
void adaptive_avg_pool_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, Tensor<T>& y);
template <typename T>
void adaptive_avg_pool_backward(const Tensor<T>& dy, const Shape& x_shape, Tensor<T>& dx);

/// 2-D max pooling with implicit -inf padding; `argmax` records flat input offsets.
template <typename T>
void max_pool_forward(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad,
                      Tensor<T>& y, std::vector<std::size_t>& argmax);
template <typename T>
void max_pool_backward(const Tensor<T>& dy, const std::vector<std::size_t>& argmax, const Shape& x_shape,
                       Tensor<T>& dx);

/// y(n,:,:,c) = s(n,c) * u(n,:,:,c).
template <typename T>
void channel_scale_forward(const Tensor<T>& u, const Tensor<T>& s, Tensor<T>& y);
template <typename T>
void channel_scale_backward(const Tensor<T>& u, const Tensor<T>& s, const Tensor<T>& dy, Tensor<T>& du,
                            Tensor<T>& ds);

template <typename T>
void sigmoid_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

/// Row-wise softmax over the per-sample features of x.
template <typename T>
void softmax_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx);

/// y = a + b (same shape).
template <typename T>
void add(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
/// y += x.
template <typename T>
void accumulate(Tensor<T>& y, const Tensor<T>& x);

/// Inverted dropout. Element i is dropped when hash(seed, i) < p; survivors are scaled by 1/(1-p).
template <typename T>
void dropout_forward(const Tensor<T>& x, double p, std::uint64_t seed, Tensor<T>& y);
template <typename T>
void dropout_backward(const Tensor<T>& dy, double p, std::uint64_t seed, Tensor<T>& dx);

/// Whether dropout keeps element `index` for the given seed.
bool dropout_keeps(double p, std::uint64_t seed, std::size_t index);

namespace reference {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias,
                    const ConvGeometry& g, Tensor<T>& y);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>& dweight, std::span<T> dbias);
template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> bias, Tensor<T>& y);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, std::span<T> dbias);
template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             double eps, Tensor<T>& y, Tensor<T>& xhat, std::span<T> mean,
                             std::span<T> var);
template <typename T>
void batchnorm_backward_train(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma,
                              std::span<const T> invstd, Tensor<T>& dx, std::span<T> dgamma,
                              std::span<T> dbeta);
template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void adaptive_avg_pool_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, Tensor<T>& y);
template <typename T>
void channel_scale_forward(const Tensor<T>& u, const Tensor<T>& s, Tensor<T>& y);
template <typename T>
void channel_scale_backward(const Tensor<T>& u, const Tensor<T>& s, const Tensor<T>& dy, Tensor<T>& du,
                            Tensor<T>& ds);

}  // namespace reference

}  // namespace rattn::kernels
