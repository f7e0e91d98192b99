// Parallel kernels against the serial reference loops.
//
//   bench_kernels [--benchmark_filter=Conv]
//
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include "rattn/kernels.hpp"
#include "rattn/rng.hpp"

namespace {

using namespace rattn;
namespace k = rattn::kernels;

Tensor<float> random_tensor(Shape s, std::uint64_t seed) {
  Tensor<float> t(s);
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// args: batch, side, in, out, stride
struct ConvSetup {
  k::ConvGeometry g;
  Tensor<float> x, w, y, dy, dx, dw;

  explicit ConvSetup(const benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0)), side = static_cast<std::size_t>(st.range(1));
    g = {static_cast<std::size_t>(st.range(2)), static_cast<std::size_t>(st.range(3)), 3,
         static_cast<std::size_t>(st.range(4)), 1};
    const std::size_t os = g.out_extent(side);
    x = random_tensor({n, side, side, g.in_channels}, 1);
    w = random_tensor({g.out_channels, 3, 3, g.in_channels}, 2);
    y = Tensor<float>({n, os, os, g.out_channels});
    dy = random_tensor(y.shape(), 3);
    dx = Tensor<float>(x.shape());
    dw = Tensor<float>(w.shape());
  }
  double macs() const { return double(y.size()) * 9.0 * double(g.in_channels); }
};

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  ConvSetup s(st);
  for (auto _ : st) {
    if constexpr (Parallel) k::conv2d_forward<float>(s.x, s.w, {}, s.g, s.y);
    else k::reference::conv2d_forward<float>(s.x, s.w, {}, s.g, s.y);
    benchmark::DoNotOptimize(s.y.data());
  }
  st.counters["GMAC/s"] = benchmark::Counter(s.macs() * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& st) {
  ConvSetup s(st);
  for (auto _ : st) {
    if constexpr (Parallel) k::conv2d_backward<float>(s.x, s.w, s.dy, s.g, &s.dx, s.dw, {});
    else k::reference::conv2d_backward<float>(s.x, s.w, s.dy, s.g, &s.dx, s.dw, {});
    benchmark::DoNotOptimize(s.dw.data());
  }
  st.counters["GMAC/s"] = benchmark::Counter(2 * s.macs() * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

// Shapes of the CIFAR ResNet-34 stages at batch 16; the reference runs only the smaller ones.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({16, 32, 64, 64, 1})->Args({16, 16, 128, 128, 1})->Args({16, 8, 256, 256, 1})->Args({16, 16, 64, 128, 2});
  b->Unit(benchmark::kMillisecond);
}
void conv_args_small(benchmark::internal::Benchmark* b) {
  b->Args({4, 16, 128, 128, 1})->Args({4, 8, 256, 256, 1})->Unit(benchmark::kMillisecond);
}

BENCHMARK(BM_ConvForward<true>)->Name("ConvForward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Name("ConvForward/parallel_small")->Apply(conv_args_small);
BENCHMARK(BM_ConvForward<false>)->Name("ConvForward/reference_small")->Apply(conv_args_small);
BENCHMARK(BM_ConvBackward<true>)->Name("ConvBackward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<true>)->Name("ConvBackward/parallel_small")->Apply(conv_args_small);
BENCHMARK(BM_ConvBackward<false>)->Name("ConvBackward/reference_small")->Apply(conv_args_small);

template <bool Parallel>
void BM_Gemm(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = random_tensor({1, 1, n, n}, 4), b = random_tensor({1, 1, n, n}, 5);
  Tensor<float> c({1, 1, n, n});
  for (auto _ : st) {
    if constexpr (Parallel) k::gemm<float>(k::Transpose::No, k::Transpose::No, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n);
    else k::reference::gemm<float>(k::Transpose::No, k::Transpose::No, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  st.counters["GFLOP/s"] = benchmark::Counter(2.0 * n * n * n * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Gemm<true>)->Name("Gemm/parallel")->Arg(128)->Arg(512);
BENCHMARK(BM_Gemm<false>)->Name("Gemm/reference")->Arg(128)->Arg(512);

template <bool Parallel>
void BM_BatchNorm(benchmark::State& st) {
  const auto x = random_tensor({32, 16, 16, 128}, 6);
  std::vector<float> gamma(128, 1.f), beta(128, 0.f), mean(128), var(128);
  Tensor<float> y(x.shape()), xhat(x.shape());
  for (auto _ : st) {
    if constexpr (Parallel) k::batchnorm_forward_train<float>(x, gamma, beta, 1e-5, y, xhat, mean, var);
    else k::reference::batchnorm_forward_train<float>(x, gamma, beta, 1e-5, y, xhat, mean, var);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetBytesProcessed(static_cast<std::int64_t>(st.iterations() * x.size() * sizeof(float)));
}
BENCHMARK(BM_BatchNorm<true>)->Name("BatchNormTrain/parallel");
BENCHMARK(BM_BatchNorm<false>)->Name("BatchNormTrain/reference");

}  // namespace

BENCHMARK_MAIN();
