// Parallel kernels against the serial reference loops, at shapes that occur
// in a base-sized block (d = 768, n = 197).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "vitplast/components.hpp"
#include "vitplast/kernels.hpp"
#include "vitplast/linalg.hpp"

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

void BM_GemmKernel(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  auto a = random_vector(m * k, 1);
  auto b = random_vector(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    vitplast::kernels::gemm(m, n, k, a.data(), k, b.data(), n, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

void BM_GemmReference(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  auto a = random_vector(m * k, 1);
  auto b = random_vector(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    vitplast::reference::gemm(m, n, k, a.data(), k, b.data(), n, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

void BM_GemvKernel(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  auto a = random_vector(m * m, 3);
  auto x = random_vector(m, 4);
  std::vector<double> y(m);
  for (auto _ : state) {
    vitplast::kernels::gemv(m, m, a.data(), x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_GemvReference(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  auto a = random_vector(m * m, 3);
  auto x = random_vector(m, 4);
  std::vector<double> y(m);
  for (auto _ : state) {
    vitplast::reference::gemv(m, m, a.data(), x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_Attention(benchmark::State& state) {
  const std::size_t d = 768, n = 197, heads = 12;
  vitplast::Tensor qkv({3 * d, d}, random_vector(3 * d * d, 5));
  vitplast::Tensor out({d, d}, random_vector(d * d, 6));
  vitplast::Tensor x({d, n}, random_vector(d * n, 7));
  const vitplast::AttentionWeights w{&qkv, nullptr, &out, nullptr, heads};
  for (auto _ : state) benchmark::DoNotOptimize(vitplast::multi_head_attention(w, x));
}

void BM_SpectralNorm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  vitplast::Tensor a({4 * m, m}, random_vector(4 * m * m, 8));
  for (auto _ : state) benchmark::DoNotOptimize(vitplast::spectral_norm(a));
}

}  // namespace

BENCHMARK(BM_GemmKernel)->Args({768, 197, 768})->Args({3072, 197, 768})->Args({64, 64, 64})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemmReference)->Args({768, 197, 768})->Args({64, 64, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemvKernel)->Arg(768)->Arg(3072);
BENCHMARK(BM_GemvReference)->Arg(768)->Arg(3072);
BENCHMARK(BM_Attention)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SpectralNorm)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
