// Microbenchmarks: dense vs TT matvec, TTM row lookup, int8 GEMM. Informational only.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ttq/quant.hpp"
#include "ttq/tensor_core.hpp"

using namespace ttq;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::vector<Tensor> random_cores(const tt::TensorShapePlan& plan) {
  std::vector<Tensor> cores;
  for (std::size_t k = 0; k < plan.num_cores(); ++k) {
    Tensor t(plan.core_shape(k));
    t.data = randn(t.size(), k + 1);
    cores.push_back(std::move(t));
  }
  return cores;
}

void BM_DenseMatvec(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto w = randn(rows * cols, 1);
  const auto x = randn(cols, 2);
  std::vector<double> y(rows);
  for (auto _ : state) {
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      const double* row = w.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
      y[i] = acc;
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_TTMatvec(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto plan = tt::plan_factorization(rows, cols, 2, static_cast<std::size_t>(state.range(2)), tt::Format::TT);
  const auto cores = random_cores(plan);
  const auto x = randn(cols, 2);
  for (auto _ : state) benchmark::DoNotOptimize(tt::tt_matvec(cores, plan, x));
  state.counters["params"] = static_cast<double>(tt::param_count(plan).param_count_compressed);
}

void BM_TTMRowLookup(benchmark::State& state) {
  const auto plan = tt::TensorShapePlan::ttm(800, 768, {8, 10, 10}, {8, 12, 8}, {1, 10, 10, 1});
  const auto cores = random_cores(plan);
  std::size_t row = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(tt::ttm_row_lookup(cores, plan, row));
    row = (row + 37) % plan.rows;
  }
}

void BM_IntGemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> code(-128, 127);
  std::vector<std::int8_t> a(n * n), b(n * n);
  for (auto& v : a) v = static_cast<std::int8_t>(code(rng));
  for (auto& v : b) v = static_cast<std::int8_t>(code(rng));
  std::vector<std::int32_t> c(n * n);
  for (auto _ : state) {
    quant::int_gemm(n, n, n, a.data(), b.data(), false, c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

}  // namespace

BENCHMARK(BM_DenseMatvec)->Args({768, 768})->Args({768, 3072});
BENCHMARK(BM_TTMatvec)->Args({768, 768, 10})->Args({768, 3072, 10})->Args({768, 768, 30})->Args({768, 768, 50});
BENCHMARK(BM_TTMRowLookup);
BENCHMARK(BM_IntGemm)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
