// Serial reference against OpenMP variant for every parallel kernel.

#include <benchmark/benchmark.h>

#include "essa/kernels.hpp"
#include "essa/lowrank.hpp"
#include "essa/model.hpp"
#include "essa/rng.hpp"
#include "essa/task.hpp"

namespace {

using essa::kernels::Exec;

essa::Matrix random_matrix(int rows, int cols, std::uint64_t seed) {
  essa::CounterRng rng(seed, 0);
  essa::Matrix m(rows, cols);
  for (auto& v : m.reshaped()) v = rng.normal();
  return m;
}

Exec exec_of(const benchmark::State& state) { return state.range(1) ? Exec::kParallel : Exec::kSerial; }

void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  essa::Matrix out(n, n);
  for (auto _ : state) {
    essa::kernels::gemm(a, b, out, exec_of(state));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Gemm)->ArgsProduct({{64, 128, 256}, {0, 1}})->ArgNames({"n", "parallel"});

void BM_QuantizeRows(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto src = random_matrix(n, n, 3);
  for (auto _ : state) {
    essa::Matrix m = src;
    essa::kernels::quantize_rows(m, 7, exec_of(state));
    benchmark::DoNotOptimize(m.data());
  }
}
BENCHMARK(BM_QuantizeRows)->ArgsProduct({{256, 1024}, {0, 1}})->ArgNames({"n", "parallel"});

void BM_DeltaWeight(benchmark::State& state) {
  const int r = static_cast<int>(state.range(0));
  const auto b = random_matrix(256, r, 4), a = random_matrix(r, 256, 5);
  for (auto _ : state) benchmark::DoNotOptimize(essa::delta_weight(b, a, exec_of(state)));
}
BENCHMARK(BM_DeltaWeight)->ArgsProduct({{8, 64}, {0, 1}})->ArgNames({"rank", "parallel"});

void BM_DecomposeAll(benchmark::State& state) {
  std::vector<essa::LowRankAdapter> adapters;
  for (int i = 0; i < 16; ++i) {
    essa::LowRankAdapter ad;
    ad.name = "a" + std::to_string(i);
    ad.b = random_matrix(128, 32, 10 + i);
    ad.a = random_matrix(32, 128, 40 + i);
    adapters.push_back(ad);
  }
  for (auto _ : state) {
    auto copy = adapters;
    essa::decompose_all(copy, exec_of(state));
    benchmark::DoNotOptimize(copy.data());
  }
}
BENCHMARK(BM_DecomposeAll)->ArgsProduct({{16}, {0, 1}})->ArgNames({"adapters", "parallel"});

void BM_Accuracy(benchmark::State& state) {
  essa::Architecture arch;
  const auto model = essa::PolicyModel::create(arch, 7);
  essa::ArithmeticTaskSpec spec;
  auto data = essa::generate_arithmetic(spec, 1);
  data.resize(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(essa::accuracy(model, {}, data, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Accuracy)->ArgsProduct({{200}, {0, 1}})->ArgNames({"examples", "parallel"})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
