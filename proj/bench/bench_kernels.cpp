#include <benchmark/benchmark.h>

#include <random>

#include "pfa/detector.hpp"
#include "pfa/ops.hpp"
#include "pfa/reference.hpp"
#include "pfa/scan.hpp"

using namespace pfa;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Args: spatial extent, channels, kernel.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({64, 16, 3})->Args({128, 16, 3})->Args({64, 32, 7})->Args({164, 8, 2});
}

void BM_ConvOpenMP(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             k = static_cast<std::size_t>(state.range(2));
  const Tensor x = random_tensor({1, c, n, n}, 1), w = random_tensor({c, c, k, k}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_valid<float>(x, w, std::span<const float>(), 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>((n - k + 1) * (n - k + 1) * c * c * k * k));
}
BENCHMARK(BM_ConvOpenMP)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_ConvReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             k = static_cast<std::size_t>(state.range(2));
  const Tensor x = random_tensor({1, c, n, n}, 1), w = random_tensor({c, c, k, k}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_valid<float>(x, w, std::span<const float>(), 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>((n - k + 1) * (n - k + 1) * c * c * k * k));
}
BENCHMARK(BM_ConvReference)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_AvgPoolOpenMP(benchmark::State& state) {
  const Tensor x = random_tensor({1, 16, 128, 128}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(avg_pool<float>(x, 8, 2, 0));
}
BENCHMARK(BM_AvgPoolOpenMP)->Unit(benchmark::kMillisecond);

void BM_AvgPoolReference(benchmark::State& state) {
  const Tensor x = random_tensor({1, 16, 128, 128}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(reference::avg_pool<float>(x, 8, 2, 0));
}
BENCHMARK(BM_AvgPoolReference)->Unit(benchmark::kMillisecond);

// Args: L_m, alpha. One ROI of the desk network per iteration.
void scan_args(benchmark::internal::Benchmark* b) {
  for (long tile : {1, 2, 4, 8}) b->Args({tile, 4});
}

void BM_DenseScan(benchmark::State& state) {
  const auto spec = desk_network_spec();
  const auto params = init_params<float>(spec, 1, false);
  const auto g = solve_geometry(spec.patch_size, static_cast<std::size_t>(state.range(0)), spec.native_stride,
                                static_cast<std::size_t>(state.range(1)));
  const Tensor roi = random_tensor({1, spec.input_channels, g.roi, g.roi}, 4);
  ForwardOptions opt;
  opt.mode = Mode::dense;
  opt.alpha = g.alpha;
  CostCounter cost;
  for (auto _ : state) benchmark::DoNotOptimize(detector_forward(roi, spec, params, opt, &cost));
  state.counters["MACs/ROI"] = static_cast<double>(cost.macs) / static_cast<double>(state.iterations());
}
BENCHMARK(BM_DenseScan)->Apply(scan_args)->Unit(benchmark::kMillisecond);

void BM_PatchScan(benchmark::State& state) {
  const auto spec = desk_network_spec();
  const auto params = init_params<float>(spec, 1, false);
  const auto g = solve_geometry(spec.patch_size, static_cast<std::size_t>(state.range(0)), spec.native_stride,
                                static_cast<std::size_t>(state.range(1)));
  const Tensor roi = random_tensor({1, spec.input_channels, g.roi, g.roi}, 4);
  CostCounter cost;
  for (auto _ : state) benchmark::DoNotOptimize(patch_oracle(roi, spec, params, g, &cost));
  state.counters["MACs/ROI"] = static_cast<double>(cost.macs) / static_cast<double>(state.iterations());
}
BENCHMARK(BM_PatchScan)->Apply(scan_args)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
