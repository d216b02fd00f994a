#include <benchmark/benchmark.h>

#include "nnmil/aggregator.hpp"
#include "nnmil/inference.hpp"
#include "nnmil/metrics.hpp"

namespace {

using namespace nnmil;

SlideBag random_bag(std::size_t n, std::size_t d, Rng& rng) {
  SlideBag bag;
  bag.slide_id = "bench";
  bag.embeddings.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < bag.embeddings.size(); ++i) bag.embeddings.data()[i] = static_cast<float>(rng.normal());
  return bag;
}

// Args: D, H. Batch of 32 bags with M = 256.
void BM_ForwardBackward(benchmark::State& state) {
  const auto D = static_cast<std::size_t>(state.range(0));
  const auto H = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const auto params = init_params<float>(D, H, 2, rng);
  std::vector<FixedBag> batch;
  BatchTargets targets;
  for (int b = 0; b < 32; ++b) {
    batch.push_back(sample_patches(random_bag(300, D, rng), 256, rng));
    targets.classes.push_back(b % 2);
  }
  const FeatureIndexSet feats = sample_feature_indices(D, H, rng);
  for (auto _ : state) {
    const auto cache = forward(params, std::span<const FixedBag>(batch), feats, {true, 0.25, &rng});
    auto grads = backward(params, cache, std::span<const FixedBag>(batch), targets);
    benchmark::DoNotOptimize(grads.V.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_ForwardBackward)->Args({64, 64})->Args({1024, 256})->Unit(benchmark::kMillisecond);

void BM_ChunkInference(benchmark::State& state) {
  const auto D = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto params = init_params<float>(D, 256, 2, rng);
  const SlideBag bag = random_bag(2000, D, rng);
  const ChunkWindows windows = chunk_windows(D, 256, 64);
  for (auto _ : state) {
    const ClsPrediction p = predict_classification(params, bag, windows);
    benchmark::DoNotOptimize(p.h_total);
  }
  state.counters["chunks"] = static_cast<double>(windows.count());
}
BENCHMARK(BM_ChunkInference)->Arg(1024)->Arg(2560)->Unit(benchmark::kMillisecond);

void BM_ConcordanceIndex(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<double> t(n), r(n);
  std::vector<int> e(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = rng.uniform(0.0, 10.0);
    r[i] = rng.normal();
    e[i] = rng.bernoulli(0.7) ? 1 : 0;
  }
  for (auto _ : state) benchmark::DoNotOptimize(concordance_index(t, e, r));
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}
BENCHMARK(BM_ConcordanceIndex)->RangeMultiplier(4)->Range(256, 65536)->Complexity(benchmark::oNLogN);

}  // namespace
BENCHMARK_MAIN();
