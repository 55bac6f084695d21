#include <benchmark/benchmark.h>

#include "lungcad/blob_scorer.hpp"
#include "lungcad/candidates.hpp"
#include "lungcad/inference.hpp"
#include "lungcad/nnet.hpp"
#include "lungcad/phantom.hpp"
#include "lungcad/preprocess.hpp"

namespace {

using namespace lungcad;

void BM_Conv3d(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng r(1);
  nnet::Tensor x({8, n, n, n}), k({16, 8, 3, 3, 3});
  for (double& v : x.data) v = r.normal(0, 1);
  for (double& v : k.data) v = r.normal(0, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(nnet::conv3d(x, k));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

CtVolume phantom_volume(std::int64_t n) {
  PhantomConfig ph;
  ph.shape = Shape3::cube(n);
  return preprocess(generate_patient(ph, 3, 0).volume);
}

void BM_BlobScorer(benchmark::State& state) {
  const CtVolume vol = phantom_volume(state.range(0));
  const BlobScorer scorer({});
  for (auto _ : state) benchmark::DoNotOptimize(scorer.score(vol.image));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(vol.image.size()));
}
BENCHMARK(BM_BlobScorer)->Arg(64)->Arg(96)->Unit(benchmark::kMillisecond);

void BM_ScoreVolumeTiled(benchmark::State& state) {
  const CtVolume vol = phantom_volume(96);
  const BlobScorer scorer({});
  const TilingConfig tiling{Shape3::cube(state.range(0)), 16};
  for (auto _ : state) benchmark::DoNotOptimize(score_volume(vol, scorer, tiling));
}
BENCHMARK(BM_ScoreVolumeTiled)->Arg(48)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ConnectedComponents(benchmark::State& state) {
  Rng r(2);
  VoxelMask m(Shape3::cube(state.range(0)));
  for (auto& v : m.data()) v = r.bernoulli(0.3);
  for (auto _ : state) benchmark::DoNotOptimize(connected_components(m));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_ConnectedComponents)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_BinaryOpening(benchmark::State& state) {
  Rng r(3);
  VoxelMask m(Shape3::cube(state.range(0)));
  for (auto& v : m.data()) v = r.bernoulli(0.5);
  for (auto _ : state) benchmark::DoNotOptimize(binary_opening(m));
}
BENCHMARK(BM_BinaryOpening)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
