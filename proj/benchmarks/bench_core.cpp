#include <random>

#include <benchmark/benchmark.h>

#include "mshift/dataset.hpp"
#include "mshift/distance.hpp"
#include "mshift/losses.hpp"
#include "mshift/model.hpp"
#include "mshift/trainer.hpp"

namespace {

using namespace mshift;

Tensor2 gaussian(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  Tensor2 t(rows, cols);
  for (Index k = 0; k < t.size(); ++k) t.data()[k] = dist(rng);
  return t;
}

SyntheticSpec bench_spec() {
  SyntheticSpec spec;
  spec.samples_per_class = 64;
  return spec;
}

ModelConfig bench_model(const SyntheticSpec& spec) {
  ModelConfig mc;
  mc.input_dim = spec.dim;
  mc.num_classes = spec.num_classes;
  mc.num_sources = spec.num_sources;
  return mc;
}

void BM_Mmd2Median(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  const Tensor2 xs = gaussian(n, 32, 1);
  const Tensor2 ys = gaussian(n, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(mmd2(xs, ys, KernelConfig::median()));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Mmd2Median)->RangeMultiplier(2)->Range(16, 128)->Complexity();

void BM_Mmd2WithGrad(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  const Tensor2 xs = gaussian(n, 32, 3);
  const Tensor2 ys = gaussian(n, 32, 4);
  for (auto _ : state) benchmark::DoNotOptimize(mmd2_with_grad(xs, ys, KernelConfig::median()));
}
BENCHMARK(BM_Mmd2WithGrad)->Arg(16)->Arg(64);

void BM_EnsembleForward(benchmark::State& state) {
  const SyntheticSpec spec = bench_spec();
  const DatasetBundle data = generate_synthetic(spec);
  const DaNet net(bench_model(spec));
  const auto stats = fit_source_stats(net, data.sources, 0.1);
  const Tensor2 x = features_matrix(data.target_test);
  for (auto _ : state) benchmark::DoNotOptimize(ensemble_forward(net, stats, x));
  state.SetItemsProcessed(state.iterations() * x.rows());
}
BENCHMARK(BM_EnsembleForward);

void BM_TrainingStep(benchmark::State& state) {
  const SyntheticSpec spec = bench_spec();
  const DatasetBundle data = generate_synthetic(spec);
  TrainConfig cfg;
  cfg.ablation = parse_ablation(state.range(0) == 0 ? "full" : "erm");
  std::vector<SampleSet> holdout;
  Trainer trainer(DaNet(bench_model(spec)), split_for_training(data, cfg, holdout), holdout, cfg);
  trainer.warmup_epoch();
  trainer.refresh_statistics(1);
  std::size_t step = 0;
  for (auto _ : state) {
    const auto batches = trainer.source_batches(1, step++);
    trainer.fcd_step(batches);
    trainer.adapt_step(batches, trainer.next_target_batch());
  }
}
BENCHMARK(BM_TrainingStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
