#include "vemkd/datagen.hpp"
#include "vemkd/distill_losses.hpp"
#include "vemkd/energy_model.hpp"
#include "vemkd/metrics.hpp"
#include "vemkd/nets.hpp"
#include "vemkd/sampler.hpp"
#include "vemkd/trainer.hpp"
#include "vemkd/vem_objective.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <benchmark/benchmark.h>

#include <filesystem>

using namespace vemkd;

namespace {

EnergyModelConfig ebm_cfg(int channels) {
  EnergyModelConfig c;
  c.base_channels = channels;
  return c;
}

torch::Tensor images(int64_t n, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::empty({n, 3, 32, 32}).uniform_(-1, 1, gen);
}

void BM_EnergyForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  EnergyModel m(ebm_cfg(static_cast<int>(state.range(0))), 1);
  const auto t = images(state.range(1), 2), s = images(state.range(1), 3);
  for (auto _ : state) benchmark::DoNotOptimize(m.energy(t, s));
}
BENCHMARK(BM_EnergyForward)->Args({8, 8})->Args({32, 8})->Args({8, 16})->Unit(benchmark::kMillisecond);

void BM_LangevinChain(benchmark::State& state) {
  EnergyModel m(ebm_cfg(static_cast<int>(state.range(0))), 1);
  const auto s = images(state.range(1), 3);
  SamplerConfig cfg;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  for (auto _ : state) benchmark::DoNotOptimize(run_chain(s, m, cfg, {}, gen).final);
}
BENCHMARK(BM_LangevinChain)->Args({8, 8})->Args({32, 8})->Args({8, 16})->Unit(benchmark::kMillisecond);

void BM_EbmLossBackward(benchmark::State& state) {
  EnergyModel m(ebm_cfg(static_cast<int>(state.range(0))), 1);
  const auto t = images(8, 2), s = images(8, 3), neg = images(8, 4);
  const auto params = m.parameters();
  for (auto _ : state) {
    const auto loss = ebm_loss(m, t, s, neg, 1.0);
    benchmark::DoNotOptimize(torch::autograd::grad({loss}, params));
  }
}
BENCHMARK(BM_EbmLossBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_GeneratorForwardBackward(benchmark::State& state) {
  GeneratorSpec spec;
  spec.base_width = static_cast<int>(state.range(0));
  auto g = build_generator(spec, 1);
  const auto x = images(state.range(1), 2);
  const auto params = g->parameters();
  for (auto _ : state) {
    const auto loss = g->forward(x).square().mean();
    benchmark::DoNotOptimize(torch::autograd::grad({loss}, params));
  }
}
BENCHMARK(BM_GeneratorForwardBackward)->Args({16, 8})->Args({32, 16})->Args({4, 8})->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const auto x = images(16, 1), y = images(16, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(x, y));
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMicrosecond);

void BM_FrechetDistance(benchmark::State& state) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  const auto a = gaussian_stats(torch::randn({512, 64}, gen));
  const auto b = gaussian_stats(torch::randn({512, 64}, gen) + 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(a, b));
}
BENCHMARK(BM_FrechetDistance)->Unit(benchmark::kMicrosecond);

void BM_TrainIteration(benchmark::State& state) {
  const auto root = std::filesystem::temp_directory_path() / "vemkd_bench_data";
  DatasetSpec spec;
  spec.num_train = 64;
  spec.num_val = 16;
  generate_shapes_dataset(spec, root);
  RunConfig rc;
  rc.set("data.root", root.string());
  rc.set("model.width", "16");
  rc.set("ebm.channels", "8");
  rc.set("schedule.batch_size", "8");
  rc.set("vem.lambda_mi", state.range(0) ? "0.1" : "0");
  TrainState st(TrainConfig::from(rc));
  Batch b;
  for (auto _ : state) {
    st.data->next(b.x, b.y);
    benchmark::DoNotOptimize(train_iteration(st, b));
  }
  std::filesystem::remove_all(root);
}
BENCHMARK(BM_TrainIteration)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
