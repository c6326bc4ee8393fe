#include "test_support.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/sampler.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace vemkd;
using namespace vemkd::testing;

namespace {

/// Quadratic energy that returns NaN once t leaves a box, to provoke divergence.
class ExplodingEnergy : public EnergyFunction {
 public:
  torch::Tensor energy(const torch::Tensor& t, const torch::Tensor&) const override {
    return (t.flatten(1).square().sum(1) * std::numeric_limits<double>::quiet_NaN());
  }
};

SamplerConfig noiseless(int steps, double step_size) {
  SamplerConfig c;
  c.num_steps = steps;
  c.step_size = step_size;
  c.noise_std = 0.0;
  c.clamp.reset();
  return c;
}

}  // namespace

TEST(LangevinStep, ConstantEnergyNoNoiseIsIdentity) {
  ConstantEnergy e;
  auto g = gen(1);
  const auto t = uniform_images({2, 3, 32, 32}, 1), s = uniform_images({2, 3, 32, 32}, 2);
  EXPECT_TRUE(torch::equal(langevin_step(t, s, e, 100.0, 0.0, g), t));
}

TEST(LangevinStep, QuadraticClosedForm) {
  QuadraticEnergy e;
  auto g = gen(1);
  const auto t = torch::full({1, 1, 2, 2}, 2.0, torch::kFloat64);
  const auto out = langevin_step(t, t, e, 1.0, 0.0, g);
  EXPECT_TRUE(torch::allclose(out, torch::full_like(t, 1.0), 0, 1e-12));
}

TEST(LangevinStep, NoiseHasRequestedStd) {
  ConstantEnergy e;
  auto g = gen(2);
  const auto t = torch::zeros({4, 3, 64, 64}, torch::kFloat64);
  const auto out = langevin_step(t, t, e, 1.0, 0.005, g);
  EXPECT_NEAR(out.std().item<double>(), 0.005, 1e-4);
  EXPECT_NEAR(out.mean().item<double>(), 0.0, 1e-4);
}

TEST(LangevinStep, ResultCarriesNoGraph) {
  EnergyModelConfig cfg;
  cfg.base_channels = 2;
  cfg.num_res_blocks = 1;
  auto m = build_energy_model(cfg, 3);
  auto g = gen(3);
  const auto s = uniform_images({2, 3, 32, 32}, 2).requires_grad_(true);
  const auto out = langevin_step(uniform_images({2, 3, 32, 32}, 1), s, m, 100.0, 0.005, g);
  EXPECT_FALSE(out.requires_grad());
}

TEST(LangevinStep, NonFiniteGradientRaisesDivergenceWithStep) {
  ExplodingEnergy e;
  auto g = gen(4);
  const auto t = torch::ones({1, 1, 2, 2});
  SamplerConfig cfg = noiseless(5, 1.0);
  try {
    run_chain(t, e, cfg, {}, g);
    FAIL() << "expected SamplerDivergence";
  } catch (const SamplerDivergence& d) {
    EXPECT_EQ(d.step(), 1);
  }
}

TEST(RunChain, NoiselessQuadraticDescends) {
  QuadraticEnergy e;
  auto g = gen(5);
  for (double step : {0.1, 1.0, 2.0, 3.5, 3.99}) {
    const auto chain = run_chain(uniform_images({3, 1, 4, 4}, 7, torch::kFloat64), e, noiseless(10, step), {}, g);
    ASSERT_EQ(chain.energies.size(), 11u);
    for (size_t k = 1; k < chain.energies.size(); ++k) EXPECT_LE(chain.energies[k], chain.energies[k - 1]);
  }
}

TEST(RunChain, StudentInitIsDetachedCopy) {
  ConstantEnergy e;
  auto g = gen(6);
  auto s = uniform_images({2, 3, 32, 32}, 1).requires_grad_(true);
  const auto chain = run_chain(s, e, noiseless(2, 1.0), {}, g);
  EXPECT_TRUE(torch::equal(chain.init, s.detach()));
  EXPECT_FALSE(chain.init.requires_grad());
  EXPECT_NE(chain.init.data_ptr(), s.data_ptr());
}

TEST(RunChain, UniformInitInRange) {
  ConstantEnergy e;
  auto g = gen(7);
  SamplerConfig cfg = noiseless(1, 1.0);
  cfg.init = InitStrategy::Uniform;
  const auto s = torch::zeros({8, 3, 32, 32});
  const auto chain = run_chain(s, e, cfg, {}, g);
  EXPECT_GE(chain.init.min().item<float>(), -1.0f);
  EXPECT_LE(chain.init.max().item<float>(), 1.0f);
  EXPECT_NEAR(chain.init.mean().item<double>(), 0.0, 0.02);
  EXPECT_NEAR(chain.init.var().item<double>(), 1.0 / 3.0, 0.02);
}

TEST(RunChain, TeacherInitUsesTeacherBatch) {
  ConstantEnergy e;
  auto g = gen(8);
  SamplerConfig cfg = noiseless(1, 1.0);
  cfg.init = InitStrategy::TeacherData;
  const auto s = torch::zeros({2, 3, 32, 32});
  ChainInit init;
  init.teacher = uniform_images({2, 3, 32, 32}, 3);
  EXPECT_TRUE(torch::equal(run_chain(s, e, cfg, init, g).init, init.teacher));
}

TEST(RunChain, MissingInitSourceIsConfigError) {
  ConstantEnergy e;
  auto g = gen(9);
  SamplerConfig cfg = noiseless(1, 1.0);
  const auto s = torch::zeros({2, 3, 32, 32});
  cfg.init = InitStrategy::TeacherData;
  EXPECT_THROW(run_chain(s, e, cfg, {}, g), ConfigError);
  cfg.init = InitStrategy::PersistentBuffer;
  EXPECT_THROW(run_chain(s, e, cfg, {}, g), ConfigError);
}

TEST(RunChain, SeedReproducible) {
  EnergyModelConfig mc;
  mc.base_channels = 2;
  mc.num_res_blocks = 2;
  auto m = build_energy_model(mc, 3);
  const auto s = uniform_images({2, 3, 32, 32}, 1);
  SamplerConfig cfg;
  auto g1 = gen(42), g2 = gen(42);
  EXPECT_TRUE(torch::equal(run_chain(s, m, cfg, {}, g1).final, run_chain(s, m, cfg, {}, g2).final));
}

TEST(RunChain, ParametersAndPowerIterationStateUntouched) {
  EnergyModelConfig mc;
  mc.base_channels = 2;
  mc.num_res_blocks = 2;
  auto m = build_energy_model(mc, 3);
  std::vector<torch::Tensor> before;
  for (const auto& p : m.net()->parameters()) before.push_back(p.clone());
  for (const auto& b : m.net()->buffers()) before.push_back(b.clone());
  auto g = gen(10);
  run_chain(uniform_images({2, 3, 32, 32}, 1), m, SamplerConfig{}, {}, g);
  size_t i = 0;
  for (const auto& p : m.net()->parameters()) {
    EXPECT_TRUE(torch::equal(p, before[i++]));
    EXPECT_FALSE(p.grad().defined());
  }
  for (const auto& b : m.net()->buffers()) EXPECT_TRUE(torch::equal(b, before[i++]));
}

TEST(RunChain, ClampContainment) {
  QuadraticEnergy e;
  auto g = gen(11);
  SamplerConfig cfg;
  cfg.step_size = 0.5;
  cfg.noise_std = 0.5;
  const auto chain = run_chain(uniform_images({4, 3, 32, 32}, 1) * 3.0, e, cfg, {}, g);
  EXPECT_GE(chain.final.min().item<float>(), -1.0f);
  EXPECT_LE(chain.final.max().item<float>(), 1.0f);
}

TEST(RunChain, DefaultsMatchPublishedSettings) {
  SamplerConfig cfg;
  EXPECT_EQ(cfg.num_steps, 10);
  EXPECT_EQ(cfg.step_size, 100.0);
  EXPECT_EQ(cfg.noise_std, 0.005);
  EXPECT_EQ(cfg.init, InitStrategy::StudentOutput);
}

TEST(RunChain, InvocationCounterCounts) {
  ConstantEnergy e;
  auto g = gen(12);
  const auto before = sampler_invocations();
  run_chain(torch::zeros({1, 1, 2, 2}), e, noiseless(1, 1.0), {}, g);
  run_chain(torch::zeros({1, 1, 2, 2}), e, noiseless(1, 1.0), {}, g);
  EXPECT_EQ(sampler_invocations() - before, 2u);
}

TEST(SamplerConfig, Validation) {
  SamplerConfig c;
  c.num_steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.step_size = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.noise_std = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_init_strategy("persistent"), InitStrategy::PersistentBuffer);
  EXPECT_THROW(parse_init_strategy("bogus"), ConfigError);
}

TEST(PersistentBuffer, FullReinitGivesUniformNoise) {
  auto g = gen(13);
  PersistentBuffer buf(64, {3, 32, 32}, 1.0, g);
  buf.fill(0.5);
  const auto f = buf.fetch(16, g);
  EXPECT_EQ(f.samples.size(0), 16);
  EXPECT_LT((f.samples == 0.5).sum().item<int64_t>(), 10);
  EXPECT_GE(f.samples.min().item<float>(), -1.0f);
  EXPECT_LE(f.samples.max().item<float>(), 1.0f);
}

TEST(PersistentBuffer, NoReinitPassesThrough) {
  auto g = gen(14);
  PersistentBuffer buf(32, {3, 8, 8}, 0.0, g);
  buf.fill(0.0);
  EXPECT_EQ(buf.fetch(8, g).samples.abs().sum().item<double>(), 0.0);
}

TEST(PersistentBuffer, FetchKeepsSizeAndWriteBackUpdatesOnlyFetched) {
  auto g = gen(15);
  PersistentBuffer buf(256, {3, 8, 8}, 0.0, g);
  buf.fill(0.0);
  const auto f = buf.fetch(16, g);
  EXPECT_EQ(f.samples.size(0), 16);
  EXPECT_EQ(buf.size(), 256);
  EXPECT_LE(buf.size(), buf.capacity());
  buf.write_back(f.indices, torch::ones_like(f.samples));
  const auto touched = std::get<0>(torch::_unique(f.indices)).numel();
  EXPECT_EQ((buf.entries().flatten(1).sum(1) > 0).sum().item<int64_t>(), touched);
}

TEST(PersistentBuffer, ChainWritesFinalsBack) {
  ConstantEnergy e;
  auto g = gen(16);
  PersistentBuffer buf(4, {1, 2, 2}, 0.0, g);
  buf.fill(0.25);
  SamplerConfig cfg = noiseless(1, 1.0);
  cfg.init = InitStrategy::PersistentBuffer;
  cfg.noise_std = 0.1;
  ChainInit init;
  init.buffer = &buf;
  const auto before = buf.entries().clone();
  run_chain(torch::zeros({2, 1, 2, 2}), e, cfg, init, g);
  EXPECT_FALSE(torch::equal(buf.entries(), before));
}
