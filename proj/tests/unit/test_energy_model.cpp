#include "test_support.hpp"

#include "vemkd/energy_model.hpp"
#include "vemkd/errors.hpp"
#include "vemkd/spectral_norm.hpp"

#include <gtest/gtest.h>

using namespace vemkd;
using namespace vemkd::testing;

namespace {

EnergyModelConfig micro_config() {
  EnergyModelConfig c;
  c.base_channels = 2;
  c.num_res_blocks = 1;
  c.input_channels = 1;
  return c;
}

double true_sigma_max(const torch::Tensor& w) {
  return torch::linalg_svdvals(w.reshape({w.size(0), -1}).to(torch::kFloat64)).max().item<double>();
}

}  // namespace

TEST(SpectralNormalize, DiagonalMatrixMatchesSvd) {
  auto w = torch::diag(torch::tensor({3.0, 1.0}, torch::kFloat64));
  auto g = gen(1);
  auto st = make_power_iteration_state(w, g);
  const auto n = spectral_normalize(w, st, 20);
  EXPECT_NEAR(n[0][0].item<double>(), 1.0, 1e-2);
  EXPECT_NEAR(n[1][1].item<double>(), 1.0 / 3.0, 1e-2);
  EXPECT_NEAR(true_sigma_max(n), 1.0, 1e-2);
}

TEST(SpectralNormalize, IdentityUnchanged) {
  auto w = torch::eye(4, torch::kFloat64);
  auto g = gen(2);
  auto st = make_power_iteration_state(w, g);
  EXPECT_TRUE(torch::allclose(spectral_normalize(w, st, 5), w, 0, 1e-12));
}

TEST(SpectralNormalize, RandomMatricesBoundedBySvdOracle) {
  auto g = gen(3);
  for (int i = 0; i < 50; ++i) {
    const auto rows = 2 + i % 7, cols = 3 + (i * 5) % 11;
    auto w = torch::randn({rows, cols}, g, torch::kFloat64) * (0.1 + i);
    auto st = make_power_iteration_state(w, g);
    const double s = true_sigma_max(spectral_normalize(w, st, 20));
    const auto sv = torch::linalg_svdvals(w);
    const double gap = (sv[1] / sv[0]).item<double>();
    EXPECT_GE(s, 0.95) << "matrix " << i << ", sigma2/sigma1 = " << gap;
    EXPECT_LE(s, 1.02) << "matrix " << i << ", sigma2/sigma1 = " << gap;
  }
}

TEST(SpectralNormalize, ConvKernelReshapedTo2d) {
  auto g = gen(4);
  auto w = torch::randn({6, 3, 3, 3}, g, torch::kFloat64);
  auto st = make_power_iteration_state(w, g);
  const auto n = spectral_normalize(w, st, 50);
  EXPECT_EQ(n.sizes(), w.sizes());
  EXPECT_NEAR(true_sigma_max(n), 1.0, 1e-2);
}

TEST(SpectralNormalize, ZeroWeightIsClamped) {
  auto w = torch::zeros({3, 3}, torch::kFloat64);
  auto g = gen(5);
  auto st = make_power_iteration_state(w, g);
  const auto n = spectral_normalize(w, st, 3);
  EXPECT_TRUE(n.isfinite().all().item<bool>());
  EXPECT_EQ(n.abs().sum().item<double>(), 0.0);
}

TEST(SpectralNormalize, RejectsZeroIterations) {
  auto w = torch::eye(2);
  auto g = gen(6);
  auto st = make_power_iteration_state(w, g);
  EXPECT_THROW(spectral_normalize(w, st, 0), ContractViolation);
}

TEST(SpectralNormalize, NoUpdateLeavesStateAlone) {
  auto g = gen(7);
  auto w = torch::randn({4, 5}, g);
  auto st = make_power_iteration_state(w, g);
  const auto u0 = st.u.clone();
  spectral_normalize(w, st, 3, false);
  EXPECT_TRUE(torch::equal(st.u, u0));
  spectral_normalize(w, st, 3, true);
  EXPECT_FALSE(torch::equal(st.u, u0));
}

TEST(EnergyModelConfig, ValidationNamesField) {
  EnergyModelConfig c;
  c.base_channels = 0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("base_channels"), std::string::npos);
  }
  c = {};
  c.sn_power_iters = 0;
  EXPECT_THROW(build_energy_model(c, 1), ConfigError);
  c = {};
  c.leaky_slope = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EnergyModel, BaseWidthFollowsConfig) {
  for (int c : {8, 32}) {
    EnergyModelConfig cfg;
    cfg.base_channels = c;
    auto m = build_energy_model(cfg, 1);
    // The stem maps the concatenated 6-channel input to C channels.
    const auto params = m.net()->named_parameters();
    EXPECT_EQ(params["stem.weight"].size(0), c);
    EXPECT_EQ(params["stem.weight"].size(1), 6);
    EXPECT_EQ(params["head.weight"].size(1), 4 * c);
  }
}

TEST(EnergyModel, SameSeedSameParameters) {
  auto a = build_energy_model({}, 11), b = build_energy_model({}, 11), c = build_energy_model({}, 12);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(torch::equal(pa[i], pb[i]));
    any_diff |= !torch::equal(pa[i], pc[i]);
  }
  EXPECT_TRUE(any_diff);
}

TEST(EnergyModel, OutputShapeAndFiniteness) {
  EnergyModelConfig cfg;
  cfg.base_channels = 8;
  auto m = build_energy_model(cfg, 3);
  for (int64_t size : {32, 64}) {
    const auto t = uniform_images({5, 3, size, size}, 1), s = uniform_images({5, 3, size, size}, 2);
    const auto e = m.energy(t, s);
    EXPECT_EQ(e.sizes(), (std::vector<int64_t>{5}));
    EXPECT_TRUE(e.isfinite().all().item<bool>());
  }
}

TEST(EnergyModel, JointFunctionNotSymmetric) {
  EnergyModelConfig cfg;
  cfg.base_channels = 8;
  auto m = build_energy_model(cfg, 3);
  const auto t = uniform_images({4, 3, 32, 32}, 1), s = uniform_images({4, 3, 32, 32}, 2);
  const auto perm = torch::tensor({1, 2, 3, 0});
  EXPECT_FALSE(torch::allclose(m.energy(t, s), m.energy(t, s.index_select(0, perm))));
}

TEST(EnergyModel, ZeroHeadGivesZeroEnergy) {
  EnergyModelConfig cfg;
  cfg.base_channels = 8;
  auto m = build_energy_model(cfg, 3);
  {
    torch::NoGradGuard no_grad;
    m.net()->head->weight.zero_();
    m.net()->head->bias.zero_();
  }
  const auto e = m.energy(uniform_images({3, 3, 32, 32}, 1), uniform_images({3, 3, 32, 32}, 2));
  EXPECT_EQ(e.abs().max().item<float>(), 0.0f);
}

TEST(EnergyModel, EvaluationIsPureTrainingRefreshesVectors) {
  EnergyModelConfig cfg;
  cfg.base_channels = 4;
  auto m = build_energy_model(cfg, 5);
  const auto t = uniform_images({2, 3, 32, 32}, 1), s = uniform_images({2, 3, 32, 32}, 2);
  auto buffers = [&] {
    std::vector<torch::Tensor> out;
    for (const auto& b : m.net()->buffers()) out.push_back(b.clone());
    return out;
  };
  const auto before = buffers();
  const auto e1 = m.energy(t, s), e2 = m.energy(t, s);
  EXPECT_TRUE(torch::equal(e1, e2));
  auto after = buffers();
  for (size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(torch::equal(before[i], after[i]));
  m.energy(t, s, true);
  after = buffers();
  bool changed = false;
  for (size_t i = 0; i < before.size(); ++i) changed |= !torch::equal(before[i], after[i]);
  EXPECT_TRUE(changed);
}

TEST(EnergyModel, ShapeMismatchIsContractViolation) {
  auto m = build_energy_model({}, 1);
  EXPECT_THROW(m.energy(uniform_images({2, 3, 32, 32}, 1), uniform_images({3, 3, 32, 32}, 2)), ContractViolation);
  EXPECT_THROW(m.energy(uniform_images({2, 1, 32, 32}, 1), uniform_images({2, 1, 32, 32}, 2)), ContractViolation);
}

TEST(EnergyModel, GradientsMatchFiniteDifferences) {
  auto m = build_energy_model(micro_config(), 21);
  m.to(torch::kFloat64);
  auto t = uniform_images({2, 1, 8, 8}, 1, torch::kFloat64).requires_grad_(true);
  auto s = uniform_images({2, 1, 8, 8}, 2, torch::kFloat64).requires_grad_(true);
  auto f = [&] { return m.energy(t, s).mean(); };

  auto params = m.parameters();
  std::vector<torch::Tensor> inputs{t, s};
  inputs.insert(inputs.end(), params.begin(), params.end());
  const auto grads = torch::autograd::grad({f()}, inputs);
  for (size_t i = 0; i < inputs.size(); ++i) {
    const auto fd = finite_difference([&] { return f().item<double>(); }, inputs[i].detach());
    EXPECT_LT(relative_error(grads[i], fd), 1e-3) << "input " << i;
  }
}

TEST(EnergyRegularizer, GoldenValues) {
  EXPECT_EQ(energy_regularizer(torch::zeros({3})).item<double>(), 0.0);
  EXPECT_EQ(energy_regularizer(torch::tensor({1.0, -1.0})).item<double>(), 1.0);
  EXPECT_EQ(energy_regularizer(torch::tensor({2.0})).item<double>(), 4.0);
}
