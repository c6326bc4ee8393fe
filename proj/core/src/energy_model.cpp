#include "vemkd/energy_model.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"

#include <cmath>
#include <string>

namespace vemkd {

namespace {

// Power iterations run once at construction so evaluation mode starts from a
// converged sigma estimate.
constexpr int kWarmupIters = 30;

torch::Tensor init_weight(std::vector<int64_t> shape, int64_t fan_in, torch::Generator& gen) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return torch::empty(shape).uniform_(-bound, bound, gen);
}

}  // namespace

void EnergyModelConfig::validate() const {
  if (base_channels < 1) throw ConfigError("EnergyModelConfig.base_channels must be >= 1");
  if (num_res_blocks < 1) throw ConfigError("EnergyModelConfig.num_res_blocks must be >= 1");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("EnergyModelConfig.leaky_slope must be in (0, 1)");
  if (sn_power_iters < 1) throw ConfigError("EnergyModelConfig.sn_power_iters must be >= 1");
  if (input_channels < 1) throw ConfigError("EnergyModelConfig.input_channels must be >= 1");
}

SNConv2dImpl::SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int power_iters, torch::Generator& gen)
    : power_iters_(power_iters), padding_(kernel / 2) {
  weight = register_parameter("weight", init_weight({out, in, kernel, kernel}, in * kernel * kernel, gen));
  bias = register_parameter("bias", torch::zeros({out}));
  auto state = make_power_iteration_state(weight, gen);
  sn_.u = register_buffer("sn_u", state.u);
  sn_.v = register_buffer("sn_v", state.v);
  torch::NoGradGuard no_grad;
  spectral_normalize(weight, sn_, kWarmupIters, true);
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x, bool training) {
  const auto w = spectral_normalize(weight, sn_, power_iters_, training);
  return torch::conv2d(x, w, bias, 1, padding_);
}

SNLinearImpl::SNLinearImpl(int64_t in, int64_t out, int power_iters, torch::Generator& gen)
    : power_iters_(power_iters) {
  weight = register_parameter("weight", init_weight({out, in}, in, gen));
  bias = register_parameter("bias", torch::zeros({out}));
  auto state = make_power_iteration_state(weight, gen);
  sn_.u = register_buffer("sn_u", state.u);
  sn_.v = register_buffer("sn_v", state.v);
  torch::NoGradGuard no_grad;
  spectral_normalize(weight, sn_, kWarmupIters, true);
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x, bool training) {
  const auto w = spectral_normalize(weight, sn_, power_iters_, training);
  return torch::linear(x, w, bias);
}

EnergyResBlockImpl::EnergyResBlockImpl(int64_t in, int64_t out, double slope, int power_iters,
                                       torch::Generator& gen)
    : slope_(slope), downsample_(in != out) {
  conv1_ = register_module("conv1", SNConv2d(in, out, 3, power_iters, gen));
  conv2_ = register_module("conv2", SNConv2d(out, out, 3, power_iters, gen));
  if (in != out) shortcut_ = register_module("shortcut", SNConv2d(in, out, 1, power_iters, gen));
}

torch::Tensor EnergyResBlockImpl::forward(const torch::Tensor& x, bool training) {
  auto h = conv1_->forward(torch::leaky_relu(x, slope_), training);
  h = conv2_->forward(torch::leaky_relu(h, slope_), training);
  auto out = h + (shortcut_ ? shortcut_->forward(x, training) : x);
  if (downsample_) out = torch::avg_pool2d(out, 2);
  return out;
}

EnergyNetImpl::EnergyNetImpl(const EnergyModelConfig& cfg, torch::Generator& gen) : cfg_(cfg) {
  const int64_t c = cfg.base_channels;
  stem_ = register_module("stem", SNConv2d(2 * cfg.input_channels, c, 3, cfg.sn_power_iters, gen));
  int64_t width = c;
  for (int i = 0; i < cfg.num_res_blocks; ++i) {
    const int64_t out = (i == 0) ? 2 * c : 4 * c;
    blocks_.push_back(register_module("res" + std::to_string(i),
                                      EnergyResBlock(width, out, cfg.leaky_slope, cfg.sn_power_iters, gen)));
    width = out;
  }
  head = register_module("head", SNLinear(width, 1, cfg.sn_power_iters, gen));
}

torch::Tensor EnergyNetImpl::forward(const torch::Tensor& t, const torch::Tensor& s, bool training) {
  auto x = torch::cat({t, s}, 1);
  x = torch::avg_pool2d(x, 3, 2, 1, false, false);
  x = torch::leaky_relu(stem_->forward(x, training), cfg_.leaky_slope);
  for (auto& block : blocks_) x = block->forward(x, training);
  x = torch::relu(x).mean({2, 3});
  return head->forward(x, training).squeeze(1);
}

EnergyModel::EnergyModel(const EnergyModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  net_ = EnergyNet(cfg_, gen);
}

void EnergyModel::check_inputs(const torch::Tensor& t, const torch::Tensor& s) const {
  require_4d(t, "energy(t)");
  require_4d(s, "energy(s)");
  require_same_shape(t, s, "energy(t, s)");
  if (t.size(1) != cfg_.input_channels) {
    throw ContractViolation("energy: inputs have " + std::to_string(t.size(1)) + " channels, model expects " +
                            std::to_string(cfg_.input_channels));
  }
}

torch::Tensor EnergyModel::energy(const torch::Tensor& t, const torch::Tensor& s, bool training) {
  check_inputs(t, s);
  return net_->forward(t, s, training);
}

torch::Tensor EnergyModel::energy(const torch::Tensor& t, const torch::Tensor& s) const {
  check_inputs(t, s);
  return net_.ptr()->forward(t, s, false);
}

EnergyModel build_energy_model(const EnergyModelConfig& cfg, uint64_t seed) { return EnergyModel(cfg, seed); }

torch::Tensor energy_regularizer(const torch::Tensor& energies) { return energies.square().mean(); }

}  // namespace vemkd
