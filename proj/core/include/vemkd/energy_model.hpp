#pragma once

#include "vemkd/spectral_norm.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <vector>

namespace vemkd {

/// Anything that assigns a scalar energy to each (t, s) pair of a batch.
/// Implementations must be differentiable with respect to `t`.
class EnergyFunction {
 public:
  virtual ~EnergyFunction() = default;
  virtual torch::Tensor energy(const torch::Tensor& t, const torch::Tensor& s) const = 0;
};

struct EnergyModelConfig {
  int base_channels = 32;
  int num_res_blocks = 7;
  double leaky_slope = 0.2;
  int sn_power_iters = 1;
  int input_channels = 3;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

/// 3x3 convolution (or 1x1 shortcut) whose weight is spectrally normalized on every use.
class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int power_iters, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x, bool training);

  torch::Tensor weight, bias;

 private:
  PowerIterationState sn_;
  int power_iters_;
  int64_t padding_;
};
TORCH_MODULE(SNConv2d);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(int64_t in, int64_t out, int power_iters, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x, bool training);

  torch::Tensor weight, bias;

 private:
  PowerIterationState sn_;
  int power_iters_;
};
TORCH_MODULE(SNLinear);

/// Pre-activation residual block; average-pools by 2 when the width changes.
class EnergyResBlockImpl : public torch::nn::Module {
 public:
  EnergyResBlockImpl(int64_t in, int64_t out, double slope, int power_iters, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x, bool training);

 private:
  SNConv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  double slope_;
  bool downsample_;
};
TORCH_MODULE(EnergyResBlock);

class EnergyNetImpl : public torch::nn::Module {
 public:
  EnergyNetImpl(const EnergyModelConfig& cfg, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& t, const torch::Tensor& s, bool training);

  SNLinear head{nullptr};

 private:
  EnergyModelConfig cfg_;
  SNConv2d stem_{nullptr};
  std::vector<EnergyResBlock> blocks_;
};
TORCH_MODULE(EnergyNet);

/// Neural energy E(t, s): channel-concat, 3x3/2 avg-pool, ConvBlock(C), ResBlocks
/// (2C, then 4C...), ReLU, global average pool, linear -> scalar. Every conv and the
/// linear head are spectrally normalized.
///
/// Training-mode evaluation refreshes the power-iteration vectors and must be
/// serialized per instance; evaluation mode is pure.
class EnergyModel : public EnergyFunction {
 public:
  EnergyModel(const EnergyModelConfig& cfg, uint64_t seed);

  /// Per-pair energies [N].
  torch::Tensor energy(const torch::Tensor& t, const torch::Tensor& s, bool training);
  torch::Tensor energy(const torch::Tensor& t, const torch::Tensor& s) const override;

  const EnergyModelConfig& config() const { return cfg_; }
  EnergyNet& net() { return net_; }
  const EnergyNet& net() const { return net_; }
  std::vector<torch::Tensor> parameters() const { return net_->parameters(); }
  void to(torch::Dtype dtype) { net_->to(dtype); }

 private:
  void check_inputs(const torch::Tensor& t, const torch::Tensor& s) const;

  EnergyModelConfig cfg_;
  EnergyNet net_{nullptr};
};

EnergyModel build_energy_model(const EnergyModelConfig& cfg, uint64_t seed);

/// Mean of squared energies over the batch.
torch::Tensor energy_regularizer(const torch::Tensor& energies);

}  // namespace vemkd
