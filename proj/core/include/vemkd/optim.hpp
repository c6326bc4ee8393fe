#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace vemkd {

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

/// Collects `module`'s parameters as "<prefix>.<path>" pairs, in registration order.
std::vector<NamedTensor> named_parameters(const torch::nn::Module& module, const std::string& prefix);
std::vector<NamedTensor> named_buffers(const torch::nn::Module& module, const std::string& prefix);
std::vector<torch::Tensor> tensors_of(const std::vector<NamedTensor>& named);

/// Adam with explicit gradients. Moments are exposed by name so checkpoints can
/// restore them bit-exactly.
class Adam {
 public:
  struct Options {
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<NamedTensor> params, Options opts);
  explicit Adam(std::vector<NamedTensor> params) : Adam(std::move(params), Options{}) {}

  /// One update with learning rate `lr`; `grads` aligns with the parameter list
  /// (undefined entries are treated as zero gradients).
  void step(const std::vector<torch::Tensor>& grads, double lr);

  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<torch::Tensor> param_tensors() const { return tensors_of(params_); }

  /// "<param>.exp_avg" / "<param>.exp_avg_sq" tensors, aliasing internal state.
  std::vector<NamedTensor> state() const;
  int64_t step_count() const { return steps_; }
  void set_step_count(int64_t n) { steps_ = n; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<torch::Tensor> exp_avg_, exp_avg_sq_;
  Options opts_;
  int64_t steps_ = 0;
};

/// lr0 * (1 - iteration / total_iters), reaching exactly 0 at total_iters.
double linear_decay_lr(double lr0, int64_t iteration, int64_t total_iters);

}  // namespace vemkd
