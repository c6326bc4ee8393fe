#include "vemkd/optim.hpp"

#include "vemkd/errors.hpp"

#include <cmath>

namespace vemkd {

std::vector<NamedTensor> named_parameters(const torch::nn::Module& module, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& p : module.named_parameters(true)) out.push_back({prefix + "." + p.key(), p.value()});
  return out;
}

std::vector<NamedTensor> named_buffers(const torch::nn::Module& module, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& b : module.named_buffers(true)) out.push_back({prefix + "." + b.key(), b.value()});
  return out;
}

std::vector<torch::Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<torch::Tensor> out;
  out.reserve(named.size());
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

Adam::Adam(std::vector<NamedTensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    exp_avg_.push_back(torch::zeros_like(p.tensor));
    exp_avg_sq_.push_back(torch::zeros_like(p.tensor));
  }
}

void Adam::step(const std::vector<torch::Tensor>& grads, double lr) {
  if (grads.size() != params_.size()) throw ContractViolation("Adam::step: gradient count mismatch");
  torch::NoGradGuard no_grad;
  ++steps_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto g = grads[i].defined() ? grads[i] : torch::zeros_like(params_[i].tensor);
    exp_avg_[i].mul_(opts_.beta1).add_(g, 1.0 - opts_.beta1);
    exp_avg_sq_[i].mul_(opts_.beta2).addcmul_(g, g, 1.0 - opts_.beta2);
    const auto denom = (exp_avg_sq_[i] / bc2).sqrt_().add_(opts_.eps);
    params_[i].tensor.addcdiv_(exp_avg_[i], denom, -lr / bc1);
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    out.push_back({params_[i].name + ".exp_avg", exp_avg_[i]});
    out.push_back({params_[i].name + ".exp_avg_sq", exp_avg_sq_[i]});
  }
  return out;
}

double linear_decay_lr(double lr0, int64_t iteration, int64_t total_iters) {
  if (total_iters <= 0) throw ContractViolation("linear_decay_lr: total_iters must be positive");
  return lr0 * (1.0 - static_cast<double>(iteration) / static_cast<double>(total_iters));
}

}  // namespace vemkd
