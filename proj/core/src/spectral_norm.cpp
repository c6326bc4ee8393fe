#include "vemkd/spectral_norm.hpp"

#include "vemkd/errors.hpp"

namespace vemkd {

namespace {

torch::Tensor as_matrix(const torch::Tensor& weight) {
  if (weight.dim() < 1) throw ContractViolation("spectral_normalize: weight must have at least one dimension");
  return weight.reshape({weight.size(0), -1});
}

torch::Tensor unit(const torch::Tensor& x) { return x / x.norm().clamp_min(kSpectralEps); }

}  // namespace

PowerIterationState make_power_iteration_state(const torch::Tensor& weight, torch::Generator& gen) {
  torch::NoGradGuard no_grad;
  const auto w = as_matrix(weight);
  const auto opts = torch::TensorOptions().dtype(weight.dtype());
  return {unit(torch::randn({w.size(0)}, gen, opts)), unit(torch::randn({w.size(1)}, gen, opts))};
}

torch::Tensor spectral_normalize(const torch::Tensor& weight, PowerIterationState& state, int iters,
                                 bool update) {
  if (iters < 1) throw ContractViolation("spectral_normalize: iters must be >= 1");
  const auto w = as_matrix(weight);
  if (update) {
    torch::NoGradGuard no_grad;
    const auto wd = w.detach();
    auto u = state.u;
    auto v = state.v;
    for (int i = 0; i < iters; ++i) {
      v = unit(torch::mv(wd.t(), u));
      u = unit(torch::mv(wd, v));
    }
    state.u.copy_(u);
    state.v.copy_(v);
  }
  const auto sigma = torch::dot(state.u.detach(), torch::mv(w, state.v.detach())).clamp_min(kSpectralEps);
  return weight / sigma;
}

double spectral_sigma(const torch::Tensor& weight, const PowerIterationState& state) {
  torch::NoGradGuard no_grad;
  return torch::dot(state.u, torch::mv(as_matrix(weight), state.v)).item<double>();
}

}  // namespace vemkd
