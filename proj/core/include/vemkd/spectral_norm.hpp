#pragma once

#include <torch/torch.h>

namespace vemkd {

inline constexpr double kSpectralEps = 1e-12;

/// Left/right singular-vector estimates carried between power iterations.
struct PowerIterationState {
  torch::Tensor u;  // [rows]
  torch::Tensor v;  // [cols]
};

/// Random unit vectors sized for `weight` viewed as [shape[0], numel / shape[0]].
PowerIterationState make_power_iteration_state(const torch::Tensor& weight, torch::Generator& gen);

/// Returns weight / sigma, where sigma = u^T W v is the power-iteration estimate of the
/// largest singular value of `weight` flattened to 2-D. When `update` is set, `iters`
/// iterations refresh `state` in place first; otherwise the stored vectors are used as-is.
/// sigma is clamped below by kSpectralEps. Gradients flow through W (including through
/// sigma) but never into the iteration vectors.
torch::Tensor spectral_normalize(const torch::Tensor& weight, PowerIterationState& state, int iters,
                                 bool update = true);

/// Current sigma estimate without normalizing (no state change).
double spectral_sigma(const torch::Tensor& weight, const PowerIterationState& state);

}  // namespace vemkd
