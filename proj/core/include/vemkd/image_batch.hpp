#pragma once

#include <torch/torch.h>

#include <string_view>

namespace vemkd {

// Images travel as plain [N, C, H, W] tensors with values in [-1, 1].
using ImageBatch = torch::Tensor;

/// Throws ContractViolation unless `t` is a defined 4-D tensor.
void require_4d(const torch::Tensor& t, std::string_view what);

/// Throws ContractViolation unless `a` and `b` have identical shapes.
void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what);

/// Full ImageBatch contract: 4-D, finite, C in {1,3}, square 32 or 64 pixels.
void validate_image_batch(const ImageBatch& batch);

bool all_finite(const torch::Tensor& t);

}  // namespace vemkd
