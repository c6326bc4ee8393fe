#pragma once

#include "vemkd/distill_losses.hpp"
#include "vemkd/nets.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace vemkd {

/// Seed the toy embedder's weights are generated from. Changing it invalidates every
/// recorded toy-FID value.
inline constexpr uint64_t kToyEmbedderSeed = 20240917;
inline constexpr int64_t kToyEmbedderDim = 64;

/// Fixed random-weight conv net: four stride-2 3x3 stages (16, 32, 64, 64 channels) with
/// LeakyReLU, then global average pooling to a 64-d feature. Weights come from a portable
/// integer RNG, so they are identical on every machine. Not trainable.
class ToyEmbedder : public FeatureExtractor {
 public:
  explicit ToyEmbedder(int64_t in_channels = 3, uint64_t seed = kToyEmbedderSeed);

  std::vector<torch::Tensor> feature_maps(const torch::Tensor& images) const override;
  /// [N, 64] pooled features.
  torch::Tensor embed(const torch::Tensor& images) const;

  /// Sum of all weights (double); pins the generated parameters.
  double parameter_checksum() const;
  int64_t dim() const { return kToyEmbedderDim; }

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

/// Deterministic probe batch [4, 3, 32, 32] for embedder immutability checks.
torch::Tensor embedder_probe_batch();

/// Embeds `images` in chunks of `batch_size` without building a graph.
torch::Tensor embed(const torch::Tensor& images, const ToyEmbedder& embedder, int64_t batch_size = 64);

struct GaussianStats {
  torch::Tensor mean;  // [d], float64
  torch::Tensor cov;   // [d, d], float64
  int64_t count = 0;
};

/// Sample mean and unbiased covariance of `features` [N, d].
GaussianStats gaussian_stats(const torch::Tensor& features);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the trace of the square root
/// taken from the eigenvalues of the symmetric product S_a^{1/2} S_b S_a^{1/2}
/// (negative eigenvalues clipped to 0).
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct MetricsReport {
  double toy_fid = 0.0;
  double ssim_to_target = 0.0;
  double l1_to_target = 0.0;
  double psnr = 0.0;
  int64_t params = 0;
  int64_t macs = 0;
  int64_t num_images = 0;
  uint64_t sampler_invocations = 0;  // during this evaluation

  nlohmann::json to_json() const;
};

/// Single forward pass of `student` over `inputs`; all metrics compare against
/// `reference` (ground truth, or another generator's outputs).
MetricsReport evaluate(Generator& student, const torch::Tensor& inputs, const torch::Tensor& reference,
                       const ToyEmbedder& embedder, int64_t batch_size = 64);

/// Runs `generator` over `inputs` in eval chunks without a graph.
torch::Tensor generate(Generator& generator, const torch::Tensor& inputs, int64_t batch_size = 64);

/// PSNR for [-1, 1] images (peak-to-peak 2).
double psnr(const torch::Tensor& x, const torch::Tensor& y);

}  // namespace vemkd
