#pragma once

#include "vemkd/nets.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vemkd {

/// Frozen network whose intermediate maps define perceptual distances.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<torch::Tensor> feature_maps(const torch::Tensor& images) const = 0;
};

enum class DistillAlgorithm { OMGD, GCC, GANCompression, CAT, CAGC };

DistillAlgorithm parse_distill_algorithm(const std::string& name);
std::string to_string(DistillAlgorithm a);

/// Whether the student also receives an adversarial term from the trainer.
bool uses_student_adversary(DistillAlgorithm a);

enum class MaskMode { Ones, Center };

// Component weights are per-element means; multiply by the element count to get the
// equivalent weight under a sum (||.||_{1,1}) convention.
struct DistillConfig {
  DistillAlgorithm algorithm = DistillAlgorithm::OMGD;
  double lambda_cd = 1.0;
  double lambda_tv = 0.01;
  double lambda_ssim = 1.0;
  double lambda_pl = 1.0;
  double lambda_recon = 10.0;
  double lambda_mse = 1.0;
  double lambda_style = 1.0;
  double lambda_distill = 1.0;
  double lambda_ka = 1.0;
  double lambda_lpips = 1.0;
  std::vector<std::string> taps{"down2", "mid", "up1"};
  uint64_t adapter_seed = 7;
  MaskMode mask = MaskMode::Ones;

  void validate() const;
};

/// 1x1 convolutions f_l mapping student tap channels onto teacher tap channels.
class AdapterSet : public torch::nn::Module {
 public:
  AdapterSet(const std::vector<int64_t>& student_channels, const std::vector<int64_t>& teacher_channels,
             uint64_t seed);

  /// Identity 1x1 maps (requires equal channel counts per layer).
  static std::shared_ptr<AdapterSet> identity(const std::vector<int64_t>& channels);

  FeatureMapSet forward(const FeatureMapSet& student) const;
  size_t size() const { return convs_.size(); }
  int64_t out_channels(size_t layer) const;

 private:
  std::vector<torch::nn::Conv2d> convs_;
};

// ---- primitives -----------------------------------------------------------

/// (1/C) ||GAP(p) - GAP(q)||^2, averaged over the batch.
torch::Tensor attention_loss(const torch::Tensor& p, const torch::Tensor& q);

/// Sum over layers of attention_loss(teacher_l, f_l(student_l)).
torch::Tensor channel_distill_loss(const FeatureMapSet& teacher, const FeatureMapSet& student,
                                   const AdapterSet& adapters);

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid filtering, dynamic range 2.
/// Images smaller than the window shrink it to the image size (with a warning).
torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& y);

/// Anisotropic L1 total variation normalized by C*H*W, averaged over the batch.
torch::Tensor total_variation(const torch::Tensor& x);

/// Sum over embedder layers of the mean squared feature difference.
torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& y, const FeatureExtractor& embedder);

torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b);

/// Batch-averaged Gram matrix rho(X) rho(X)^T / (C*H*W), shape [C, C].
torch::Tensor gram(const torch::Tensor& x);

/// Per-sample Gram matrices, shape [N, C, C].
torch::Tensor gram_per_sample(const torch::Tensor& x);

/// lambda_mse * mean((X-Y)^2) + lambda_style * mean((Gram(X_i) - Gram(Y_i))^2).
torch::Tensor gcc_distance(const torch::Tensor& x, const torch::Tensor& y, double lambda_mse, double lambda_style);

/// Kernel alignment ||S^T T||_F^2 / (||S^T S||_F ||T^T T||_F) with S, T flattened to [n, chw].
/// Zero-norm inputs give 0 (logged).
torch::Tensor ka_alignment(const torch::Tensor& s, const torch::Tensor& t);

/// Nearest-neighbour resize of a binary mask to `size` x `size`.
torch::Tensor downsample_mask(const torch::Tensor& mask, int64_t height, int64_t width);

/// Throws ContractViolation unless every entry is exactly 0 or 1.
void require_binary_mask(const torch::Tensor& mask);

// ---- algorithm suites -----------------------------------------------------

struct DistillInputs {
  torch::Tensor student_out;
  torch::Tensor teacher_out;
  std::optional<torch::Tensor> ground_truth;  // paired data only
  FeatureMapSet student_taps;
  FeatureMapSet teacher_taps;
  FeatureMapSet disc_student_taps;  // teacher discriminator on the student output (GCC)
  FeatureMapSet disc_teacher_taps;  // teacher discriminator on the teacher output (GCC)
  torch::Tensor mask;               // CAGC, broadcastable to the outputs
};

struct LossBreakdown {
  torch::Tensor total;
  std::map<std::string, double> terms;
};

LossBreakdown omgd_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                        const FeatureExtractor& embedder);
LossBreakdown gcc_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters);
LossBreakdown gan_compression_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                                   bool paired);
LossBreakdown cat_loss(const DistillInputs& in, const DistillConfig& cfg, bool paired);
LossBreakdown cagc_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                        const FeatureExtractor& embedder);

/// Dispatches on cfg.algorithm. Adversarial terms are not included.
LossBreakdown algorithm_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                             const FeatureExtractor& embedder, bool paired);

}  // namespace vemkd
