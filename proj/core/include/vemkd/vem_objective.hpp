#pragma once

#include "vemkd/energy_model.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace vemkd {

enum class TargetSource { Auto, TeacherOutput, RealOutput };
enum class VariationalFamily { EBM, VIDGaussian };

TargetSource parse_target_source(const std::string& name);
VariationalFamily parse_variational_family(const std::string& name);
std::string to_string(TargetSource s);
std::string to_string(VariationalFamily f);

struct VEMConfig {
  bool enabled = true;
  double lambda_mi = 0.1;
  double alpha_reg = 1.0;
  TargetSource target_source = TargetSource::Auto;
  VariationalFamily variational = VariationalFamily::EBM;

  void validate() const;
};

/// mean(pos) - mean(neg) + alpha * (mean(pos^2) + mean(neg^2)).
torch::Tensor contrastive_objective(const torch::Tensor& pos_energy, const torch::Tensor& neg_energy, double alpha_reg);

struct EbmLossTerms {
  torch::Tensor loss;
  double energy_pos = 0.0;  // mean E(t, s)
  double energy_neg = 0.0;  // mean E(t~, s)
};

/// EBM objective. t, s and t~ are detached so only the energy parameters receive
/// gradient. Positive and negative pairs go through a single forward pass, so one
/// training-mode call refreshes the spectral-norm vectors exactly once.
EbmLossTerms ebm_loss_terms(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s,
                            const torch::Tensor& t_neg, double alpha_reg, bool training = true);
torch::Tensor ebm_loss(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s, const torch::Tensor& t_neg,
                       double alpha_reg, bool training = true);

/// mean E(t, s) - mean E(t~, s), differentiable in s only. Energy parameters are frozen
/// while the graph is built, so they never accumulate gradient from this loss.
/// Minimizing it maximizes the variational MI lower bound up to the constant H(T).
torch::Tensor student_mi_surrogate(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s,
                                   const torch::Tensor& t_neg);

/// L_algo + lambda_mi * surrogate.
torch::Tensor combined_student_loss(const torch::Tensor& algo_loss, const torch::Tensor& mi_surrogate,
                                    double lambda_mi);

/// Fully factorized Gaussian q(t|s) = N(mu(s), diag(sigma_c^2)) used by the VID baseline.
class GaussianVariationalHead : public torch::nn::Module {
 public:
  GaussianVariationalHead(int64_t channels, int64_t hidden, uint64_t seed);

  torch::Tensor mean(const torch::Tensor& s);
  /// softplus(raw_scale) + floor; strictly positive, shape [C].
  torch::Tensor sigma() const;

  torch::Tensor raw_scale;

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};

/// mean over pixels of log sigma_c + (t - mu)^2 / (2 sigma_c^2); sigma has shape [C].
torch::Tensor vid_nll(const torch::Tensor& t, const torch::Tensor& mu, const torch::Tensor& sigma);
torch::Tensor vid_nll(GaussianVariationalHead& head, const torch::Tensor& t, const torch::Tensor& s);

// ---- tractable 1-D harness -------------------------------------------------

/// Parameters of t | s ~ N(a s + b, sigma^2).
struct LinearGaussian {
  double a = 0.0;
  double b = 0.0;
  double sigma = 1.0;
};

struct Fit1DOptions {
  int steps = 3000;
  double lr = 0.02;
  int average_last = 500;  // iterate averaging window
  uint64_t seed = 0;
};

/// Fits the quadratic energy E(t, s) = (t - a s - b)^2 / (2 sigma^2) with the contrastive
/// objective, drawing negatives exactly from the current model instead of by MCMC.
LinearGaussian kl_gap_estimate_1d(const torch::Tensor& t, const torch::Tensor& s, const Fit1DOptions& opts = {});

/// E_s[ KL( N(a s + b, sigma^2) || N(a' s + b', sigma'^2) ) ] over the given s samples.
double conditional_gaussian_kl(const LinearGaussian& truth, const LinearGaussian& fit, const torch::Tensor& s);

}  // namespace vemkd
