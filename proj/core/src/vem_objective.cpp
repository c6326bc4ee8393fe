#include "vemkd/vem_objective.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"
#include "vemkd/optim.hpp"

#include <cmath>

namespace vemkd {

namespace {

// Temporarily clears requires_grad on a parameter list.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<torch::Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      was_.push_back(p.requires_grad());
      p.requires_grad_(false);
    }
  }
  ~FreezeGuard() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i].requires_grad_(was_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> was_;
};

constexpr double kSigmaFloor = 1e-4;

}  // namespace

TargetSource parse_target_source(const std::string& name) {
  if (name == "auto") return TargetSource::Auto;
  if (name == "teacher") return TargetSource::TeacherOutput;
  if (name == "real") return TargetSource::RealOutput;
  throw ConfigError("vem.target_source: unknown value '" + name + "' (auto|teacher|real)");
}

VariationalFamily parse_variational_family(const std::string& name) {
  if (name == "ebm") return VariationalFamily::EBM;
  if (name == "vid-gaussian") return VariationalFamily::VIDGaussian;
  throw ConfigError("vem.variational: unknown value '" + name + "' (ebm|vid-gaussian)");
}

std::string to_string(TargetSource s) {
  switch (s) {
    case TargetSource::Auto: return "auto";
    case TargetSource::TeacherOutput: return "teacher";
    case TargetSource::RealOutput: return "real";
  }
  return "?";
}

std::string to_string(VariationalFamily f) { return f == VariationalFamily::EBM ? "ebm" : "vid-gaussian"; }

void VEMConfig::validate() const {
  if (!(lambda_mi >= 0.0)) throw ConfigError("vem.lambda_mi must be >= 0");
  if (!(alpha_reg >= 0.0)) throw ConfigError("vem.alpha_reg must be >= 0");
}

torch::Tensor contrastive_objective(const torch::Tensor& pos_energy, const torch::Tensor& neg_energy,
                                    double alpha_reg) {
  auto loss = pos_energy.mean() - neg_energy.mean();
  if (alpha_reg != 0.0) {
    loss = loss + alpha_reg * (energy_regularizer(pos_energy) + energy_regularizer(neg_energy));
  }
  return loss;
}

EbmLossTerms ebm_loss_terms(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s,
                            const torch::Tensor& t_neg, double alpha_reg, bool training) {
  require_same_shape(t, s, "ebm_loss(t, s)");
  require_same_shape(t_neg, s, "ebm_loss(t~, s)");
  const auto n = t.size(0);
  const auto sd = s.detach();
  const auto e = model.energy(torch::cat({t.detach(), t_neg.detach()}, 0), torch::cat({sd, sd}, 0), training);
  const auto pos = e.narrow(0, 0, n);
  const auto neg = e.narrow(0, n, n);
  EbmLossTerms out;
  out.loss = contrastive_objective(pos, neg, alpha_reg);
  out.energy_pos = pos.detach().mean().item<double>();
  out.energy_neg = neg.detach().mean().item<double>();
  return out;
}

torch::Tensor ebm_loss(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s, const torch::Tensor& t_neg,
                       double alpha_reg, bool training) {
  return ebm_loss_terms(model, t, s, t_neg, alpha_reg, training).loss;
}

torch::Tensor student_mi_surrogate(EnergyModel& model, const torch::Tensor& t, const torch::Tensor& s,
                                   const torch::Tensor& t_neg) {
  require_same_shape(t, s, "student_mi_surrogate(t, s)");
  require_same_shape(t_neg, s, "student_mi_surrogate(t~, s)");
  FreezeGuard freeze(model.parameters());
  const auto n = t.size(0);
  const auto e = model.energy(torch::cat({t.detach(), t_neg.detach()}, 0), torch::cat({s, s}, 0), false);
  return e.narrow(0, 0, n).mean() - e.narrow(0, n, n).mean();
}

torch::Tensor combined_student_loss(const torch::Tensor& algo_loss, const torch::Tensor& mi_surrogate,
                                    double lambda_mi) {
  if (!(lambda_mi >= 0.0)) throw ContractViolation("combined_student_loss: lambda_mi must be >= 0");
  if (lambda_mi == 0.0 || !mi_surrogate.defined()) return algo_loss;
  return algo_loss + lambda_mi * mi_surrogate;
}

GaussianVariationalHead::GaussianVariationalHead(int64_t channels, int64_t hidden, uint64_t seed) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, hidden, 3).padding(1)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, 3).padding(1)));
  // softplus(raw) = 1 at init.
  raw_scale = register_parameter("raw_scale", torch::full({channels}, std::log(std::exp(1.0) - 1.0)));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto* c : {&conv1_, &conv2_}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>((*c)->weight[0].numel()));
    (*c)->weight.uniform_(-bound, bound, gen);
    (*c)->bias.zero_();
  }
}

torch::Tensor GaussianVariationalHead::mean(const torch::Tensor& s) {
  return conv2_->forward(torch::leaky_relu(conv1_->forward(s), 0.2));
}

torch::Tensor GaussianVariationalHead::sigma() const { return torch::softplus(raw_scale) + kSigmaFloor; }

torch::Tensor vid_nll(const torch::Tensor& t, const torch::Tensor& mu, const torch::Tensor& sigma) {
  require_same_shape(t, mu, "vid_nll");
  if (sigma.dim() != 1 || sigma.size(0) != t.size(1)) throw ContractViolation("vid_nll: sigma must have shape [C]");
  const auto sc = sigma.view({1, -1, 1, 1});
  return (torch::log(sc) + (t - mu).square() / (2.0 * sc.square())).mean();
}

torch::Tensor vid_nll(GaussianVariationalHead& head, const torch::Tensor& t, const torch::Tensor& s) {
  return vid_nll(t, head.mean(s), head.sigma());
}

LinearGaussian kl_gap_estimate_1d(const torch::Tensor& t, const torch::Tensor& s, const Fit1DOptions& opts) {
  if (t.dim() != 1 || t.sizes() != s.sizes()) throw ContractViolation("kl_gap_estimate_1d: expected equal-length 1-D t, s");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(opts.seed);
  const auto opt64 = torch::TensorOptions().dtype(torch::kFloat64);
  const auto td = t.to(torch::kFloat64);
  const auto sd = s.to(torch::kFloat64);
  auto a = torch::zeros({}, opt64).requires_grad_(true);
  auto b = torch::zeros({}, opt64).requires_grad_(true);
  auto log_sigma = torch::zeros({}, opt64).requires_grad_(true);
  Adam adam({{"a", a}, {"b", b}, {"log_sigma", log_sigma}}, Adam::Options{0.9, 0.999, 1e-8});

  auto energy = [&](const torch::Tensor& tt) {
    return (tt - a * sd - b).square() / (2.0 * torch::exp(2.0 * log_sigma));
  };

  double sum_a = 0.0, sum_b = 0.0, sum_ls = 0.0;
  int averaged = 0;
  for (int step = 0; step < opts.steps; ++step) {
    torch::Tensor t_neg;
    {
      torch::NoGradGuard no_grad;
      t_neg = a * sd + b + torch::exp(log_sigma) * torch::randn(sd.sizes(), gen, opt64);
    }
    const auto loss = contrastive_objective(energy(td), energy(t_neg), 0.0);
    auto grads = torch::autograd::grad({loss}, {a, b, log_sigma});
    adam.step(grads, opts.lr);
    if (step >= opts.steps - opts.average_last) {
      sum_a += a.item<double>();
      sum_b += b.item<double>();
      sum_ls += log_sigma.item<double>();
      ++averaged;
    }
  }
  if (averaged == 0) return {a.item<double>(), b.item<double>(), std::exp(log_sigma.item<double>())};
  return {sum_a / averaged, sum_b / averaged, std::exp(sum_ls / averaged)};
}

double conditional_gaussian_kl(const LinearGaussian& truth, const LinearGaussian& fit, const torch::Tensor& s) {
  const auto sd = s.to(torch::kFloat64);
  const auto dmu = (truth.a - fit.a) * sd + (truth.b - fit.b);
  const double ratio = truth.sigma * truth.sigma / (fit.sigma * fit.sigma);
  const auto kl = std::log(fit.sigma / truth.sigma) + 0.5 * ratio + dmu.square() / (2.0 * fit.sigma * fit.sigma) - 0.5;
  return kl.mean().item<double>();
}

}  // namespace vemkd
