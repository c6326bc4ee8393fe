#include "vemkd/distill_losses.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <mutex>

namespace vemkd {

namespace {

constexpr int64_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kDynamicRange = 2.0;

torch::Tensor gaussian_window(int64_t size, int64_t channels, const torch::TensorOptions& opts) {
  auto idx = torch::arange(size, opts) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-idx.square() / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  auto w2 = torch::outer(g, g);
  return w2.expand({channels, 1, size, size}).contiguous();
}

void require_layers_match(const FeatureMapSet& a, const FeatureMapSet& b, const char* what) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(what) + ": layer count mismatch (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
}

torch::Tensor zero_like_scalar(const torch::Tensor& ref) { return torch::zeros({}, ref.options()); }

double value(const torch::Tensor& t) { return t.detach().item<double>(); }

}  // namespace

DistillAlgorithm parse_distill_algorithm(const std::string& name) {
  if (name == "omgd") return DistillAlgorithm::OMGD;
  if (name == "gcc") return DistillAlgorithm::GCC;
  if (name == "gan-compression") return DistillAlgorithm::GANCompression;
  if (name == "cat") return DistillAlgorithm::CAT;
  if (name == "cagc") return DistillAlgorithm::CAGC;
  throw ConfigError("distill.algorithm: unknown algorithm '" + name + "' (omgd|gcc|gan-compression|cat|cagc)");
}

std::string to_string(DistillAlgorithm a) {
  switch (a) {
    case DistillAlgorithm::OMGD: return "omgd";
    case DistillAlgorithm::GCC: return "gcc";
    case DistillAlgorithm::GANCompression: return "gan-compression";
    case DistillAlgorithm::CAT: return "cat";
    case DistillAlgorithm::CAGC: return "cagc";
  }
  return "?";
}

bool uses_student_adversary(DistillAlgorithm a) { return a != DistillAlgorithm::OMGD; }

void DistillConfig::validate() const {
  const std::pair<const char*, double> weights[] = {
      {"lambda_cd", lambda_cd},         {"lambda_tv", lambda_tv},       {"lambda_ssim", lambda_ssim},
      {"lambda_pl", lambda_pl},         {"lambda_recon", lambda_recon}, {"lambda_mse", lambda_mse},
      {"lambda_style", lambda_style},   {"lambda_distill", lambda_distill}, {"lambda_ka", lambda_ka},
      {"lambda_lpips", lambda_lpips}};
  for (const auto& [name, w] : weights) {
    if (!(w >= 0.0)) throw ConfigError(std::string("distill.") + name + " must be >= 0");
  }
}

AdapterSet::AdapterSet(const std::vector<int64_t>& student_channels, const std::vector<int64_t>& teacher_channels,
                       uint64_t seed) {
  if (student_channels.size() != teacher_channels.size()) {
    throw ContractViolation("AdapterSet: student/teacher layer counts differ");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < student_channels.size(); ++i) {
    auto c = torch::nn::Conv2d(torch::nn::Conv2dOptions(student_channels[i], teacher_channels[i], 1));
    const double bound = 1.0 / std::sqrt(static_cast<double>(student_channels[i]));
    c->weight.uniform_(-bound, bound, gen);
    c->bias.zero_();
    convs_.push_back(register_module("f" + std::to_string(i), c));
  }
}

std::shared_ptr<AdapterSet> AdapterSet::identity(const std::vector<int64_t>& channels) {
  auto set = std::make_shared<AdapterSet>(channels, channels, 0);
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < channels.size(); ++i) {
    set->convs_[i]->weight.copy_(torch::eye(channels[i]).view({channels[i], channels[i], 1, 1}));
    set->convs_[i]->bias.zero_();
  }
  return set;
}

int64_t AdapterSet::out_channels(size_t layer) const { return convs_.at(layer)->weight.size(0); }

FeatureMapSet AdapterSet::forward(const FeatureMapSet& student) const {
  if (student.size() != convs_.size()) throw ContractViolation("AdapterSet: expected one feature map per adapter");
  FeatureMapSet out;
  out.reserve(student.size());
  for (size_t i = 0; i < student.size(); ++i) {
    out.push_back({student[i].name, torch::conv2d(student[i].value, convs_[i]->weight, convs_[i]->bias)});
  }
  return out;
}

torch::Tensor attention_loss(const torch::Tensor& p, const torch::Tensor& q) {
  require_4d(p, "attention_loss(p)");
  require_4d(q, "attention_loss(q)");
  if (p.size(1) != q.size(1)) throw ContractViolation("attention_loss: channel counts differ");
  const auto diff = p.mean({2, 3}) - q.mean({2, 3});
  return diff.square().sum(1).div(static_cast<double>(p.size(1))).mean();
}

torch::Tensor channel_distill_loss(const FeatureMapSet& teacher, const FeatureMapSet& student,
                                   const AdapterSet& adapters) {
  require_layers_match(teacher, student, "channel_distill_loss");
  const auto adapted = adapters.forward(student);
  if (teacher.empty()) return torch::zeros({});
  auto total = zero_like_scalar(teacher.front().value);
  for (size_t l = 0; l < teacher.size(); ++l) {
    if (adapted[l].value.size(1) != teacher[l].value.size(1)) {
      throw ContractViolation("channel_distill_loss: adapter " + std::to_string(l) +
                              " does not produce the teacher channel count");
    }
    total = total + attention_loss(teacher[l].value, adapted[l].value);
  }
  return total;
}

torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& y) {
  require_4d(x, "ssim(x)");
  require_same_shape(x, y, "ssim");
  int64_t win = kSsimWindow;
  const int64_t smallest = std::min(x.size(2), x.size(3));
  if (smallest < win) {
    static std::once_flag warned;
    std::call_once(warned, [&] {
      spdlog::warn("ssim: image {}x{} smaller than the {}x{} window; shrinking window to {}", x.size(2), x.size(3), win,
                   win, smallest);
    });
    win = smallest;
  }
  const auto channels = x.size(1);
  const auto w = gaussian_window(win, channels, x.options());
  auto filt = [&](const torch::Tensor& img) { return torch::conv2d(img, w, torch::Tensor(), torch::IntArrayRef{1, 1}, torch::IntArrayRef{0, 0}, torch::IntArrayRef{1, 1}, channels); };

  const double c1 = std::pow(0.01 * kDynamicRange, 2);
  const double c2 = std::pow(0.03 * kDynamicRange, 2);
  const auto mu_x = filt(x);
  const auto mu_y = filt(y);
  const auto mu_xx = mu_x * mu_x;
  const auto mu_yy = mu_y * mu_y;
  const auto mu_xy = mu_x * mu_y;
  const auto var_x = filt(x * x) - mu_xx;
  const auto var_y = filt(y * y) - mu_yy;
  const auto cov = filt(x * y) - mu_xy;
  const auto map = ((2.0 * mu_xy + c1) * (2.0 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2));
  return map.mean();
}

torch::Tensor total_variation(const torch::Tensor& x) {
  require_4d(x, "total_variation");
  using torch::indexing::Slice;
  const auto dh = (x.index({Slice(), Slice(), Slice(1, torch::indexing::None), Slice()}) -
                   x.index({Slice(), Slice(), Slice(torch::indexing::None, -1), Slice()}))
                      .abs()
                      .sum({1, 2, 3});
  const auto dw = (x.index({Slice(), Slice(), Slice(), Slice(1, torch::indexing::None)}) -
                   x.index({Slice(), Slice(), Slice(), Slice(torch::indexing::None, -1)}))
                      .abs()
                      .sum({1, 2, 3});
  const double chw = static_cast<double>(x.size(1) * x.size(2) * x.size(3));
  return ((dh + dw) / chw).mean();
}

torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& y, const FeatureExtractor& embedder) {
  require_same_shape(x, y, "perceptual_loss");
  const auto fx = embedder.feature_maps(x);
  const auto fy = embedder.feature_maps(y);
  auto total = zero_like_scalar(x);
  for (size_t i = 0; i < fx.size(); ++i) total = total + (fx[i] - fy[i]).square().mean();
  return total;
}

torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "l1");
  return (a - b).abs().mean();
}

torch::Tensor gram_per_sample(const torch::Tensor& x) {
  require_4d(x, "gram");
  const auto n = x.size(0);
  const auto c = x.size(1);
  const auto flat = x.reshape({n, c, -1});
  return torch::bmm(flat, flat.transpose(1, 2)) / static_cast<double>(c * x.size(2) * x.size(3));
}

torch::Tensor gram(const torch::Tensor& x) { return gram_per_sample(x).mean(0); }

torch::Tensor gcc_distance(const torch::Tensor& x, const torch::Tensor& y, double lambda_mse, double lambda_style) {
  require_same_shape(x, y, "gcc_distance");
  auto d = zero_like_scalar(x);
  if (lambda_mse != 0.0) d = d + lambda_mse * (x - y).square().mean();
  if (lambda_style != 0.0) d = d + lambda_style * (gram_per_sample(x) - gram_per_sample(y)).square().mean();
  return d;
}

torch::Tensor ka_alignment(const torch::Tensor& s, const torch::Tensor& t) {
  if (s.size(0) != t.size(0)) throw ContractViolation("ka_alignment: batch sizes differ");
  const auto n = s.size(0);
  const auto rs = s.reshape({n, -1});
  const auto rt = t.reshape({n, -1});
  // ||S^T T||_F^2 = <S S^T, T T^T>_F and ||S^T S||_F = ||S S^T||_F, so everything
  // reduces to n x n kernels.
  const auto ks = torch::mm(rs, rs.t());
  const auto kt = torch::mm(rt, rt.t());
  const auto ns = ks.norm();
  const auto nt = kt.norm();
  if (ns.item<double>() == 0.0 || nt.item<double>() == 0.0) {
    spdlog::warn("ka_alignment: zero-norm feature map; alignment defined as 0");
    return zero_like_scalar(s);
  }
  return (ks * kt).sum() / (ns * nt);
}

torch::Tensor downsample_mask(const torch::Tensor& mask, int64_t height, int64_t width) {
  require_4d(mask, "mask");
  if (mask.size(2) == height && mask.size(3) == width) return mask;
  return torch::upsample_nearest2d(mask, std::vector<int64_t>{height, width});
}

void require_binary_mask(const torch::Tensor& mask) {
  require_4d(mask, "mask");
  const bool binary = ((mask == 0) | (mask == 1)).all().item<bool>();
  if (!binary) throw ContractViolation("mask must be binary (0/1 entries only)");
}

LossBreakdown omgd_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                        const FeatureExtractor& embedder) {
  LossBreakdown out;
  auto total = zero_like_scalar(in.student_out);
  if (cfg.lambda_ssim != 0.0) {
    auto l = 1.0 - ssim(in.student_out, in.teacher_out);
    out.terms["ssim"] = value(l);
    total = total + cfg.lambda_ssim * l;
  }
  if (cfg.lambda_pl != 0.0) {
    auto l = perceptual_loss(in.student_out, in.teacher_out, embedder);
    out.terms["perceptual"] = value(l);
    total = total + cfg.lambda_pl * l;
  }
  if (cfg.lambda_recon != 0.0) {
    auto l = l1_mean(in.student_out, in.teacher_out);
    out.terms["recon"] = value(l);
    total = total + cfg.lambda_recon * l;
  }
  if (cfg.lambda_cd != 0.0) {
    auto l = channel_distill_loss(in.teacher_taps, in.student_taps, adapters);
    out.terms["channel_distill"] = value(l);
    total = total + cfg.lambda_cd * l;
  }
  if (cfg.lambda_tv != 0.0) {
    auto l = total_variation(in.student_out);
    out.terms["tv"] = value(l);
    total = total + cfg.lambda_tv * l;
  }
  out.total = total;
  return out;
}

LossBreakdown gcc_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters) {
  if (in.disc_student_taps.size() != in.disc_teacher_taps.size()) {
    throw ConfigError("gcc_loss: discriminator taps missing for student or teacher output");
  }
  require_layers_match(in.teacher_taps, in.student_taps, "gcc_loss");
  LossBreakdown out;
  auto total = zero_like_scalar(in.student_out);
  auto disc = zero_like_scalar(in.student_out);
  for (size_t k = 0; k < in.disc_student_taps.size(); ++k) {
    disc = disc + gcc_distance(in.disc_student_taps[k].value, in.disc_teacher_taps[k].value.detach(), cfg.lambda_mse,
                               cfg.lambda_style);
  }
  out.terms["disc_distill"] = value(disc);
  auto feat = zero_like_scalar(in.student_out);
  if (!in.student_taps.empty()) {
    const auto adapted = adapters.forward(in.student_taps);
    for (size_t l = 0; l < adapted.size(); ++l) {
      feat = feat + gcc_distance(adapted[l].value, in.teacher_taps[l].value, cfg.lambda_mse, cfg.lambda_style);
    }
  }
  out.terms["feature_distill"] = value(feat);
  total = disc + feat;
  if (cfg.lambda_recon != 0.0) {
    auto l = l1_mean(in.student_out, in.teacher_out);
    out.terms["recon"] = value(l);
    total = total + cfg.lambda_recon * l;
  }
  out.total = total;
  return out;
}

LossBreakdown gan_compression_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                                   bool paired) {
  if (paired && !in.ground_truth) throw ConfigError("gan_compression_loss: paired mode requires ground truth y");
  require_layers_match(in.teacher_taps, in.student_taps, "gan_compression_loss");
  LossBreakdown out;
  auto total = zero_like_scalar(in.student_out);
  if (cfg.lambda_recon != 0.0) {
    auto l = l1_mean(in.student_out, paired ? *in.ground_truth : in.teacher_out);
    out.terms["recon"] = value(l);
    total = total + cfg.lambda_recon * l;
  }
  if (cfg.lambda_distill != 0.0 && !in.student_taps.empty()) {
    const auto adapted = adapters.forward(in.student_taps);
    auto l = zero_like_scalar(in.student_out);
    for (size_t i = 0; i < adapted.size(); ++i) l = l + (adapted[i].value - in.teacher_taps[i].value).square().mean();
    out.terms["feature_distill"] = value(l);
    total = total + cfg.lambda_distill * l;
  }
  out.total = total;
  return out;
}

LossBreakdown cat_loss(const DistillInputs& in, const DistillConfig& cfg, bool paired) {
  if (paired && !in.ground_truth) throw ConfigError("cat_loss: paired mode requires ground truth y");
  require_layers_match(in.teacher_taps, in.student_taps, "cat_loss");
  LossBreakdown out;
  auto total = zero_like_scalar(in.student_out);
  if (cfg.lambda_recon != 0.0) {
    auto l = l1_mean(in.student_out, paired ? *in.ground_truth : in.teacher_out);
    out.terms["recon"] = value(l);
    total = total + cfg.lambda_recon * l;
  }
  if (cfg.lambda_ka != 0.0) {
    auto l = zero_like_scalar(in.student_out);
    for (size_t i = 0; i < in.student_taps.size(); ++i) {
      l = l - ka_alignment(in.student_taps[i].value, in.teacher_taps[i].value);
    }
    out.terms["kernel_alignment"] = value(l);
    total = total + cfg.lambda_ka * l;
  }
  out.total = total;
  return out;
}

LossBreakdown cagc_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                        const FeatureExtractor& embedder) {
  require_binary_mask(in.mask);
  require_layers_match(in.teacher_taps, in.student_taps, "cagc_loss");
  const auto& m = in.mask;
  LossBreakdown out;
  auto total = zero_like_scalar(in.student_out);
  if (cfg.lambda_recon != 0.0) {
    auto l = (m * (in.student_out - in.teacher_out)).abs().mean();
    out.terms["recon"] = value(l);
    total = total + cfg.lambda_recon * l;
  }
  if (cfg.lambda_distill != 0.0 && !in.student_taps.empty()) {
    const auto adapted = adapters.forward(in.student_taps);
    auto l = zero_like_scalar(in.student_out);
    for (size_t i = 0; i < adapted.size(); ++i) {
      const auto& t = in.teacher_taps[i].value;
      const auto ml = downsample_mask(m, t.size(2), t.size(3));
      l = l + (ml * (adapted[i].value - t)).abs().mean();
    }
    out.terms["feature_distill"] = value(l);
    total = total + cfg.lambda_distill * l;
  }
  if (cfg.lambda_lpips != 0.0) {
    auto l = perceptual_loss(m * in.student_out, m * in.teacher_out, embedder);
    out.terms["perceptual"] = value(l);
    total = total + cfg.lambda_lpips * l;
  }
  out.total = total;
  return out;
}

LossBreakdown algorithm_loss(const DistillInputs& in, const DistillConfig& cfg, const AdapterSet& adapters,
                             const FeatureExtractor& embedder, bool paired) {
  switch (cfg.algorithm) {
    case DistillAlgorithm::OMGD: return omgd_loss(in, cfg, adapters, embedder);
    case DistillAlgorithm::GCC: return gcc_loss(in, cfg, adapters);
    case DistillAlgorithm::GANCompression: return gan_compression_loss(in, cfg, adapters, paired);
    case DistillAlgorithm::CAT: return cat_loss(in, cfg, paired);
    case DistillAlgorithm::CAGC: return cagc_loss(in, cfg, adapters, embedder);
  }
  throw ConfigError("unknown distillation algorithm");
}

}  // namespace vemkd
