#include "vemkd/metrics.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"
#include "vemkd/portable_rng.hpp"
#include "vemkd/sampler.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>
#include <random>

namespace vemkd {

namespace {

constexpr int64_t kStageWidths[] = {16, 32, 64, kToyEmbedderDim};

torch::Tensor portable_tensor(std::mt19937_64& rng, std::vector<int64_t> shape, double scale) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto* p = t.data_ptr<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = scale * uniform(rng, -1.0, 1.0);
  return t.to(torch::kFloat32);
}

}  // namespace

ToyEmbedder::ToyEmbedder(int64_t in_channels, uint64_t seed) {
  std::mt19937_64 rng(seed);
  int64_t in = in_channels;
  for (int64_t out : kStageWidths) {
    // Uniform(-sqrt(6/fan_in), +) keeps activations O(1) through the LeakyReLU stack.
    const double scale = std::sqrt(6.0 / static_cast<double>(in * 9));
    weights_.push_back(portable_tensor(rng, {out, in, 3, 3}, scale));
    biases_.push_back(portable_tensor(rng, {out}, 0.1));
    in = out;
  }
}

std::vector<torch::Tensor> ToyEmbedder::feature_maps(const torch::Tensor& images) const {
  require_4d(images, "ToyEmbedder");
  std::vector<torch::Tensor> maps;
  auto h = images;
  for (size_t i = 0; i < weights_.size(); ++i) {
    h = torch::leaky_relu(torch::conv2d(h, weights_[i].to(h.dtype()), biases_[i].to(h.dtype()), 2, 1), 0.2);
    maps.push_back(h);
  }
  return maps;
}

torch::Tensor ToyEmbedder::embed(const torch::Tensor& images) const { return feature_maps(images).back().mean({2, 3}); }

double ToyEmbedder::parameter_checksum() const {
  double sum = 0.0;
  for (const auto& w : weights_) sum += w.to(torch::kFloat64).sum().item<double>();
  for (const auto& b : biases_) sum += b.to(torch::kFloat64).sum().item<double>();
  return sum;
}

torch::Tensor embedder_probe_batch() {
  std::mt19937_64 rng(7);
  return portable_tensor(rng, {4, 3, 32, 32}, 1.0);
}

torch::Tensor embed(const torch::Tensor& images, const ToyEmbedder& embedder, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> chunks;
  for (int64_t i = 0; i < images.size(0); i += batch_size) {
    chunks.push_back(embedder.embed(images.narrow(0, i, std::min(batch_size, images.size(0) - i))));
  }
  return torch::cat(chunks, 0);
}

GaussianStats gaussian_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw ContractViolation("gaussian_stats: expected [N, d] features");
  const auto f = features.to(torch::kFloat64);
  GaussianStats st;
  st.count = f.size(0);
  st.mean = f.mean(0);
  const auto centered = f - st.mean;
  const double denom = std::max<int64_t>(st.count - 1, 1);
  st.cov = torch::mm(centered.t(), centered) / denom;
  st.cov = 0.5 * (st.cov + st.cov.t());
  return st;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size(0) != b.mean.size(0)) throw ContractViolation("frechet_distance: dimension mismatch");
  const auto d = a.mean.size(0);
  if (a.count < d + 1 || b.count < d + 1) {
    spdlog::warn("frechet_distance: covariance estimated from fewer than d+1={} samples ({} / {})", d + 1, a.count,
                 b.count);
  }
  const auto [ea, va] = torch::linalg_eigh(a.cov);
  const auto sqrt_a = torch::mm(va * ea.clamp_min(0.0).sqrt().unsqueeze(0), va.t());
  auto m = torch::mm(torch::mm(sqrt_a, b.cov), sqrt_a);
  m = 0.5 * (m + m.t());
  const auto em = torch::linalg_eigvalsh(m);
  const double min_eig = std::min(ea.min().item<double>(), em.min().item<double>());
  if (min_eig < 0.0) spdlog::debug("frechet_distance: clipped negative eigenvalue of magnitude {}", -min_eig);
  const double tr_sqrt = em.clamp_min(0.0).sqrt().sum().item<double>();
  const double mean_term = (a.mean - b.mean).square().sum().item<double>();
  const double fid = mean_term + a.cov.trace().item<double>() + b.cov.trace().item<double>() - 2.0 * tr_sqrt;
  if (!std::isfinite(fid)) {
    const auto ev = torch::linalg_eigvalsh(a.cov).abs();
    const double cond = (ev.max() / ev.min().clamp_min(1e-300)).item<double>();
    throw NumericalError("frechet_distance: non-finite result (condition number of covariance ~ " +
                         std::to_string(cond) + ")");
  }
  return std::max(fid, 0.0);
}

nlohmann::json MetricsReport::to_json() const {
  return {{"toy_fid", toy_fid},   {"ssim_to_target", ssim_to_target}, {"l1_to_target", l1_to_target},
          {"psnr", psnr},         {"params", params},                 {"macs", macs},
          {"num_images", num_images}, {"sampler_invocations", sampler_invocations}};
}

torch::Tensor generate(Generator& generator, const torch::Tensor& inputs, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> chunks;
  for (int64_t i = 0; i < inputs.size(0); i += batch_size) {
    chunks.push_back(generator.forward(inputs.narrow(0, i, std::min(batch_size, inputs.size(0) - i))));
  }
  return torch::cat(chunks, 0);
}

double psnr(const torch::Tensor& x, const torch::Tensor& y) {
  const double mse = (x - y).square().mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

MetricsReport evaluate(Generator& student, const torch::Tensor& inputs, const torch::Tensor& reference,
                       const ToyEmbedder& embedder, int64_t batch_size) {
  require_4d(inputs, "evaluate(inputs)");
  require_4d(reference, "evaluate(reference)");
  if (inputs.size(0) != reference.size(0)) throw ContractViolation("evaluate: input/reference counts differ");
  const auto before = sampler_invocations();
  torch::NoGradGuard no_grad;
  const auto outputs = generate(student, inputs, batch_size);
  require_same_shape(outputs, reference, "evaluate(outputs, reference)");

  MetricsReport r;
  r.num_images = outputs.size(0);
  r.toy_fid = frechet_distance(gaussian_stats(embed(outputs, embedder, batch_size)),
                               gaussian_stats(embed(reference, embedder, batch_size)));
  r.ssim_to_target = ssim(outputs, reference).item<double>();
  r.l1_to_target = (outputs - reference).abs().mean().item<double>();
  r.psnr = psnr(outputs, reference);
  r.params = count_params(student);
  r.macs = count_macs(student.conv_shapes(static_cast<int>(inputs.size(2))));
  r.sampler_invocations = sampler_invocations() - before;
  return r;
}

}  // namespace vemkd
