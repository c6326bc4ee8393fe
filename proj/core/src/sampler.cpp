#include "vemkd/sampler.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"

#include <atomic>

namespace vemkd {

namespace {

std::atomic<uint64_t> g_invocations{0};

struct StepResult {
  torch::Tensor next;
  double mean_energy;
};

StepResult step_impl(const torch::Tensor& t, const torch::Tensor& s, const EnergyFunction& energy,
                     double step_size, double noise_std, torch::Generator& gen,
                     const std::optional<std::pair<double, double>>& clamp, int step_index) {
  torch::AutoGradMode grad_on(true);
  auto x = t.detach().requires_grad_(true);
  const auto e = energy.energy(x, s.detach());
  torch::Tensor grad;
  if (e.requires_grad()) {
    grad = torch::autograd::grad({e.sum()}, {x}, {}, false, false, true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(x);
  if (!all_finite(grad)) throw SamplerDivergence(step_index, "non-finite energy gradient");

  torch::NoGradGuard no_grad;
  auto next = x.detach() - (0.5 * step_size) * grad;
  if (noise_std > 0.0) next += noise_std * torch::randn(next.sizes(), gen, next.options());
  if (clamp) next.clamp_(clamp->first, clamp->second);
  return {next, e.detach().mean().item<double>()};
}

torch::Tensor uniform_like(const torch::Tensor& ref, torch::Generator& gen) {
  return torch::rand(ref.sizes(), gen, ref.options()) * 2.0 - 1.0;
}

}  // namespace

InitStrategy parse_init_strategy(const std::string& name) {
  if (name == "student") return InitStrategy::StudentOutput;
  if (name == "teacher" || name == "data") return InitStrategy::TeacherData;
  if (name == "persistent") return InitStrategy::PersistentBuffer;
  if (name == "uniform") return InitStrategy::Uniform;
  throw ConfigError("sampler.init: unknown strategy '" + name + "' (student|teacher|persistent|uniform)");
}

std::string to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::StudentOutput: return "student";
    case InitStrategy::TeacherData: return "teacher";
    case InitStrategy::PersistentBuffer: return "persistent";
    case InitStrategy::Uniform: return "uniform";
  }
  return "?";
}

void SamplerConfig::validate() const {
  if (num_steps < 1) throw ConfigError("sampler.steps must be >= 1");
  if (!(step_size > 0.0)) throw ConfigError("sampler.step_size must be > 0");
  if (!(noise_std >= 0.0)) throw ConfigError("sampler.noise_std must be >= 0");
  if (clamp && !(clamp->first < clamp->second)) throw ConfigError("sampler.clamp must be an increasing pair");
}

PersistentBuffer::PersistentBuffer(int64_t capacity, std::vector<int64_t> sample_shape, double reinit_prob,
                                   torch::Generator& gen)
    : reinit_prob_(reinit_prob) {
  if (capacity < 1) throw ConfigError("sampler.buffer_capacity must be >= 1");
  if (reinit_prob < 0.0 || reinit_prob > 1.0) throw ConfigError("sampler.reinit_prob must be in [0, 1]");
  std::vector<int64_t> shape{capacity};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  entries_ = torch::rand(shape, gen) * 2.0 - 1.0;
}

PersistentBuffer::Fetch PersistentBuffer::fetch(int64_t batch, torch::Generator& gen) {
  torch::NoGradGuard no_grad;
  auto idx = torch::randint(capacity(), {batch}, gen, torch::kLong);
  auto samples = entries_.index_select(0, idx);
  auto reinit = torch::rand({batch}, gen) < reinit_prob_;
  if (reinit.any().item<bool>()) {
    auto noise = uniform_like(samples, gen);
    auto mask = reinit.view({batch, 1, 1, 1}).to(samples.dtype());
    samples = mask * noise + (1.0 - mask) * samples;
  }
  return {samples, idx};
}

void PersistentBuffer::write_back(const torch::Tensor& indices, const torch::Tensor& samples) {
  torch::NoGradGuard no_grad;
  entries_.index_copy_(0, indices, samples.detach().to(entries_.dtype()));
}

void PersistentBuffer::fill(double value) { entries_.fill_(value); }

torch::Tensor langevin_step(const torch::Tensor& t, const torch::Tensor& s, const EnergyFunction& energy,
                            double step_size, double noise_std, torch::Generator& gen,
                            std::optional<std::pair<double, double>> clamp) {
  require_same_shape(t, s, "langevin_step");
  if (!(step_size > 0.0)) throw ContractViolation("langevin_step: step size must be > 0");
  return step_impl(t, s, energy, step_size, noise_std, gen, clamp, 0).next;
}

SampleChain run_chain(const torch::Tensor& s, const EnergyFunction& energy, const SamplerConfig& cfg,
                      const ChainInit& source, torch::Generator& gen) {
  cfg.validate();
  ++g_invocations;
  const auto s_const = s.detach();

  torch::Tensor init;
  PersistentBuffer::Fetch fetched;
  switch (cfg.init) {
    case InitStrategy::StudentOutput:
      init = s_const.clone();
      break;
    case InitStrategy::TeacherData:
      if (!source.teacher.defined()) throw ConfigError("sampler.init=teacher requires teacher outputs");
      require_same_shape(source.teacher, s_const, "run_chain(teacher init)");
      init = source.teacher.detach().clone();
      break;
    case InitStrategy::PersistentBuffer:
      if (source.buffer == nullptr) throw ConfigError("sampler.init=persistent requires a persistent buffer");
      fetched = source.buffer->fetch(s_const.size(0), gen);
      init = fetched.samples.to(s_const.dtype());
      require_same_shape(init, s_const, "run_chain(buffer init)");
      break;
    case InitStrategy::Uniform:
      init = uniform_like(s_const, gen);
      break;
  }

  SampleChain chain;
  chain.init = init;
  chain.energies.reserve(cfg.num_steps + 1);
  auto t = init;
  for (int k = 0; k < cfg.num_steps; ++k) {
    auto r = step_impl(t, s_const, energy, cfg.step_size, cfg.noise_std, gen, cfg.clamp, k + 1);
    chain.energies.push_back(r.mean_energy);
    t = r.next;
  }
  {
    torch::NoGradGuard no_grad;
    chain.energies.push_back(energy.energy(t, s_const).mean().item<double>());
  }
  chain.final = t;
  if (cfg.init == InitStrategy::PersistentBuffer) source.buffer->write_back(fetched.indices, t);
  return chain;
}

uint64_t sampler_invocations() { return g_invocations.load(); }

}  // namespace vemkd
