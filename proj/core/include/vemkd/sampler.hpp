#pragma once

#include "vemkd/energy_model.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vemkd {

enum class InitStrategy { StudentOutput, TeacherData, PersistentBuffer, Uniform };

InitStrategy parse_init_strategy(const std::string& name);
std::string to_string(InitStrategy s);

/// Short-run Langevin settings. Drift step size and noise std are independent knobs.
struct SamplerConfig {
  int num_steps = 10;
  double step_size = 100.0;
  double noise_std = 0.005;
  InitStrategy init = InitStrategy::StudentOutput;
  std::optional<std::pair<double, double>> clamp = std::make_pair(-1.0, 1.0);

  void validate() const;
};

struct SampleChain {
  torch::Tensor init;            // t~^0
  torch::Tensor final;           // t~^K
  std::vector<double> energies;  // mean energy at t~^0 .. t~^K
};

/// Fixed-capacity store of past chain endpoints for the persistent (PCD) variant.
/// Only the entries handed out by fetch() are written back.
class PersistentBuffer {
 public:
  PersistentBuffer(int64_t capacity, std::vector<int64_t> sample_shape, double reinit_prob, torch::Generator& gen);

  struct Fetch {
    torch::Tensor samples;
    torch::Tensor indices;  // int64 [batch]
  };

  /// Draws `batch` random slots; each is replaced by U[-1, 1] noise with probability reinit_prob.
  Fetch fetch(int64_t batch, torch::Generator& gen);
  void write_back(const torch::Tensor& indices, const torch::Tensor& samples);
  void fill(double value);

  int64_t capacity() const { return entries_.size(0); }
  int64_t size() const { return entries_.size(0); }
  double reinit_prob() const { return reinit_prob_; }
  torch::Tensor& entries() { return entries_; }
  const torch::Tensor& entries() const { return entries_; }

 private:
  torch::Tensor entries_;
  double reinit_prob_;
};

/// Where t~^0 comes from. Only the field matching the strategy is consulted.
struct ChainInit {
  torch::Tensor teacher;               // TeacherData
  PersistentBuffer* buffer = nullptr;  // PersistentBuffer
};

/// One Langevin update t - (step_size / 2) * grad_t E(t, s) + N(0, noise_std^2), optionally
/// clamped. The result is detached; no gradient reaches the energy's parameters.
torch::Tensor langevin_step(const torch::Tensor& t, const torch::Tensor& s, const EnergyFunction& energy,
                            double step_size, double noise_std, torch::Generator& gen,
                            std::optional<std::pair<double, double>> clamp = std::nullopt);

/// Runs cfg.num_steps Langevin updates from the strategy's initial point.
SampleChain run_chain(const torch::Tensor& s, const EnergyFunction& energy, const SamplerConfig& cfg,
                      const ChainInit& source, torch::Generator& gen);

/// Process-wide count of run_chain calls (used to prove evaluation never samples).
uint64_t sampler_invocations();

}  // namespace vemkd
