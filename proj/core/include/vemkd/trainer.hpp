#pragma once

#include "vemkd/checkpoint.hpp"
#include "vemkd/config.hpp"
#include "vemkd/datagen.hpp"
#include "vemkd/distill_losses.hpp"
#include "vemkd/energy_model.hpp"
#include "vemkd/metrics.hpp"
#include "vemkd/nets.hpp"
#include "vemkd/optim.hpp"
#include "vemkd/sampler.hpp"
#include "vemkd/vem_objective.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vemkd {

enum class TrainMode { OnlinePaired, OfflinePaired, OfflineUnpaired };
TrainMode parse_train_mode(const std::string& name);
std::string to_string(TrainMode m);

struct ScheduleConfig {
  int64_t total_iters = 5000;
  double lr_student = 2e-4;
  double lr_teacher = 2e-4;
  double lr_ebm = 1e-4;
  int64_t batch_size = 16;
  TrainMode mode = TrainMode::OnlinePaired;
  double lambda_rec = 100.0;
  bool teacher_rec = true;
  int64_t checkpoint_every = 1000;
  int64_t log_every = 1;
  int64_t eval_every = 0;

  bool paired() const { return mode != TrainMode::OfflineUnpaired; }
  bool online() const { return mode == TrainMode::OnlinePaired; }
  void validate() const;
};

/// Everything a run needs, resolved from a RunConfig.
struct TrainConfig {
  uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  bool deterministic = false;
  std::filesystem::path data_root = "data/shapes";
  DatasetSpec data;
  GeneratorSpec teacher;
  double student_multiplier = 0.25;
  DiscriminatorSpec disc;
  std::filesystem::path teacher_checkpoint;
  EnergyModelConfig ebm;
  SamplerConfig sampler;
  int64_t buffer_capacity = 256;
  double reinit_prob = 0.05;
  VEMConfig vem;
  int64_t vid_hidden = 32;
  DistillConfig distill;
  double lambda_gan = 1.0;
  ScheduleConfig schedule;
  int64_t eval_batch = 64;
  bool eval_against_teacher = false;
  std::string resolved_text;  // canonical config echo

  static TrainConfig from(const RunConfig& rc);
  GeneratorSpec student_spec() const;
  /// True when the MI term participates (enabled and lambda_mi > 0).
  bool mi_active() const { return vem.enabled && vem.lambda_mi > 0.0; }
  void validate() const;
};

/// One CSV row. Columns that do not apply to an iteration are written as "nan".
struct IterationRecord {
  int64_t iteration = 0;
  double lr_student = 0, lr_teacher = 0, lr_ebm = 0, lambda_mi = 0;
  double loss_ebm = NAN, energy_pos = NAN, energy_neg = NAN, energy_chain_first = NAN, energy_chain_last = NAN;
  double loss_algo = NAN, mi_surrogate = NAN, loss_student = NAN, loss_student_adv = NAN, loss_student_d = NAN;
  double loss_teacher_g = NAN, loss_teacher_d = NAN, loss_teacher_rec = NAN;
  int nonfinite = 0;

  static const std::vector<std::string>& columns();
  std::string csv_row() const;
};

/// Per-component RNG streams. Each is seeded from (seed, fixed offset) so enabling or
/// disabling a component never shifts another component's stream.
struct RngStreams {
  torch::Generator sampler;
  torch::Generator buffer;
  explicit RngStreams(uint64_t seed);
};

struct Batch {
  torch::Tensor x;
  torch::Tensor y;
};

/// Generators, discriminators, EBM (or Gaussian head), optimizers, persistent buffer,
/// RNG streams, data stream and the iteration counter.
struct TrainState {
  explicit TrainState(const TrainConfig& cfg);

  TrainConfig cfg;
  int64_t iteration = 0;
  int consecutive_nonfinite = 0;

  std::shared_ptr<Generator> teacher, student;
  std::shared_ptr<Discriminator> teacher_d, student_d;  // student_d only for adversarial suites
  std::shared_ptr<AdapterSet> adapters;
  std::unique_ptr<EnergyModel> ebm;                          // VariationalFamily::EBM
  std::shared_ptr<GaussianVariationalHead> vid_head;         // VariationalFamily::VIDGaussian
  std::unique_ptr<PersistentBuffer> buffer;                  // sampler.init == persistent
  std::unique_ptr<ToyEmbedder> embedder;

  std::unique_ptr<Adam> opt_student, opt_student_d, opt_teacher, opt_teacher_d, opt_variational;
  RngStreams rng;
  std::unique_ptr<BatchStream> data;
  PairedSplit val;

  /// Negative samples produced by this iteration's EBM step, consumed by step_student.
  std::optional<torch::Tensor> cached_negatives;
  /// Set when this iteration's chain diverged; the MI term is then skipped.
  bool negatives_skipped = false;

  /// Named tensors of one component: "teacher", "teacher_d", "student", "student_d",
  /// "adapters", "ebm" or "vid" (parameters and buffers).
  std::vector<NamedTensor> component_tensors(const std::string& component) const;
  std::vector<std::string> components() const;

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ck);

  /// MI target t for this batch: ground truth or teacher output per vem.target_source.
  torch::Tensor mi_target(const Batch& batch, const torch::Tensor& teacher_out) const;
  torch::Tensor teacher_output(const torch::Tensor& x);
};

/// Step 1: update the variational distribution with the student and teacher frozen.
/// Caches the chain endpoint for step_student. Skipped when the MI term is inactive.
void step_ebm(TrainState& st, const Batch& batch, IterationRecord& rec);
/// Step 2: distillation loss (+ adversarial term for suites that use one) + lambda_mi *
/// MI surrogate; updates student and adapters, then the student discriminator.
void step_student(TrainState& st, const Batch& batch, IterationRecord& rec);
/// Step 3 (online mode only): LSGAN discriminator update, then teacher generator update
/// with the optional reconstruction term. Throws ModeError in offline modes.
void step_teacher(TrainState& st, const Batch& batch, IterationRecord& rec);

/// One full iteration at st.iteration (learning rates, steps, counter increment).
IterationRecord train_iteration(TrainState& st, const Batch& batch);

struct RunOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint directory
  std::optional<int64_t> stop_after;            // stop once this many iterations are done
};

struct RunResult {
  int64_t iterations_done = 0;
  std::optional<MetricsReport> final_metrics;
  std::filesystem::path last_checkpoint;
};

/// Training loop. Writes under cfg.output_dir: config.resolved, metrics.csv, eval.csv,
/// eval.jsonl, checkpoints/iter_<n>/ and checkpoints/final/. Throws NumericalError after
/// 10 consecutive non-finite iterations (the last good checkpoint is left in place).
RunResult run(const TrainConfig& cfg, const RunOptions& opts = {});

/// Evaluates `st.student` on the validation split against ground truth (or the teacher).
MetricsReport evaluate_student(TrainState& st);

/// Applies single-threaded deterministic numerics when requested or when
/// VEMKD_DETERMINISTIC=1 is set. Returns whether deterministic mode is active.
bool configure_numerics(bool requested);

}  // namespace vemkd
