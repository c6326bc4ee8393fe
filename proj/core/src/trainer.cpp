#include "vemkd/trainer.hpp"

#include "vemkd/errors.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace vemkd {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxConsecutiveNonfinite = 10;

enum Stream : uint64_t {
  kData = 1,
  kTeacher = 2,
  kStudent = 3,
  kTeacherD = 4,
  kEbm = 5,
  kVid = 6,
  kSampler = 7,
  kBuffer = 8,
  kAdapters = 100,
};

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t x = seed * 0x9E3779B97F4A7C15ULL + stream;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

torch::Generator make_gen(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

bool finite(const torch::Tensor& t) { return std::isfinite(t.item<double>()); }

std::vector<torch::Tensor> grads_of(const torch::Tensor& loss, const std::vector<torch::Tensor>& params) {
  return torch::autograd::grad({loss}, params, {}, false, false, true);
}

torch::Tensor lsgan(const torch::Tensor& logits, double target) { return (logits - target).square().mean(); }

torch::Tensor cagc_mask(MaskMode mode, const torch::Tensor& like) {
  auto m = torch::ones({like.size(0), 1, like.size(2), like.size(3)}, like.options());
  if (mode == MaskMode::Center) {
    const auto h = like.size(2), w = like.size(3);
    m.zero_();
    m.slice(2, h / 4, h - h / 4).slice(3, w / 4, w - w / 4).fill_(1.0);
  }
  return m;
}

std::vector<int64_t> tap_channels(const Generator& g, const std::vector<std::string>& names) {
  std::vector<int64_t> out;
  for (const auto& n : names) out.push_back(g.tap_channels(n));
  return out;
}

std::string opt_key(const std::string& name) { return "opt." + name; }

}  // namespace

TrainMode parse_train_mode(const std::string& name) {
  if (name == "online-paired") return TrainMode::OnlinePaired;
  if (name == "offline-paired") return TrainMode::OfflinePaired;
  if (name == "offline-unpaired") return TrainMode::OfflineUnpaired;
  throw ConfigError("schedule.mode: unknown mode '" + name + "' (online-paired|offline-paired|offline-unpaired)");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::OnlinePaired:
      return "online-paired";
    case TrainMode::OfflinePaired:
      return "offline-paired";
    case TrainMode::OfflineUnpaired:
      return "offline-unpaired";
  }
  return "?";
}

void ScheduleConfig::validate() const {
  if (total_iters < 1) throw ConfigError("schedule.total_iters must be >= 1");
  if (!(lr_student > 0)) throw ConfigError("schedule.lr_student must be > 0");
  if (!(lr_teacher > 0)) throw ConfigError("schedule.lr_teacher must be > 0");
  if (!(lr_ebm > 0)) throw ConfigError("schedule.lr_ebm must be > 0");
  if (batch_size < 1) throw ConfigError("schedule.batch_size must be >= 1");
  if (lambda_rec < 0) throw ConfigError("schedule.lambda_rec must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("schedule.checkpoint_every must be >= 0");
  if (log_every < 1) throw ConfigError("schedule.log_every must be >= 1");
  if (eval_every < 0) throw ConfigError("schedule.eval_every must be >= 0");
}

TrainConfig TrainConfig::from(const RunConfig& rc) {
  TrainConfig c;
  c.seed = static_cast<uint64_t>(rc.get_int("seed"));
  c.output_dir = rc.get_string("output_dir");
  c.deterministic = rc.get_bool("deterministic");

  c.data_root = rc.get_string("data.root");
  c.data.name = rc.get_string("data.name");
  c.data.image_size = static_cast<int>(rc.get_int("data.image_size"));
  c.data.channels = static_cast<int>(rc.get_int("data.channels"));
  c.data.num_train = rc.get_int("data.num_train");
  c.data.num_val = rc.get_int("data.num_val");
  c.data.seed = static_cast<uint64_t>(rc.get_int("data.seed"));

  c.teacher.family = parse_generator_family(rc.get_string("model.family"));
  c.teacher.base_width = static_cast<int>(rc.get_int("model.width"));
  c.teacher.width_multiplier = 1.0;
  c.teacher.in_channels = c.data.channels;
  c.teacher.out_channels = c.data.channels;
  c.teacher.image_size = static_cast<int>(rc.get_int("model.image_size"));
  c.student_multiplier = rc.get_double("model.student_multiplier");
  c.disc.depth = static_cast<int>(rc.get_int("model.disc_depth"));
  c.disc.base_width = static_cast<int>(rc.get_int("model.disc_width"));
  c.disc.in_channels = 2 * c.data.channels;
  c.disc.taps.clear();
  for (auto t : rc.get_ints("model.disc_taps")) c.disc.taps.push_back(static_cast<int>(t));
  c.teacher_checkpoint = rc.get_string("model.teacher_checkpoint");

  c.ebm.base_channels = static_cast<int>(rc.get_int("ebm.channels"));
  c.ebm.num_res_blocks = static_cast<int>(rc.get_int("ebm.res_blocks"));
  c.ebm.leaky_slope = rc.get_double("ebm.leaky_slope");
  c.ebm.sn_power_iters = static_cast<int>(rc.get_int("ebm.sn_iters"));
  c.ebm.input_channels = c.data.channels;

  c.sampler.num_steps = static_cast<int>(rc.get_int("sampler.steps"));
  c.sampler.step_size = rc.get_double("sampler.step_size");
  c.sampler.noise_std = rc.get_double("sampler.noise_std");
  c.sampler.init = parse_init_strategy(rc.get_string("sampler.init"));
  const auto clamp = rc.get_doubles("sampler.clamp");
  if (clamp.empty()) {
    c.sampler.clamp.reset();
  } else if (clamp.size() == 2) {
    c.sampler.clamp = std::make_pair(clamp[0], clamp[1]);
  } else {
    throw ConfigError("sampler.clamp must be [] or [lo, hi]");
  }
  c.buffer_capacity = rc.get_int("sampler.buffer_capacity");
  c.reinit_prob = rc.get_double("sampler.reinit_prob");

  c.vem.enabled = rc.get_bool("vem.enabled");
  c.vem.lambda_mi = rc.get_double("vem.lambda_mi");
  c.vem.alpha_reg = rc.get_double("vem.alpha_reg");
  c.vem.target_source = parse_target_source(rc.get_string("vem.target_source"));
  c.vem.variational = parse_variational_family(rc.get_string("vem.variational"));
  c.vid_hidden = rc.get_int("vem.vid_hidden");

  c.distill.algorithm = parse_distill_algorithm(rc.get_string("distill.algorithm"));
  c.distill.lambda_cd = rc.get_double("distill.lambda_cd");
  c.distill.lambda_tv = rc.get_double("distill.lambda_tv");
  c.distill.lambda_ssim = rc.get_double("distill.lambda_ssim");
  c.distill.lambda_pl = rc.get_double("distill.lambda_pl");
  c.distill.lambda_recon = rc.get_double("distill.lambda_recon");
  c.distill.lambda_mse = rc.get_double("distill.lambda_mse");
  c.distill.lambda_style = rc.get_double("distill.lambda_style");
  c.distill.lambda_distill = rc.get_double("distill.lambda_distill");
  c.distill.lambda_ka = rc.get_double("distill.lambda_ka");
  c.distill.lambda_lpips = rc.get_double("distill.lambda_lpips");
  c.lambda_gan = rc.get_double("distill.lambda_gan");
  c.distill.taps = rc.get_strings("distill.taps");
  c.distill.adapter_seed = static_cast<uint64_t>(rc.get_int("distill.adapter_seed"));
  const auto mask = rc.get_string("distill.mask");
  if (mask == "ones") {
    c.distill.mask = MaskMode::Ones;
  } else if (mask == "center") {
    c.distill.mask = MaskMode::Center;
  } else {
    throw ConfigError("distill.mask: expected ones|center, got '" + mask + "'");
  }

  c.schedule.total_iters = rc.get_int("schedule.total_iters");
  c.schedule.lr_student = rc.get_double("schedule.lr_student");
  c.schedule.lr_teacher = rc.get_double("schedule.lr_teacher");
  c.schedule.lr_ebm = rc.get_double("schedule.lr_ebm");
  c.schedule.batch_size = rc.get_int("schedule.batch_size");
  c.schedule.mode = parse_train_mode(rc.get_string("schedule.mode"));
  c.schedule.lambda_rec = rc.get_double("schedule.lambda_rec");
  c.schedule.teacher_rec = rc.get_bool("schedule.teacher_rec");
  c.schedule.checkpoint_every = rc.get_int("schedule.checkpoint_every");
  c.schedule.log_every = rc.get_int("schedule.log_every");
  c.schedule.eval_every = rc.get_int("schedule.eval_every");

  c.eval_batch = rc.get_int("metrics.eval_batch");
  const auto ref = rc.get_string("metrics.reference");
  if (ref != "target" && ref != "teacher") throw ConfigError("metrics.reference: expected target|teacher");
  c.eval_against_teacher = ref == "teacher";

  c.resolved_text = rc.to_text();
  c.validate();
  return c;
}

GeneratorSpec TrainConfig::student_spec() const {
  GeneratorSpec s = teacher;
  s.width_multiplier = student_multiplier;
  return s;
}

void TrainConfig::validate() const {
  data.validate();
  teacher.validate();
  student_spec().validate();
  disc.validate();
  ebm.validate();
  sampler.validate();
  vem.validate();
  distill.validate();
  schedule.validate();
  if (teacher.image_size != data.image_size) throw ConfigError("model.image_size must equal data.image_size");
  if (!(student_multiplier > 0.0 && student_multiplier <= 1.0)) {
    throw ConfigError("model.student_multiplier must lie in (0, 1]");
  }
  if (buffer_capacity < 1) throw ConfigError("sampler.buffer_capacity must be >= 1");
  if (!(reinit_prob >= 0.0 && reinit_prob <= 1.0)) throw ConfigError("sampler.reinit_prob must lie in [0, 1]");
  if (vid_hidden < 1) throw ConfigError("vem.vid_hidden must be >= 1");
  if (lambda_gan < 0) throw ConfigError("distill.lambda_gan must be >= 0");
  if (eval_batch < 1) throw ConfigError("metrics.eval_batch must be >= 1");
  if (!schedule.online() && teacher_checkpoint.empty()) {
    throw ConfigError("model.teacher_checkpoint is required in " + to_string(schedule.mode) + " mode");
  }
  if (!schedule.paired() && vem.target_source == TargetSource::RealOutput) {
    throw ConfigError("vem.target_source=real needs paired data");
  }
  if (distill.algorithm == DistillAlgorithm::GCC && disc.taps.empty()) {
    throw ConfigError("model.disc_taps must not be empty for the gcc suite");
  }
}

// ---- records ------------------------------------------------------------------

const std::vector<std::string>& IterationRecord::columns() {
  static const std::vector<std::string> cols = {
      "iteration",      "lr_student",         "lr_teacher",        "lr_ebm",          "lambda_mi",
      "loss_ebm",       "energy_pos",         "energy_neg",        "energy_chain_first", "energy_chain_last",
      "loss_algo",      "mi_surrogate",       "loss_student",      "loss_student_adv", "loss_student_d",
      "loss_teacher_g", "loss_teacher_d",     "loss_teacher_rec",  "nonfinite"};
  return cols;
}

std::string IterationRecord::csv_row() const {
  return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}", iteration, lr_student, lr_teacher,
                     lr_ebm, lambda_mi, loss_ebm, energy_pos, energy_neg, energy_chain_first, energy_chain_last,
                     loss_algo, mi_surrogate, loss_student, loss_student_adv, loss_student_d, loss_teacher_g,
                     loss_teacher_d, loss_teacher_rec, nonfinite);
}

RngStreams::RngStreams(uint64_t seed)
    : sampler(make_gen(derive_seed(seed, kSampler))), buffer(make_gen(derive_seed(seed, kBuffer))) {}

// ---- state ----------------------------------------------------------------------

TrainState::TrainState(const TrainConfig& config) : cfg(config), rng(config.seed) {
  cfg.validate();
  teacher = build_generator(cfg.teacher, derive_seed(cfg.seed, kTeacher));
  student = build_generator(cfg.student_spec(), derive_seed(cfg.seed, kStudent));
  teacher_d = build_discriminator(cfg.disc, derive_seed(cfg.seed, kTeacherD));

  if (!cfg.schedule.online()) {
    const auto ck = Checkpoint::load(cfg.teacher_checkpoint);
    for (const auto& comp : {"teacher", "teacher_d"}) {
      for (auto& nt : component_tensors(comp)) ck.restore_into(nt.name, nt.tensor);
    }
  }
  if (uses_student_adversary(cfg.distill.algorithm)) {
    student_d = build_discriminator(cfg.disc, derive_seed(cfg.seed, kTeacherD));
    copy_weights(*teacher_d, *student_d);
  }

  adapters = std::make_shared<AdapterSet>(tap_channels(*student, cfg.distill.taps),
                                          tap_channels(*teacher, cfg.distill.taps),
                                          derive_seed(cfg.seed, kAdapters + cfg.distill.adapter_seed));
  embedder = std::make_unique<ToyEmbedder>(cfg.data.channels);

  if (cfg.mi_active()) {
    if (cfg.vem.variational == VariationalFamily::EBM) {
      ebm = std::make_unique<EnergyModel>(cfg.ebm, derive_seed(cfg.seed, kEbm));
      opt_variational = std::make_unique<Adam>(named_parameters(*ebm->net(), "ebm"));
      if (cfg.sampler.init == InitStrategy::PersistentBuffer) {
        const auto n = cfg.data.image_size;
        buffer = std::make_unique<PersistentBuffer>(
            cfg.buffer_capacity, std::vector<int64_t>{cfg.data.channels, n, n}, cfg.reinit_prob, rng.buffer);
      }
    } else {
      vid_head = std::make_shared<GaussianVariationalHead>(cfg.data.channels, cfg.vid_hidden,
                                                           derive_seed(cfg.seed, kVid));
      opt_variational = std::make_unique<Adam>(named_parameters(*vid_head, "vid"));
    }
  }

  auto student_params = named_parameters(*student, "student");
  for (auto& p : named_parameters(*adapters, "adapters")) student_params.push_back(p);
  opt_student = std::make_unique<Adam>(student_params);
  if (student_d) opt_student_d = std::make_unique<Adam>(named_parameters(*student_d, "student_d"));
  if (cfg.schedule.online()) {
    opt_teacher = std::make_unique<Adam>(named_parameters(*teacher, "teacher"));
    opt_teacher_d = std::make_unique<Adam>(named_parameters(*teacher_d, "teacher_d"));
  } else {
    for (auto& p : teacher->parameters()) p.requires_grad_(false);
    for (auto& p : teacher_d->parameters()) p.requires_grad_(false);
  }

  const auto manifest = read_manifest(cfg.data_root);
  if (manifest.spec.image_size != cfg.data.image_size || manifest.spec.channels != cfg.data.channels) {
    throw ConfigError("dataset at '" + cfg.data_root.string() + "' does not match data.image_size/data.channels");
  }
  data = std::make_unique<BatchStream>(load_split(cfg.data_root, "train"), cfg.schedule.batch_size,
                                       derive_seed(cfg.seed, kData), true);
  val = load_split(cfg.data_root, "val");
}

std::vector<std::string> TrainState::components() const {
  std::vector<std::string> out{"teacher", "teacher_d", "student", "adapters"};
  if (student_d) out.push_back("student_d");
  if (ebm) out.push_back("ebm");
  if (vid_head) out.push_back("vid");
  return out;
}

std::vector<NamedTensor> TrainState::component_tensors(const std::string& component) const {
  auto both = [&](const torch::nn::Module& m) {
    auto v = named_parameters(m, component);
    for (auto& b : named_buffers(m, component)) v.push_back(b);
    return v;
  };
  if (component == "teacher") return both(*teacher);
  if (component == "teacher_d") return both(*teacher_d);
  if (component == "student") return both(*student);
  if (component == "adapters") return both(*adapters);
  if (component == "student_d" && student_d) return both(*student_d);
  if (component == "ebm" && ebm) return both(*ebm->net());
  if (component == "vid" && vid_head) return both(*vid_head);
  throw ContractViolation("TrainState has no component '" + component + "'");
}

Checkpoint TrainState::to_checkpoint() const {
  Checkpoint ck;
  for (const auto& comp : components()) {
    for (const auto& nt : component_tensors(comp)) ck.put(nt.name, nt.tensor);
  }
  nlohmann::json steps = nlohmann::json::object();
  auto save_opt = [&](const std::string& name, const std::unique_ptr<Adam>& opt) {
    if (!opt) return;
    for (const auto& nt : opt->state()) ck.put(opt_key(name) + "." + nt.name, nt.tensor);
    steps[name] = opt->step_count();
  };
  save_opt("student", opt_student);
  save_opt("student_d", opt_student_d);
  save_opt("teacher", opt_teacher);
  save_opt("teacher_d", opt_teacher_d);
  save_opt("variational", opt_variational);
  if (buffer) ck.put("buffer.entries", buffer->entries());
  ck.put("rng.sampler", rng.sampler.get_state());
  ck.put("rng.buffer", rng.buffer.get_state());

  auto& m = ck.meta();
  m["iteration"] = iteration;
  m["consecutive_nonfinite"] = consecutive_nonfinite;
  m["data_epoch"] = data->epoch();
  m["data_cursor"] = data->cursor();
  m["optimizer_steps"] = steps;
  m["config"] = cfg.resolved_text;
  return ck;
}

void TrainState::restore(const Checkpoint& ck) {
  for (const auto& comp : components()) {
    for (auto& nt : component_tensors(comp)) ck.restore_into(nt.name, nt.tensor);
  }
  const auto& m = ck.meta();
  auto load_opt = [&](const std::string& name, const std::unique_ptr<Adam>& opt) {
    if (!opt) return;
    for (auto& nt : opt->state()) ck.restore_into(opt_key(name) + "." + nt.name, nt.tensor);
    opt->set_step_count(m.at("optimizer_steps").at(name).get<int64_t>());
  };
  load_opt("student", opt_student);
  load_opt("student_d", opt_student_d);
  load_opt("teacher", opt_teacher);
  load_opt("teacher_d", opt_teacher_d);
  load_opt("variational", opt_variational);
  if (buffer) ck.restore_into("buffer.entries", buffer->entries());
  rng.sampler.set_state(ck.get("rng.sampler"));
  rng.buffer.set_state(ck.get("rng.buffer"));
  iteration = m.at("iteration").get<int64_t>();
  consecutive_nonfinite = m.at("consecutive_nonfinite").get<int>();
  data->seek(m.at("data_epoch").get<int64_t>(), m.at("data_cursor").get<int64_t>());
  cached_negatives.reset();
  negatives_skipped = false;
}

torch::Tensor TrainState::teacher_output(const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return teacher->forward(x);
}

torch::Tensor TrainState::mi_target(const Batch& batch, const torch::Tensor& teacher_out) const {
  switch (cfg.vem.target_source) {
    case TargetSource::RealOutput:
      return batch.y;
    case TargetSource::TeacherOutput:
      return teacher_out;
    case TargetSource::Auto:
      return cfg.schedule.paired() ? batch.y : teacher_out;
  }
  return batch.y;
}

// ---- steps ----------------------------------------------------------------------

void step_ebm(TrainState& st, const Batch& batch, IterationRecord& rec) {
  st.cached_negatives.reset();
  st.negatives_skipped = false;
  if (!st.cfg.mi_active()) return;

  torch::Tensor s;
  {
    torch::NoGradGuard no_grad;
    s = st.student->forward(batch.x);
  }
  const bool needs_teacher = !(st.cfg.vem.target_source != TargetSource::TeacherOutput && st.cfg.schedule.paired());
  const auto t = st.mi_target(batch, needs_teacher ? st.teacher_output(batch.x) : torch::Tensor());

  if (st.vid_head) {
    const auto loss = vid_nll(*st.vid_head, t, s);
    rec.loss_ebm = loss.item<double>();
    if (!std::isfinite(rec.loss_ebm)) {
      rec.nonfinite = 1;
      return;
    }
    st.opt_variational->step(grads_of(loss, st.opt_variational->param_tensors()), rec.lr_ebm);
    return;
  }

  ChainInit init;
  init.teacher = t;
  init.buffer = st.buffer.get();
  SampleChain chain;
  try {
    chain = run_chain(s, *st.ebm, st.cfg.sampler, init, st.rng.sampler);
  } catch (const SamplerDivergence& e) {
    spdlog::warn("iteration {}: {}; skipping the EBM update and MI term", rec.iteration, e.what());
    rec.nonfinite = 1;
    st.negatives_skipped = true;
    return;
  }
  rec.energy_chain_first = chain.energies.front();
  rec.energy_chain_last = chain.energies.back();

  const auto terms = ebm_loss_terms(*st.ebm, t, s, chain.final, st.cfg.vem.alpha_reg, true);
  rec.loss_ebm = terms.loss.item<double>();
  rec.energy_pos = terms.energy_pos;
  rec.energy_neg = terms.energy_neg;
  if (!std::isfinite(rec.loss_ebm)) {
    rec.nonfinite = 1;
    st.negatives_skipped = true;
    return;
  }
  st.opt_variational->step(grads_of(terms.loss, st.opt_variational->param_tensors()), rec.lr_ebm);
  st.cached_negatives = chain.final;
}

void step_student(TrainState& st, const Batch& batch, IterationRecord& rec) {
  const auto& cfg = st.cfg;
  const bool paired = cfg.schedule.paired();

  Generator::Output t_out;
  {
    torch::NoGradGuard no_grad;
    t_out = st.teacher->forward_with_taps(batch.x);
  }
  const auto s_out = st.student->forward_with_taps(batch.x);

  DistillInputs in;
  in.student_out = s_out.image;
  in.teacher_out = t_out.image;
  if (paired) in.ground_truth = batch.y;
  in.student_taps = Generator::select(s_out.taps, cfg.distill.taps);
  in.teacher_taps = Generator::select(t_out.taps, cfg.distill.taps);
  if (cfg.distill.algorithm == DistillAlgorithm::GCC) {
    in.disc_student_taps = st.teacher_d->forward_with_taps(batch.x, s_out.image).taps;
    torch::NoGradGuard no_grad;
    in.disc_teacher_taps = st.teacher_d->forward_with_taps(batch.x, t_out.image).taps;
  }
  if (cfg.distill.algorithm == DistillAlgorithm::CAGC) in.mask = cagc_mask(cfg.distill.mask, s_out.image);

  auto algo = algorithm_loss(in, cfg.distill, *st.adapters, *st.embedder, paired).total;
  if (st.student_d) {
    const auto adv = lsgan(st.student_d->forward(batch.x, s_out.image), 1.0);
    rec.loss_student_adv = adv.item<double>();
    algo = algo + cfg.lambda_gan * adv;
  }
  rec.loss_algo = algo.item<double>();

  torch::Tensor loss = algo;
  if (cfg.mi_active()) {
    const auto t = st.mi_target(batch, t_out.image);
    std::optional<torch::Tensor> surrogate;
    if (st.vid_head) {
      surrogate = vid_nll(*st.vid_head, t, s_out.image);
    } else if (st.cached_negatives) {
      surrogate = student_mi_surrogate(*st.ebm, t, s_out.image, *st.cached_negatives);
    } else if (!st.negatives_skipped) {
      throw SequencingError("step_student: no negative samples cached; step_ebm must run first");
    }
    if (surrogate) {
      rec.mi_surrogate = surrogate->item<double>();
      loss = combined_student_loss(algo, *surrogate, cfg.vem.lambda_mi);
    }
  }
  st.cached_negatives.reset();
  rec.loss_student = loss.item<double>();
  if (!std::isfinite(rec.loss_student)) {
    rec.nonfinite = 1;
    return;
  }
  st.opt_student->step(grads_of(loss, st.opt_student->param_tensors()), rec.lr_student);

  if (st.student_d) {
    const auto real = paired ? batch.y : t_out.image;
    const auto fake = s_out.image.detach();
    const auto d_loss =
        0.5 * (lsgan(st.student_d->forward(batch.x, real), 1.0) + lsgan(st.student_d->forward(batch.x, fake), 0.0));
    rec.loss_student_d = d_loss.item<double>();
    if (!std::isfinite(rec.loss_student_d)) {
      rec.nonfinite = 1;
      return;
    }
    st.opt_student_d->step(grads_of(d_loss, st.opt_student_d->param_tensors()), rec.lr_student);
  }
}

void step_teacher(TrainState& st, const Batch& batch, IterationRecord& rec) {
  if (!st.cfg.schedule.online()) {
    throw ModeError("step_teacher called in " + to_string(st.cfg.schedule.mode) + " mode; the teacher is frozen");
  }
  const auto fake = st.teacher->forward(batch.x);

  const auto d_loss = 0.5 * (lsgan(st.teacher_d->forward(batch.x, batch.y), 1.0) +
                             lsgan(st.teacher_d->forward(batch.x, fake.detach()), 0.0));
  rec.loss_teacher_d = d_loss.item<double>();
  if (!std::isfinite(rec.loss_teacher_d)) {
    rec.nonfinite = 1;
    return;
  }
  st.opt_teacher_d->step(grads_of(d_loss, st.opt_teacher_d->param_tensors()), rec.lr_teacher);

  auto g_loss = lsgan(st.teacher_d->forward(batch.x, fake), 1.0);
  const auto recon = l1_mean(fake, batch.y);
  rec.loss_teacher_rec = recon.item<double>();
  if (st.cfg.schedule.teacher_rec) g_loss = g_loss + st.cfg.schedule.lambda_rec * recon;
  rec.loss_teacher_g = g_loss.item<double>();
  if (!std::isfinite(rec.loss_teacher_g)) {
    rec.nonfinite = 1;
    return;
  }
  st.opt_teacher->step(grads_of(g_loss, st.opt_teacher->param_tensors()), rec.lr_teacher);
}

IterationRecord train_iteration(TrainState& st, const Batch& batch) {
  const auto& sc = st.cfg.schedule;
  IterationRecord rec;
  rec.iteration = st.iteration;
  rec.lr_student = linear_decay_lr(sc.lr_student, st.iteration, sc.total_iters);
  rec.lr_teacher = linear_decay_lr(sc.lr_teacher, st.iteration, sc.total_iters);
  rec.lr_ebm = linear_decay_lr(sc.lr_ebm, st.iteration, sc.total_iters);
  rec.lambda_mi = st.cfg.mi_active() ? st.cfg.vem.lambda_mi : 0.0;

  step_ebm(st, batch, rec);
  step_student(st, batch, rec);
  if (sc.online()) step_teacher(st, batch, rec);

  st.consecutive_nonfinite = rec.nonfinite ? st.consecutive_nonfinite + 1 : 0;
  ++st.iteration;
  return rec;
}

MetricsReport evaluate_student(TrainState& st) {
  const auto reference = st.cfg.eval_against_teacher ? generate(*st.teacher, st.val.x, st.cfg.eval_batch) : st.val.y;
  return evaluate(*st.student, st.val.x, reference, *st.embedder, st.cfg.eval_batch);
}

bool configure_numerics(bool requested) {
  const char* env = std::getenv("VEMKD_DETERMINISTIC");
  const bool on = requested || (env != nullptr && std::string(env) == "1");
  if (on) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
  return on;
}

// ---- run loop ---------------------------------------------------------------------

namespace {

const std::vector<std::string> kEvalColumns = {"iteration",  "toy_fid", "ssim_to_target", "l1_to_target", "psnr",
                                               "params",     "macs",    "num_images",     "sampler_invocations"};

/// Keeps the header and rows whose leading iteration field is < `limit`.
void truncate_log(const fs::path& path, int64_t limit) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  bool header = path.extension() == ".csv";
  while (std::getline(in, line)) {
    if (header) {
      keep.push_back(line);
      header = false;
      continue;
    }
    int64_t it = 0;
    if (path.extension() == ".csv") {
      it = std::stoll(line.substr(0, line.find(',')));
    } else {
      it = nlohmann::json::parse(line).at("iteration").get<int64_t>();
    }
    if (it < limit) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

void append_eval(const fs::path& dir, int64_t iteration, const MetricsReport& r) {
  std::ofstream csv(dir / "eval.csv", std::ios::app);
  csv << fmt::format("{},{},{},{},{},{},{},{},{}\n", iteration, r.toy_fid, r.ssim_to_target, r.l1_to_target, r.psnr,
                     r.params, r.macs, r.num_images, r.sampler_invocations);
  auto j = r.to_json();
  j["iteration"] = iteration;
  std::ofstream jl(dir / "eval.jsonl", std::ios::app);
  jl << j.dump() << "\n";
}

fs::path checkpoint_dir(const fs::path& out, int64_t iteration) {
  return out / "checkpoints" / fmt::format("iter_{:06d}", iteration);
}

}  // namespace

RunResult run(const TrainConfig& cfg, const RunOptions& opts) {
  configure_numerics(cfg.deterministic);
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.output_dir.string() + "': " + ec.message());
  {
    std::ofstream echo(cfg.output_dir / "config.resolved", std::ios::trunc);
    echo << cfg.resolved_text;
    if (!echo) throw IoError("cannot write '" + (cfg.output_dir / "config.resolved").string() + "'");
  }

  TrainState st(cfg);
  const auto csv_path = cfg.output_dir / "metrics.csv";
  if (opts.resume) {
    st.restore(Checkpoint::load(*opts.resume));
    spdlog::info("resumed from '{}' at iteration {}", opts.resume->string(), st.iteration);
    truncate_log(csv_path, st.iteration);
    truncate_log(cfg.output_dir / "eval.csv", st.iteration + 1);
    truncate_log(cfg.output_dir / "eval.jsonl", st.iteration + 1);
  } else {
    std::ofstream(csv_path, std::ios::trunc) << join(IterationRecord::columns()) << "\n";
    std::ofstream(cfg.output_dir / "eval.csv", std::ios::trunc) << join(kEvalColumns) << "\n";
    std::ofstream(cfg.output_dir / "eval.jsonl", std::ios::trunc);
  }
  std::ofstream csv(csv_path, std::ios::app);
  if (!csv) throw IoError("cannot open '" + csv_path.string() + "'");

  RunResult result;
  const auto total = cfg.schedule.total_iters;
  const auto stop = opts.stop_after ? std::min(*opts.stop_after, total) : total;
  Batch batch;
  while (st.iteration < stop) {
    st.data->next(batch.x, batch.y);
    const auto rec = train_iteration(st, batch);
    if (rec.iteration % cfg.schedule.log_every == 0) csv << rec.csv_row() << "\n" << std::flush;

    if (st.consecutive_nonfinite >= kMaxConsecutiveNonfinite) {
      throw NumericalError(fmt::format("{} consecutive non-finite iterations at iteration {}; last good checkpoint: {}",
                                       st.consecutive_nonfinite, rec.iteration,
                                       result.last_checkpoint.empty() ? "none" : result.last_checkpoint.string()));
    }
    const bool cadence = cfg.schedule.checkpoint_every > 0 && st.iteration % cfg.schedule.checkpoint_every == 0;
    if ((cadence || st.iteration == stop) && st.iteration < total && st.consecutive_nonfinite == 0) {
      result.last_checkpoint = checkpoint_dir(cfg.output_dir, st.iteration);
      st.to_checkpoint().save(result.last_checkpoint);
    }
    if (cfg.schedule.eval_every > 0 && st.iteration % cfg.schedule.eval_every == 0 && st.iteration < total) {
      append_eval(cfg.output_dir, st.iteration, evaluate_student(st));
    }
  }
  result.iterations_done = st.iteration;

  if (st.iteration == total) {
    const auto report = evaluate_student(st);
    append_eval(cfg.output_dir, st.iteration, report);
    std::ofstream(cfg.output_dir / "final_metrics.json", std::ios::trunc) << report.to_json().dump(2) << "\n";
    result.final_metrics = report;
    result.last_checkpoint = cfg.output_dir / "checkpoints" / "final";
    st.to_checkpoint().save(result.last_checkpoint);
  }
  return result;
}

}  // namespace vemkd
