#include "vemkd/config.hpp"

#include "vemkd/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace vemkd {

namespace {

using K = KeyType;

const std::vector<ConfigKey> kSchema = {
    {"seed", K::Int, "0", "master seed; every component stream is derived from it"},
    {"output_dir", K::String, "runs/default", "run directory (config echo, CSV logs, checkpoints)"},
    {"deterministic", K::Bool, "false", "single-threaded deterministic numerics (also VEMKD_DETERMINISTIC=1)"},

    {"data.root", K::String, "data/shapes", "dataset directory"},
    {"data.name", K::String, "shapes", "dataset name recorded in the manifest"},
    {"data.image_size", K::Int, "32", "32 or 64"},
    {"data.channels", K::Int, "3", "1 or 3"},
    {"data.num_train", K::Int, "2000", "training pairs"},
    {"data.num_val", K::Int, "256", "validation pairs"},
    {"data.seed", K::Int, "1234", "rendering seed"},

    {"model.family", K::String, "unet", "generator family: unet | resnet"},
    {"model.width", K::Int, "32", "teacher base width"},
    {"model.student_multiplier", K::Float, "0.25", "student width multiplier in (0, 1]"},
    {"model.image_size", K::Int, "32", "generator resolution (must equal data.image_size)"},
    {"model.disc_width", K::Int, "32", "discriminator base width"},
    {"model.disc_depth", K::Int, "3", "discriminator strided layers"},
    {"model.disc_taps", K::IntList, "[0, 1]", "discriminator layers exposed as feature taps"},
    {"model.teacher_checkpoint", K::String, "", "pretrained teacher checkpoint (offline modes)"},

    {"ebm.channels", K::Int, "32", "energy network base width C"},
    {"ebm.res_blocks", K::Int, "7", "residual blocks"},
    {"ebm.leaky_slope", K::Float, "0.2", "LeakyReLU negative slope"},
    {"ebm.sn_iters", K::Int, "1", "power iterations per training forward"},

    {"sampler.steps", K::Int, "10", "Langevin steps K"},
    {"sampler.step_size", K::Float, "100", "drift step size"},
    {"sampler.noise_std", K::Float, "0.005", "per-step Gaussian noise std"},
    {"sampler.init", K::String, "student", "chain init: student | teacher | persistent | uniform"},
    {"sampler.clamp", K::FloatList, "[-1, 1]", "clamp range after each step; [] disables"},
    {"sampler.buffer_capacity", K::Int, "256", "persistent buffer slots"},
    {"sampler.reinit_prob", K::Float, "0.05", "persistent buffer reinitialization probability"},

    {"vem.enabled", K::Bool, "true", "attach the variational MI term at all"},
    {"vem.lambda_mi", K::Float, "0.1", "weight of the MI surrogate in the student loss"},
    {"vem.alpha_reg", K::Float, "1", "squared-energy regularizer weight"},
    {"vem.target_source", K::String, "auto", "MI target t: auto | teacher | real"},
    {"vem.variational", K::String, "ebm", "variational family: ebm | vid-gaussian"},
    {"vem.vid_hidden", K::Int, "32", "hidden width of the Gaussian head"},

    {"distill.algorithm", K::String, "omgd", "omgd | gcc | gan-compression | cat | cagc"},
    {"distill.lambda_cd", K::Float, "1", "channel distillation"},
    {"distill.lambda_tv", K::Float, "0.01", "total variation"},
    {"distill.lambda_ssim", K::Float, "1", "1 - SSIM"},
    {"distill.lambda_pl", K::Float, "1", "perceptual"},
    {"distill.lambda_recon", K::Float, "10", "output reconstruction (L1)"},
    {"distill.lambda_mse", K::Float, "1", "GCC feature MSE"},
    {"distill.lambda_style", K::Float, "1", "GCC Gram/style"},
    {"distill.lambda_distill", K::Float, "1", "feature distillation"},
    {"distill.lambda_ka", K::Float, "1", "CAT kernel alignment"},
    {"distill.lambda_lpips", K::Float, "1", "CAGC masked perceptual"},
    {"distill.lambda_gan", K::Float, "1", "student adversarial weight (all suites but omgd)"},
    {"distill.taps", K::StringList, "[down2, mid, up1]", "generator feature taps"},
    {"distill.adapter_seed", K::Int, "7", "1x1 adapter initialization seed"},
    {"distill.mask", K::String, "ones", "CAGC mask: ones | center"},

    {"schedule.total_iters", K::Int, "5000", "iterations; learning rates reach 0 here"},
    {"schedule.lr_student", K::Float, "0.0002", "student (and adapter, student D) learning rate"},
    {"schedule.lr_teacher", K::Float, "0.0002", "teacher G/D learning rate"},
    {"schedule.lr_ebm", K::Float, "0.0001", "energy model (or Gaussian head) learning rate"},
    {"schedule.batch_size", K::Int, "16", "minibatch size"},
    {"schedule.mode", K::String, "online-paired", "online-paired | offline-paired | offline-unpaired"},
    {"schedule.lambda_rec", K::Float, "100", "teacher reconstruction weight"},
    {"schedule.teacher_rec", K::Bool, "true", "add the reconstruction term to the teacher loss"},
    {"schedule.checkpoint_every", K::Int, "1000", "checkpoint cadence in iterations (0 = final only)"},
    {"schedule.log_every", K::Int, "1", "CSV row cadence"},
    {"schedule.eval_every", K::Int, "0", "evaluation cadence (0 = final only)"},

    {"metrics.eval_batch", K::Int, "64", "evaluation chunk size"},
    {"metrics.reference", K::String, "target", "evaluation reference: target | teacher"},
};

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_list(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t.size() < 2 || t.front() != '[' || t.back() != ']') {
    throw ConfigError(key + ": expected a list like [a, b], got '" + text + "'");
  }
  std::vector<std::string> items;
  std::string cur;
  bool quoted = false;
  for (size_t i = 1; i + 1 < t.size(); ++i) {
    const char c = t[i];
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !items.empty()) items.push_back(trim(cur));
  for (const auto& it : items) {
    if (it.empty()) throw ConfigError(key + ": empty list element in '" + text + "'");
  }
  return items;
}

int64_t parse_int(const std::string& key, const std::string& s) {
  int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

double parse_float(const std::string& key, const std::string& s) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

std::string format_string(const std::string& s) {
  const bool plain = !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || std::string_view("-_./+:").find(c) != std::string_view::npos;
  });
  return plain ? s : "\"" + s + "\"";
}

std::string canonical_scalar(const std::string& key, KeyType type, const std::string& text) {
  switch (type) {
    case K::Int:
    case K::IntList:
      return std::to_string(parse_int(key, text));
    case K::Float:
    case K::FloatList:
      return fmt::format("{}", parse_float(key, text));
    case K::Bool:
      return parse_bool(key, text) ? "true" : "false";
    case K::String:
    case K::StringList:
      return unquote(text);
  }
  return text;
}

bool is_list(KeyType t) { return t == K::IntList || t == K::FloatList || t == K::StringList; }

std::string canonicalize(const ConfigKey& info, const std::string& text) {
  if (!is_list(info.type)) return canonical_scalar(info.name, info.type, trim(text));
  std::string out = "[";
  const auto items = split_list(info.name, text);
  for (size_t i = 0; i < items.size(); ++i) {
    auto v = canonical_scalar(info.name, info.type, items[i]);
    if (info.type == K::StringList) v = format_string(v);
    out += (i ? ", " : "") + v;
  }
  return out + "]";
}

std::string render(const ConfigKey& info, const std::string& canonical) {
  return info.type == K::String ? format_string(canonical) : canonical;
}

}  // namespace

const std::vector<ConfigKey>& RunConfig::schema() { return kSchema; }

RunConfig::RunConfig() {
  for (const auto& k : kSchema) values_[k.name] = canonicalize(k, k.default_value);
}

const ConfigKey& RunConfig::key_info(const std::string& key) const {
  for (const auto& k : kSchema) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::set(const std::string& key, const std::string& raw_value) {
  constexpr std::string_view kSweep = "sweep.";
  if (key.starts_with(kSweep)) {
    const auto target = key.substr(kSweep.size());
    const auto& info = key_info(target);
    if (is_list(info.type)) throw ConfigError("cannot sweep list-valued key '" + target + "'");
    std::vector<std::string> points;
    for (const auto& item : split_list(key, raw_value)) points.push_back(canonicalize(info, item));
    if (points.empty()) throw ConfigError(key + ": sweep needs at least one value");
    sweeps_[target] = points;
    return;
  }
  values_[key] = canonicalize(key_info(key), raw_value);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

RunConfig RunConfig::from_string(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str(), path.string());
}

const std::string& RunConfig::raw(const std::string& key, KeyType expected) const {
  if (key_info(key).type != expected) throw ContractViolation("config key '" + key + "' read with the wrong type");
  return values_.at(key);
}

int64_t RunConfig::get_int(const std::string& key) const { return parse_int(key, raw(key, K::Int)); }
double RunConfig::get_double(const std::string& key) const { return parse_float(key, raw(key, K::Float)); }
bool RunConfig::get_bool(const std::string& key) const { return parse_bool(key, raw(key, K::Bool)); }
std::string RunConfig::get_string(const std::string& key) const { return raw(key, K::String); }

std::vector<int64_t> RunConfig::get_ints(const std::string& key) const {
  std::vector<int64_t> out;
  for (const auto& s : split_list(key, raw(key, K::IntList))) out.push_back(parse_int(key, s));
  return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split_list(key, raw(key, K::FloatList))) out.push_back(parse_float(key, s));
  return out;
}

std::vector<std::string> RunConfig::get_strings(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& s : split_list(key, raw(key, K::StringList))) out.push_back(unquote(s));
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : kSchema) out += k.name + " = " + render(k, values_.at(k.name)) + "\n";
  return out;
}

std::vector<RunConfig> RunConfig::expand_sweeps() const {
  std::vector<RunConfig> out;
  RunConfig base = *this;
  base.sweeps_.clear();
  if (sweeps_.empty()) return {base};

  std::vector<std::pair<std::string, std::vector<std::string>>> axes(sweeps_.begin(), sweeps_.end());
  std::vector<size_t> idx(axes.size(), 0);
  while (true) {
    RunConfig point = base;
    std::string suffix;
    for (size_t a = 0; a < axes.size(); ++a) {
      const auto& value = axes[a].second[idx[a]];
      point.values_[axes[a].first] = value;
      suffix += (a ? "," : "") + axes[a].first + "=" + value;
    }
    point.values_["output_dir"] = (std::filesystem::path(base.get_string("output_dir")) / suffix).string();
    out.push_back(std::move(point));
    size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

}  // namespace vemkd
