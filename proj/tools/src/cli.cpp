#include "vemkd_cli/cli.hpp"

#include "vemkd/config.hpp"
#include "vemkd/datagen.hpp"
#include "vemkd/errors.hpp"
#include "vemkd/trainer.hpp"
#include "vemkd_cli/plot.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace vemkd::cli {

namespace fs = std::filesystem;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig rc = path.empty() ? RunConfig() : RunConfig::from_file(path);
  for (const auto& o : overrides) rc.apply_override(o);
  return rc;
}

int cmd_gen_data(const std::string& config, const std::vector<std::string>& overrides) {
  const auto rc = load_config(config, overrides);
  DatasetSpec spec;
  spec.name = rc.get_string("data.name");
  spec.image_size = static_cast<int>(rc.get_int("data.image_size"));
  spec.channels = static_cast<int>(rc.get_int("data.channels"));
  spec.num_train = rc.get_int("data.num_train");
  spec.num_val = rc.get_int("data.num_val");
  spec.seed = static_cast<uint64_t>(rc.get_int("data.seed"));
  const fs::path root = rc.get_string("data.root");
  generate_shapes_dataset(spec, root);
  std::cout << (root / "manifest.json").string() << "\n";
  return kOk;
}

int cmd_train(const std::string& config, const std::vector<std::string>& overrides, const std::string& resume,
              int64_t stop_after, int only) {
  const auto points = load_config(config, overrides).expand_sweeps();
  if (!resume.empty() && points.size() > 1 && only < 0) {
    throw ConfigError("--resume needs a single run; select a sweep point with --only");
  }
  if (only >= static_cast<int>(points.size())) {
    throw ConfigError(fmt::format("--only {} out of range ({} sweep points)", only, points.size()));
  }
  for (size_t i = 0; i < points.size(); ++i) {
    if (only >= 0 && static_cast<int>(i) != only) continue;
    const auto cfg = TrainConfig::from(points[i]);
    RunOptions opts;
    if (!resume.empty()) opts.resume = fs::path(resume);
    if (stop_after >= 0) opts.stop_after = stop_after;
    spdlog::info("run {}/{} -> {}", i + 1, points.size(), cfg.output_dir.string());
    const auto result = run(cfg, opts);
    if (result.final_metrics) {
      std::cout << cfg.output_dir.string() << " toy_fid=" << result.final_metrics->toy_fid
                << " l1=" << result.final_metrics->l1_to_target << "\n";
    } else {
      std::cout << cfg.output_dir.string() << " stopped at iteration " << result.iterations_done << " checkpoint "
                << result.last_checkpoint.string() << "\n";
    }
  }
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& config, const std::vector<std::string>& overrides) {
  const auto points = load_config(config, overrides).expand_sweeps();
  if (points.size() != 1) throw ConfigError("eval does not accept sweep keys");
  const auto cfg = TrainConfig::from(points.front());
  configure_numerics(cfg.deterministic);
  TrainState st(cfg);
  st.restore(Checkpoint::load(ckpt));
  const auto report = evaluate_student(st);
  auto j = report.to_json();
  j["iteration"] = st.iteration;
  j["checkpoint"] = ckpt;
  std::cout << j.dump(2) << "\n";
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  const auto out = cfg.output_dir / ("eval_" + fs::path(ckpt).filename().string() + ".json");
  std::ofstream f(out, std::ios::trunc);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("cannot write '" + out.string() + "'");
  return kOk;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
  std::vector<RunSummary> summaries;
  for (const auto& r : runs) summaries.push_back(load_run_summary(r));
  const auto table = format_report_table(summaries);
  std::cout << table;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory '" + out_dir + "': " + ec.message());
  std::ofstream(fs::path(out_dir) / "report.txt", std::ios::trunc) << table;
  std::ofstream(fs::path(out_dir) / "report.csv", std::ios::trunc) << format_report_csv(summaries);
  for (const auto& r : runs) {
    for (const auto& p : write_run_plots(r)) spdlog::debug("wrote {}", p.string());
  }
  return kOk;
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;
};

Csv read_csv(const fs::path& path) {
  Csv csv;
  std::ifstream in(path);
  if (!in) return csv;
  std::string line;
  if (!std::getline(in, line)) return csv;
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) csv.header.push_back(cell);
  csv.columns.resize(csv.header.size());
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    size_t i = 0;
    for (std::string cell; std::getline(ls, cell, ',') && i < csv.columns.size(); ++i) {
      csv.columns[i].push_back(cell == "nan" ? NAN : std::strtod(cell.c_str(), nullptr));
    }
  }
  return csv;
}

}  // namespace

RunSummary load_run_summary(const fs::path& run) {
  if (!fs::is_directory(run)) throw IoError("run directory not found: " + run.string());
  nlohmann::json j;
  if (std::ifstream f(run / "final_metrics.json"); f) {
    f >> j;
  } else if (std::ifstream jl(run / "eval.jsonl"); jl) {
    for (std::string line; std::getline(jl, line);) {
      if (!line.empty()) j = nlohmann::json::parse(line);
    }
  }
  if (j.is_null()) throw IoError("no metrics (final_metrics.json or eval.jsonl) in run directory: " + run.string());
  RunSummary s;
  s.name = run.filename().empty() ? run.parent_path().filename().string() : run.filename().string();
  s.toy_fid = j.at("toy_fid").get<double>();
  s.ssim = j.at("ssim_to_target").get<double>();
  s.l1 = j.at("l1_to_target").get<double>();
  s.psnr = j.at("psnr").get<double>();
  s.params = j.at("params").get<long long>();
  s.macs = j.at("macs").get<long long>();
  return s;
}

std::string format_report_table(const std::vector<RunSummary>& runs) {
  size_t w = 3;
  for (const auto& r : runs) w = std::max(w, r.name.size());
  std::string out = fmt::format("{:<{}}  {:>10}  {:>11}  {:>8}  {:>8}  {:>8}  {:>9}  {:>11}\n", "run", w, "toy_fid",
                                "delta_fid", "ssim", "l1", "psnr", "params", "macs");
  for (const auto& r : runs) {
    out += fmt::format("{:<{}}  {:>10.4f}  {:>+11.4f}  {:>8.4f}  {:>8.4f}  {:>8.3f}  {:>9}  {:>11}\n", r.name, w,
                       r.toy_fid, r.toy_fid - runs.front().toy_fid, r.ssim, r.l1, r.psnr, r.params, r.macs);
  }
  return out;
}

std::string format_report_csv(const std::vector<RunSummary>& runs) {
  std::string out = "run,toy_fid,delta_toy_fid,ssim_to_target,l1_to_target,psnr,params,macs\n";
  for (const auto& r : runs) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.name, r.toy_fid, r.toy_fid - runs.front().toy_fid, r.ssim, r.l1,
                       r.psnr, r.params, r.macs);
  }
  return out;
}

std::vector<fs::path> write_run_plots(const fs::path& run) {
  if (!fs::is_directory(run)) throw IoError("run directory not found: " + run.string());
  std::vector<fs::path> written;
  const std::vector<std::string> skip = {"iteration", "params", "macs", "num_images", "sampler_invocations",
                                         "nonfinite"};
  for (const auto* name : {"metrics.csv", "eval.csv"}) {
    const auto csv = read_csv(run / name);
    if (csv.header.empty() || csv.header.front() != "iteration") continue;
    for (size_t c = 1; c < csv.header.size(); ++c) {
      if (std::find(skip.begin(), skip.end(), csv.header[c]) != skip.end()) continue;
      const auto path = run / (csv.header[c] + ".png");
      plot_series(path, csv.header[c], csv.columns[0], csv.columns[c]);
      written.push_back(path);
    }
  }
  return written;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"vemkd: variational energy-based knowledge distillation for image generators"};
  app.require_subcommand(1);
  std::string verbosity = "info";
  app.add_option("--log-level", verbosity, "trace|debug|info|warn|error|off")->capture_default_str();

  std::string config;
  std::vector<std::string> overrides;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic paired dataset");
  gen->add_option("--config", config, "run config file");
  gen->add_option("overrides", overrides, "key=value overrides");

  std::string resume;
  int64_t stop_after = -1;
  int only = -1;
  auto* train = app.add_subcommand("train", "train teacher/student (+ variational model); fans out sweeps");
  train->add_option("--config", config, "run config file");
  train->add_option("--resume", resume, "checkpoint directory to continue from");
  train->add_option("--stop-after", stop_after, "stop once this many iterations are done");
  train->add_option("--only", only, "run only this sweep point (0-based)");
  train->add_option("overrides", overrides, "key=value overrides");

  std::string ckpt;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint's student on the validation split");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--config", config, "run config file");
  eval->add_option("overrides", overrides, "key=value overrides");

  std::vector<std::string> runs;
  std::string out_dir = "report";
  auto* report = app.add_subcommand("report", "comparison table and training-curve plots");
  report->add_option("--runs", runs, "run directories")->required();
  report->add_option("--out", out_dir, "directory for report.txt / report.csv")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(verbosity));
    if (*gen) return cmd_gen_data(config, overrides);
    if (*train) return cmd_train(config, overrides, resume, stop_after, only);
    if (*eval) return cmd_eval(ckpt, config, overrides);
    if (*report) return cmd_report(runs, out_dir);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfigError;
  } catch (const ModeError& e) {
    spdlog::error("mode error: {}", e.what());
    return kConfigError;
  } catch (const NumericalError& e) {
    spdlog::error("numerical abort: {}", e.what());
    return kNumericalAbort;
  } catch (const IoError& e) {
    spdlog::error("I/O error: {}", e.what());
    return kIoError;
  } catch (const std::exception& e) {
    spdlog::error("unexpected error: {}", e.what());
    return kUnexpected;
  }
  return kUnexpected;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"vemkd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vemkd::cli
