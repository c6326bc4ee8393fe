#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vemkd::cli {

enum ExitCode : int { kOk = 0, kUnexpected = 1, kConfigError = 2, kNumericalAbort = 3, kIoError = 4 };

/// Entry point shared by the executable and the tests. Never throws.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

struct RunSummary {
  std::string name;
  double toy_fid = 0, ssim = 0, l1 = 0, psnr = 0;
  long long params = 0, macs = 0;
};

/// Reads <run>/final_metrics.json (or the last eval.jsonl row). Throws IoError when the
/// directory or its metrics are missing.
RunSummary load_run_summary(const std::filesystem::path& run);

/// Fixed-width comparison table; the delta column is toy-FID minus the first run's.
std::string format_report_table(const std::vector<RunSummary>& runs);
std::string format_report_csv(const std::vector<RunSummary>& runs);

/// Writes <run>/<metric>.png for every numeric column of metrics.csv and eval.csv.
/// Returns the files written, in a deterministic order.
std::vector<std::filesystem::path> write_run_plots(const std::filesystem::path& run);

}  // namespace vemkd::cli
