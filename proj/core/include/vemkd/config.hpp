#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace vemkd {

enum class KeyType { Int, Float, Bool, String, IntList, FloatList, StringList };

struct ConfigKey {
  std::string name;
  KeyType type;
  std::string default_value;  // canonical text
  std::string doc;
};

/// Flat `key = value` run configuration. Every key is declared in schema() with a
/// default; unknown keys and ill-typed values raise ConfigError. Values are stored in
/// canonical text form so the resolved config can be echoed and re-read losslessly.
///
/// File syntax: one `key = value` per line, `#` starts a comment, strings may be bare
/// or double-quoted, lists are `[a, b, c]`. `sweep.<key> = [v1, v2, ...]` declares a
/// grid over <key>; expand_sweeps() fans it out into one config per grid point.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_string(const std::string& text, const std::string& origin = "<string>");
  static const std::vector<ConfigKey>& schema();

  /// Sets `key` from raw text (as it would appear after `=`), or registers a sweep
  /// when key starts with "sweep.".
  void set(const std::string& key, const std::string& raw);
  /// Applies a `key=value` override.
  void apply_override(const std::string& assignment);

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<int64_t> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

  /// Every key in schema order as `key = value` lines (sweeps excluded).
  std::string to_text() const;

  const std::map<std::string, std::vector<std::string>>& sweeps() const { return sweeps_; }
  /// Cartesian product over the declared sweeps. Each point gets
  /// output_dir/<key>=<value>[,<key>=<value>...] and no sweeps. Without sweeps, returns {*this}.
  std::vector<RunConfig> expand_sweeps() const;

 private:
  const ConfigKey& key_info(const std::string& key) const;
  const std::string& raw(const std::string& key, KeyType expected) const;

  std::map<std::string, std::string> values_;
  std::map<std::string, std::vector<std::string>> sweeps_;
};

}  // namespace vemkd
