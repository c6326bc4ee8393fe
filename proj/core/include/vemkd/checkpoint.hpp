#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace vemkd {

inline constexpr int kCheckpointFormatVersion = 1;

/// Named-array container stored as a directory:
///   manifest.json  {format_version, meta, entries: [{name, dtype, shape, offset, nbytes}]}
///   arrays.bin     concatenated little-endian payloads (float32 or uint8)
class Checkpoint {
 public:
  /// Stores a contiguous copy. float tensors are stored as float32, byte tensors as uint8.
  void put(const std::string& name, const torch::Tensor& value);
  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const torch::Tensor& get(const std::string& name) const;
  /// Copies the stored array into `dst` in place (shape must match).
  void restore_into(const std::string& name, torch::Tensor& dst) const;
  std::vector<std::string> names() const;

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  /// Writes to a sibling temporary directory and renames it into place, so an
  /// interrupted save never clobbers an existing checkpoint.
  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);

 private:
  std::map<std::string, torch::Tensor> arrays_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace vemkd
