#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vemkd {

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetSpec {
  std::string name = "shapes";
  int image_size = 32;
  int channels = 3;
  int64_t num_train = 2000;
  int64_t num_val = 256;
  uint64_t seed = 1234;

  void validate() const;
};

struct SplitFiles {
  std::string x_file;
  std::string y_file;
  int64_t count = 0;
  uint32_t crc32_x = 0;
  uint32_t crc32_y = 0;
};

struct DatasetManifest {
  DatasetSpec spec;
  int format_version = kDatasetFormatVersion;
  SplitFiles train;
  SplitFiles val;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  const SplitFiles& split(const std::string& name) const;
};

/// Renders one (edge map, target) pair into [C, H, W] tensors in [-1, 1]. The target is
/// a shaded background with 1-3 anti-aliased ellipses/convex polygons; the input is the
/// thresholded Sobel magnitude of the target's grayscale (edges -1 on a +1 background).
std::pair<torch::Tensor, torch::Tensor> render_shapes_sample(uint64_t seed, int image_size, int channels);

/// Edge operator applied to a target batch [N, C, H, W]; returns the matching input maps.
torch::Tensor edge_map(const torch::Tensor& targets);

/// Writes <root>/manifest.json and <root>/<split>_{x,y}.f32 (row-major [N,C,H,W]
/// little-endian float32). Same spec -> byte-identical files.
DatasetManifest generate_shapes_dataset(const DatasetSpec& spec, const std::filesystem::path& root);

DatasetManifest read_manifest(const std::filesystem::path& root);

struct PairedSplit {
  torch::Tensor x;  // [N, C, H, W]
  torch::Tensor y;
};

/// Loads a split, verifying CRC-32 checksums (DataIntegrityError on mismatch).
PairedSplit load_split(const std::filesystem::path& root, const std::string& split);

/// Deterministic minibatch stream. Training splits are reshuffled each epoch from
/// (seed, epoch); "val" is never shuffled. Final partial batches are dropped.
class BatchStream {
 public:
  BatchStream(PairedSplit data, int64_t batch_size, uint64_t seed, bool shuffle, int64_t epochs = 0);

  /// False once `epochs` epochs are exhausted (epochs == 0 means unbounded).
  bool next(torch::Tensor& x, torch::Tensor& y);

  int64_t batches_per_epoch() const { return data_.x.size(0) / batch_size_; }
  int64_t epoch() const { return epoch_; }
  int64_t cursor() const { return cursor_; }
  /// Repositions the stream (used when resuming from a checkpoint).
  void seek(int64_t epoch, int64_t cursor);

 private:
  void reshuffle();

  PairedSplit data_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  int64_t epochs_;
  int64_t epoch_ = 0;
  int64_t cursor_ = 0;  // batch index within the epoch
  std::vector<int64_t> order_;
};

BatchStream load_batches(const std::filesystem::path& root, const std::string& split, int64_t batch_size,
                         uint64_t seed, int64_t epochs = 0);

/// Little-endian float32 file I/O shared with the checkpoint container.
void write_f32_file(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_f32_file(const std::filesystem::path& path, std::vector<int64_t> shape);
uint32_t crc32_of_file(const std::filesystem::path& path);

}  // namespace vemkd
