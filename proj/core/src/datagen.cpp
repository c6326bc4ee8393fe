#include "vemkd/datagen.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/portable_rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace vemkd {

namespace fs = std::filesystem;

namespace {

constexpr int kSupersample = 4;
constexpr double kEdgeThreshold = 0.5;
constexpr double kMinContrast = 0.3;

static_assert(std::endian::native == std::endian::little, "packed float32 files assume a little-endian host");

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Shape {
  bool ellipse = true;
  double cx = 0, cy = 0, rx = 0, ry = 0, angle = 0;
  std::vector<std::array<double, 2>> vertices;
  std::array<double, 3> color{};

  bool contains(double px, double py) const {
    if (ellipse) {
      const double dx = px - cx, dy = py - cy;
      const double c = std::cos(angle), s = std::sin(angle);
      const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
      return u * u + v * v <= 1.0;
    }
    const size_t n = vertices.size();
    for (size_t i = 0; i < n; ++i) {
      const auto& a = vertices[i];
      const auto& b = vertices[(i + 1) % n];
      if ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) < 0.0) return false;
    }
    return true;
  }
};

double gray(const std::array<double, 3>& c, int channels) {
  return channels == 1 ? c[0] : (c[0] + c[1] + c[2]) / 3.0;
}

std::array<double, 3> random_color(std::mt19937_64& rng) {
  return {uniform01(rng), uniform01(rng), uniform01(rng)};
}

void write_bytes(const fs::path& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

SplitFiles write_split(const fs::path& root, const std::string& name, const DatasetSpec& spec, uint64_t split_salt,
                       int64_t count) {
  const int64_t n = spec.image_size;
  auto ys = torch::empty({count, spec.channels, n, n});
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t seed = splitmix64(spec.seed ^ splitmix64(split_salt * 0x100000001B3ULL + static_cast<uint64_t>(i)));
    ys[i] = render_shapes_sample(seed, spec.image_size, spec.channels).second;
  }
  const auto xs = edge_map(ys);
  SplitFiles files{name + "_x.f32", name + "_y.f32", count, 0, 0};
  write_f32_file(root / files.x_file, xs);
  write_f32_file(root / files.y_file, ys);
  files.crc32_x = crc32_of_file(root / files.x_file);
  files.crc32_y = crc32_of_file(root / files.y_file);
  return files;
}

nlohmann::json split_json(const SplitFiles& s) {
  return {{"x", s.x_file}, {"y", s.y_file}, {"count", s.count}, {"crc32_x", s.crc32_x}, {"crc32_y", s.crc32_y}};
}

SplitFiles split_from_json(const nlohmann::json& j) {
  return {j.at("x").get<std::string>(), j.at("y").get<std::string>(), j.at("count").get<int64_t>(),
          j.at("crc32_x").get<uint32_t>(), j.at("crc32_y").get<uint32_t>()};
}

}  // namespace

void DatasetSpec::validate() const {
  if (image_size != 32 && image_size != 64) throw ConfigError("data.image_size must be 32 or 64");
  if (channels != 1 && channels != 3) throw ConfigError("data.channels must be 1 or 3");
  if (num_train < 1) throw ConfigError("data.num_train must be >= 1");
  if (num_val < 1) throw ConfigError("data.num_val must be >= 1");
  if (name.empty()) throw ConfigError("data.name must not be empty");
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"name", spec.name},
          {"format_version", format_version},
          {"image_size", spec.image_size},
          {"channels", spec.channels},
          {"num_train", spec.num_train},
          {"num_val", spec.num_val},
          {"seed", spec.seed},
          {"layout", "row-major [N,C,H,W] little-endian float32"},
          {"splits", {{"train", split_json(train)}, {"val", split_json(val)}}}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.spec.name = j.at("name").get<std::string>();
    m.format_version = j.at("format_version").get<int>();
    m.spec.image_size = j.at("image_size").get<int>();
    m.spec.channels = j.at("channels").get<int>();
    m.spec.num_train = j.at("num_train").get<int64_t>();
    m.spec.num_val = j.at("num_val").get<int64_t>();
    m.spec.seed = j.at("seed").get<uint64_t>();
    m.train = split_from_json(j.at("splits").at("train"));
    m.val = split_from_json(j.at("splits").at("val"));
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.format_version != kDatasetFormatVersion) {
    throw DataIntegrityError("unsupported dataset format version " + std::to_string(m.format_version));
  }
  return m;
}

const SplitFiles& DatasetManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  throw ConfigError("unknown split '" + name + "' (train|val)");
}

std::pair<torch::Tensor, torch::Tensor> render_shapes_sample(uint64_t seed, int image_size, int channels) {
  std::mt19937_64 rng(seed);
  const double n = image_size;

  // Background: gentle linear gradient between two nearby colours.
  const auto bg0 = random_color(rng);
  std::array<double, 3> bg1{};
  for (int c = 0; c < 3; ++c) bg1[c] = std::clamp(bg0[c] + uniform(rng, -0.3, 0.3), 0.0, 1.0);
  const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(dir), gy = std::sin(dir);
  std::array<double, 3> bg_mid{};
  for (int c = 0; c < 3; ++c) bg_mid[c] = 0.5 * (bg0[c] + bg1[c]);

  const int num_shapes = 1 + static_cast<int>(uniform_index(rng, 3));
  std::vector<Shape> shapes(num_shapes);
  for (auto& sh : shapes) {
    sh.ellipse = uniform01(rng) < 0.5;
    sh.cx = uniform(rng, 0.2, 0.8) * n;
    sh.cy = uniform(rng, 0.2, 0.8) * n;
    if (sh.ellipse) {
      sh.rx = uniform(rng, 0.12, 0.3) * n;
      sh.ry = uniform(rng, 0.12, 0.3) * n;
      sh.angle = uniform(rng, 0.0, std::numbers::pi);
    } else {
      const int k = 3 + static_cast<int>(uniform_index(rng, 3));
      const double r = uniform(rng, 0.15, 0.35) * n;
      // Jittered regular polygon; fully random angles can collapse into slivers.
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double sector = 2.0 * std::numbers::pi / k;
      for (int v = 0; v < k; ++v) {
        const double a = phase + (v + uniform(rng, -0.3, 0.3)) * sector;
        sh.vertices.push_back({sh.cx + r * std::cos(a), sh.cy + r * std::sin(a)});
      }
    }
    for (int attempt = 0; attempt < 32; ++attempt) {
      sh.color = random_color(rng);
      if (std::abs(gray(sh.color, channels) - gray(bg_mid, channels)) >= kMinContrast) break;
    }
  }

  auto target = torch::empty({channels, image_size, image_size});
  auto acc = target.accessor<float, 3>();
  const double inv = 1.0 / kSupersample;
  for (int py = 0; py < image_size; ++py) {
    for (int px = 0; px < image_size; ++px) {
      const double proj = ((px + 0.5) / n - 0.5) * gx + ((py + 0.5) / n - 0.5) * gy;
      const double w = std::clamp(proj + 0.5, 0.0, 1.0);
      std::array<double, 3> color{};
      for (int c = 0; c < 3; ++c) color[c] = (1.0 - w) * bg0[c] + w * bg1[c];
      for (const auto& sh : shapes) {
        int inside = 0;
        for (int sy = 0; sy < kSupersample; ++sy) {
          for (int sx = 0; sx < kSupersample; ++sx) {
            if (sh.contains(px + (sx + 0.5) * inv, py + (sy + 0.5) * inv)) ++inside;
          }
        }
        const double cover = static_cast<double>(inside) / (kSupersample * kSupersample);
        for (int c = 0; c < 3; ++c) color[c] = (1.0 - cover) * color[c] + cover * sh.color[c];
      }
      if (channels == 1) {
        acc[0][py][px] = static_cast<float>(2.0 * gray(color, 3) - 1.0);
      } else {
        for (int c = 0; c < 3; ++c) acc[c][py][px] = static_cast<float>(2.0 * color[c] - 1.0);
      }
    }
  }
  auto input = edge_map(target.unsqueeze(0)).squeeze(0);
  return {input, target};
}

torch::Tensor edge_map(const torch::Tensor& targets) {
  torch::NoGradGuard no_grad;
  const auto g = targets.to(torch::kFloat32).mean(1, true);
  const auto padded = torch::replication_pad2d(g, {1, 1, 1, 1});
  const auto kx = torch::tensor({-1.f, 0.f, 1.f, -2.f, 0.f, 2.f, -1.f, 0.f, 1.f}).view({1, 1, 3, 3});
  const auto ky = kx.transpose(2, 3).contiguous();
  const auto mag = torch::sqrt(torch::conv2d(padded, kx).square() + torch::conv2d(padded, ky).square());
  const auto edges = 1.0 - 2.0 * (mag > kEdgeThreshold).to(torch::kFloat32);
  return edges.expand({targets.size(0), targets.size(1), targets.size(2), targets.size(3)}).contiguous();
}

void write_f32_file(const fs::path& path, const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  write_bytes(path, c.data_ptr<float>(), static_cast<size_t>(c.numel()) * sizeof(float));
}

torch::Tensor read_f32_file(const fs::path& path, std::vector<int64_t> shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto t = torch::empty(shape, torch::kFloat32);
  const auto bytes = static_cast<std::streamsize>(t.numel() * sizeof(float));
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), bytes);
  if (in.gcount() != bytes) throw DataIntegrityError("'" + path.string() + "' is shorter than its declared shape");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataIntegrityError("'" + path.string() + "' is longer than its declared shape");
  }
  return t;
}

uint32_t crc32_of_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
  }
  return static_cast<uint32_t>(crc);
}

DatasetManifest generate_shapes_dataset(const DatasetSpec& spec, const fs::path& root) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create dataset directory '" + root.string() + "': " + ec.message());
  DatasetManifest m;
  m.spec = spec;
  m.train = write_split(root, "train", spec, 1, spec.num_train);
  m.val = write_split(root, "val", spec, 2, spec.num_val);
  const auto text = m.to_json().dump(2) + "\n";
  write_bytes(root / "manifest.json", text.data(), text.size());
  return m;
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("cannot open dataset manifest '" + (root / "manifest.json").string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError(std::string("malformed dataset manifest: ") + e.what());
  }
  return DatasetManifest::from_json(j);
}

PairedSplit load_split(const fs::path& root, const std::string& split) {
  const auto m = read_manifest(root);
  const auto& files = m.split(split);
  if (crc32_of_file(root / files.x_file) != files.crc32_x || crc32_of_file(root / files.y_file) != files.crc32_y) {
    throw DataIntegrityError("checksum mismatch in split '" + split + "' under '" + root.string() + "'");
  }
  const std::vector<int64_t> shape{files.count, m.spec.channels, m.spec.image_size, m.spec.image_size};
  return {read_f32_file(root / files.x_file, shape), read_f32_file(root / files.y_file, shape)};
}

BatchStream::BatchStream(PairedSplit data, int64_t batch_size, uint64_t seed, bool shuffle, int64_t epochs)
    : data_(std::move(data)), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), epochs_(epochs) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (data_.x.size(0) < batch_size) throw ConfigError("split has fewer samples than one batch");
  reshuffle();
}

void BatchStream::reshuffle() {
  const auto n = data_.x.size(0);
  order_.resize(n);
  for (int64_t i = 0; i < n; ++i) order_[i] = i;
  if (!shuffle_) return;
  std::mt19937_64 rng(splitmix64(seed_ ^ splitmix64(static_cast<uint64_t>(epoch_))));
  for (int64_t i = n - 1; i > 0; --i) {
    std::swap(order_[i], order_[uniform_index(rng, static_cast<uint64_t>(i + 1))]);
  }
}

bool BatchStream::next(torch::Tensor& x, torch::Tensor& y) {
  if (cursor_ >= batches_per_epoch()) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  if (epochs_ > 0 && epoch_ >= epochs_) return false;
  const auto idx = torch::from_blob(order_.data() + cursor_ * batch_size_, {batch_size_}, torch::kLong).clone();
  x = data_.x.index_select(0, idx);
  y = data_.y.index_select(0, idx);
  ++cursor_;
  return true;
}

void BatchStream::seek(int64_t epoch, int64_t cursor) {
  epoch_ = epoch;
  cursor_ = cursor;
  reshuffle();
}

BatchStream load_batches(const fs::path& root, const std::string& split, int64_t batch_size, uint64_t seed,
                         int64_t epochs) {
  return BatchStream(load_split(root, split), batch_size, seed, split != "val", epochs);
}

}  // namespace vemkd
