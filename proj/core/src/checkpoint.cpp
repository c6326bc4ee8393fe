#include "vemkd/checkpoint.hpp"

#include "vemkd/errors.hpp"

#include <fstream>

namespace vemkd {

namespace fs = std::filesystem;

namespace {

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "float32";
    case torch::kUInt8:
      return "uint8";
    default:
      throw ContractViolation("checkpoint: unsupported dtype");
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "uint8") return torch::kUInt8;
  throw DataIntegrityError("checkpoint: unknown dtype '" + name + "'");
}

}  // namespace

void Checkpoint::put(const std::string& name, const torch::Tensor& value) {
  auto v = value.detach().cpu();
  v = v.scalar_type() == torch::kUInt8 ? v.contiguous().clone() : v.to(torch::kFloat32).contiguous().clone();
  arrays_[name] = v;
}

const torch::Tensor& Checkpoint::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw DataIntegrityError("checkpoint is missing array '" + name + "'");
  return it->second;
}

void Checkpoint::restore_into(const std::string& name, torch::Tensor& dst) const {
  const auto& src = get(name);
  if (src.sizes() != dst.sizes()) {
    throw DataIntegrityError("checkpoint array '" + name + "' has shape " + c10::str(src.sizes()) + ", expected " +
                             c10::str(dst.sizes()));
  }
  torch::NoGradGuard no_grad;
  dst.copy_(src);
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : arrays_) out.push_back(k);
  return out;
}

void Checkpoint::save(const fs::path& dir) const {
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create checkpoint directory '" + tmp.string() + "': " + ec.message());

  nlohmann::json entries = nlohmann::json::array();
  {
    std::ofstream bin(tmp / "arrays.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write '" + (tmp / "arrays.bin").string() + "'");
    int64_t offset = 0;
    for (const auto& [name, t] : arrays_) {
      const int64_t nbytes = t.numel() * static_cast<int64_t>(t.element_size());
      bin.write(static_cast<const char*>(t.data_ptr()), nbytes);
      entries.push_back({{"name", name},
                         {"dtype", dtype_name(t.scalar_type())},
                         {"shape", t.sizes().vec()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
      offset += nbytes;
    }
    if (!bin) throw IoError("write failed for '" + (tmp / "arrays.bin").string() + "'");
  }
  {
    const nlohmann::json manifest{{"format_version", kCheckpointFormatVersion}, {"meta", meta_}, {"entries", entries}};
    std::ofstream out(tmp / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("write failed for '" + (tmp / "manifest.json").string() + "'");
  }
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + dir.string() + "': " + ec.message());
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open checkpoint manifest '" + (dir / "manifest.json").string() + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataIntegrityError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw DataIntegrityError("unsupported checkpoint format in '" + dir.string() + "'");
  }
  std::ifstream bin(dir / "arrays.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open '" + (dir / "arrays.bin").string() + "'");

  Checkpoint ck;
  ck.meta_ = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("entries")) {
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e.at("dtype").get<std::string>())));
    const auto nbytes = e.at("nbytes").get<int64_t>();
    if (nbytes != t.numel() * static_cast<int64_t>(t.element_size())) {
      throw DataIntegrityError("checkpoint entry '" + e.at("name").get<std::string>() + "' has inconsistent size");
    }
    bin.seekg(e.at("offset").get<int64_t>());
    bin.read(static_cast<char*>(t.data_ptr()), nbytes);
    if (bin.gcount() != nbytes) throw DataIntegrityError("checkpoint payload truncated in '" + dir.string() + "'");
    ck.arrays_[e.at("name").get<std::string>()] = t;
  }
  return ck;
}

}  // namespace vemkd
