#include "vemkd/image_batch.hpp"

#include "vemkd/errors.hpp"

#include <sstream>

namespace vemkd {

namespace {

std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

}  // namespace

void require_4d(const torch::Tensor& t, std::string_view what) {
  if (!t.defined() || t.dim() != 4) {
    throw ContractViolation(std::string(what) + ": expected a 4-D [N,C,H,W] tensor, got " +
                            (t.defined() ? shape_str(t) : std::string("undefined")));
  }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what) {
  if (!a.defined() || !b.defined() || a.sizes() != b.sizes()) {
    throw ContractViolation(std::string(what) + ": shape mismatch " +
                            (a.defined() ? shape_str(a) : "undefined") + " vs " +
                            (b.defined() ? shape_str(b) : "undefined"));
  }
}

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

void validate_image_batch(const ImageBatch& batch) {
  require_4d(batch, "ImageBatch");
  const auto c = batch.size(1);
  const auto h = batch.size(2);
  const auto w = batch.size(3);
  if (c != 1 && c != 3) throw ContractViolation("ImageBatch: channels must be 1 or 3");
  if (h != w || (h != 32 && h != 64)) throw ContractViolation("ImageBatch: spatial size must be 32x32 or 64x64");
  if (!all_finite(batch)) throw ContractViolation("ImageBatch: non-finite entries");
}

}  // namespace vemkd
