#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace vemkd {

/// One named intermediate activation.
struct FeatureMap {
  std::string name;
  torch::Tensor value;
};

/// Tap activations in layer order.
using FeatureMapSet = std::vector<FeatureMap>;

/// Static description of a convolution for analytic MAC counting.
struct ConvShape {
  int64_t in_channels;
  int64_t out_channels;
  int64_t kernel;
  int64_t out_height;
  int64_t out_width;
};

int64_t count_params(const torch::nn::Module& module);
int64_t count_macs(const std::vector<ConvShape>& convs);

enum class GeneratorFamily { UNetToy, ResNetToy };

GeneratorFamily parse_generator_family(const std::string& name);
std::string to_string(GeneratorFamily f);

struct GeneratorSpec {
  GeneratorFamily family = GeneratorFamily::UNetToy;
  int base_width = 32;
  double width_multiplier = 1.0;
  int in_channels = 3;
  int out_channels = 3;
  int image_size = 32;

  /// Channel count of the first stage after applying the multiplier (>= 1).
  int64_t width() const;
  void validate() const;
};

/// Image-to-image generator with a tanh output and named feature taps.
class Generator : public torch::nn::Module {
 public:
  struct Output {
    torch::Tensor image;
    FeatureMapSet taps;  // every tap, in layer order
  };

  virtual Output forward_with_taps(const torch::Tensor& x) = 0;
  virtual std::vector<std::string> tap_names() const = 0;
  virtual int64_t tap_channels(const std::string& name) const = 0;
  virtual std::vector<ConvShape> conv_shapes(int image_size) const = 0;

  torch::Tensor forward(const torch::Tensor& x) { return forward_with_taps(x).image; }

  /// Selected taps, in the order given.
  FeatureMapSet features(const torch::Tensor& x, const std::vector<std::string>& names);
  static FeatureMapSet select(const FeatureMapSet& all, const std::vector<std::string>& names);

  const GeneratorSpec& spec() const { return spec_; }

 protected:
  explicit Generator(GeneratorSpec spec) : spec_(spec) {}
  GeneratorSpec spec_;
};

std::shared_ptr<Generator> build_generator(const GeneratorSpec& spec, uint64_t seed);

struct DiscriminatorSpec {
  int depth = 3;
  int base_width = 32;
  int in_channels = 6;  // condition + image, concatenated
  std::vector<int> taps{0, 1};

  void validate() const;
};

/// Conditional PatchGAN: strided 4x4 conv stack ending in a 1-channel logit map.
class Discriminator : public torch::nn::Module {
 public:
  struct Output {
    torch::Tensor logits;  // [N, 1, h, w]
    FeatureMapSet taps;    // configured taps in layer order
  };

  Discriminator(const DiscriminatorSpec& spec, uint64_t seed);

  Output forward_with_taps(const torch::Tensor& condition, const torch::Tensor& image);
  torch::Tensor forward(const torch::Tensor& condition, const torch::Tensor& image) {
    return forward_with_taps(condition, image).logits;
  }
  std::vector<ConvShape> conv_shapes(int image_size) const;
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  std::vector<torch::nn::Conv2d> layers_;
  torch::nn::Conv2d out_{nullptr};
};

std::shared_ptr<Discriminator> build_discriminator(const DiscriminatorSpec& spec, uint64_t seed);

/// Copies parameter and buffer values from `src` into `dst` (same architecture).
void copy_weights(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace vemkd
