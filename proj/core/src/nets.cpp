#include "vemkd/nets.hpp"

#include "vemkd/errors.hpp"
#include "vemkd/image_batch.hpp"

#include <algorithm>
#include <cmath>

namespace vemkd {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  const int64_t pad = (k == 4) ? 1 : k / 2;
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad));
}

torch::Tensor inorm(const torch::Tensor& x) {
  return torch::instance_norm(x, {}, {}, {}, {}, /*use_input_stats=*/true, 0.1, 1e-5, false);
}

torch::Tensor up2(const torch::Tensor& x) {
  return torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
}

// pix2pix-style init: N(0, 0.02) weights, zero biases, from a private stream.
void init_module(nn::Module& m, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : m.named_parameters(true)) {
    if (p.key().ends_with("bias")) {
      p.value().zero_();
    } else {
      p.value().normal_(0.0, 0.02, gen);
    }
  }
}

class UNetToy final : public Generator {
 public:
  explicit UNetToy(const GeneratorSpec& spec) : Generator(spec) {
    const auto w = spec.width();
    enc0_ = register_module("enc0", conv(spec.in_channels, w, 3));
    down1_ = register_module("down1", conv(w, 2 * w, 4, 2));
    down2_ = register_module("down2", conv(2 * w, 4 * w, 4, 2));
    down3_ = register_module("down3", conv(4 * w, 4 * w, 4, 2));
    up1_ = register_module("up1", conv(4 * w, 4 * w, 3));
    up2_ = register_module("up2", conv(8 * w, 2 * w, 3));
    up3_ = register_module("up3", conv(4 * w, w, 3));
    out_ = register_module("out", conv(2 * w, spec.out_channels, 3));
  }

  Output forward_with_taps(const torch::Tensor& x) override {
    const auto e0 = torch::leaky_relu(inorm(enc0_->forward(x)), 0.2);
    const auto d1 = torch::leaky_relu(inorm(down1_->forward(e0)), 0.2);
    const auto d2 = torch::leaky_relu(inorm(down2_->forward(d1)), 0.2);
    const auto mid = torch::relu(inorm(down3_->forward(d2)));
    const auto u1 = torch::relu(inorm(up1_->forward(up2(mid))));
    const auto u2 = torch::relu(inorm(up2_->forward(up2(torch::cat({u1, d2}, 1)))));
    const auto u3 = torch::relu(inorm(up3_->forward(up2(torch::cat({u2, d1}, 1)))));
    auto image = torch::tanh(out_->forward(torch::cat({u3, e0}, 1)));
    return {image, {{"down1", d1}, {"down2", d2}, {"mid", mid}, {"up1", u1}, {"up2", u2}, {"up3", u3}}};
  }

  std::vector<std::string> tap_names() const override { return {"down1", "down2", "mid", "up1", "up2", "up3"}; }

  int64_t tap_channels(const std::string& name) const override {
    const auto w = spec_.width();
    if (name == "down1") return 2 * w;
    if (name == "down2" || name == "mid" || name == "up1") return 4 * w;
    if (name == "up2") return 2 * w;
    if (name == "up3") return w;
    throw ConfigError("unknown UNetToy tap '" + name + "'");
  }

  std::vector<ConvShape> conv_shapes(int n) const override {
    const auto w = spec_.width();
    return {{spec_.in_channels, w, 3, n, n},          {w, 2 * w, 4, n / 2, n / 2},
            {2 * w, 4 * w, 4, n / 4, n / 4},          {4 * w, 4 * w, 4, n / 8, n / 8},
            {4 * w, 4 * w, 3, n / 4, n / 4},          {8 * w, 2 * w, 3, n / 2, n / 2},
            {4 * w, w, 3, n, n},                      {2 * w, spec_.out_channels, 3, n, n}};
  }

 private:
  nn::Conv2d enc0_{nullptr}, down1_{nullptr}, down2_{nullptr}, down3_{nullptr};
  nn::Conv2d up1_{nullptr}, up2_{nullptr}, up3_{nullptr}, out_{nullptr};
};

class ResNetToy final : public Generator {
 public:
  static constexpr int kBlocks = 4;

  explicit ResNetToy(const GeneratorSpec& spec) : Generator(spec) {
    const auto w = spec.width();
    enc0_ = register_module("enc0", conv(spec.in_channels, w, 3));
    down1_ = register_module("down1", conv(w, 2 * w, 3, 2));
    down2_ = register_module("down2", conv(2 * w, 4 * w, 3, 2));
    for (int i = 0; i < kBlocks; ++i) {
      res_a_.push_back(register_module("res" + std::to_string(i) + "a", conv(4 * w, 4 * w, 3)));
      res_b_.push_back(register_module("res" + std::to_string(i) + "b", conv(4 * w, 4 * w, 3)));
    }
    up1_ = register_module("up1", conv(4 * w, 2 * w, 3));
    up2_ = register_module("up2", conv(2 * w, w, 3));
    out_ = register_module("out", conv(w, spec.out_channels, 3));
  }

  Output forward_with_taps(const torch::Tensor& x) override {
    const auto e0 = torch::relu(inorm(enc0_->forward(x)));
    const auto d1 = torch::relu(inorm(down1_->forward(e0)));
    const auto d2 = torch::relu(inorm(down2_->forward(d1)));
    auto h = d2;
    for (int i = 0; i < kBlocks; ++i) {
      auto r = torch::relu(inorm(res_a_[i]->forward(h)));
      h = h + inorm(res_b_[i]->forward(r));
    }
    const auto u1 = torch::relu(inorm(up1_->forward(up2(h))));
    const auto u2 = torch::relu(inorm(up2_->forward(up2(u1))));
    auto image = torch::tanh(out_->forward(u2));
    return {image, {{"down1", d1}, {"down2", d2}, {"mid", h}, {"up1", u1}, {"up2", u2}}};
  }

  std::vector<std::string> tap_names() const override { return {"down1", "down2", "mid", "up1", "up2"}; }

  int64_t tap_channels(const std::string& name) const override {
    const auto w = spec_.width();
    if (name == "down1" || name == "up1") return 2 * w;
    if (name == "down2" || name == "mid") return 4 * w;
    if (name == "up2") return w;
    throw ConfigError("unknown ResNetToy tap '" + name + "'");
  }

  std::vector<ConvShape> conv_shapes(int n) const override {
    const auto w = spec_.width();
    std::vector<ConvShape> out{{spec_.in_channels, w, 3, n, n}, {w, 2 * w, 3, n / 2, n / 2},
                               {2 * w, 4 * w, 3, n / 4, n / 4}};
    for (int i = 0; i < 2 * kBlocks; ++i) out.push_back({4 * w, 4 * w, 3, n / 4, n / 4});
    out.push_back({4 * w, 2 * w, 3, n / 2, n / 2});
    out.push_back({2 * w, w, 3, n, n});
    out.push_back({w, spec_.out_channels, 3, n, n});
    return out;
  }

 private:
  nn::Conv2d enc0_{nullptr}, down1_{nullptr}, down2_{nullptr};
  std::vector<nn::Conv2d> res_a_, res_b_;
  nn::Conv2d up1_{nullptr}, up2_{nullptr}, out_{nullptr};
};

}  // namespace

int64_t count_params(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters(true)) n += p.numel();
  return n;
}

int64_t count_macs(const std::vector<ConvShape>& convs) {
  int64_t macs = 0;
  for (const auto& c : convs) macs += c.kernel * c.kernel * c.in_channels * c.out_channels * c.out_height * c.out_width;
  return macs;
}

GeneratorFamily parse_generator_family(const std::string& name) {
  if (name == "unet") return GeneratorFamily::UNetToy;
  if (name == "resnet") return GeneratorFamily::ResNetToy;
  throw ConfigError("model.family: unknown family '" + name + "' (unet|resnet)");
}

std::string to_string(GeneratorFamily f) { return f == GeneratorFamily::UNetToy ? "unet" : "resnet"; }

int64_t GeneratorSpec::width() const {
  return std::max<int64_t>(1, std::llround(base_width * width_multiplier));
}

void GeneratorSpec::validate() const {
  if (base_width < 1) throw ConfigError("model.width must be >= 1");
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0)) throw ConfigError("model.student_multiplier must be in (0, 1]");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("generator channels must be >= 1");
  if (image_size < 8 || image_size % 8 != 0) throw ConfigError("model.image_size must be a positive multiple of 8");
}

FeatureMapSet Generator::features(const torch::Tensor& x, const std::vector<std::string>& names) {
  return select(forward_with_taps(x).taps, names);
}

FeatureMapSet Generator::select(const FeatureMapSet& all, const std::vector<std::string>& names) {
  FeatureMapSet out;
  out.reserve(names.size());
  for (const auto& name : names) {
    auto it = std::find_if(all.begin(), all.end(), [&](const FeatureMap& f) { return f.name == name; });
    if (it == all.end()) throw ConfigError("distill.taps: generator has no tap named '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

std::shared_ptr<Generator> build_generator(const GeneratorSpec& spec, uint64_t seed) {
  spec.validate();
  std::shared_ptr<Generator> g;
  if (spec.family == GeneratorFamily::UNetToy) {
    g = std::make_shared<UNetToy>(spec);
  } else {
    g = std::make_shared<ResNetToy>(spec);
  }
  init_module(*g, seed);
  return g;
}

void DiscriminatorSpec::validate() const {
  if (depth < 1) throw ConfigError("model.disc_depth must be >= 1");
  if (base_width < 1) throw ConfigError("model.disc_width must be >= 1");
  if (in_channels < 1) throw ConfigError("discriminator in_channels must be >= 1");
  for (int t : taps) {
    if (t < 0 || t >= depth) throw ConfigError("model.disc_taps: tap index out of range");
  }
  if (!std::is_sorted(taps.begin(), taps.end()) ||
      std::adjacent_find(taps.begin(), taps.end()) != taps.end()) {
    throw ConfigError("model.disc_taps must be strictly increasing");
  }
}

Discriminator::Discriminator(const DiscriminatorSpec& spec, uint64_t seed) : spec_(spec) {
  spec_.validate();
  int64_t in = spec.in_channels;
  for (int i = 0; i < spec.depth; ++i) {
    const int64_t out = static_cast<int64_t>(spec.base_width) * std::min(1 << i, 8);
    layers_.push_back(register_module("layer" + std::to_string(i), conv(in, out, 4, 2)));
    in = out;
  }
  out_ = register_module("logits", conv(in, 1, 3));
  init_module(*this, seed);
}

Discriminator::Output Discriminator::forward_with_taps(const torch::Tensor& condition, const torch::Tensor& image) {
  require_4d(condition, "discriminator(condition)");
  require_4d(image, "discriminator(image)");
  auto h = torch::cat({condition, image}, 1);
  Output out;
  for (int i = 0; i < spec_.depth; ++i) {
    h = layers_[i]->forward(h);
    if (i > 0) h = inorm(h);
    h = torch::leaky_relu(h, 0.2);
    if (std::find(spec_.taps.begin(), spec_.taps.end(), i) != spec_.taps.end()) {
      out.taps.push_back({"d" + std::to_string(i), h});
    }
  }
  out.logits = out_->forward(h);
  return out;
}

std::vector<ConvShape> Discriminator::conv_shapes(int image_size) const {
  std::vector<ConvShape> shapes;
  int64_t in = spec_.in_channels;
  int64_t n = image_size;
  for (int i = 0; i < spec_.depth; ++i) {
    const int64_t out = static_cast<int64_t>(spec_.base_width) * std::min(1 << i, 8);
    n /= 2;
    shapes.push_back({in, out, 4, n, n});
    in = out;
  }
  shapes.push_back({in, 1, 3, n, n});
  return shapes;
}

std::shared_ptr<Discriminator> build_discriminator(const DiscriminatorSpec& spec, uint64_t seed) {
  return std::make_shared<Discriminator>(spec, seed);
}

void copy_weights(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard no_grad;
  auto sp = src.named_parameters(true);
  auto dp = dst.named_parameters(true);
  for (auto& p : dp) {
    const auto* s = sp.find(p.key());
    if (s == nullptr || s->sizes() != p.value().sizes()) throw ContractViolation("copy_weights: architecture mismatch at " + p.key());
    p.value().copy_(*s);
  }
  auto sb = src.named_buffers(true);
  for (auto& b : dst.named_buffers(true)) {
    const auto* s = sb.find(b.key());
    if (s == nullptr) throw ContractViolation("copy_weights: missing buffer " + b.key());
    b.value().copy_(*s);
  }
}

}  // namespace vemkd
