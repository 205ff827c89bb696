#include "bimtdp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bimtdp {

void ParamRegistry::add(std::string name, Var var, ParamClass cls) {
  if (find(name)) throw std::logic_error("parameter registered twice: " + name);
  for (const auto& p : params_) {
    if (p.var == var) throw std::logic_error("tensor registered under two names: " + name);
  }
  params_.push_back({std::move(name), std::move(var), cls});
}

void ParamRegistry::add_buffer(std::string name, std::shared_ptr<ops::BatchNormStats> stats) {
  for (const auto& b : buffers_) {
    if (b.name == name) throw std::logic_error("buffer registered twice: " + name);
  }
  buffers_.push_back({std::move(name), std::move(stats)});
}

const Parameter* ParamRegistry::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::uint64_t ParamRegistry::count(ParamClass cls) const {
  std::uint64_t n = 0;
  for (const auto& p : params_) {
    if (p.cls == cls) n += p.var->value.size();
  }
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& p : params_) p.var->zero_grad();
}

Conv2dLayer make_conv(ParamRegistry& reg, const std::string& name, std::size_t in,
                      std::size_t out, std::size_t k, ConvGeometry geom, bool bias, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({out, in, k, k});
  for (double& v : w.values()) v = dist(rng);
  Conv2dLayer layer;
  layer.weight = make_leaf(std::move(w));
  layer.geom = geom;
  reg.add(name + ".weight", layer.weight, ParamClass::FP);
  if (bias) {
    layer.bias = make_leaf(Tensor({out}));
    reg.add(name + ".bias", layer.bias, ParamClass::FP);
  }
  return layer;
}

Var BinConvLayer::forward(Tape& t, const Var& a_in) const {
  const Var ab = ops::sign(t, a_in, estimator);
  const Var wb = ops::ste_sign(t, latent_weight);
  return ops::binary_conv2d(t, ab, wb, geom);
}

BinConvLayer make_binconv(ParamRegistry& reg, const std::string& name, std::size_t in,
                          std::size_t out, std::size_t k, ConvGeometry geom,
                          ops::Estimator est, Rng& rng) {
  std::uniform_real_distribution<double> dist(-0.1, 0.1);
  Tensor w({out, in, k, k});
  for (double& v : w.values()) v = dist(rng);
  BinConvLayer layer{make_leaf(std::move(w)), geom, est};
  reg.add(name + ".latent", layer.latent_weight, ParamClass::Binary);
  return layer;
}

BatchNormLayer make_batchnorm(ParamRegistry& reg, const std::string& name, std::size_t channels) {
  BatchNormLayer bn;
  bn.gamma = make_leaf(Tensor({channels}, 1.0));
  bn.beta = make_leaf(Tensor({channels}, 0.0));
  bn.stats = std::make_shared<ops::BatchNormStats>(
      ops::BatchNormStats{Tensor({channels}, 0.0), Tensor({channels}, 1.0)});
  reg.add(name + ".gamma", bn.gamma, ParamClass::FP);
  reg.add(name + ".beta", bn.beta, ParamClass::FP);
  reg.add_buffer(name + ".stats", bn.stats);
  return bn;
}

Var ConvUnit::forward(Tape& t, const Var& x, ops::Mode mode) const {
  const Var pre = binary ? bin.forward(t, x) : fp.forward(t, ops::hardtanh(t, x));
  return bn.forward(t, pre, mode);
}

ConvUnit make_conv_unit(ParamRegistry& reg, const std::string& name, std::size_t in,
                        std::size_t out, bool binary, ops::Estimator est, Rng& rng) {
  ConvUnit u;
  u.binary = binary;
  if (binary) {
    u.bin = make_binconv(reg, name + ".conv", in, out, 3, {1, 1}, est, rng);
  } else {
    u.fp = make_conv(reg, name + ".conv", in, out, 3, {1, 1}, false, rng);
  }
  u.bn = make_batchnorm(reg, name + ".bn", out);
  return u;
}

Var BiRealBlock::forward(Tape& t, const Var& x, ops::Mode mode) const {
  const Var mid = ops::add(t, stage1.forward(t, x, mode), x);
  return ops::add(t, stage2.forward(t, mid, mode), mid);
}

BiRealBlock make_bireal_block(ParamRegistry& reg, const std::string& name, std::size_t channels,
                              bool binary, ops::Estimator est, Rng& rng) {
  BiRealBlock b;
  b.stage1 = make_conv_unit(reg, name + ".0", channels, channels, binary, est, rng);
  b.stage2 = make_conv_unit(reg, name + ".1", channels, channels, binary, est, rng);
  return b;
}

void BackboneSpec::validate() const {
  if (widths.empty()) throw std::invalid_argument("backbone.widths: at least one scale required");
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("backbone.widths: zero width");
  }
  if (stem_stride != 1 && stem_stride != 2 && stem_stride != 4) {
    throw std::invalid_argument("backbone.stem_stride: must be 1, 2 or 4");
  }
  if (in_channels == 0) throw std::invalid_argument("backbone.in_channels: must be positive");
}

Backbone::Backbone(ParamRegistry& reg, const std::string& name, const BackboneSpec& spec, Rng& rng)
    : spec_(spec) {
  spec_.validate();
  const std::size_t stem_convs = spec_.stem_stride == 1 ? 1 : (spec_.stem_stride == 2 ? 1 : 2);
  std::size_t in = spec_.in_channels;
  for (std::size_t i = 0; i < stem_convs; ++i) {
    const std::string base = name + ".stem" + std::to_string(i);
    const std::size_t stride = spec_.stem_stride == 1 ? 1 : 2;
    Stage st{make_conv(reg, base + ".conv", in, spec_.widths[0], 3, {stride, 1}, false, rng),
             make_batchnorm(reg, base + ".bn", spec_.widths[0])};
    stem_.push_back(std::move(st));
    in = spec_.widths[0];
  }
  for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
    const std::string base = name + ".s" + std::to_string(s);
    if (s > 0) {
      downsample_.push_back(
          {make_conv(reg, base + ".down.conv", spec_.widths[s - 1], spec_.widths[s], 3, {2, 1},
                     false, rng),
           make_batchnorm(reg, base + ".down.bn", spec_.widths[s])});
    }
    std::vector<BiRealBlock> blocks;
    for (std::size_t b = 0; b < spec_.blocks_per_scale; ++b) {
      blocks.push_back(make_bireal_block(reg, base + ".block" + std::to_string(b), spec_.widths[s],
                                         spec_.binary, spec_.estimator, rng));
    }
    blocks_.push_back(std::move(blocks));
  }
}

std::vector<Var> Backbone::forward(Tape& t, const Var& images, ops::Mode mode,
                                   const TapFn& tap) const {
  require_rank(images->value, 4, "backbone");
  if (images->value.dim(1) != spec_.in_channels) {
    throw ShapeError("backbone: expected " + std::to_string(spec_.in_channels) +
                     " input channels, got " + std::to_string(images->value.dim(1)));
  }
  Var x = images;
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    if (i > 0) x = ops::hardtanh(t, x);
    x = stem_[i].bn.forward(t, stem_[i].conv.forward(t, x), mode);
  }
  std::vector<Var> outs;
  for (std::size_t s = 0; s < blocks_.size(); ++s) {
    if (s > 0) {
      const auto& d = downsample_[s - 1];
      x = d.bn.forward(t, d.conv.forward(t, x), mode);
    }
    for (const auto& blk : blocks_[s]) x = blk.forward(t, x, mode);
    if (tap) tap("backbone.s" + std::to_string(s), x);
    outs.push_back(x);
  }
  return outs;
}

void clip_latent_weights(const ParamRegistry& reg) {
  for (const auto& p : reg.params()) {
    if (p.cls != ParamClass::Binary) continue;
    for (double& v : p.var->value.values()) v = std::clamp(v, -1.0, 1.0);
  }
}

}  // namespace bimtdp
