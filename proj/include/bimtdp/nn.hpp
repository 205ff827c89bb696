#pragma once

// Layer zoo: full-precision and binarized convolutions, batch normalization,
// Bi-Real residual blocks and the two-scale shared trunk.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bimtdp/ops.hpp"

namespace bimtdp {

enum class ParamClass : std::uint8_t { FP = 0, Binary = 1 };

struct Parameter {
  std::string name;
  Var var;
  ParamClass cls = ParamClass::FP;
};

/// Non-trainable state that still belongs in a checkpoint.
struct Buffer {
  std::string name;
  std::shared_ptr<ops::BatchNormStats> stats;
};

/// Flat, ordered record of every parameter and buffer in a network.
class ParamRegistry {
 public:
  void add(std::string name, Var var, ParamClass cls);
  void add_buffer(std::string name, std::shared_ptr<ops::BatchNormStats> stats);

  const std::vector<Parameter>& params() const { return params_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }
  const Parameter* find(const std::string& name) const;

  std::uint64_t count(ParamClass cls) const;
  void zero_grads();

 private:
  std::vector<Parameter> params_;
  std::vector<Buffer> buffers_;
};

using Rng = std::mt19937_64;

/// Tap sink: forward passes offer named intermediate activations to it.
using TapFn = std::function<void(const std::string&, const Var&)>;

struct Conv2dLayer {
  Var weight;
  Var bias;  // may be null
  ConvGeometry geom;

  Var forward(Tape& t, const Var& x) const { return ops::conv2d(t, x, weight, bias, geom); }
  std::size_t out_channels() const { return weight->value.dim(0); }
};

/// He-uniform weights, zero bias.
Conv2dLayer make_conv(ParamRegistry& reg, const std::string& name, std::size_t in,
                      std::size_t out, std::size_t k, ConvGeometry geom, bool bias, Rng& rng);

/// Binarized convolution holding full-precision latent weights.
struct BinConvLayer {
  Var latent_weight;
  ConvGeometry geom;
  ops::Estimator estimator = ops::Estimator::Ste;

  /// Binarizes the activation with the configured estimator and the latent
  /// weight with the clipped STE, then runs the xnor-popcount convolution.
  Var forward(Tape& t, const Var& a_in) const;
};

/// Latent weights uniform in [-0.1, 0.1].
BinConvLayer make_binconv(ParamRegistry& reg, const std::string& name, std::size_t in,
                          std::size_t out, std::size_t k, ConvGeometry geom,
                          ops::Estimator est, Rng& rng);

struct BatchNormLayer {
  Var gamma;
  Var beta;
  std::shared_ptr<ops::BatchNormStats> stats;
  double momentum = 0.1;
  double eps = 1e-5;

  Var forward(Tape& t, const Var& x, ops::Mode mode) const {
    return ops::batch_norm(t, x, gamma, beta, *stats, mode, momentum, eps);
  }
};

BatchNormLayer make_batchnorm(ParamRegistry& reg, const std::string& name, std::size_t channels);

/// act -> conv -> BN, where act/conv are sign/binary conv for binary units and
/// hardtanh/FP conv otherwise.
struct ConvUnit {
  bool binary = false;
  Conv2dLayer fp;
  BinConvLayer bin;
  BatchNormLayer bn;

  Var forward(Tape& t, const Var& x, ops::Mode mode) const;
};

ConvUnit make_conv_unit(ParamRegistry& reg, const std::string& name, std::size_t in,
                        std::size_t out, bool binary, ops::Estimator est, Rng& rng);

/// Two units, each wrapped by an identity shortcut on the full-precision stream.
struct BiRealBlock {
  ConvUnit stage1;
  ConvUnit stage2;

  Var forward(Tape& t, const Var& x, ops::Mode mode) const;
};

BiRealBlock make_bireal_block(ParamRegistry& reg, const std::string& name, std::size_t channels,
                              bool binary, ops::Estimator est, Rng& rng);

struct BackboneSpec {
  std::vector<std::size_t> widths{16, 32};
  std::size_t blocks_per_scale = 1;
  /// Total stride of the stem (1, 2 or 4); each factor of 2 is one stride-2 conv.
  std::size_t stem_stride = 1;
  std::size_t in_channels = 3;
  bool binary = true;
  ops::Estimator estimator = ops::Estimator::Ste;

  void validate() const;
};

/// Multi-scale trunk. The stem and the stride-2 transitions are always FP.
class Backbone {
 public:
  Backbone(ParamRegistry& reg, const std::string& name, const BackboneSpec& spec, Rng& rng);

  /// One feature map per scale; scale s has widths[s] channels and spatial
  /// extent (H, W) / (stem_stride * 2^s).
  std::vector<Var> forward(Tape& t, const Var& images, ops::Mode mode,
                           const TapFn& tap = nullptr) const;

  const BackboneSpec& spec() const { return spec_; }

 private:
  struct Stage {
    Conv2dLayer conv;
    BatchNormLayer bn;
  };
  BackboneSpec spec_;
  std::vector<Stage> stem_;
  std::vector<Stage> downsample_;
  std::vector<std::vector<BiRealBlock>> blocks_;
};

/// Clamps every binary-class latent weight into [-1, 1].
void clip_latent_weights(const ParamRegistry& reg);

}  // namespace bimtdp
