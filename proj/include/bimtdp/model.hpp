#pragma once

// Multi-task dense predictor: shared trunk -> optional VIB -> initial task
// heads -> per-task binarized features -> multi-modal distillation per scale
// -> final heads at input resolution.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bimtdp/mmd.hpp"
#include "bimtdp/nn.hpp"
#include "bimtdp/tasks.hpp"
#include "bimtdp/vib.hpp"

namespace bimtdp {

/// Parameter classes per variant. FP: no binary parameters. A: FP trunk and
/// heads, binary MMD convolutions. B: every non-boundary conv binary. The
/// task features entering MMD are BN + sign in all three.
enum class Variant : std::uint8_t { FP, A, B };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelSpec {
  Variant variant = Variant::B;
  std::vector<std::size_t> widths{16, 32};
  std::size_t blocks_per_scale = 1;
  std::size_t head_blocks = 1;
  std::size_t stem_stride = 1;
  std::size_t in_channels = 3;
  std::vector<TaskSpec> tasks;
  bool vib = true;
  std::vector<std::string> kd_taps;
  ops::Estimator estimator = ops::Estimator::Ste;

  /// 64x64 inputs, four tasks, two scales of widths 16/32.
  static ModelSpec desk_default(std::size_t classes = 5);

  void validate() const;
  std::size_t scales() const { return widths.size(); }
  /// H and W must be multiples of this.
  std::size_t spatial_divisor() const;
  /// Stable text form; its FNV-1a hash guards checkpoints.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct ForwardOutputs {
  /// [task][scale], at the scale's own resolution.
  std::vector<std::vector<Var>> initial;
  /// [task], at input resolution. Empty for front-end-only passes.
  std::vector<Var> final;
  /// One per scale when VIB is enabled.
  std::vector<GaussianPosterior> posteriors;
  std::vector<std::pair<std::string, Var>> taps;
};

struct ForwardOptions {
  ops::Mode mode = ops::Mode::Eval;
  /// Required in train mode when VIB is enabled.
  Rng* rng = nullptr;
  std::set<std::string> taps;
  bool front_end_only = false;
};

struct ParamAudit {
  std::uint64_t fp = 0;
  std::uint64_t binary = 0;
};

struct CostTally {
  double fp_macs = 0.0;
  double binary_ops = 0.0;
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  ForwardOutputs forward(Tape& t, const Tensor& images, const ForwardOptions& opts) const;

  const ModelSpec& spec() const { return spec_; }
  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }
  ParamAudit parameter_audit() const;
  /// Every tap id this model can emit, in graph order.
  std::vector<std::string> tap_ids() const;
  /// Convolution multiply-accumulates for one h x w image, split by class.
  CostTally cost(std::size_t h, std::size_t w) const;

  /// Direct access used by tests that construct specific weight patterns.
  MMDWeights& mmd(std::size_t scale) { return mmd_.at(scale); }

 private:
  struct TaskHead {
    std::vector<BiRealBlock> blocks;
    Conv2dLayer predict;
    Conv2dLayer transform;
    BatchNormLayer transform_bn;
  };
  struct ScaleState {
    VIBLayer vib;
    BatchNormLayer vib_bn;
    std::vector<TaskHead> heads;  // per task
  };

  ModelSpec spec_;
  ParamRegistry reg_;
  std::unique_ptr<Backbone> backbone_;
  std::vector<ScaleState> scales_;
  std::vector<MMDWeights> mmd_;
  std::vector<Conv2dLayer> final_;  // per task
};

/// Sums conv and binary-conv multiply-accumulates recorded on a tape.
CostTally tally_tape(const Tape& t);

}  // namespace bimtdp
