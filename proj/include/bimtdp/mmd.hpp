#pragma once

// Multi-modal distillation: cross-task message passing gated by a binarized
// attention map.
//
//   A^k   = bool(W^k (*) F^k)
//   Out^k = sign(F^k + sum_{t != k} A^k .* (W_t (*) F^t))
//
// with (*) a 3x3, stride-1, pad-1 convolution. In the binary form features are
// +/-1, both convolutions run through the xnor-popcount kernel and bool(x) is
// (sign(x) + 1) / 2. The full-precision form used by the FP twin replaces bool
// with a sigmoid, binary convs with FP convs, and the outer sign with hardtanh.

#include <vector>

#include "bimtdp/nn.hpp"

namespace bimtdp {

/// Per-task feature maps sharing N, C, H, W.
using TaskFeatureSet = std::vector<Var>;

struct MMDWeights {
  bool binary = true;
  ops::Estimator estimator = ops::Estimator::Ste;
  /// Attention conv per target task; C x C x 3 x 3 (latent weights when binary).
  std::vector<Var> attention;
  /// Message conv per source task; C x C x 3 x 3.
  std::vector<Var> message;
  /// Optional normalization of the attention logits and of each message. When
  /// empty the raw convolution outputs are used.
  std::vector<BatchNormLayer> attention_bn;
  std::vector<BatchNormLayer> message_bn;
  ops::Mode mode = ops::Mode::Eval;

  std::size_t tasks() const { return attention.size(); }
};

MMDWeights make_mmd(ParamRegistry& reg, const std::string& name, std::size_t tasks,
                    std::size_t channels, bool binary, bool normalized, ops::Estimator est,
                    Rng& rng);

/// Gate map in {0,1} (binary) or (0,1) (FP) for one target task.
Var binarized_attention(Tape& t, const Var& feature, const MMDWeights& w, std::size_t target);

/// Fused output for target task `target` (0-based).
Var mmd_fuse(Tape& t, const TaskFeatureSet& features, const MMDWeights& w, std::size_t target);

/// Fuses every task from the same input set; each message conv runs once.
TaskFeatureSet mmd_all_tasks(Tape& t, const TaskFeatureSet& features, const MMDWeights& w);

}  // namespace bimtdp
