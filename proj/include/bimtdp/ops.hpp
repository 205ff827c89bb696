#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <vector>

#include "bimtdp/bitcore.hpp"
#include "bimtdp/tape.hpp"

namespace bimtdp::ops {

Var add(Tape& t, const Var& a, const Var& b);
Var sub(Tape& t, const Var& a, const Var& b);
Var mul(Tape& t, const Var& a, const Var& b);
Var scale(Tape& t, const Var& a, double s);
Var add_scalar(Tape& t, const Var& a, double s);
Var sum(Tape& t, const Var& a);
Var mean(Tape& t, const Var& a);
Var square(Tape& t, const Var& a);
Var exp(Tape& t, const Var& a);
Var sigmoid(Tape& t, const Var& a);
Var hardtanh(Tape& t, const Var& a);
/// Values outside [lo, hi] are clamped and receive zero gradient.
Var clamp(Tape& t, const Var& a, double lo, double hi);

/// sign with sign(0) = +1; backward passes g where |x| <= 1, 0 elsewhere.
Var ste_sign(Tape& t, const Var& x);
/// sign forward; backward scales g by 2+2x on [-1,0), 2-2x on [0,1), 0 elsewhere.
Var approx_sign(Tape& t, const Var& x);
double approx_sign_derivative(double x);

enum class Estimator { Ste, ApproxSign };
Var sign(Tape& t, const Var& x, Estimator est);
/// (sign(x) + 1) / 2, a {0,1} gate sharing the sign estimator.
Var bool_gate(Tape& t, const Var& x, Estimator est);

/// Zero-padded cross-correlation. bias may be null.
Var conv2d(Tape& t, const Var& x, const Var& w, const Var& bias, ConvGeometry geom);

/// Cross-correlation of +/-1 operands with -1 padding, forward through the
/// xnor-popcount kernel. Backward is the exact derivative of the -1-padded
/// convolution with respect to both operands.
Var binary_conv2d(Tape& t, const Var& xb, const Var& wb, ConvGeometry geom);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

enum class Mode { Train, Eval };

/// Per-channel normalization of an N x C x H x W tensor. Train mode normalizes
/// with batch statistics and folds them into `stats` with the given momentum.
Var batch_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
               Mode mode, double momentum = 0.1, double eps = 1e-5);

/// Bilinear resize (half-pixel centers) of an N x C x H x W tensor.
Var upsample_bilinear(Tape& t, const Var& x, std::size_t out_h, std::size_t out_w);

Var concat_channels(Tape& t, const std::vector<Var>& parts);

/// mean((a - b)^2).
Var mse(Tape& t, const Var& a, const Var& b);

}  // namespace bimtdp::ops
