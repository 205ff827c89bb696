#pragma once

// Variational information bottleneck placed after the shared trunk.
//
// The trunk output F sits on the Markov chain X -> F -> O (image, features,
// task outputs). The bottleneck objective min I(X;F) - beta * I(F;O) is
// optimized through its variational bound: the task losses stand in for the
// I(F;O) term and the KL divergence between the per-pixel Gaussian posterior
// p(Z | F) and the standard normal prior r(Z) stands in for I(X;F). Mutual
// information is never estimated directly.

#include "bimtdp/nn.hpp"

namespace bimtdp {

struct GaussianPosterior {
  Var mu;
  Var logvar;
};

inline constexpr double kLogvarMin = -8.0;
inline constexpr double kLogvarMax = 8.0;

struct VIBLayer {
  Conv2dLayer mu_head;
  Conv2dLayer logvar_head;
  double beta = 1e-2;

  /// mu = mu_head(x), logvar = clamp(logvar_head(x), [-8, 8]).
  GaussianPosterior encode(Tape& t, const Var& features) const;
};

VIBLayer make_vib(ParamRegistry& reg, const std::string& name, std::size_t channels, double beta,
                  Rng& rng);

/// Train: z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from rng.
/// Eval: z = mu and rng is untouched.
Var reparameterize(Tape& t, const GaussianPosterior& post, Rng& rng, ops::Mode mode);

/// Train-mode reparameterization with caller-supplied noise.
Var reparameterize_with_noise(Tape& t, const GaussianPosterior& post, const Tensor& eps);

/// mean over elements of 0.5 * (mu^2 + exp(logvar) - 1 - logvar).
Var kl_loss(Tape& t, const GaussianPosterior& post);

double vib_objective(double task_losses, double kl, double beta);
Var vib_objective(Tape& t, const Var& task_losses, const Var& kl, double beta);

}  // namespace bimtdp
