#include "bimtdp/vib.hpp"

#include <cmath>

namespace bimtdp {

GaussianPosterior VIBLayer::encode(Tape& t, const Var& features) const {
  const std::size_t in = mu_head.weight->value.dim(1);
  if (features->value.rank() != 4 || features->value.dim(1) != in) {
    throw ShapeError("vib_encode: expected " + std::to_string(in) + " channels, got " +
                     shape_str(features->value.shape()));
  }
  return {mu_head.forward(t, features),
          ops::clamp(t, logvar_head.forward(t, features), kLogvarMin, kLogvarMax)};
}

VIBLayer make_vib(ParamRegistry& reg, const std::string& name, std::size_t channels, double beta,
                  Rng& rng) {
  if (beta < 0.0) throw std::invalid_argument("vib.beta must be >= 0");
  VIBLayer layer;
  layer.mu_head = make_conv(reg, name + ".mu", channels, channels, 1, {1, 0}, true, rng);
  layer.logvar_head = make_conv(reg, name + ".logvar", channels, channels, 1, {1, 0}, true, rng);
  // Start the variance head near zero output so early samples stay close to mu.
  for (double& v : layer.logvar_head.weight->value.values()) v *= 0.1;
  layer.beta = beta;
  return layer;
}

Var reparameterize_with_noise(Tape& t, const GaussianPosterior& post, const Tensor& eps) {
  require_same_shape(post.mu->value, eps, "reparameterize");
  const Var sigma = ops::exp(t, ops::scale(t, post.logvar, 0.5));
  return ops::add(t, post.mu, ops::mul(t, sigma, t.constant(eps)));
}

Var reparameterize(Tape& t, const GaussianPosterior& post, Rng& rng, ops::Mode mode) {
  require_same_shape(post.mu->value, post.logvar->value, "reparameterize");
  if (mode == ops::Mode::Eval) return post.mu;
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor eps(post.mu->value.shape());
  for (double& v : eps.values()) v = normal(rng);
  return reparameterize_with_noise(t, post, eps);
}

Var kl_loss(Tape& t, const GaussianPosterior& post) {
  const Tensor& mu = post.mu->value;
  const Tensor& lv = post.logvar->value;
  require_same_shape(mu, lv, "kl_loss");
  if (mu.size() == 0) throw ShapeError("kl_loss: empty posterior");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    acc += 0.5 * (mu[i] * mu[i] + std::exp(lv[i]) - 1.0 - lv[i]);
  }
  const double n = static_cast<double>(mu.size());
  return t.record(OpId::Loss, Tensor::scalar(acc / n), {post.mu, post.logvar}, [n](Node& self) {
    const double g = self.grad[0] / n;
    const Var& m = self.inputs[0];
    const Var& l = self.inputs[1];
    if (m->requires_grad) {
      Tensor& gm = m->grad_buffer();
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g * m->value[i];
    }
    if (l->requires_grad) {
      Tensor& gl = l->grad_buffer();
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * 0.5 * (std::exp(l->value[i]) - 1.0);
    }
  });
}

double vib_objective(double task_losses, double kl, double beta) {
  if (beta < 0.0) throw std::invalid_argument("vib_objective: beta must be >= 0");
  return task_losses + beta * kl;
}

Var vib_objective(Tape& t, const Var& task_losses, const Var& kl, double beta) {
  if (beta < 0.0) throw std::invalid_argument("vib_objective: beta must be >= 0");
  return ops::add(t, task_losses, ops::scale(t, kl, beta));
}

}  // namespace bimtdp
