#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "bimtdp/vib.hpp"
#include "oracles.hpp"

using namespace bimtdp;

namespace {

// KL(N(mu, s^2) || N(0, 1)) by composite Simpson integration of q log(q/p).
double kl_quadrature(double mu, double logvar) {
  const double s = std::exp(0.5 * logvar);
  const double lo = mu - 14.0 * s, hi = mu + 14.0 * s;
  const int n = 20000;
  const double h = (hi - lo) / n;
  auto f = [&](double x) {
    const double lq = -0.5 * std::log(2 * std::numbers::pi) - std::log(s) - 0.5 * (x - mu) * (x - mu) / (s * s);
    const double lp = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * x * x;
    return std::exp(lq) * (lq - lp);
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

GaussianPosterior leaf_post(const Tensor& mu, const Tensor& lv) { return {make_leaf(mu), make_leaf(lv)}; }

}  // namespace

TEST_CASE("encode with zero heads gives the standard normal posterior") {
  ParamRegistry reg;
  Rng rng(1);
  VIBLayer v = make_vib(reg, "vib", 4, 1e-2, rng);
  for (const auto& p : reg.params()) p.var->value.fill(0.0);
  std::mt19937_64 gen(1);
  Tape t;
  GaussianPosterior post = v.encode(t, t.constant(oracle::random_tensor({2, 4, 3, 3}, gen)));
  for (double m : post.mu->value.values()) CHECK(m == 0.0);
  for (double l : post.logvar->value.values()) CHECK(l == 0.0);
}

TEST_CASE("encode clamps logvar and matches 1x1 conv oracles") {
  ParamRegistry reg;
  Rng rng(2);
  VIBLayer v = make_vib(reg, "vib", 3, 1e-2, rng);
  std::mt19937_64 gen(2);
  const Tensor x = oracle::random_tensor({2, 3, 4, 2}, gen);
  Tape t;
  GaussianPosterior post = v.encode(t, t.constant(x));
  const Tensor mu_ref = oracle::conv2d(x, v.mu_head.weight->value, &v.mu_head.bias->value, 1, 0);
  const Tensor lv_ref = oracle::conv2d(x, v.logvar_head.weight->value, &v.logvar_head.bias->value, 1, 0);
  CHECK(oracle::max_abs_diff(post.mu->value, mu_ref) < 1e-12);
  CHECK(oracle::max_abs_diff(post.logvar->value, lv_ref) < 1e-12);

  v.logvar_head.weight->value.fill(0.0);
  v.logvar_head.bias->value.fill(100.0);
  GaussianPosterior hot = v.encode(t, t.constant(x));
  for (double l : hot.logvar->value.values()) CHECK(l == 8.0);
  v.logvar_head.bias->value.fill(-100.0);
  GaussianPosterior cold = v.encode(t, t.constant(x));
  for (double l : cold.logvar->value.values()) CHECK(l == -8.0);

  CHECK_THROWS_AS(v.encode(t, t.constant(Tensor({1, 2, 2, 2}))), ShapeError);
}

TEST_CASE("reparameterize sample moments") {
  Tape t;
  const std::size_t n = 100000;
  GaussianPosterior post{t.constant(Tensor({n})), t.constant(Tensor({n}))};
  Rng rng(3);
  Var z = reparameterize(t, post, rng, ops::Mode::Train);
  double mean = 0.0;
  for (double v : z->value.values()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : z->value.values()) var += (v - mean) * (v - mean);
  var /= n - 1;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("reparameterize eval and determinism") {
  std::mt19937_64 gen(4);
  const Tensor mu = oracle::random_tensor({3, 5}, gen);
  Tape t;
  GaussianPosterior post{t.constant(mu), t.constant(Tensor({3, 5}, -8.0))};
  Rng a(9), b(9);
  Var za = reparameterize(t, post, a, ops::Mode::Train);
  Var zb = reparameterize(t, post, b, ops::Mode::Train);
  CHECK(oracle::max_abs_diff(za->value, zb->value) == 0.0);
  // sigma = exp(-4) ~ 0.0183, so samples stay in a tight envelope.
  for (std::size_t i = 0; i < mu.size(); ++i) CHECK(std::abs(za->value[i] - mu[i]) < 0.0183 * 6);

  Rng c(9);
  const Rng before = c;
  Var ze = reparameterize(t, post, c, ops::Mode::Eval);
  CHECK(oracle::max_abs_diff(ze->value, mu) == 0.0);
  CHECK(c == before);
}

TEST_CASE("kl examples") {
  Tape t;
  CHECK(kl_loss(t, {t.constant(Tensor({4})), t.constant(Tensor({4}))})->value.item() == 0.0);
  CHECK(kl_loss(t, {t.constant(Tensor({1}, 1.0)), t.constant(Tensor({1}))})->value.item() == 0.5);
}

TEST_CASE("kl matches quadrature of the integrand") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> um(-2.0, 2.0), ul(-3.0, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor mu({6}), lv({6});
    double ref = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      mu[i] = um(gen);
      lv[i] = ul(gen);
      ref += kl_quadrature(mu[i], lv[i]);
    }
    ref /= 6.0;
    Tape t;
    CHECK(std::abs(kl_loss(t, {t.constant(mu), t.constant(lv)})->value.item() - ref) < 1e-4);
  }
}

TEST_CASE("kl is nonnegative and zero only at the prior") {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor mu = oracle::random_tensor({7}, gen, -3.0, 3.0);
    const Tensor lv = oracle::random_tensor({7}, gen, -8.0, 8.0);
    Tape t;
    const double kl = kl_loss(t, {t.constant(mu), t.constant(lv)})->value.item();
    REQUIRE(kl > 1e-12);
  }
  Tape t;
  Tensor tiny({3}, 1e-9);
  CHECK(kl_loss(t, {t.constant(tiny), t.constant(Tensor({3}))})->value.item() < 1e-12);
}

TEST_CASE("kl gradient") {
  std::mt19937_64 gen(7);
  GaussianPosterior post = leaf_post(oracle::random_tensor({2, 3, 2, 2}, gen, -2.0, 2.0),
                                     oracle::random_tensor({2, 3, 2, 2}, gen, -3.0, 3.0));
  const double err = gradcheck([&](Tape& t) { return kl_loss(t, post); }, {post.mu, post.logvar});
  CHECK(err < 1e-6);
}

TEST_CASE("reparameterization gradient with frozen noise") {
  std::mt19937_64 gen(8);
  GaussianPosterior post = leaf_post(oracle::random_tensor({2, 5}, gen), oracle::random_tensor({2, 5}, gen));
  const Tensor eps = oracle::random_tensor({2, 5}, gen, -2.0, 2.0);
  const Tensor g = oracle::random_tensor({2, 5}, gen);
  {
    Tape t;
    Var z = reparameterize_with_noise(t, post, eps);
    t.backward(ops::sum(t, ops::mul(t, z, t.constant(g))));
    for (std::size_t i = 0; i < eps.size(); ++i) {
      CHECK(post.mu->grad[i] == doctest::Approx(g[i]).epsilon(1e-12));
      CHECK(post.logvar->grad[i] ==
            doctest::Approx(g[i] * 0.5 * std::exp(post.logvar->value[i] / 2) * eps[i]).epsilon(1e-12));
    }
  }
  const double err = gradcheck(
      [&](Tape& t) {
        Var z = reparameterize_with_noise(t, post, eps);
        return ops::sum(t, ops::mul(t, z, t.constant(g)));
      },
      {post.mu, post.logvar});
  CHECK(err < 1e-6);
}

TEST_CASE("objective arithmetic") {
  CHECK(vib_objective(2.0, 3.0, 0.0) == 2.0);
  CHECK(vib_objective(2.0, 0.0, 0.5) == 2.0);
  CHECK(vib_objective(2.0, 3.0, 0.01) == doctest::Approx(2.03).epsilon(1e-15));
  CHECK_THROWS_AS(vib_objective(1.0, 1.0, -1.0), std::invalid_argument);
  Tape t;
  Var v = vib_objective(t, t.constant(Tensor::scalar(2.0)), t.constant(Tensor::scalar(3.0)), 0.01);
  CHECK(v->value.item() == doctest::Approx(2.03));
}
