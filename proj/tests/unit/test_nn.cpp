#include <doctest.h>

#include <random>
#include <set>

#include "bimtdp/nn.hpp"
#include "oracles.hpp"

using namespace bimtdp;

TEST_CASE("binconv on all +1 inputs and weights gives 9C in the interior") {
  ParamRegistry reg;
  Rng rng(1);
  const std::size_t c = 5;
  BinConvLayer layer = make_binconv(reg, "b", c, 2, 3, {1, 1}, ops::Estimator::Ste, rng);
  layer.latent_weight->value.fill(0.05);
  Tape t;
  Var y = layer.forward(t, t.constant(Tensor({1, c, 4, 4}, 0.7)));
  CHECK(y->value.at4(0, 0, 1, 1) == 9.0 * c);
  CHECK(y->value.at4(0, 1, 2, 2) == 9.0 * c);
  // A corner sees 4 in-range taps and 5 padding taps of -1.
  CHECK(y->value.at4(0, 0, 0, 0) == (4.0 - 5.0) * c);
}

TEST_CASE("binconv sign symmetries") {
  std::mt19937_64 gen(2);
  ParamRegistry reg;
  Rng rng(2);
  BinConvLayer layer = make_binconv(reg, "b", 3, 4, 3, {1, 1}, ops::Estimator::Ste, rng);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, gen);
  Tape t;
  const Tensor y = layer.forward(t, t.constant(x))->value;

  // Positive rescaling of the activation does not change its sign.
  Tensor x3 = x;
  for (double& v : x3.values()) v *= 3.7;
  CHECK(oracle::max_abs_diff(layer.forward(t, t.constant(x3))->value, y) == 0.0);

  // Negating the latent weights negates the output.
  for (double& v : layer.latent_weight->value.values()) v = v == 0.0 ? 0.0 : -v;
  bool any_zero = false;
  for (double v : layer.latent_weight->value.values()) any_zero |= v == 0.0;
  REQUIRE_FALSE(any_zero);
  const Tensor yn = layer.forward(t, t.constant(x))->value;
  for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(yn[i] == -y[i]);

  // Matches the oracle on sign(x), sign(w) with -1 padding.
  for (double& v : layer.latent_weight->value.values()) v = -v;
  const Tensor ref = oracle::conv2d(oracle::sign_of(x), oracle::sign_of(layer.latent_weight->value),
                                    nullptr, 1, 1, -1.0);
  CHECK(oracle::max_abs_diff(y, ref) == 0.0);
}

TEST_CASE("bireal block reduces to identity when every BN gamma and beta is zero") {
  std::mt19937_64 gen(3);
  for (bool binary : {true, false}) {
    ParamRegistry reg;
    Rng rng(3);
    BiRealBlock blk = make_bireal_block(reg, "blk", 4, binary, ops::Estimator::Ste, rng);
    blk.stage1.bn.gamma->value.fill(0.0);
    blk.stage2.bn.gamma->value.fill(0.0);
    const Tensor x = oracle::random_tensor({2, 4, 4, 4}, gen);
    Tape t;
    Var y = blk.forward(t, t.constant(x), ops::Mode::Train);
    CHECK(oracle::max_abs_diff(y->value, x) == 0.0);
  }
}

TEST_CASE("bireal block gradients reach input through both paths") {
  std::mt19937_64 gen(4);
  ParamRegistry reg;
  Rng rng(4);
  BiRealBlock blk = make_bireal_block(reg, "blk", 3, true, ops::Estimator::Ste, rng);
  Var x = make_leaf(oracle::random_tensor({2, 3, 4, 4}, gen, -0.9, 0.9));
  Tape t;
  Var y = blk.forward(t, x, ops::Mode::Train);
  const Tensor g = oracle::random_tensor(y->value.shape(), gen);
  t.backward(ops::sum(t, ops::mul(t, y, t.constant(g))));
  // The shortcuts alone pass g through unchanged; a differing value means the
  // convolution path contributed too.
  bool differs = false;
  for (std::size_t i = 0; i < g.size(); ++i) differs |= std::abs(x->grad[i] - g[i]) > 1e-9;
  CHECK(differs);
  for (const auto& p : reg.params()) {
    REQUIRE_FALSE(p.var->grad.empty());
    double mag = 0.0;
    for (double g : p.var->grad.values()) mag += std::abs(g);
    CHECK_MESSAGE(mag > 0.0, p.name);
  }
}

TEST_CASE("fp conv unit gradients") {
  std::mt19937_64 gen(5);
  ParamRegistry reg;
  Rng rng(5);
  ConvUnit u = make_conv_unit(reg, "u", 2, 3, false, ops::Estimator::Ste, rng);
  Var x = make_leaf(oracle::random_tensor({2, 2, 3, 3}, gen, -2.0, 2.0));
  const Tensor target = oracle::random_tensor({2, 3, 3, 3}, gen);
  std::vector<Var> ps{x};
  for (const auto& p : reg.params()) ps.push_back(p.var);
  const ops::BatchNormStats saved = *u.bn.stats;
  const double err = gradcheck(
      [&](Tape& t) {
        *u.bn.stats = saved;
        return ops::mse(t, u.forward(t, x, ops::Mode::Train), t.constant(target));
      },
      ps);
  CHECK(err < 1e-6);
}

TEST_CASE("backbone shapes per scale and stem stride") {
  for (std::size_t stride : {1, 2, 4}) {
    ParamRegistry reg;
    Rng rng(6);
    BackboneSpec spec;
    spec.widths = {8, 12, 16};
    spec.stem_stride = stride;
    Backbone bb(reg, "backbone", spec, rng);
    Tape t;
    std::vector<std::string> seen;
    auto outs = bb.forward(t, t.constant(Tensor({2, 3, 32, 32}, 0.1)), ops::Mode::Eval,
                           [&](const std::string& id, const Var&) { seen.push_back(id); });
    REQUIRE(outs.size() == 3);
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t e = 32 / (stride << s);
      CHECK(outs[s]->value.shape() == Shape{2, spec.widths[s], e, e});
    }
    CHECK(seen == std::vector<std::string>{"backbone.s0", "backbone.s1", "backbone.s2"});
  }
}

TEST_CASE("backbone parameter count by hand") {
  ParamRegistry reg;
  Rng rng(7);
  Backbone bb(reg, "backbone", BackboneSpec{}, rng);
  // stem 3->16 conv + bn; scale 0 block: two binary 16x16 convs + bns;
  // 16->32 downsample conv + bn; scale 1 block: two binary 32x32 convs + bns.
  const std::uint64_t fp = 16 * 3 * 9 + 2 * 16 + 2 * (2 * 16) + 32 * 16 * 9 + 2 * 32 + 2 * (2 * 32);
  const std::uint64_t bin = 2 * (16 * 16 * 9) + 2 * (32 * 32 * 9);
  CHECK(reg.count(ParamClass::FP) == fp);
  CHECK(reg.count(ParamClass::Binary) == bin);
  std::set<std::string> names;
  for (const auto& p : reg.params()) CHECK(names.insert(p.name).second);
  CHECK(reg.buffers().size() == 6);
}

TEST_CASE("registry rejects duplicates") {
  ParamRegistry reg;
  Var v = make_leaf(Tensor({2}));
  reg.add("a", v, ParamClass::FP);
  CHECK_THROWS_AS(reg.add("a", make_leaf(Tensor({2})), ParamClass::FP), std::logic_error);
  CHECK_THROWS_AS(reg.add("b", v, ParamClass::FP), std::logic_error);
}

TEST_CASE("latent clip touches binary parameters only") {
  ParamRegistry reg;
  Var b = make_leaf(Tensor({3}, {-3.0, 0.5, 2.0}));
  Var f = make_leaf(Tensor({2}, {-3.0, 4.0}));
  reg.add("bin", b, ParamClass::Binary);
  reg.add("fp", f, ParamClass::FP);
  clip_latent_weights(reg);
  CHECK(b->value[0] == -1.0);
  CHECK(b->value[1] == 0.5);
  CHECK(b->value[2] == 1.0);
  CHECK(f->value[0] == -3.0);
  CHECK(f->value[1] == 4.0);
}

TEST_CASE("backbone spec validation") {
  BackboneSpec s;
  s.stem_stride = 3;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.widths = {};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.widths = {8, 0};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
