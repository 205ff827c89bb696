// Acceptance run: one PASS/FAIL line per criterion. Criteria can be selected
// by number on the command line (default: all). Tolerances and run sizes are
// fixed here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "../unit/oracles.hpp"
#include "bimtdp/bench.hpp"
#include "bimtdp/cka.hpp"
#include "bimtdp/mmd.hpp"
#include "bimtdp/parallel.hpp"
#include "bimtdp/train.hpp"
#include "bimtdp/vib.hpp"

using namespace bimtdp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

nlohmann::ordered_json g_report;

// ---------------------------------------------------------------- 1
Outcome kernel_exactness() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(1001);
  auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(g); };
  std::size_t gemm_ok = 0, conv_ok = 0, gemm_n = 0, conv_n = 0;
  for (int i = 0; i < 1000; ++i) {
    if (i % 2 == 0) {
      const std::size_t m = dim(1, 64), k = dim(1, 64), n = dim(1, 64);
      const Tensor a = oracle::random_pm1({m, k}, g), b = oracle::random_pm1({k, n}, g);
      const Tensor got = binary_gemm(sign_quantize(a), sign_quantize(b)).to_tensor();
      ++gemm_n;
      gemm_ok += oracle::max_abs_diff(got, oracle::matmul(a, b)) == 0.0;
    } else {
      std::size_t n, c, o, h, w, k, stride, pad;
      do {
        n = dim(1, 2);
        c = dim(1, 64);
        o = dim(1, 64);
        h = dim(1, 64);
        w = dim(1, 64);
        k = dim(1, 3);
        stride = dim(1, 2);
        pad = dim(0, 1);
      } while (h + 2 * pad < k || w + 2 * pad < k || n * c * o * h * w * k * k > 4'000'000);
      const Tensor x = oracle::random_pm1({n, c, h, w}, g), wt = oracle::random_pm1({o, c, k, k}, g);
      const Tensor got = binary_conv2d(sign_quantize(x), sign_quantize(wt), {stride, pad}).to_tensor();
      const Tensor ref = oracle::conv2d(x, wt, nullptr, stride, pad, -1.0);
      ++conv_n;
      conv_ok += got.shape() == ref.shape() && oracle::max_abs_diff(got, ref) == 0.0;
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "gemm " << gemm_ok << "/" << gemm_n << ", conv " << conv_ok << "/" << conv_n << " exact, " << secs << " s";
  return {gemm_ok == gemm_n && conv_ok == conv_n && secs < 60.0, d.str()};
}

// ---------------------------------------------------------------- 2
Outcome memory_ratio() {
  bool ok = true;
  std::ostringstream d;
  for (std::size_t n : {std::size_t{8}, std::size_t{100}, std::size_t{4096}, std::size_t{1'000'000}}) {
    const BitTensor b(Shape{n});
    const double ideal = static_cast<double>(n) / 8.0;
    const double payload = static_cast<double>(b.payload_bytes());
    const double stored = static_cast<double>(b.words().size() * sizeof(std::uint64_t));
    const double ratio = 4.0 * static_cast<double>(n) / payload;
    // Payload rounds up to whole bytes; storage rounds up to whole 64-bit words.
    ok &= payload >= ideal && payload - ideal < 1.0 && stored - ideal < 8.0;
    if (n >= 4096) ok &= ratio >= 31.5 && ratio <= 32.0;
    d << "n=" << n << " ratio " << ratio << "; ";
  }
  const double mb = static_cast<double>(memory_footprint(6'450'000, 138'420'000)) / 1e6;
  ok &= std::abs(mb - 43.1) <= 0.1;
  d << "footprint(6.45e6 fp, 138.42e6 bin) = " << mb << " MB";
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 3
Outcome throughput() {
  const auto t0 = Clock::now();
  const BenchRow r = bench_gemm(1024, 5, 3);
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "1024^3 median fp " << r.fp_ms << " ms, binary " << r.binary_ms << " ms, speedup " << r.speedup
    << "x (need >= 8), exact=" << r.exact << ", op-count convention " << r.op_count_ratio << "x, " << secs << " s";
  g_report["throughput"] = {{"fp_ms", r.fp_ms}, {"binary_ms", r.binary_ms}, {"speedup", r.speedup}};
  return {r.exact && r.speedup >= 8.0 && secs < 300.0, d.str()};
}

// ---------------------------------------------------------------- 4
Outcome ste_contract() {
  const std::size_t n = 100'000;
  std::mt19937_64 g(4004);
  std::uniform_real_distribution<double> ux(-3.0, 3.0), ug(-5.0, 5.0);
  Tensor x({n}), gr({n});
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = ux(g);
    gr[i] = ug(g);
  }
  // Boundary points of both estimators.
  const double edges[] = {-1.0, 1.0, 0.0, -0.0, std::nextafter(1.0, 2.0), std::nextafter(-1.0, -2.0), 0.5, -0.5};
  for (std::size_t i = 0; i < std::size(edges); ++i) x[i] = edges[i];

  std::size_t ste_bad = 0;
  double approx_err = 0.0;
  for (int which = 0; which < 2; ++which) {
    Var xv = make_leaf(x);
    Tape t;
    Var s = which == 0 ? ops::ste_sign(t, xv) : ops::approx_sign(t, xv);
    t.backward(ops::sum(t, ops::mul(t, s, t.constant(gr))));
    for (std::size_t i = 0; i < n; ++i) {
      if (which == 0) {
        ste_bad += xv->grad[i] != gr[i] * (std::abs(x[i]) <= 1.0 ? 1.0 : 0.0);
      } else {
        const double v = x[i];
        const double poly = (v >= -1.0 && v < 0.0) ? 2.0 + 2.0 * v : (v >= 0.0 && v < 1.0) ? 2.0 - 2.0 * v : 0.0;
        approx_err = std::max(approx_err, std::abs(ops::approx_sign_derivative(v) - poly));
        approx_err = std::max(approx_err, std::abs(xv->grad[i] - gr[i] * poly));
      }
    }
  }
  std::ostringstream d;
  d << "ste mismatches " << ste_bad << " of " << n << ", approx_sign max err " << approx_err;
  return {ste_bad == 0 && approx_err <= 1e-12, d.str()};
}

// ---------------------------------------------------------------- 5
Var weighted_sum(Tape& t, const Var& y, const Tensor& w) { return ops::sum(t, ops::mul(t, y, t.constant(w))); }

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(5005);
  std::map<std::string, double> err;

  {  // batch norm, both modes
    Var x = make_leaf(oracle::random_tensor({3, 2, 3, 3}, g));
    Var gamma = make_leaf(oracle::random_tensor({2}, g, 0.5, 1.5)), beta = make_leaf(oracle::random_tensor({2}, g));
    const Tensor w = oracle::random_tensor({3, 2, 3, 3}, g);
    for (auto mode : {ops::Mode::Train, ops::Mode::Eval}) {
      ops::BatchNormStats stats{Tensor({2}, 0.1), Tensor({2}, 1.3)};
      err[mode == ops::Mode::Train ? "batch_norm.train" : "batch_norm.eval"] = gradcheck(
          [&](Tape& t) {
            ops::BatchNormStats s = stats;
            return weighted_sum(t, ops::batch_norm(t, x, gamma, beta, s, mode), w);
          },
          {x, gamma, beta});
    }
  }
  {  // FP conv, strided and padded, with bias
    Var x = make_leaf(oracle::random_tensor({2, 3, 6, 5}, g));
    Var w = make_leaf(oracle::random_tensor({4, 3, 3, 3}, g));
    Var b = make_leaf(oracle::random_tensor({4}, g));
    const Tensor r = oracle::random_tensor({2, 4, 3, 3}, g);
    err["conv2d"] = gradcheck([&](Tape& t) { return weighted_sum(t, ops::conv2d(t, x, w, b, {2, 1}), r); }, {x, w, b});
  }
  {  // task losses
    Var z = make_leaf(oracle::random_tensor({2, 4, 3, 3}, g, -2.0, 2.0));
    ClassMap m{2, 3, 3, std::vector<std::uint8_t>(18)};
    for (auto& id : m.ids) id = static_cast<std::uint8_t>(g() % 4);
    m.ids[5] = kIgnoreLabel;
    err["semseg_loss"] = gradcheck([&](Tape& t) { return semseg_loss(t, z, m); }, {z});

    Var d = make_leaf(oracle::random_tensor({2, 1, 3, 3}, g, 0.5, 3.0));
    const Tensor dl = oracle::random_tensor({2, 1, 3, 3}, g, 0.5, 3.0);
    err["depth_loss"] = gradcheck([&](Tape& t) { return depth_loss(t, d, dl); }, {d});

    Var nv = make_leaf(oracle::random_tensor({2, 3, 3, 3}, g));
    Tensor nl = oracle::random_tensor({2, 3, 3, 3}, g);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 9; ++p) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) s += nl[(b * 3 + c) * 9 + p] * nl[(b * 3 + c) * 9 + p];
        for (std::size_t c = 0; c < 3; ++c) nl[(b * 3 + c) * 9 + p] /= std::sqrt(s);
      }
    err["normal_loss"] = gradcheck([&](Tape& t) { return normal_loss(t, nv, nl); }, {nv});

    Var bz = make_leaf(oracle::random_tensor({2, 1, 3, 3}, g, -3.0, 3.0));
    Tensor bl({2, 1, 3, 3});
    for (double& v : bl.values()) v = static_cast<double>(g() % 2);
    err["boundary_loss"] = gradcheck([&](Tape& t) { return boundary_loss(t, bz, bl); }, {bz});
  }
  GaussianPosterior post{make_leaf(oracle::random_tensor({2, 3, 2, 2}, g, -2.0, 2.0)),
                         make_leaf(oracle::random_tensor({2, 3, 2, 2}, g, -3.0, 2.0))};
  err["kl_loss"] = gradcheck([&](Tape& t) { return kl_loss(t, post); }, {post.mu, post.logvar});
  {
    Var s = make_leaf(oracle::random_tensor({2, 3, 4, 4}, g));
    const Tensor teacher = oracle::random_tensor({2, 3, 4, 4}, g);
    Var s2 = make_leaf(oracle::random_tensor({2, 5}, g));
    const Tensor teacher2 = oracle::random_tensor({2, 5}, g);
    err["kd_loss"] = gradcheck([&](Tape& t) { return kd_loss(t, {{s, teacher, "a"}, {s2, teacher2, "b"}}); }, {s, s2});
  }
  {
    const Tensor eps = oracle::random_tensor({2, 3, 2, 2}, g, -2.0, 2.0);
    const Tensor r = oracle::random_tensor({2, 3, 2, 2}, g);
    err["reparameterize"] = gradcheck(
        [&](Tape& t) { return weighted_sum(t, reparameterize_with_noise(t, post, eps), r); }, {post.mu, post.logvar});
  }
  bool ok = true;
  std::ostringstream d;
  for (const auto& [name, e] : err) {
    ok &= e < (name == "kl_loss" ? 1e-6 : 1e-4);
    d << name << " " << e << "; ";
  }
  const double secs = seconds_since(t0);
  d << secs << " s";
  return {ok && secs < 120.0, d.str()};
}

// ---------------------------------------------------------------- 6
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

Outcome vib_analytics() {
  Tape t;
  const double zero = kl_loss(t, {t.constant(Tensor({1})), t.constant(Tensor({1}))})->value.item();
  const double half = kl_loss(t, {t.constant(Tensor({1}, 1.0)), t.constant(Tensor({1}))})->value.item();
  std::mt19937_64 g(6006);
  std::uniform_real_distribution<double> um(-3.0, 3.0), ul(-4.0, 3.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double mu = um(g), lv = ul(g);
    Tape tt;
    const double got = kl_loss(tt, {tt.constant(Tensor({1}, mu)), tt.constant(Tensor({1}, lv))})->value.item();
    worst = std::max(worst, std::abs(got - kl_quadrature(mu, lv)));
  }
  std::ostringstream d;
  d << "kl(0,0)=" << zero << ", kl(1,0)=" << half << ", quadrature max err " << worst;
  return {zero == 0.0 && half == 0.5 && worst < 1e-4, d.str()};
}

// ---------------------------------------------------------------- 7
Eigen::MatrixXd random_matrix(std::size_t m, std::size_t p, std::mt19937_64& g) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd x(m, p);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = n(g);
  return x;
}

Outcome cka_invariances() {
  std::mt19937_64 g(7007);
  double self = 0.0, orth = 0.0, scale = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t p = 1 + g() % 64, q = 1 + g() % 64;
    const Eigen::MatrixXd x = random_matrix(32, p, g), y = random_matrix(32, q, g);
    const Eigen::MatrixXd qm = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(p, p, g)).householderQ();
    const double s = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(g));
    const double base = cka(x, y);
    self = std::max(self, std::abs(cka(x, x) - 1.0));
    orth = std::max(orth, std::abs(cka(x * qm, y) - base));
    scale = std::max(scale, std::abs(cka(s * x, y) - base));
  }
  std::ostringstream d;
  d << "max |self-1| " << self << ", orthogonal " << orth << ", scaling " << scale;
  return {self <= 1e-6 && orth <= 1e-6 && scale <= 1e-6, d.str()};
}

// ---------------------------------------------------------------- 8
Tensor fuse_oracle(const std::vector<Tensor>& f, const MMDWeights& w, std::size_t k) {
  const Tensor gate_logits = oracle::conv2d(f[k], oracle::sign_of(w.attention[k]->value), nullptr, 1, 1, -1.0);
  Tensor acc = f[k];
  for (std::size_t t = 0; t < f.size(); ++t) {
    if (t == k) continue;
    const Tensor msg = oracle::conv2d(f[t], oracle::sign_of(w.message[t]->value), nullptr, 1, 1, -1.0);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (gate_logits[i] >= 0.0 ? 1.0 : 0.0) * msg[i];
  }
  return oracle::sign_of(acc);
}

Outcome mmd_identities() {
  std::mt19937_64 g(8008);
  auto vars = [](Tape& t, const std::vector<Tensor>& f) {
    TaskFeatureSet out;
    for (const auto& x : f) out.push_back(t.constant(x));
    return out;
  };
  bool identity = true, closed = true, composed = true;
  {
    ParamRegistry reg;
    Rng rng(1);
    const MMDWeights w = make_mmd(reg, "mmd", 1, 6, true, false, ops::Estimator::Ste, rng);
    const Tensor f = oracle::random_pm1({2, 6, 5, 5}, g);
    Tape t;
    identity = oracle::max_abs_diff(mmd_fuse(t, vars(t, {f}), w, 0)->value, f) == 0.0;
  }
  {
    ParamRegistry reg;
    Rng rng(2);
    MMDWeights w = make_mmd(reg, "mmd", 4, 5, true, true, ops::Estimator::Ste, rng);
    for (auto& bn : w.attention_bn) {
      bn.gamma->value.fill(0.0);
      bn.beta->value.fill(-1.0);
    }
    w.mode = ops::Mode::Eval;
    std::vector<Tensor> f;
    for (int i = 0; i < 4; ++i) f.push_back(oracle::random_pm1({2, 5, 4, 6}, g));
    Tape t;
    const auto out = mmd_all_tasks(t, vars(t, f), w);
    for (std::size_t k = 0; k < 4; ++k) closed &= oracle::max_abs_diff(out[k]->value, f[k]) == 0.0;
  }
  for (int trial = 0; trial < 10; ++trial) {
    ParamRegistry reg;
    Rng rng(100 + trial);
    const std::size_t c = 1 + g() % 8;
    const MMDWeights w = make_mmd(reg, "mmd", 2, c, true, false, ops::Estimator::Ste, rng);
    const std::vector<Tensor> f{oracle::random_pm1({1 + g() % 2, c, 3 + g() % 5, 3 + g() % 5}, g)};
    std::vector<Tensor> two{f[0], oracle::random_pm1(f[0].shape(), g)};
    Tape t;
    for (std::size_t k = 0; k < 2; ++k)
      composed &= oracle::max_abs_diff(mmd_fuse(t, vars(t, two), w, k)->value, fuse_oracle(two, w, k)) == 0.0;
  }
  std::ostringstream d;
  d << "T=1 identity " << identity << ", closed gates " << closed << ", 2-task oracle (10 cases) " << composed;
  return {identity && closed && composed, d.str()};
}

// ---------------------------------------------------------------- 9, 10
// Toy-scale training setup shared by the ablation and the variant-A check.
constexpr std::size_t kTrain = 1000, kEval = 200, kSize = 64, kEpochs = 30;
constexpr std::uint64_t kDataSeed = 20240;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};
constexpr double kRuntimeBudget = 2.0 * 3600.0;

RunConfig toy_config(Variant v, bool vib, std::uint64_t seed) {
  RunConfig c;
  c.spec = ModelSpec::desk_default();
  c.spec.variant = v;
  c.spec.vib = vib;
  c.spec.widths = {8, 16};
  c.spec.stem_stride = 4;
  c.adam.lr_fp = 1e-3;
  c.adam.lr_binary = 1e-4;
  c.epochs = kEpochs;
  c.batch_size = 8;
  c.seed = seed;
  c.validate();
  return c;
}

struct ToyData {
  Dataset train, eval;
};

const ToyData& toy_data() {
  static const ToyData d = [] {
    SynthConfig sc;
    sc.height = sc.width = kSize;
    return ToyData{generate_dataset(kDataSeed, kTrain, sc), generate_dataset(kDataSeed ^ 0x5eed5eed5eed5eedull, kEval, sc)};
  }();
  return d;
}

struct RunResult {
  double miou = 0.0;
  double seconds = 0.0;
};

RunResult train_and_score(Model& m, const RunConfig& cfg, const Teacher& teacher, const std::string& label) {
  const auto t0 = Clock::now();
  std::ostringstream log;
  train(m, toy_data().train, nullptr, cfg, log, "", teacher);
  const EvalMetrics e = evaluate(m, toy_data().eval);
  RunResult r{*e.miou, seconds_since(t0)};
  std::cerr << "  [" << label << " seed " << cfg.seed << "] mIoU " << r.miou << " (" << r.seconds << " s)\n";
  return r;
}

// FP teachers (FP variant, no VIB) per seed. They are the KD source for the
// ablation and the FP reference for the variant-A comparison.
struct TeacherRuns {
  std::vector<std::unique_ptr<Model>> models;
  std::vector<RunResult> results;
};

TeacherRuns& teachers() {
  static TeacherRuns runs = [] {
    TeacherRuns r;
    for (std::uint64_t seed : kSeeds) {
      const RunConfig cfg = toy_config(Variant::FP, false, seed);
      r.models.push_back(std::make_unique<Model>(cfg.spec, seed));
      r.results.push_back(train_and_score(*r.models.back(), cfg, {}, "fp teacher"));
    }
    return r;
  }();
  return runs;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

Outcome directional_ablation() {
  // Teacher training is part of this criterion's cost; teachers() trains them
  // on first use, inside the timed region.
  const auto t0 = Clock::now();
  TeacherRuns& tr = teachers();

  struct Config {
    std::string name;
    bool single, vib, kd;
  };
  const std::vector<Config> configs{{"bi_single", true, false, false},
                                    {"wo_vib_kd", false, false, false},
                                    {"wo_kd", false, true, false},
                                    {"wo_vib", false, false, true},
                                    {"full", false, true, true}};
  std::map<std::string, std::vector<double>> miou;
  for (std::size_t s = 0; s < kSeeds.size(); ++s) {
    for (const auto& c : configs) {
      RunConfig cfg = toy_config(Variant::B, c.vib, kSeeds[s]);
      if (c.single) cfg.spec.tasks = {cfg.spec.tasks.front()};
      Model m(cfg.spec, cfg.seed);
      Teacher teacher;
      if (c.kd) {
        teacher.model = tr.models[s].get();
        teacher.taps = default_kd_taps(*teacher.model);
      }
      miou[c.name].push_back(train_and_score(m, cfg, teacher, c.name).miou);
    }
  }
  const double secs = seconds_since(t0);

  const auto& single = miou["bi_single"];
  const auto& none = miou["wo_vib_kd"];
  const auto& full = miou["full"];
  const bool chain = mean(single) < mean(none) && mean(none) < mean(full);
  auto between = [&](const std::vector<double>& x) {
    int n = 0;
    for (std::size_t s = 0; s < x.size(); ++s) n += none[s] < x[s] && x[s] < full[s];
    return n;
  };
  const int nokd = between(miou["wo_kd"]), novib = between(miou["wo_vib"]);

  nlohmann::ordered_json j;
  for (const auto& c : configs) j[c.name] = {{"per_seed", miou[c.name]}, {"mean", mean(miou[c.name])}};
  j["wo_kd_between_seeds"] = nokd;
  j["wo_vib_between_seeds"] = novib;
  j["seconds"] = secs;
  g_report["ablation"] = j;

  std::ostringstream d;
  d << "mean mIoU";
  for (const auto& c : configs) d << " " << c.name << "=" << mean(miou[c.name]);
  d << "; w/o KD between on " << nokd << "/3 seeds, w/o VIB on " << novib << "/3; " << secs << " s";
  return {chain && nokd >= 2 && novib >= 2 && secs <= kRuntimeBudget, d.str()};
}

Outcome variant_a_efficiency() {
  TeacherRuns& tr = teachers();
  const RunConfig fp_cfg = toy_config(Variant::FP, false, kSeeds[0]);
  const RunConfig a_cfg = toy_config(Variant::A, false, kSeeds[0]);
  const Model fp(fp_cfg.spec, 0), a(a_cfg.spec, 0);
  const ParamAudit pf = fp.parameter_audit(), pa = a.parameter_audit();
  const CostTally cf = fp.cost(kSize, kSize), ca = a.cost(kSize, kSize);
  const double flops_fp = ops_estimate(cf.fp_macs, cf.binary_ops), flops_a = ops_estimate(ca.fp_macs, ca.binary_ops);
  const auto mem_fp = memory_footprint(pf.fp, pf.binary), mem_a = memory_footprint(pa.fp, pa.binary);

  std::vector<double> m_fp, m_a;
  for (std::size_t s = 0; s < kSeeds.size(); ++s) {
    m_fp.push_back(tr.results[s].miou);
    const RunConfig cfg = toy_config(Variant::A, false, kSeeds[s]);
    Model m(cfg.spec, cfg.seed);
    m_a.push_back(train_and_score(m, cfg, {}, "variant a").miou);
  }
  const double gap = mean(m_a) - mean(m_fp);
  g_report["variant_a"] = {{"flops_fp", flops_fp}, {"flops_a", flops_a},         {"bytes_fp", mem_fp},
                           {"bytes_a", mem_a},     {"miou_fp_per_seed", m_fp},   {"miou_a_per_seed", m_a},
                           {"miou_fp", mean(m_fp)}, {"miou_a", mean(m_a)}};
  std::ostringstream d;
  d << "effective FLOPs A " << flops_a << " < FP " << flops_fp << ", bytes A " << mem_a << " < FP " << mem_fp
    << "; mean mIoU A " << mean(m_a) << " vs FP " << mean(m_fp) << " (A - FP = " << gap << ", need >= -0.02)";
  return {flops_a < flops_fp && mem_a < mem_fp && gap >= -0.02, d.str()};
}

// ---------------------------------------------------------------- 11
Outcome determinism_persistence() {
  SynthConfig sc;
  sc.height = sc.width = 32;
  const Dataset train_ds = generate_dataset(11, 16, sc), eval_ds = generate_dataset(12, 8, sc);
  RunConfig cfg = toy_config(Variant::B, true, 11);
  cfg.spec.widths = {4, 8};
  cfg.spec.stem_stride = 1;
  cfg.epochs = 2;
  cfg.batch_size = 4;

  // Teacher for a KD run, so that every loss term is exercised.
  Model teacher(teacher_spec(cfg.spec), 5);
  {
    std::ostringstream sink;
    RunConfig tcfg = cfg;
    tcfg.spec = teacher_spec(cfg.spec);
    train(teacher, train_ds, nullptr, tcfg, sink, "");
  }
  const Teacher tk{&teacher, default_kd_taps(teacher)};

  const fs::path dir = fs::temp_directory_path() / "bimtdp_acceptance_11";
  fs::create_directories(dir);
  std::string logs[2];
  std::vector<Tensor> outs;
  const Tensor x = make_batch(eval_ds, {0, 1, 2, 3}).images;
  for (int run = 0; run < 2; ++run) {
    Model m(cfg.spec, cfg.seed);
    std::ostringstream log;
    train(m, train_ds, &eval_ds, cfg, log, (dir / ("ckpt" + std::to_string(run))).string(), tk);
    logs[run] = log.str();
    if (run == 0) {
      Tape t;
      for (const auto& v : m.forward(t, x, {}).final) outs.push_back(v->value);
    }
  }
  const bool logs_equal = logs[0] == logs[1] && !logs[0].empty();

  Model back(cfg.spec, 999);
  load_checkpoint((dir / "ckpt0").string(), back);
  bool ckpt_exact = true;
  {
    Tape t;
    const auto f = back.forward(t, x, {}).final;
    for (std::size_t k = 0; k < f.size(); ++k) ckpt_exact &= oracle::max_abs_diff(f[k]->value, outs[k]) == 0.0;
  }

  const std::string dpath = (dir / "data.bin").string();
  dataset_write(dpath, train_ds);
  const Dataset rd = dataset_read(dpath);
  const bool data_lossless = rd.samples == train_ds.samples && rd.h == train_ds.h && rd.w == train_ds.w;
  fs::remove_all(dir);

  std::ostringstream d;
  d << "logs identical " << logs_equal << ", checkpoint forward bit-exact " << ckpt_exact << ", dataset lossless "
    << data_lossless;
  return {logs_equal && ckpt_exact && data_lossless, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  set_num_threads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"kernel exactness", kernel_exactness},
      {"memory ratio", memory_ratio},
      {"throughput", throughput},
      {"STE contract", ste_contract},
      {"gradient suite", gradient_suite},
      {"VIB analytics", vib_analytics},
      {"CKA invariances", cka_invariances},
      {"MMD identities", mmd_identities},
      {"directional ablation", directional_ablation},
      {"variant A efficiency", variant_a_efficiency},
      {"determinism and persistence", determinism_persistence},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  if (!g_report.empty()) std::ofstream("acceptance_report.json") << g_report.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
