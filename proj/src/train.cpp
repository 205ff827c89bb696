#include "bimtdp/train.hpp"

#include <algorithm>
#include <map>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "bimtdp/vib.hpp"

namespace bimtdp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t to_size(const std::string& v) {
  std::size_t pos = 0;
  const unsigned long long x = std::stoull(v, &pos);
  if (pos != v.size() || v.front() == '-') throw std::invalid_argument("expected a non-negative integer");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a number");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean");
}

ops::Estimator to_estimator(const std::string& v) {
  if (v == "ste") return ops::Estimator::Ste;
  if (v == "approx" || v == "approx_sign") return ops::Estimator::ApproxSign;
  throw std::invalid_argument("expected ste or approx");
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

struct Key {
  std::string name;
  std::string help;
  Setter set;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"model.variant", "fp | a | b", [](RunConfig& c, const std::string& v) { c.spec.variant = parse_variant(v); }},
      {"model.widths", "comma list of channel widths, one per scale",
       [](RunConfig& c, const std::string& v) {
         c.spec.widths.clear();
         for (const auto& x : split_list(v)) c.spec.widths.push_back(to_size(x));
       }},
      {"model.blocks_per_scale", "Bi-Real blocks per backbone scale",
       [](RunConfig& c, const std::string& v) { c.spec.blocks_per_scale = to_size(v); }},
      {"model.head_blocks", "Bi-Real blocks per initial head",
       [](RunConfig& c, const std::string& v) { c.spec.head_blocks = to_size(v); }},
      {"model.stem_stride", "1, 2 or 4", [](RunConfig& c, const std::string& v) { c.spec.stem_stride = to_size(v); }},
      {"model.tasks", "comma list from semseg, depth, normal, boundary",
       [](RunConfig& c, const std::string& v) {
         std::size_t classes = c.synth.classes;
         c.spec.tasks.clear();
         for (const auto& x : split_list(v)) {
           const TaskKind k = parse_task(x);
           c.spec.tasks.push_back({k, k == TaskKind::Semseg ? classes : 0, 1.0});
         }
       }},
      {"model.task_weights", "comma list of loss weights aligned with model.tasks",
       [](RunConfig& c, const std::string& v) {
         const auto w = split_list(v);
         if (w.size() != c.spec.tasks.size()) throw std::invalid_argument("one weight per task required");
         for (std::size_t i = 0; i < w.size(); ++i) c.spec.tasks[i].loss_weight = to_double(w[i]);
       }},
      {"model.classes", "semantic classes (also used by gen-data)",
       [](RunConfig& c, const std::string& v) {
         c.synth.classes = to_size(v);
         for (auto& t : c.spec.tasks) {
           if (t.kind == TaskKind::Semseg) t.classes = c.synth.classes;
         }
       }},
      {"model.vib", "true | false", [](RunConfig& c, const std::string& v) { c.spec.vib = to_bool(v); }},
      {"model.estimator", "ste | approx", [](RunConfig& c, const std::string& v) { c.spec.estimator = to_estimator(v); }},
      {"train.kd", "distill from paths.teacher when set", [](RunConfig& c, const std::string& v) { c.kd = to_bool(v); }},
      {"train.epochs", "epochs", [](RunConfig& c, const std::string& v) { c.epochs = to_size(v); }},
      {"train.batch_size", "samples per step", [](RunConfig& c, const std::string& v) { c.batch_size = to_size(v); }},
      {"train.seed", "run seed", [](RunConfig& c, const std::string& v) { c.seed = to_size(v); }},
      {"train.threads", "worker threads (1 = bit-deterministic)",
       [](RunConfig& c, const std::string& v) { c.threads = to_size(v); }},
      {"train.init", "checkpoint to initialize matching parameters from (any variant)", [](RunConfig& c, const std::string& v) { c.init = v; }},
      {"optim.lr_binary", "Adam step size for binary latent weights",
       [](RunConfig& c, const std::string& v) { c.adam.lr_binary = to_double(v); }},
      {"optim.lr_fp", "Adam step size for full-precision parameters",
       [](RunConfig& c, const std::string& v) { c.adam.lr_fp = to_double(v); }},
      {"optim.beta1", "Adam beta1", [](RunConfig& c, const std::string& v) { c.adam.beta1 = to_double(v); }},
      {"optim.beta2", "Adam beta2", [](RunConfig& c, const std::string& v) { c.adam.beta2 = to_double(v); }},
      {"optim.eps", "Adam epsilon", [](RunConfig& c, const std::string& v) { c.adam.eps = to_double(v); }},
      {"loss.beta", "weight of the VIB KL term", [](RunConfig& c, const std::string& v) { c.beta = to_double(v); }},
      {"loss.lambda_kd", "weight of the KD term", [](RunConfig& c, const std::string& v) { c.lambda_kd = to_double(v); }},
      {"data.train", "training dataset file", [](RunConfig& c, const std::string& v) { c.train_data = v; }},
      {"data.eval", "held-out dataset file", [](RunConfig& c, const std::string& v) { c.eval_data = v; }},
      {"data.height", "gen-data image height", [](RunConfig& c, const std::string& v) { c.synth.height = to_size(v); }},
      {"data.width", "gen-data image width", [](RunConfig& c, const std::string& v) { c.synth.width = to_size(v); }},
      {"data.color_mix", "gen-data class color randomization in [0, 1]",
       [](RunConfig& c, const std::string& v) { c.synth.color_mix = to_double(v); }},
      {"data.noise", "gen-data pixel noise std", [](RunConfig& c, const std::string& v) { c.synth.noise = to_double(v); }},
      {"data.train_count", "gen-data training samples", [](RunConfig& c, const std::string& v) { c.train_count = to_size(v); }},
      {"data.eval_count", "gen-data held-out samples", [](RunConfig& c, const std::string& v) { c.eval_count = to_size(v); }},
      {"paths.out", "output directory", [](RunConfig& c, const std::string& v) { c.out = v; }},
      {"paths.teacher", "teacher checkpoint", [](RunConfig& c, const std::string& v) { c.teacher = v; }},
  };
  return k;
}

// ---- checkpoint primitives ----

constexpr char kCkptMagic[4] = {'B', 'M', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

struct Writer {
  std::string buf;
  template <class T>
  void pod(const T& v) { buf.append(reinterpret_cast<const char*>(&v), sizeof(T)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    buf += s;
  }
  void tensor(const Tensor& t) {
    pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) pod(static_cast<std::uint64_t>(d));
    buf.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
};

struct Reader {
  std::vector<char> buf;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint truncated: " + path);
  }
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    const auto r = pod<std::uint32_t>();
    if (r > 8) throw std::runtime_error("checkpoint corrupt: rank " + std::to_string(r));
    Shape s(r);
    for (auto& d : s) d = pod<std::uint64_t>();
    const std::size_t n = shape_numel(s);
    need(n * sizeof(double));
    Tensor t(s);
    std::memcpy(t.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return t;
  }
};

void assign(Tensor& dst, const Tensor& src, const std::string& what) {
  if (dst.shape() != src.shape()) {
    throw std::runtime_error("checkpoint: " + what + " has shape " + shape_str(src.shape()) +
                             ", model expects " + shape_str(dst.shape()));
  }
  dst = src;
}

double value_of(const Var& v) { return v->value[0]; }

}  // namespace

void RunConfig::validate() const {
  spec.validate();
  synth.validate();
  for (const auto& t : spec.tasks) {
    if (t.kind == TaskKind::Semseg && t.classes != synth.classes) {
      throw std::invalid_argument("config: semseg classes differ from model.classes");
    }
  }
  if (!(adam.lr_binary > 0.0) || !(adam.lr_fp > 0.0)) throw std::invalid_argument("config: learning rates must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("config: Adam betas must be in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw std::invalid_argument("config: optim.eps must be > 0");
  if (batch_size == 0) throw std::invalid_argument("config: train.batch_size must be > 0");
  if (threads == 0) throw std::invalid_argument("config: train.threads must be > 0");
  if (beta < 0.0 || lambda_kd < 0.0) throw std::invalid_argument("config: loss weights must be >= 0");
}

RunConfig parse_config(const std::string& text, RunConfig cfg) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& k = keys();
    auto it = std::find_if(k.begin(), k.end(), [&](const Key& e) { return e.name == key; });
    if (it == k.end()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    try {
      it->set(cfg, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + key + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::vector<std::pair<std::string, std::string>> config_schema() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back(k.name, k.help);
  return out;
}

ModelSpec teacher_spec(const ModelSpec& student) {
  ModelSpec t = student;
  t.variant = Variant::FP;
  t.vib = false;
  t.kd_taps.clear();
  return t;
}

Adam::Adam(const ParamRegistry& reg, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& p : reg.params()) {
    m_.emplace_back(p.var->value.shape());
    v_.emplace_back(p.var->value.shape());
  }
}

void Adam::step(const ParamRegistry& reg) {
  const auto& params = reg.params();
  if (params.size() != m_.size()) throw std::logic_error("Adam: registry changed since construction");
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Node& n = *params[i].var;
    if (!n.has_grad()) continue;
    const double lr = params[i].cls == ParamClass::Binary ? cfg_.lr_binary : cfg_.lr_fp;
    double* w = params[i].var->value.data();
    const double* g = n.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < n.value.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
  clip_latent_weights(reg);
}

Var task_loss(Tape& t, TaskKind kind, const Var& pred, const Batch& batch) {
  switch (kind) {
    case TaskKind::Semseg: return semseg_loss(t, pred, batch.seg);
    case TaskKind::Depth: return depth_loss(t, pred, batch.depth);
    case TaskKind::Normal: return normal_loss(t, pred, batch.normal);
    case TaskKind::Boundary: return boundary_loss(t, pred, batch.boundary);
  }
  throw std::logic_error("task_loss: unknown task");
}

Objective build_objective(Tape& t, const Model& model, const Batch& batch, const ForwardOutputs& out,
                          double beta, double lambda_kd, const std::vector<FeaturePair>& kd_pairs) {
  const ModelSpec& spec = model.spec();
  const std::size_t h = batch.images.dim(2), w = batch.images.dim(3);
  Objective obj;
  std::vector<Var> losses;
  std::vector<double> weights;
  for (std::size_t k = 0; k < spec.tasks.size(); ++k) {
    const TaskKind kind = spec.tasks[k].kind;
    Var l = out.final.empty() ? nullptr : task_loss(t, kind, out.final[k], batch);
    for (const Var& init : out.initial[k]) {
      const Var li = task_loss(t, kind, ops::upsample_bilinear(t, init, h, w), batch);
      l = l ? ops::add(t, l, li) : li;
    }
    obj.parts.task[task_name(kind)] = value_of(l);
    losses.push_back(l);
    weights.push_back(spec.tasks[k].loss_weight);
  }
  Var kl;
  for (const auto& post : out.posteriors) {
    const Var term = kl_loss(t, post);
    kl = kl ? ops::add(t, kl, term) : term;
  }
  Var kd = kd_pairs.empty() ? nullptr : kd_loss(t, kd_pairs);
  obj.parts.kl = kl ? value_of(kl) : 0.0;
  obj.parts.kd = kd ? value_of(kd) : 0.0;
  obj.total = total_loss(t, losses, weights, kl, kd, beta, lambda_kd);
  obj.parts.total = value_of(obj.total);
  return obj;
}

namespace {

std::size_t semseg_classes(const std::vector<TaskSpec>& tasks) {
  for (const auto& t : tasks) {
    if (t.kind == TaskKind::Semseg) return t.classes;
  }
  return 1;
}

}  // namespace

MetricAccumulator::MetricAccumulator(const ModelSpec& spec)
    : tasks_(spec.tasks), iou_(semseg_classes(spec.tasks)) {}

void MetricAccumulator::add(const Batch& batch, const std::vector<Tensor>& preds) {
  if (preds.size() != tasks_.size()) throw std::invalid_argument("MetricAccumulator: one prediction per task");
  const std::size_t pix = batch.depth.size();
  npix_ += pix;
  samples_ += batch.images.dim(0);
  for (std::size_t k = 0; k < tasks_.size(); ++k) {
    const Tensor& pred = preds[k];
    switch (tasks_[k].kind) {
      case TaskKind::Semseg: iou_.add(argmax_classes(pred), batch.seg.ids); break;
      case TaskKind::Depth: {
        const double r = metric_rmse(pred, batch.depth);
        sq_ += r * r * static_cast<double>(pix);
        break;
      }
      case TaskKind::Normal: ang_ += metric_merr(pred, batch.normal) * static_cast<double>(pix); break;
      case TaskKind::Boundary: {
        std::vector<double> prob(pred.size());
        for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = 1.0 / (1.0 + std::exp(-pred[i]));
        bf_.add(prob, batch.boundary.values());
        break;
      }
    }
  }
}

EvalMetrics MetricAccumulator::result() const {
  if (npix_ == 0) throw std::logic_error("MetricAccumulator: no samples");
  EvalMetrics m;
  m.samples = samples_;
  for (const auto& t : tasks_) {
    switch (t.kind) {
      case TaskKind::Semseg: m.miou = iou_.miou(); break;
      case TaskKind::Depth: m.rmse = std::sqrt(sq_ / static_cast<double>(npix_)); break;
      case TaskKind::Normal: m.merr = ang_ / static_cast<double>(npix_); break;
      case TaskKind::Boundary: m.boundary_f = bf_.best_f(); break;
    }
  }
  return m;
}

EvalMetrics evaluate(const Model& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  MetricAccumulator acc(model.spec());
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, ds.samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(ds, idx);
    Tape t;
    const ForwardOutputs out = model.forward(t, batch.images, {});
    std::vector<Tensor> preds;
    for (const Var& v : out.final) preds.push_back(v->value);
    acc.add(batch, preds);
  }
  return acc.result();
}

StepLosses train_epoch(Model& model, Adam& adam, const Dataset& ds, const RunConfig& cfg,
                       TrainState& state, const Teacher& teacher) {
  if (ds.samples.empty()) throw std::invalid_argument("train: empty dataset");
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.rng);
  const auto pairs = teacher.model ? identity_pairs(teacher.taps) : std::vector<DistillPair>{};
  StepLosses avg;
  double seen = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
    const Batch batch = make_batch(ds, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                        order.begin() + static_cast<std::ptrdiff_t>(stop)});
    Tape t;
    ForwardOptions opts;
    opts.mode = ops::Mode::Train;
    opts.rng = &state.rng;
    if (teacher.model) opts.taps = {teacher.taps.begin(), teacher.taps.end()};
    Objective obj;
    try {
      const ForwardOutputs out = model.forward(t, batch.images, opts);
      std::vector<FeaturePair> kd;
      if (teacher.model) {
        kd = match_features(t, pairs, out.taps, capture_taps(*teacher.model, teacher.taps, batch.images));
      }
      obj = build_objective(t, model, batch, out, cfg.beta, cfg.lambda_kd, kd);
    } catch (const std::domain_error& e) {
      // sign() refuses NaN, so a poisoned weight surfaces here before the loss.
      throw TrainingDiverged("non-finite value at epoch " + std::to_string(state.epoch + 1) + ": " + e.what());
    }
    if (!std::isfinite(obj.parts.total)) {
      throw TrainingDiverged("non-finite loss at epoch " + std::to_string(state.epoch + 1));
    }
    model.registry().zero_grads();
    t.backward(obj.total);
    adam.step(model.registry());
    const double n = static_cast<double>(stop - start);
    seen += n;
    for (const auto& [k, v] : obj.parts.task) avg.task[k] += v * n;
    avg.kl += obj.parts.kl * n;
    avg.kd += obj.parts.kd * n;
    avg.total += obj.parts.total * n;
  }
  for (auto& [k, v] : avg.task) v /= seen;
  avg.kl /= seen;
  avg.kd /= seen;
  avg.total /= seen;
  return avg;
}

std::string metrics_json(std::size_t epoch, const std::string& split, const StepLosses* losses,
                         const EvalMetrics* metrics) {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  if (losses) {
    for (const auto& [k, v] : losses->task) j["loss"][k] = v;
    j["kl"] = losses->kl;
    j["kd"] = losses->kd;
    j["total"] = losses->total;
  }
  if (metrics) {
    j["samples"] = metrics->samples;
    if (metrics->miou) j["miou"] = *metrics->miou;
    if (metrics->rmse) j["rmse"] = *metrics->rmse;
    if (metrics->merr) j["merr_deg"] = *metrics->merr;
    if (metrics->boundary_f) j["boundary_f_exact_pixel"] = *metrics->boundary_f;
  }
  return j.dump();
}

EvalMetrics train(Model& model, const Dataset& train_ds, const Dataset* eval_ds,
                  const RunConfig& cfg, std::ostream& log, const std::string& checkpoint_path,
                  const Teacher& teacher) {
  TrainState state{0, Rng(cfg.seed)};
  Adam adam(model.registry(), cfg.adam);
  if (!cfg.init.empty()) warm_start(cfg.init, model);
  EvalMetrics last;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const StepLosses l = train_epoch(model, adam, train_ds, cfg, state, teacher);
    state.epoch = e;
    log << metrics_json(e, "train", &l, nullptr) << "\n";
    if (eval_ds) {
      last = evaluate(model, *eval_ds);
      log << metrics_json(e, "eval", nullptr, &last) << "\n";
    }
    log.flush();
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model, &adam, state);
  }
  return last;
}

void save_checkpoint(const std::string& path, const Model& model, const Adam* adam,
                     const TrainState& state) {
  Writer w;
  w.buf.append(kCkptMagic, 4);
  w.pod(kCkptVersion);
  w.pod(model.spec().hash());
  w.str(model.spec().canonical());
  const auto& params = model.registry().params();
  w.pod(static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.pod(static_cast<std::uint8_t>(p.cls));
    w.tensor(p.var->value);
  }
  const auto& buffers = model.registry().buffers();
  w.pod(static_cast<std::uint64_t>(buffers.size()));
  for (const auto& b : buffers) {
    w.str(b.name);
    w.tensor(b.stats->running_mean);
    w.tensor(b.stats->running_var);
  }
  w.pod(static_cast<std::uint8_t>(adam ? 1 : 0));
  if (adam) {
    w.pod(adam->steps());
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.tensor(adam->first_moments()[i]);
      w.tensor(adam->second_moments()[i]);
    }
  }
  w.pod(state.epoch);
  std::ostringstream rs;
  rs << state.rng;
  w.str(rs.str());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
    f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!f) throw std::runtime_error("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(const std::string& path, Model& model, Adam* adam, TrainState* state) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r;
  r.path = path;
  r.buf.assign(std::istreambuf_iterator<char>(f), {});
  r.need(4);
  if (std::memcmp(r.buf.data(), kCkptMagic, 4) != 0) throw std::runtime_error("not a checkpoint: " + path);
  r.pos = 4;
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto hash = r.pod<std::uint64_t>();
  const std::string canon = r.str();
  if (hash != model.spec().hash()) {
    throw std::runtime_error("checkpoint spec mismatch: file has [" + canon + "], model is [" +
                             model.spec().canonical() + "]");
  }
  // Parse everything before touching the model so a bad file leaves it intact.
  const auto& params = model.registry().params();
  const auto np = r.pod<std::uint64_t>();
  if (np != params.size()) throw std::runtime_error("checkpoint: parameter count differs");
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < np; ++i) {
    const std::string name = r.str();
    r.pod<std::uint8_t>();
    if (name != params[i].name) throw std::runtime_error("checkpoint: expected parameter " + params[i].name + ", found " + name);
    values.push_back(r.tensor());
  }
  const auto& buffers = model.registry().buffers();
  const auto nb = r.pod<std::uint64_t>();
  if (nb != buffers.size()) throw std::runtime_error("checkpoint: buffer count differs");
  std::vector<std::pair<Tensor, Tensor>> stats;
  for (std::size_t i = 0; i < nb; ++i) {
    const std::string name = r.str();
    if (name != buffers[i].name) throw std::runtime_error("checkpoint: expected buffer " + buffers[i].name);
    Tensor mean = r.tensor();
    stats.emplace_back(std::move(mean), r.tensor());
  }
  const bool has_adam = r.pod<std::uint8_t>() != 0;
  std::uint64_t steps = 0;
  std::vector<Tensor> m, v;
  if (has_adam) {
    steps = r.pod<std::uint64_t>();
    for (std::size_t i = 0; i < np; ++i) {
      m.push_back(r.tensor());
      v.push_back(r.tensor());
    }
  }
  const auto epoch = r.pod<std::uint64_t>();
  const std::string rng_state = r.str();

  for (std::size_t i = 0; i < np; ++i) assign(params[i].var->value, values[i], params[i].name);
  for (std::size_t i = 0; i < nb; ++i) {
    assign(buffers[i].stats->running_mean, stats[i].first, buffers[i].name);
    assign(buffers[i].stats->running_var, stats[i].second, buffers[i].name);
  }
  if (adam) {
    if (!has_adam) throw std::runtime_error("checkpoint has no optimizer state: " + path);
    adam->set_steps(steps);
    for (std::size_t i = 0; i < np; ++i) {
      assign(adam->first_moments()[i], m[i], params[i].name + " (adam m)");
      assign(adam->second_moments()[i], v[i], params[i].name + " (adam v)");
    }
  }
  if (state) {
    state->epoch = epoch;
    std::istringstream rs(rng_state);
    rs >> state->rng;
  }
}

namespace {

// Binary convs store ".latent" where FP convs store ".weight"; both name the
// same layer's kernel.
std::string layer_key(const std::string& name) {
  static const std::string latent = ".latent";
  if (name.size() > latent.size() && name.ends_with(latent)) {
    return name.substr(0, name.size() - latent.size()) + ".weight";
  }
  return name;
}

}  // namespace

std::size_t warm_start(const std::string& path, Model& model) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r;
  r.path = path;
  r.buf.assign(std::istreambuf_iterator<char>(f), {});
  r.need(4);
  if (std::memcmp(r.buf.data(), kCkptMagic, 4) != 0) throw std::runtime_error("not a checkpoint: " + path);
  r.pos = 4;
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  r.pod<std::uint64_t>();
  r.str();
  std::map<std::string, Tensor> values;
  const auto np = r.pod<std::uint64_t>();
  for (std::size_t i = 0; i < np; ++i) {
    std::string name = r.str();
    r.pod<std::uint8_t>();
    values.emplace(layer_key(name), r.tensor());
  }
  std::map<std::string, std::pair<Tensor, Tensor>> stats;
  const auto nb = r.pod<std::uint64_t>();
  for (std::size_t i = 0; i < nb; ++i) {
    std::string name = r.str();
    Tensor mean = r.tensor();
    stats.emplace(std::move(name), std::make_pair(std::move(mean), r.tensor()));
  }

  std::size_t copied = 0;
  for (const auto& p : model.registry().params()) {
    const auto it = values.find(layer_key(p.name));
    if (it == values.end() || it->second.shape() != p.var->value.shape()) continue;
    p.var->value = it->second;
    // Latent binary weights live in [-1, 1].
    if (p.cls == ParamClass::Binary) {
      for (double& v : p.var->value.values()) v = std::clamp(v, -1.0, 1.0);
    }
    ++copied;
  }
  if (copied == 0) throw std::runtime_error("warm start: no parameter of " + path + " matches the model");
  for (const auto& b : model.registry().buffers()) {
    const auto it = stats.find(b.name);
    if (it == stats.end() || it->second.first.shape() != b.stats->running_mean.shape()) continue;
    b.stats->running_mean = it->second.first;
    b.stats->running_var = it->second.second;
  }
  return copied;
}

}  // namespace bimtdp
