#include "bimtdp/model.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace bimtdp {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::FP: return "fp";
    case Variant::A: return "a";
    case Variant::B: return "b";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "fp" || s == "FP") return Variant::FP;
  if (s == "a" || s == "A") return Variant::A;
  if (s == "b" || s == "B") return Variant::B;
  throw std::invalid_argument("unknown variant '" + s + "' (expected fp, a or b)");
}

ModelSpec ModelSpec::desk_default(std::size_t classes) {
  ModelSpec s;
  s.tasks = {{TaskKind::Semseg, classes, 1.0},
             {TaskKind::Depth, 0, 1.0},
             {TaskKind::Normal, 0, 1.0},
             {TaskKind::Boundary, 0, 1.0}};
  return s;
}

void ModelSpec::validate() const {
  BackboneSpec{widths, blocks_per_scale, stem_stride, in_channels, false, estimator}.validate();
  if (tasks.empty()) throw std::invalid_argument("model.tasks: at least one task required");
  std::set<TaskKind> seen;
  for (const auto& t : tasks) {
    t.validate();
    if (!seen.insert(t.kind).second) {
      throw std::invalid_argument("model.tasks: duplicate task " + task_name(t.kind));
    }
  }
}

std::size_t ModelSpec::spatial_divisor() const {
  return stem_stride * (std::size_t{1} << (widths.size() - 1));
}

std::string ModelSpec::canonical() const {
  std::ostringstream os;
  os << "variant=" << variant_name(variant) << ";widths=";
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
  os << ";blocks=" << blocks_per_scale << ";head_blocks=" << head_blocks
     << ";stem=" << stem_stride << ";in=" << in_channels << ";tasks=";
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    os << (i ? "," : "") << task_name(tasks[i].kind) << ":" << tasks[i].channels();
  }
  os << ";vib=" << (vib ? 1 : 0)
     << ";estimator=" << (estimator == ops::Estimator::Ste ? "ste" : "approx");
  return os.str();
}

std::uint64_t ModelSpec::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  const bool trunk_binary = spec_.variant == Variant::B;
  const bool mmd_binary = spec_.variant != Variant::FP;

  backbone_ = std::make_unique<Backbone>(
      reg_, "backbone",
      BackboneSpec{spec_.widths, spec_.blocks_per_scale, spec_.stem_stride, spec_.in_channels,
                   trunk_binary, spec_.estimator},
      rng);

  for (std::size_t s = 0; s < spec_.scales(); ++s) {
    const std::size_t c = spec_.widths[s];
    const std::string sfx = ".s" + std::to_string(s);
    ScaleState st;
    if (spec_.vib) {
      st.vib = make_vib(reg_, "vib" + sfx, c, 1e-2, rng);
      st.vib_bn = make_batchnorm(reg_, "vib" + sfx + ".bn", c);
    }
    for (const auto& task : spec_.tasks) {
      const std::string base = "head." + task_name(task.kind) + sfx;
      TaskHead h;
      for (std::size_t b = 0; b < spec_.head_blocks; ++b) {
        h.blocks.push_back(make_bireal_block(reg_, base + ".block" + std::to_string(b), c,
                                             trunk_binary, spec_.estimator, rng));
      }
      h.predict = make_conv(reg_, base + ".predict", c, task.channels(), 3, {1, 1}, true, rng);
      h.transform = make_conv(reg_, base + ".transform", task.channels(), c, 3, {1, 1}, false, rng);
      h.transform_bn = make_batchnorm(reg_, base + ".transform.bn", c);
      st.heads.push_back(std::move(h));
    }
    scales_.push_back(std::move(st));
    mmd_.push_back(make_mmd(reg_, "mmd" + sfx, spec_.tasks.size(), c, mmd_binary, true,
                            spec_.estimator, rng));
  }

  std::size_t fused = 0;
  for (std::size_t w : spec_.widths) fused += w;
  for (const auto& task : spec_.tasks) {
    final_.push_back(make_conv(reg_, "final." + task_name(task.kind), fused, task.channels(), 3,
                               {1, 1}, true, rng));
  }
}

ForwardOutputs Model::forward(Tape& t, const Tensor& images, const ForwardOptions& opts) const {
  require_rank(images, 4, "model.forward");
  const std::size_t div = spec_.spatial_divisor();
  const std::size_t h = images.dim(2), w = images.dim(3);
  if (h == 0 || w == 0 || h % div != 0 || w % div != 0) {
    throw ShapeError("model.forward: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by " + std::to_string(div));
  }
  const auto known = tap_ids();
  for (const auto& id : opts.taps) {
    if (std::find(known.begin(), known.end(), id) == known.end()) {
      throw std::invalid_argument("unknown tap id '" + id + "'");
    }
  }
  if (opts.mode == ops::Mode::Train && spec_.vib && !opts.rng) {
    throw std::invalid_argument("model.forward: train mode with VIB needs an rng");
  }

  ForwardOutputs out;
  const TapFn tap = [&](const std::string& id, const Var& v) {
    if (opts.taps.count(id)) out.taps.emplace_back(id, v);
  };
  const std::size_t tasks = spec_.tasks.size();
  out.initial.assign(tasks, {});

  const Var input = t.constant(images);
  const std::vector<Var> trunk = backbone_->forward(t, input, opts.mode, tap);

  std::vector<TaskFeatureSet> fused(spec_.scales());
  for (std::size_t s = 0; s < spec_.scales(); ++s) {
    const std::string sfx = ".s" + std::to_string(s);
    const ScaleState& st = scales_[s];
    Var x = trunk[s];
    if (spec_.vib) {
      GaussianPosterior post = st.vib.encode(t, x);
      Var z = opts.mode == ops::Mode::Train ? reparameterize(t, post, *opts.rng, opts.mode)
                                            : post.mu;
      out.posteriors.push_back(post);
      x = st.vib_bn.forward(t, z, opts.mode);
      tap("vib" + sfx, x);
    }
    TaskFeatureSet features;
    for (std::size_t k = 0; k < tasks; ++k) {
      const TaskHead& head = st.heads[k];
      const std::string name = task_name(spec_.tasks[k].kind);
      Var hcur = x;
      for (const auto& blk : head.blocks) hcur = blk.forward(t, hcur, opts.mode);
      tap("head." + name + sfx, hcur);
      const Var pred = head.predict.forward(t, hcur);
      out.initial[k].push_back(pred);
      if (opts.front_end_only) continue;
      const Var pre = head.transform_bn.forward(t, head.transform.forward(t, pred), opts.mode);
      const Var feat = ops::sign(t, pre, spec_.estimator);
      tap("feature." + name + sfx, feat);
      features.push_back(feat);
    }
    if (opts.front_end_only) continue;
    MMDWeights mw = mmd_[s];
    mw.mode = opts.mode;
    fused[s] = mmd_all_tasks(t, features, mw);
    for (std::size_t k = 0; k < tasks; ++k) {
      tap("mmd." + task_name(spec_.tasks[k].kind) + sfx, fused[s][k]);
    }
  }
  if (opts.front_end_only) return out;

  const std::size_t h0 = fused[0][0]->value.dim(2), w0 = fused[0][0]->value.dim(3);
  for (std::size_t k = 0; k < tasks; ++k) {
    std::vector<Var> parts;
    for (std::size_t s = 0; s < spec_.scales(); ++s) {
      parts.push_back(ops::upsample_bilinear(t, fused[s][k], h0, w0));
    }
    const Var cat = parts.size() == 1 ? parts[0] : ops::concat_channels(t, parts);
    out.final.push_back(ops::upsample_bilinear(t, final_[k].forward(t, cat), h, w));
  }
  return out;
}

ParamAudit Model::parameter_audit() const {
  return {reg_.count(ParamClass::FP), reg_.count(ParamClass::Binary)};
}

std::vector<std::string> Model::tap_ids() const {
  std::vector<std::string> ids;
  for (std::size_t s = 0; s < spec_.scales(); ++s) ids.push_back("backbone.s" + std::to_string(s));
  for (std::size_t s = 0; s < spec_.scales(); ++s) {
    const std::string sfx = ".s" + std::to_string(s);
    if (spec_.vib) ids.push_back("vib" + sfx);
    for (const auto& task : spec_.tasks) ids.push_back("head." + task_name(task.kind) + sfx);
    for (const auto& task : spec_.tasks) ids.push_back("feature." + task_name(task.kind) + sfx);
    for (const auto& task : spec_.tasks) ids.push_back("mmd." + task_name(task.kind) + sfx);
  }
  return ids;
}

CostTally tally_tape(const Tape& t) {
  CostTally c;
  for (const auto& node : t.nodes()) {
    if (node->op != OpId::Conv2d && node->op != OpId::BinaryConv2d) continue;
    const Tensor& w = node->inputs[1]->value;
    const double macs = static_cast<double>(node->value.size()) *
                        static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    if (node->op == OpId::Conv2d) c.fp_macs += macs;
    else c.binary_ops += macs;
  }
  return c;
}

CostTally Model::cost(std::size_t h, std::size_t w) const {
  Tape t;
  ForwardOptions opts;
  opts.mode = ops::Mode::Eval;
  forward(t, Tensor({1, spec_.in_channels, h, w}), opts);
  return tally_tape(t);
}

}  // namespace bimtdp
