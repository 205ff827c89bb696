#include "bimtdp/mmd.hpp"

namespace bimtdp {

namespace {

constexpr ConvGeometry kMmdGeom{1, 1};

void check_features(const TaskFeatureSet& f, const MMDWeights& w) {
  if (f.empty()) throw ShapeError("mmd: at least one task required");
  if (f.size() != w.tasks() || w.message.size() != w.tasks()) {
    throw ShapeError("mmd: " + std::to_string(f.size()) + " feature maps for " +
                     std::to_string(w.tasks()) + " tasks");
  }
  const Shape& ref = f.front()->value.shape();
  if (ref.size() != 4) throw ShapeError("mmd: features must be N x C x H x W");
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i]->value.shape() != ref) {
      throw ShapeError("mmd: task " + std::to_string(i) + " feature shape " +
                       shape_str(f[i]->value.shape()) + " differs from " + shape_str(ref));
    }
    if (w.message[i]->value.dim(0) != ref[1]) {
      throw ShapeError("mmd: message conv of task " + std::to_string(i) + " emits " +
                       std::to_string(w.message[i]->value.dim(0)) + " channels, target has " +
                       std::to_string(ref[1]));
    }
  }
}

Var conv(Tape& t, const Var& x, const Var& weight, const MMDWeights& w) {
  if (!w.binary) return ops::conv2d(t, x, weight, nullptr, kMmdGeom);
  return ops::binary_conv2d(t, ops::sign(t, x, w.estimator), ops::ste_sign(t, weight), kMmdGeom);
}

Var message(Tape& t, const TaskFeatureSet& f, const MMDWeights& w, std::size_t source) {
  Var m = conv(t, f[source], w.message[source], w);
  if (!w.message_bn.empty()) m = w.message_bn[source].forward(t, m, w.mode);
  return m;
}

Var fuse(Tape& t, const TaskFeatureSet& f, const MMDWeights& w, std::size_t target,
         const std::vector<Var>& messages) {
  Var acc = f[target];
  if (f.size() > 1) {
    const Var gate = binarized_attention(t, f[target], w, target);
    for (std::size_t s = 0; s < f.size(); ++s) {
      if (s == target) continue;
      acc = ops::add(t, acc, ops::mul(t, gate, messages[s]));
    }
  }
  return w.binary ? ops::sign(t, acc, w.estimator) : ops::hardtanh(t, acc);
}

}  // namespace

MMDWeights make_mmd(ParamRegistry& reg, const std::string& name, std::size_t tasks,
                    std::size_t channels, bool binary, bool normalized, ops::Estimator est,
                    Rng& rng) {
  MMDWeights w;
  w.binary = binary;
  w.estimator = est;
  auto make = [&](const std::string& n) {
    if (binary) return make_binconv(reg, n, channels, channels, 3, kMmdGeom, est, rng).latent_weight;
    return make_conv(reg, n, channels, channels, 3, kMmdGeom, false, rng).weight;
  };
  for (std::size_t k = 0; k < tasks; ++k) {
    w.attention.push_back(make(name + ".att" + std::to_string(k)));
    w.message.push_back(make(name + ".msg" + std::to_string(k)));
    if (normalized) {
      w.attention_bn.push_back(make_batchnorm(reg, name + ".att" + std::to_string(k) + ".bn", channels));
      w.message_bn.push_back(make_batchnorm(reg, name + ".msg" + std::to_string(k) + ".bn", channels));
    }
  }
  return w;
}

Var binarized_attention(Tape& t, const Var& feature, const MMDWeights& w, std::size_t target) {
  if (target >= w.tasks()) throw ShapeError("mmd: target task out of range");
  if (feature->value.rank() != 4 || feature->value.dim(1) != w.attention[target]->value.dim(1)) {
    throw ShapeError("binarized_attention: feature " + shape_str(feature->value.shape()) +
                     " incompatible with weight " + shape_str(w.attention[target]->value.shape()));
  }
  Var logits = conv(t, feature, w.attention[target], w);
  if (!w.attention_bn.empty()) logits = w.attention_bn[target].forward(t, logits, w.mode);
  return w.binary ? ops::bool_gate(t, logits, w.estimator) : ops::sigmoid(t, logits);
}

Var mmd_fuse(Tape& t, const TaskFeatureSet& features, const MMDWeights& w, std::size_t target) {
  check_features(features, w);
  if (target >= features.size()) throw ShapeError("mmd_fuse: target task out of range");
  std::vector<Var> messages(features.size());
  for (std::size_t s = 0; s < features.size(); ++s) {
    if (s != target) messages[s] = message(t, features, w, s);
  }
  return fuse(t, features, w, target, messages);
}

TaskFeatureSet mmd_all_tasks(Tape& t, const TaskFeatureSet& features, const MMDWeights& w) {
  check_features(features, w);
  std::vector<Var> messages(features.size());
  if (features.size() > 1) {
    for (std::size_t s = 0; s < features.size(); ++s) messages[s] = message(t, features, w, s);
  }
  TaskFeatureSet out;
  for (std::size_t k = 0; k < features.size(); ++k) out.push_back(fuse(t, features, w, k, messages));
  return out;
}

}  // namespace bimtdp
