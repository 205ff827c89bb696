#include "bimtdp/tasks.hpp"

#include "bimtdp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bimtdp {

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Semseg: return "semseg";
    case TaskKind::Depth: return "depth";
    case TaskKind::Normal: return "normal";
    case TaskKind::Boundary: return "boundary";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  if (name == "semseg") return TaskKind::Semseg;
  if (name == "depth") return TaskKind::Depth;
  if (name == "normal") return TaskKind::Normal;
  if (name == "boundary") return TaskKind::Boundary;
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::size_t TaskSpec::channels() const {
  switch (kind) {
    case TaskKind::Semseg: return classes;
    case TaskKind::Depth: return 1;
    case TaskKind::Normal: return 3;
    case TaskKind::Boundary: return 1;
  }
  return 0;
}

void TaskSpec::validate() const {
  if (kind == TaskKind::Semseg && classes < 2) {
    throw std::invalid_argument("task semseg: class count must be >= 2");
  }
  if (!(loss_weight > 0.0)) throw std::invalid_argument("task " + task_name(kind) + ": loss weight must be > 0");
}

namespace {

void require_spatial(const Tensor& pred, std::size_t channels, std::size_t n, std::size_t h,
                     std::size_t w, const char* what) {
  if (pred.rank() != 4 || pred.dim(0) != n || pred.dim(2) != h || pred.dim(3) != w ||
      (channels && pred.dim(1) != channels)) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) +
                     " does not match labels [" + std::to_string(n) + "," + std::to_string(h) +
                     "," + std::to_string(w) + "]");
  }
}

void require_mask(const ValidMask& mask, std::size_t pixels, const char* what) {
  if (!mask.empty() && mask.size() != pixels) {
    throw ShapeError(std::string(what) + ": mask has " + std::to_string(mask.size()) +
                     " entries for " + std::to_string(pixels) + " pixels");
  }
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

Var semseg_loss(Tape& t, const Var& logits, const ClassMap& labels) {
  const Tensor& z = logits->value;
  require_spatial(z, 0, labels.n, labels.h, labels.w, "semseg_loss");
  const std::size_t k = z.dim(1), plane = labels.h * labels.w;
  if (labels.ids.size() != labels.n * plane) throw ShapeError("semseg_loss: label buffer size");
  std::size_t valid = 0;
  for (std::uint8_t id : labels.ids) {
    if (id == kIgnoreLabel) continue;
    if (id >= k) {
      throw std::out_of_range("semseg_loss: label " + std::to_string(id) + " >= class count " +
                              std::to_string(k));
    }
    ++valid;
  }
  Tensor prob(z.shape());
  double acc = 0.0;
  for (std::size_t img = 0; img < labels.n; ++img) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double* base = z.data() + img * k * plane + p;
      double mx = base[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, base[c * plane]);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(base[c * plane] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t c = 0; c < k; ++c) {
        prob[img * k * plane + c * plane + p] = std::exp(base[c * plane] - lse);
      }
      const std::uint8_t id = labels.ids[img * plane + p];
      if (id != kIgnoreLabel) acc += lse - base[id * plane];
    }
  }
  const double denom = valid ? static_cast<double>(valid) : 1.0;
  return t.record(OpId::Loss, Tensor::scalar(acc / denom), {logits},
                  [prob = std::move(prob), ids = labels.ids, k, plane, denom](Node& self) {
                    const Var& in = self.inputs[0];
                    if (!in->requires_grad) return;
                    Tensor& g = in->grad_buffer();
                    const double scale = self.grad[0] / denom;
                    const std::size_t n = ids.size() / plane;
                    for (std::size_t img = 0; img < n; ++img) {
                      for (std::size_t p = 0; p < plane; ++p) {
                        const std::uint8_t id = ids[img * plane + p];
                        if (id == kIgnoreLabel) continue;
                        for (std::size_t c = 0; c < k; ++c) {
                          const std::size_t i = img * k * plane + c * plane + p;
                          g[i] += scale * (prob[i] - (c == id ? 1.0 : 0.0));
                        }
                      }
                    }
                  });
}

Var depth_loss(Tape& t, const Var& pred, const Tensor& label, const ValidMask& mask) {
  require_same_shape(pred->value, label, "depth_loss");
  require_mask(mask, label.size(), "depth_loss");
  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    acc += std::abs(pred->value[i] - label[i]);
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("depth_loss: empty valid mask");
  const double n = static_cast<double>(valid);
  return t.record(OpId::Loss, Tensor::scalar(acc / n), {pred}, [label, mask, n](Node& self) {
    const Var& in = self.inputs[0];
    if (!in->requires_grad) return;
    Tensor& g = in->grad_buffer();
    const double s = self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      const double d = in->value[i] - label[i];
      g[i] += s * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
    }
  });
}

Var boundary_loss(Tape& t, const Var& logits, const Tensor& label, double pos_weight) {
  require_same_shape(logits->value, label, "boundary_loss");
  const double neg_weight = 1.0 - pos_weight;
  double acc = 0.0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const double z = logits->value[i], y = label[i];
    acc += pos_weight * y * softplus(-z) + neg_weight * (1.0 - y) * softplus(z);
  }
  const double n = static_cast<double>(std::max<std::size_t>(label.size(), 1));
  return t.record(OpId::Loss, Tensor::scalar(acc / n), {logits},
                  [label, pos_weight, neg_weight, n](Node& self) {
                    const Var& in = self.inputs[0];
                    if (!in->requires_grad) return;
                    Tensor& g = in->grad_buffer();
                    const double s = self.grad[0] / n;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const double sig = 1.0 / (1.0 + std::exp(-in->value[i]));
                      const double y = label[i];
                      g[i] += s * (pos_weight * y * (sig - 1.0) + neg_weight * (1.0 - y) * sig);
                    }
                  });
}

namespace {
constexpr double kNormEps = 1e-12;
}

Var normal_loss(Tape& t, const Var& pred, const Tensor& label, const ValidMask& mask) {
  const Tensor& p = pred->value;
  require_same_shape(p, label, "normal_loss");
  if (p.rank() != 4 || p.dim(1) != 3) throw ShapeError("normal_loss: expected N x 3 x H x W");
  const std::size_t n = p.dim(0), plane = p.dim(2) * p.dim(3);
  require_mask(mask, n * plane, "normal_loss");
  Tensor unit(p.shape());
  std::vector<double> norms(n * plane);
  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t b = img * 3 * plane + q;
      const double x = p[b], y = p[b + plane], z = p[b + 2 * plane];
      const double nrm = std::max(std::sqrt(x * x + y * y + z * z), kNormEps);
      norms[img * plane + q] = nrm;
      for (std::size_t c = 0; c < 3; ++c) unit[b + c * plane] = p[b + c * plane] / nrm;
      if (!mask.empty() && !mask[img * plane + q]) continue;
      ++valid;
      for (std::size_t c = 0; c < 3; ++c) acc += std::abs(unit[b + c * plane] - label[b + c * plane]);
    }
  }
  if (valid == 0) throw std::invalid_argument("normal_loss: empty valid mask");
  const double cnt = static_cast<double>(valid);
  return t.record(
      OpId::Loss, Tensor::scalar(acc / cnt), {pred},
      [unit = std::move(unit), norms = std::move(norms), label, mask, n, plane, cnt](Node& self) {
        const Var& in = self.inputs[0];
        if (!in->requires_grad) return;
        Tensor& g = in->grad_buffer();
        const double s = self.grad[0] / cnt;
        for (std::size_t img = 0; img < n; ++img) {
          for (std::size_t q = 0; q < plane; ++q) {
            if (!mask.empty() && !mask[img * plane + q]) continue;
            const std::size_t b = img * 3 * plane + q;
            double sg[3], u[3], dot = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
              u[c] = unit[b + c * plane];
              const double d = u[c] - label[b + c * plane];
              sg[c] = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
              dot += u[c] * sg[c];
            }
            const double nrm = norms[img * plane + q];
            const bool floored = nrm <= kNormEps;
            for (std::size_t c = 0; c < 3; ++c) {
              const double jt = floored ? sg[c] : (sg[c] - u[c] * dot);
              g[b + c * plane] += s * jt / nrm;
            }
          }
        }
      });
}

Var total_loss(Tape& t, const std::vector<Var>& task_losses, const std::vector<double>& weights,
               const Var& kl, const Var& kd, double beta, double lambda_kd) {
  if (!weights.empty() && weights.size() != task_losses.size()) {
    throw std::invalid_argument("total_loss: weight count differs from task count");
  }
  Var acc = t.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < task_losses.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    acc = ops::add(t, acc, w == 1.0 ? task_losses[i] : ops::scale(t, task_losses[i], w));
  }
  if (kl) acc = ops::add(t, acc, ops::scale(t, kl, beta));
  if (kd) acc = ops::add(t, acc, ops::scale(t, kd, lambda_kd));
  return acc;
}

IoUAccumulator::IoUAccumulator(std::size_t classes)
    : k_(classes), tp_(classes), fp_(classes), fn_(classes) {}

void IoUAccumulator::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label) {
  if (pred.size() != label.size()) throw ShapeError("miou: prediction/label size mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::uint8_t l = label[i];
    if (l == kIgnoreLabel) continue;
    const std::uint8_t p = pred[i];
    if (l >= k_ || p >= k_) throw std::out_of_range("miou: class id out of range");
    if (p == l) {
      ++tp_[l];
    } else {
      ++fp_[p];
      ++fn_[l];
    }
  }
}

double IoUAccumulator::miou() const {
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    const std::uint64_t denom = tp_[c] + fp_[c] + fn_[c];
    if (denom == 0) continue;
    acc += static_cast<double>(tp_[c]) / static_cast<double>(denom);
    ++present;
  }
  return present ? acc / static_cast<double>(present) : 0.0;
}

double metric_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                   std::size_t classes) {
  IoUAccumulator acc(classes);
  acc.add(pred, label);
  return acc.miou();
}

std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
  require_rank(logits, 4, "argmax_classes");
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(n * plane);
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double* base = logits.data() + img * k * plane + p;
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (base[c * plane] > base[best * plane]) best = c;
      }
      out[img * plane + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

double metric_rmse(const Tensor& pred, const Tensor& label, const ValidMask& mask) {
  require_same_shape(pred, label, "metric_rmse");
  require_mask(mask, label.size(), "metric_rmse");
  double acc = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double d = pred[i] - label[i];
    acc += d * d;
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("metric_rmse: no valid pixels");
  return std::sqrt(acc / static_cast<double>(valid));
}

double metric_merr(const Tensor& pred, const Tensor& label, const ValidMask& mask) {
  require_same_shape(pred, label, "metric_merr");
  if (pred.rank() != 4 || pred.dim(1) != 3) throw ShapeError("metric_merr: expected N x 3 x H x W");
  const std::size_t n = pred.dim(0), plane = pred.dim(2) * pred.dim(3);
  require_mask(mask, n * plane, "metric_merr");
  double acc = 0.0;
  std::size_t valid = 0;
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t q = 0; q < plane; ++q) {
      if (!mask.empty() && !mask[img * plane + q]) continue;
      const std::size_t b = img * 3 * plane + q;
      double dot = 0.0, pp = 0.0, ll = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double a = pred[b + c * plane], l = label[b + c * plane];
        dot += a * l;
        pp += a * a;
        ll += l * l;
      }
      const double denom = std::max(std::sqrt(pp), kNormEps) * std::max(std::sqrt(ll), kNormEps);
      acc += std::acos(std::clamp(dot / denom, -1.0, 1.0)) * 180.0 / std::numbers::pi;
      ++valid;
    }
  }
  if (valid == 0) throw std::invalid_argument("metric_merr: no valid pixels");
  return acc / static_cast<double>(valid);
}

std::vector<double> default_boundary_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 99; ++i) t.push_back(i / 100.0);
  return t;
}

BoundaryFAccumulator::BoundaryFAccumulator(std::vector<double> thresholds)
    : thresholds_(std::move(thresholds)) {
  if (thresholds_.empty()) throw std::invalid_argument("boundary F: empty threshold grid");
  std::sort(thresholds_.begin(), thresholds_.end());
  tp_.assign(thresholds_.size(), 0);
  fp_.assign(thresholds_.size(), 0);
  fn_.assign(thresholds_.size(), 0);
}

void BoundaryFAccumulator::add(std::span<const double> prob, std::span<const double> label) {
  if (prob.size() != label.size()) throw ShapeError("boundary F: prediction/label size mismatch");
  // Pixel p is predicted positive at threshold i iff i < (#thresholds <= p).
  const std::size_t m = thresholds_.size();
  std::vector<std::uint64_t> pos_hist(m + 1, 0), neg_hist(m + 1, 0);
  std::uint64_t positives = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const auto idx = static_cast<std::size_t>(
        std::upper_bound(thresholds_.begin(), thresholds_.end(), prob[i]) - thresholds_.begin());
    if (label[i] >= 0.5) {
      ++pos_hist[idx];
      ++positives;
    } else {
      ++neg_hist[idx];
    }
  }
  std::uint64_t pos_above = 0, neg_above = 0;
  for (std::size_t i = m; i-- > 0;) {
    pos_above += pos_hist[i + 1];
    neg_above += neg_hist[i + 1];
    tp_[i] += pos_above;
    fp_[i] += neg_above;
    fn_[i] += positives - pos_above;
  }
}

double BoundaryFAccumulator::best_f() const {
  double best = 0.0;
  for (std::size_t i = 0; i < thresholds_.size(); ++i) {
    const std::uint64_t denom = 2 * tp_[i] + fp_[i] + fn_[i];
    const double f = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp_[i]) / static_cast<double>(denom);
    best = std::max(best, f);
  }
  return best;
}

double metric_boundary_f(std::span<const double> prob, std::span<const double> label,
                         const std::vector<double>& thresholds) {
  BoundaryFAccumulator acc(thresholds);
  acc.add(prob, label);
  return acc.best_f();
}

}  // namespace bimtdp
