#pragma once

// Dense-task heads' losses and evaluation metrics.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bimtdp/tape.hpp"

namespace bimtdp {

enum class TaskKind : std::uint8_t { Semseg, Depth, Normal, Boundary };

std::string task_name(TaskKind kind);
TaskKind parse_task(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::Semseg;
  std::size_t classes = 0;  // semseg only
  double loss_weight = 1.0;

  std::size_t channels() const;
  void validate() const;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Integer label map, N x H x W.
struct ClassMap {
  std::size_t n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> ids;
};

/// Per-pixel validity, N x H x W; empty means every pixel is valid.
using ValidMask = std::vector<std::uint8_t>;

/// Mean softmax cross-entropy over pixels whose label is not 255.
Var semseg_loss(Tape& t, const Var& logits, const ClassMap& labels);

/// Mean |pred - label| over valid pixels.
Var depth_loss(Tape& t, const Var& pred, const Tensor& label, const ValidMask& mask = {});

/// Weighted BCE on logits: 0.95 on positives, 0.05 on negatives, mean over pixels.
Var boundary_loss(Tape& t, const Var& logits, const Tensor& label, double pos_weight = 0.95);

/// Mean per-pixel l1 distance between the l2-normalized prediction and the label.
Var normal_loss(Tape& t, const Var& pred, const Tensor& label, const ValidMask& mask = {});

/// Sum_t w_t L_t + beta * kl + lambda_kd * kd. kl / kd may be null.
Var total_loss(Tape& t, const std::vector<Var>& task_losses, const std::vector<double>& weights,
               const Var& kl, const Var& kd, double beta, double lambda_kd);

/// Confusion-matrix accumulator for mIoU over a dataset.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(std::size_t classes);
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label);
  /// Mean over classes with TP + FP + FN > 0 of TP / (TP + FP + FN).
  double miou() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> tp_, fp_, fn_;
};

double metric_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                   std::size_t classes);

/// Per-pixel argmax over the class axis of N x K x H x W logits.
std::vector<std::uint8_t> argmax_classes(const Tensor& logits);

double metric_rmse(const Tensor& pred, const Tensor& label, const ValidMask& mask = {});

/// Mean angle in degrees between predicted and label normals (N x 3 x H x W).
double metric_merr(const Tensor& pred, const Tensor& label, const ValidMask& mask = {});

std::vector<double> default_boundary_thresholds();

/// Dataset-level best-threshold F1 with exact pixel matching.
class BoundaryFAccumulator {
 public:
  explicit BoundaryFAccumulator(std::vector<double> thresholds = default_boundary_thresholds());
  void add(std::span<const double> prob, std::span<const double> label);
  double best_f() const;

 private:
  std::vector<double> thresholds_;
  std::vector<std::uint64_t> tp_, fp_, fn_;
};

double metric_boundary_f(std::span<const double> prob, std::span<const double> label,
                         const std::vector<double>& thresholds = default_boundary_thresholds());

}  // namespace bimtdp
