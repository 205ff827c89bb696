#pragma once

// Run configuration, Adam with two learning-rate groups, the training and
// evaluation loops, and checkpoint persistence.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bimtdp/distill.hpp"
#include "bimtdp/model.hpp"
#include "bimtdp/synth.hpp"

namespace bimtdp {

struct AdamConfig {
  double lr_binary = 1e-5;
  double lr_fp = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RunConfig {
  ModelSpec spec = ModelSpec::desk_default();
  /// Tap-level KD is enabled when a teacher checkpoint is supplied and this is set.
  bool kd = true;
  AdamConfig adam;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double beta = 1e-2;
  double lambda_kd = 1.0;
  std::size_t threads = 1;
  std::string train_data;
  std::string eval_data;
  std::string teacher;
  /// Optional checkpoint whose parameters initialize the model (name and
  /// shape matched, see warm_start).
  std::string init;
  std::string out = "run";
  /// Synthetic data settings used by gen-data.
  SynthConfig synth;
  std::size_t train_count = 1000;
  std::size_t eval_count = 200;

  void validate() const;
};

/// Flat "key = value" text with dotted keys; '#' starts a comment. Unknown
/// keys and malformed values raise std::invalid_argument naming the line.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});
/// Every accepted key with a one-line description.
std::vector<std::pair<std::string, std::string>> config_schema();

/// Teacher twin of a student spec: FP variant, no VIB.
ModelSpec teacher_spec(const ModelSpec& student);

class Adam {
 public:
  Adam(const ParamRegistry& reg, AdamConfig cfg);
  /// One update from the current gradients, then latent weights are clipped.
  void step(const ParamRegistry& reg);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { step_ = s; }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Loss of one task's prediction against the batch labels.
Var task_loss(Tape& t, TaskKind kind, const Var& pred, const Batch& batch);

struct StepLosses {
  std::map<std::string, double> task;  // final + initial, per task
  double kl = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

/// Builds the full objective for one batch: per-task losses on the final and
/// the upsampled initial predictions, beta * KL and lambda * KD.
struct Objective {
  Var total;
  StepLosses parts;
};
Objective build_objective(Tape& t, const Model& model, const Batch& batch, const ForwardOutputs& out,
                          double beta, double lambda_kd,
                          const std::vector<FeaturePair>& kd_pairs);

struct EvalMetrics {
  std::optional<double> miou, rmse, merr, boundary_f;
  std::size_t samples = 0;
};

/// Streams per-task predictions (one tensor per spec task, in spec order)
/// against batch labels. Metrics are pooled over all pixels seen.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(const ModelSpec& spec);
  void add(const Batch& batch, const std::vector<Tensor>& preds);
  EvalMetrics result() const;

 private:
  std::vector<TaskSpec> tasks_;
  IoUAccumulator iou_;
  BoundaryFAccumulator bf_;
  double sq_ = 0.0, ang_ = 0.0;
  std::size_t npix_ = 0, samples_ = 0;
};

EvalMetrics evaluate(const Model& model, const Dataset& ds, std::size_t batch_size = 16);

/// Thrown when a training loss becomes non-finite.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainState {
  std::uint64_t epoch = 0;
  Rng rng;
};

struct Teacher {
  const Model* model = nullptr;
  std::vector<std::string> taps;
};

/// One pass over the training set in a seed-determined order.
StepLosses train_epoch(Model& model, Adam& adam, const Dataset& ds, const RunConfig& cfg,
                       TrainState& state, const Teacher& teacher = {});

/// Epoch loop writing one JSON line per epoch per split to `log`, with a
/// checkpoint after each epoch at `checkpoint_path` (if non-empty).
EvalMetrics train(Model& model, const Dataset& train_ds, const Dataset* eval_ds,
                  const RunConfig& cfg, std::ostream& log, const std::string& checkpoint_path,
                  const Teacher& teacher = {});

std::string metrics_json(std::size_t epoch, const std::string& split, const StepLosses* losses,
                         const EvalMetrics* metrics);

void save_checkpoint(const std::string& path, const Model& model, const Adam* adam,
                     const TrainState& state);
/// Restores parameters and BN statistics (and optimizer / train state when
/// given). Refuses a checkpoint whose spec hash differs from the model's.
void load_checkpoint(const std::string& path, Model& model, Adam* adam = nullptr,
                     TrainState* state = nullptr);

/// Copies each parameter and BN buffer whose name and shape match an entry of
/// the checkpoint, whatever spec wrote it. Binary latents are clipped to
/// [-1, 1]. Returns the number of parameters copied; throws if none match.
std::size_t warm_start(const std::string& path, Model& model);

}  // namespace bimtdp
