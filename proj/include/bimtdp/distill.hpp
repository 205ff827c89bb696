#pragma once

// Layerwise feature distillation from a full-precision teacher.

#include <string>
#include <utility>
#include <vector>

#include "bimtdp/model.hpp"

namespace bimtdp {

/// Student and teacher tap ids plus an optional 1x1 projection applied to the
/// student feature when channel counts differ.
struct DistillPair {
  std::string student_tap;
  std::string teacher_tap;
  Var projection;  // O x C x 1 x 1, may be null
};

/// (student, teacher) feature pair; the teacher value is never differentiated.
struct FeaturePair {
  Var student;
  Tensor teacher;
  std::string name;
};

/// Sum over pairs of mean((s - t)^2).
Var kd_loss(Tape& t, const std::vector<FeaturePair>& pairs);

/// Applies the pair's projection (if any) and pairs the features up by tap id.
std::vector<FeaturePair> match_features(Tape& t, const std::vector<DistillPair>& pairs,
                                        const std::vector<std::pair<std::string, Var>>& student,
                                        const std::vector<std::pair<std::string, Tensor>>& teacher);

/// Eval-mode activations at the requested taps, in graph order.
std::vector<std::pair<std::string, Tensor>> capture_taps(const Model& model,
                                                         const std::vector<std::string>& ids,
                                                         const Tensor& images);

/// Default tap list: each backbone scale output and every MMD output.
std::vector<std::string> default_kd_taps(const Model& model);

/// One identity pair per tap id.
std::vector<DistillPair> identity_pairs(const std::vector<std::string>& ids);

}  // namespace bimtdp
