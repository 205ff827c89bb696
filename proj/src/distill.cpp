#include "bimtdp/distill.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace bimtdp {

Var kd_loss(Tape& t, const std::vector<FeaturePair>& pairs) {
  if (pairs.empty()) return t.constant(Tensor::scalar(0.0));
  Var total;
  for (const auto& p : pairs) {
    if (p.student->value.shape() != p.teacher.shape()) {
      throw ShapeError("kd_loss: pair '" + p.name + "' student " +
                       shape_str(p.student->value.shape()) + " vs teacher " +
                       shape_str(p.teacher.shape()));
    }
    const Var term = ops::mse(t, p.student, t.constant(p.teacher));
    total = total ? ops::add(t, total, term) : term;
  }
  return total;
}

std::vector<FeaturePair> match_features(Tape& t, const std::vector<DistillPair>& pairs,
                                        const std::vector<std::pair<std::string, Var>>& student,
                                        const std::vector<std::pair<std::string, Tensor>>& teacher) {
  std::vector<FeaturePair> out;
  for (const auto& p : pairs) {
    auto s = std::find_if(student.begin(), student.end(),
                          [&](const auto& e) { return e.first == p.student_tap; });
    auto te = std::find_if(teacher.begin(), teacher.end(),
                           [&](const auto& e) { return e.first == p.teacher_tap; });
    if (s == student.end()) throw std::invalid_argument("kd: student tap '" + p.student_tap + "' not captured");
    if (te == teacher.end()) throw std::invalid_argument("kd: teacher tap '" + p.teacher_tap + "' not captured");
    Var sv = s->second;
    if (p.projection) sv = ops::conv2d(t, sv, p.projection, nullptr, {1, 0});
    out.push_back({sv, te->second, p.student_tap + "<-" + p.teacher_tap});
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> capture_taps(const Model& model,
                                                         const std::vector<std::string>& ids,
                                                         const Tensor& images) {
  Tape t;
  ForwardOptions opts;
  opts.mode = ops::Mode::Eval;
  opts.taps = {ids.begin(), ids.end()};
  if (opts.taps.size() != ids.size()) throw std::invalid_argument("capture_taps: duplicate tap id");
  ForwardOutputs out = model.forward(t, images, opts);
  std::vector<std::pair<std::string, Tensor>> result;
  for (auto& [id, v] : out.taps) result.emplace_back(id, v->value);
  return result;
}

std::vector<std::string> default_kd_taps(const Model& model) {
  std::vector<std::string> ids;
  for (const auto& id : model.tap_ids()) {
    if (id.rfind("backbone.", 0) == 0 || id.rfind("mmd.", 0) == 0) ids.push_back(id);
  }
  return ids;
}

std::vector<DistillPair> identity_pairs(const std::vector<std::string>& ids) {
  std::vector<DistillPair> pairs;
  for (const auto& id : ids) pairs.push_back({id, id, nullptr});
  return pairs;
}

}  // namespace bimtdp
