#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records nodes in creation order, which is a topological order: every
// node's inputs are either leaves (parameters, living outside the tape) or
// earlier tape nodes. backward() walks the record once, last to first.

#include <cstdint>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "bimtdp/tensor.hpp"

namespace bimtdp {

enum class OpId : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Sum,
  Mean,
  Square,
  Exp,
  Sigmoid,
  HardTanh,
  Clamp,
  SteSign,
  ApproxSign,
  Conv2d,
  BinaryConv2d,
  BatchNorm,
  Upsample,
  Concat,
  Loss,
};

std::string_view op_name(OpId op);
bool is_sign_op(OpId op);

class Tape;
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  OpId op = OpId::Leaf;
  Tensor value;
  /// Empty until the first accumulation; then the same shape as value.
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  /// Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
  const Tape* owner = nullptr;
  std::size_t index = 0;

  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
  void zero_grad();
};

/// Trainable or frozen tensor that outlives any single tape.
Var make_leaf(Tensor value, bool requires_grad = true);

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var record(OpId op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);
  Var constant(Tensor value);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  /// Gradients accumulate; callers zero parameter grads between steps.
  void backward(const Var& loss);

  const std::vector<Var>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool contains_sign() const;

 private:
  std::vector<Var> nodes_;
};

/// Adds src into the input's grad buffer when that input takes gradients.
void accumulate_grad(const Var& input, const Tensor& src);

/// Central-difference check of every element of `params` against backward().
/// Returns max |analytic - numeric| / max(1, |numeric|). The builder must not
/// emit sign nodes.
double gradcheck(const std::function<Var(Tape&)>& build, const std::vector<Var>& params,
                 double h = 1e-5);

}  // namespace bimtdp
