#include "bimtdp/tape.hpp"

#include <algorithm>
#include <cmath>

namespace bimtdp {

std::string_view op_name(OpId op) {
  switch (op) {
    case OpId::Leaf: return "leaf";
    case OpId::Constant: return "constant";
    case OpId::Add: return "add";
    case OpId::Sub: return "sub";
    case OpId::Mul: return "mul";
    case OpId::Scale: return "scale";
    case OpId::AddScalar: return "add_scalar";
    case OpId::Sum: return "sum";
    case OpId::Mean: return "mean";
    case OpId::Square: return "square";
    case OpId::Exp: return "exp";
    case OpId::Sigmoid: return "sigmoid";
    case OpId::HardTanh: return "hardtanh";
    case OpId::Clamp: return "clamp";
    case OpId::SteSign: return "ste_sign";
    case OpId::ApproxSign: return "approx_sign";
    case OpId::Conv2d: return "conv2d";
    case OpId::BinaryConv2d: return "binary_conv2d";
    case OpId::BatchNorm: return "batch_norm";
    case OpId::Upsample: return "upsample";
    case OpId::Concat: return "concat";
    case OpId::Loss: return "loss";
  }
  return "?";
}

bool is_sign_op(OpId op) {
  return op == OpId::SteSign || op == OpId::ApproxSign || op == OpId::BinaryConv2d;
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

void Node::zero_grad() {
  if (requires_grad) {
    if (grad.empty()) grad = Tensor(value.shape());
    else grad.fill(0.0);
  }
}

Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->op = OpId::Leaf;
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad = Tensor(n->value.shape());
  return n;
}

Var Tape::record(OpId op, Tensor value, std::vector<Var> inputs,
                 std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->value = std::move(value);
  n->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v && v->requires_grad; });
  n->inputs = std::move(inputs);
  if (n->requires_grad) n->backward = std::move(backward);
  n->owner = this;
  n->index = nodes_.size();
  nodes_.push_back(n);
  return n;
}

Var Tape::constant(Tensor value) { return record(OpId::Constant, std::move(value), {}, nullptr); }

void Tape::backward(const Var& loss) {
  if (!loss || loss->owner != this) throw std::logic_error("backward: loss was not recorded on this tape");
  if (loss->value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss->value.shape()));
  }
  if (!loss->requires_grad) return;
  loss->grad_buffer()[0] += 1.0;
  for (std::size_t i = loss->index + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.requires_grad && n.has_grad() && n.backward) n.backward(n);
  }
}

bool Tape::contains_sign() const {
  return std::any_of(nodes_.begin(), nodes_.end(), [](const Var& n) { return is_sign_op(n->op); });
}

void accumulate_grad(const Var& input, const Tensor& src) {
  if (!input->requires_grad) return;
  Tensor& g = input->grad_buffer();
  double* dst = g.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s[i];
}

double gradcheck(const std::function<Var(Tape&)>& build, const std::vector<Var>& params,
                 double h) {
  for (const auto& p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    if (tape.contains_sign()) {
      throw std::logic_error("gradcheck: graph contains a sign node; STE is not a derivative");
    }
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape;
    return build(tape)->value.item();
  };
  double worst = 0.0;
  for (const auto& p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double fp = eval();
      p->value[i] = saved - h;
      const double fm = eval();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace bimtdp
