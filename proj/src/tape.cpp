#include "kpp/tape.hpp"

namespace kpp {

Tape& Var::tape() const {
  if (!tape_) throw GraphError("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }
const Tensor& Var::grad() const { return tape().grad(id_); }

Var Tape::parameter(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.op = "parameter";
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardRule rule) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op) + ": non-finite value in output of shape " + to_string(value.shape()));
  }
  const int id = static_cast<int>(nodes_.size());
  Node node;
  node.value = std::move(value);
  node.op = op;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw GraphError(std::string(op) + ": operand recorded on a different tape");
    // Parents must precede the node; anything else would be a cycle.
    if (p.id() >= id) throw GraphError(std::string(op) + ": operand does not precede node (cycle)");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
  }
  if (node.requires_grad) node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

const Tensor& Tape::grad(int id) const {
  const Node& node = nodes_.at(static_cast<std::size_t>(id));
  if (node.grad.shape() != node.value.shape()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw GraphError("backward: loss belongs to a different tape");
  if (backward_done_) throw GraphError("backward: called twice without zero_grad");
  const Node& root = nodes_.at(static_cast<std::size_t>(loss.id()));
  if (root.value.size() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + to_string(root.value.shape()));
  }
  backward_done_ = true;

  std::vector<bool> active(nodes_.size(), false);
  active[static_cast<std::size_t>(loss.id())] = true;
  for (auto& node : nodes_) {
    if (node.requires_grad) node.grad = Tensor::zeros_like(node.value);
  }
  if (!root.requires_grad) return;
  nodes_[static_cast<std::size_t>(loss.id())].grad.array().setOnes();

  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!active[static_cast<std::size_t>(id)] || !node.rule) continue;
    BackwardContext ctx{node.value, node.grad, {}, {}};
    for (int p : node.parents) {
      Node& parent = nodes_[static_cast<std::size_t>(p)];
      ctx.in.push_back(&parent.value);
      ctx.in_grad.push_back(parent.requires_grad ? &parent.grad : nullptr);
      if (parent.requires_grad) active[static_cast<std::size_t>(p)] = true;
    }
    node.rule(ctx);
  }
}

void Tape::zero_grad() {
  for (auto& node : nodes_) node.grad = Tensor();
  backward_done_ = false;
}

}  // namespace kpp
