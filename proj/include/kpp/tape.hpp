#pragma once

#include "kpp/tensor.hpp"

#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kpp {

/// Misuse of the differentiation tape (double backward, non-scalar loss, foreign nodes).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const;
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  /// Gradient accumulated by the last backward pass (zeros when unreachable).
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// What a backward rule sees: the node output, its upstream gradient, and the
/// parents' values and gradient accumulators (null when a parent needs no gradient).
struct BackwardContext {
  const Tensor& out;
  const Tensor& out_grad;
  std::vector<const Tensor*> in;
  std::vector<Tensor*> in_grad;
};

using BackwardRule = std::function<void(const BackwardContext&)>;

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the backward sweep is a single reverse pass. `backward` may be
/// called once; `zero_grad` re-arms it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Tensor value);
  Var constant(Tensor value);

  /// Appends an op node. The rule is dropped when no parent requires a gradient.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardRule rule);

  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const Tensor& grad(int id) const;
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);
  void zero_grad();

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;  // allocated lazily
    std::vector<int> parents;
    BackwardRule rule;
    std::string op;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;  // deque: references to values survive appends
  bool backward_done_ = false;
};

}  // namespace kpp
