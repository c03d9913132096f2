#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string_view>

#include "carel/ndgrad/tensor.hpp"

namespace carel::ndgrad {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid as long as the
// tape is alive.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Linear record of primitive operations for reverse-mode differentiation.
//
// Nodes are appended in evaluation order, so the record is already a
// topological order of the computation DAG; backward() walks it in exact
// reverse. A tape is single-use: backward() consumes it, and any further
// recording or a second backward() raises ContractError.
class Tape {
 public:
  // Receives the tape, the gradient flowing into the node's output, and the
  // node's own output value.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad, const Tensor& value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf that receives a gradient.
  Var variable(Tensor value);

  // Append the output of a primitive. The node requires a gradient iff any
  // input does; otherwise the backward rule is dropped.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  // For backward rules, which capture node ids rather than Vars.
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a single element.
  void backward(Var loss);

  // Gradient accumulated at v by the last backward(); zeros if v was not
  // reached.
  Tensor grad(Var v) const;

  // For backward rules: the accumulator of node `id`, zero-initialized on
  // first touch, or nullptr when that node does not take gradients.
  Tensor* accumulator(std::size_t id);

  bool consumed() const { return consumed_; }
  // Drops every node recorded after the first `size` ones, so a tape of bound
  // constants can be reused for many forward passes. Vars of dropped nodes
  // become dangling. Only allowed before backward().
  void truncate(std::size_t size);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string_view op;  // names are string literals
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  void check_open(std::string_view what) const;
  void check_owner(Var v) const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// Fault injection for verifying gradient checks: while an instance lives,
// backward() feeds every node recorded under `op` its incoming gradient
// scaled by `factor`, i.e. a deliberately wrong backward rule.
class ScopedBackwardFault {
 public:
  ScopedBackwardFault(std::string_view op, double factor);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;
};

}  // namespace carel::ndgrad
