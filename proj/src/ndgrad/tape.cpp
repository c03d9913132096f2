#include "carel/ndgrad/tape.hpp"

#include <string>

#include "carel/errors.hpp"

namespace carel::ndgrad {

namespace {

struct Fault {
  std::string op;
  double factor = 1.0;
  bool active = false;
};

Fault& fault() {
  static Fault f;
  return f;
}

}  // namespace

ScopedBackwardFault::ScopedBackwardFault(std::string_view op, double factor) {
  if (fault().active) throw ContractError("backward faults do not nest");
  fault() = {std::string(op), factor, true};
}

ScopedBackwardFault::~ScopedBackwardFault() { fault() = {}; }

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

void Tape::check_open(std::string_view what) const {
  if (consumed_) {
    throw ContractError(std::string(what) + " on a tape already consumed by backward()");
  }
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) {
  check_open("constant()");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  check_open("variable()");
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  check_open(op);
  bool needs = false;
  for (const Var& in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id_].requires_grad;
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id_].value;
}

bool Tape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id_].requires_grad;
}

Tensor* Tape::accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return nullptr;
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return &node.grad;
}

void Tape::truncate(std::size_t size) {
  check_open("truncate()");
  if (size > nodes_.size()) throw ContractError("cannot truncate a tape to more nodes than it holds");
  nodes_.resize(size);
}

void Tape::backward(Var loss) {
  check_open("backward()");
  check_owner(loss);
  if (nodes_[loss.id_].value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_string(nodes_[loss.id_].value.shape()));
  }
  consumed_ = true;
  const Fault& f = fault();
  if (Tensor* seed = accumulator(loss.id_)) (*seed)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    if (f.active && node.op == f.op) {
      Tensor scaled = node.grad;
      for (double& g : scaled.values()) g *= f.factor;
      node.backward(*this, scaled, node.value);
      continue;
    }
    node.backward(*this, node.grad, node.value);
  }
}

Tensor Tape::grad(Var v) const {
  check_owner(v);
  if (!consumed_) throw ContractError("grad() queried before backward()");
  const Node& node = nodes_[v.id_];
  if (node.has_grad) return node.grad;
  return Tensor(node.value.shape(), 0.0);
}

}  // namespace carel::ndgrad
