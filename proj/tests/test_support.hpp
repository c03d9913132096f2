#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "carel/ndgrad/finite_diff.hpp"
#include "carel/ndgrad/ops.hpp"
#include "carel/ndgrad/tape.hpp"
#include "carel/rng.hpp"

namespace carel::testing {

using ndgrad::Shape;
using ndgrad::Tape;
using ndgrad::Tensor;
using ndgrad::Var;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Builds a scalar loss from the given leaves.
using LossBuilder = std::function<Var(const std::vector<Var>&)>;

inline double evaluate_loss(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return build(vars).value().item();
}

// Worst elementwise relative error between the tape's gradients and central
// differences, over every input.
inline double max_gradient_error(const LossBuilder& build, std::vector<Tensor> inputs, double step = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.variable(t));
    Var loss = build(vars);
    tape.backward(loss);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor numeric = ndgrad::central_difference([&] { return evaluate_loss(build, inputs); }, inputs[i], step);
    worst = std::max(worst, ndgrad::compare_gradients(analytic[i], numeric).max_rel_error);
  }
  return worst;
}

}  // namespace carel::testing
