#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "carel/ndgrad/tape.hpp"

namespace carel::ndgrad {

// Gated recurrent unit with fused gate weights, gate order (reset, update,
// candidate):
//   r  = sigmoid(x Wr + bir + h Ur + bhr)
//   z  = sigmoid(x Wz + biz + h Uz + bhz)
//   n  = tanh(x Wn + bin + r * (h Un + bhn))
//   h' = (1 - z) * n + z * h
struct GruVars {
  Var w_input;   // in x 3h
  Var w_hidden;  // h x 3h
  Var b_input;   // 3h
  Var b_hidden;  // 3h
};

// x: B x in, h: B x hid. Returns the next hidden state, B x hid.
Var gru_cell(Var x, Var h, const GruVars& p);

// Runs the cell over a sequence of inputs (each B x in) and returns every
// hidden state. h0 is B x hid.
std::vector<Var> gru_unroll(const std::vector<Var>& inputs, Var h0, const GruVars& p);

}  // namespace carel::ndgrad
