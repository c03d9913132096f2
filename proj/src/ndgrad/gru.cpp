#include "carel/ndgrad/gru.hpp"

#include "carel/errors.hpp"
#include "carel/ndgrad/ops.hpp"

namespace carel::ndgrad {

Var gru_cell(Var x, Var h, const GruVars& p) {
  const std::size_t hid = h.cols();
  if (p.w_input.cols() != 3 * hid || p.w_hidden.rows() != hid || p.w_hidden.cols() != 3 * hid ||
      p.b_input.size() != 3 * hid || p.b_hidden.size() != 3 * hid) {
    throw DimensionError("gru_cell: parameters " + shape_string(p.w_input.shape()) + ", " +
                         shape_string(p.w_hidden.shape()) + " inconsistent with hidden size " +
                         std::to_string(hid));
  }
  if (x.cols() != p.w_input.rows() || x.rows() != h.rows()) {
    throw DimensionError("gru_cell: input " + shape_string(x.shape()) + " and hidden " +
                         shape_string(h.shape()) + " do not match input weights " +
                         shape_string(p.w_input.shape()));
  }
  Var gi = add_bias(matmul(x, p.w_input), p.b_input);
  Var gh = add_bias(matmul(h, p.w_hidden), p.b_hidden);
  Var r = sigmoid(add(slice_cols(gi, 0, hid), slice_cols(gh, 0, hid)));
  Var z = sigmoid(add(slice_cols(gi, hid, 2 * hid), slice_cols(gh, hid, 2 * hid)));
  Var n = tanh(add(slice_cols(gi, 2 * hid, 3 * hid), mul(r, slice_cols(gh, 2 * hid, 3 * hid))));
  // (1 - z) * n + z * h  ==  n + z * (h - n)
  return add(n, mul(z, sub(h, n)));
}

std::vector<Var> gru_unroll(const std::vector<Var>& inputs, Var h0, const GruVars& p) {
  std::vector<Var> states;
  states.reserve(inputs.size());
  Var h = h0;
  for (const Var& x : inputs) {
    h = gru_cell(x, h, p);
    states.push_back(h);
  }
  return states;
}

}  // namespace carel::ndgrad
