#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "carel/ndgrad/tape.hpp"

// Differentiable primitives. Every operation validates shapes (DimensionError
// naming both operands), checks that its output is finite (NumericError), and
// records a backward rule on the operands' tape.
//
// Broadcasting is limited to scalar-tensor forms (add_scalar, scale) plus the
// explicit row-broadcast add_bias; everything else requires equal shapes.
namespace carel::ndgrad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double c);
Var scale(Var a, double c);
// m: r x c, bias: c elements (any rank); adds bias to every row of m.
Var add_bias(Var m, Var bias);

Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var square(Var a);
Var minimum(Var a, Var b);
Var clamp(Var a, double lo, double hi);

// Reductions. sum/mean produce a scalar; the axis forms produce 1 x c
// (axis 0, over rows) or r x 1 (axis 1, over columns).
Var sum(Var a);
Var mean(Var a);
Var sum_axis(Var a, int axis);
Var mean_axis(Var a, int axis);

// axis 0 stacks rows (equal column counts), axis 1 stacks columns.
Var concat(const std::vector<Var>& parts, int axis);
// Arranges single-element Vars into a rows x cols matrix, row-major.
Var stack_scalars(const std::vector<Var>& scalars, std::size_t rows, std::size_t cols);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);

// Embedding lookup: row i of the result is table row ids[i]. The backward
// rule scatter-adds into the table.
Var gather_rows(Var table, std::span<const std::size_t> ids);
// Row i of the result is the sum of table rows ids[i*per_row .. (i+1)*per_row),
// i.e. a one-hot-encoded input multiplied by the table.
Var embedding_bag(Var table, std::span<const std::size_t> ids, std::size_t per_row);
// Element (i, cols[i]) of every row, as an r x 1 column.
Var pick(Var a, std::span<const std::size_t> cols);

// Temperature softmax over all elements of a vector (rank 0/1 or a single
// row/column); the output has the input's shape.
Var softmax_temp(Var v, double tau);
// Row-wise temperature softmax and its fused stable logarithm.
Var softmax_rows(Var a, double tau);
Var log_softmax_rows(Var a, double tau);
// Each row divided by its L2 norm. A zero row is a NumericError.
Var l2_normalize_rows(Var a);

}  // namespace carel::ndgrad
