#pragma once

#include <cstddef>
#include <functional>

#include "carel/ndgrad/tensor.hpp"

namespace carel::ndgrad {

// Central-difference gradient of a scalar function with respect to every
// entry of x. f must read x by reference; x is restored after each probe.
Tensor central_difference(const std::function<double()>& f, Tensor& x, double step = 1e-5);

struct GradientComparison {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t compared = 0;  // entries with magnitude above the floor
  std::size_t skipped = 0;   // entries at or below the floor
};

// Elementwise |a - n| / max(|a|, |n|) over entries whose magnitude exceeds
// magnitude_floor; smaller entries only contribute to max_abs_error.
GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric,
                                     double magnitude_floor = 1e-6);

}  // namespace carel::ndgrad
