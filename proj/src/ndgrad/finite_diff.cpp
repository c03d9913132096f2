#include "carel/ndgrad/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "carel/errors.hpp"

namespace carel::ndgrad {

Tensor central_difference(const std::function<double()>& f, Tensor& x, double step) {
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric, double magnitude_floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("compare_gradients: " + shape_string(analytic.shape()) + " vs " +
                         shape_string(numeric.shape()));
  }
  GradientComparison cmp;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double diff = std::abs(a - n);
    cmp.max_abs_error = std::max(cmp.max_abs_error, diff);
    const double mag = std::max(std::abs(a), std::abs(n));
    if (mag > magnitude_floor) {
      cmp.max_rel_error = std::max(cmp.max_rel_error, diff / mag);
      ++cmp.compared;
    } else {
      ++cmp.skipped;
    }
  }
  return cmp;
}

}  // namespace carel::ndgrad
