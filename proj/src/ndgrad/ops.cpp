#include "carel/ndgrad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "carel/errors.hpp"

namespace carel::ndgrad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Tensor& t) { return ConstMap(t.storage().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.storage().data(), t.rows(), t.cols()); }

Tensor mat(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

void ensure_finite(std::string_view op, const Tensor& t) {
  if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

[[noreturn]] void mismatch(std::string_view op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

void require_same_2d(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) mismatch(op, a, b);
}

void require_positive_tau(std::string_view op, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError(std::string(op) + ": temperature must be positive and finite, got " +
                         std::to_string(tau));
  }
}

// Elementwise map with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(std::string_view name, Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  ensure_finite(name, y);
  const std::size_t ia = a.id();
  return tape.record(name, std::move(y), {a}, [ia, deriv](Tape& t, const Tensor& g, const Tensor& out) {
    Tensor* ga = t.accumulator(ia);
    if (!ga) return;
    const Tensor& in = t.value_at(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(in[i], out[i]);
  });
}

void add_into(Tensor* acc, const Tensor& g, double factor = 1.0) {
  if (!acc) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += factor * g[i];
}

// Row-wise softmax of x / tau into y (same 2-D layout).
void softmax_rows_into(const Tensor& x, double tau, Tensor& y) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.storage().data() + i * c;
    double* yi = y.storage().data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      yi[j] = std::exp((xi[j] - mx) / tau);
      total += yi[j];
    }
    for (std::size_t j = 0; j < c; ++j) yi[j] /= total;
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() > 2 || bv.rank() > 2 || av.cols() != bv.rows()) mismatch("matmul", av, bv);
  Tensor out = mat(av.rows(), bv.cols());
  view(out).noalias() = view(av) * view(bv);
  ensure_finite("matmul", out);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) view(*ga).noalias() += view(g) * view(t.value_at(ib)).transpose();
    if (Tensor* gb = t.accumulator(ib)) view(*gb).noalias() += view(t.value_at(ia)).transpose() * view(g);
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() > 2) throw DimensionError("transpose: rank > 2 in " + shape_string(av.shape()));
  Tensor out = mat(av.cols(), av.rows());
  view(out) = view(av).transpose();
  const std::size_t ia = a.id();
  return tape.record("transpose", std::move(out), {a}, [ia](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) view(*ga) += view(g).transpose();
  });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (element_count(shape) != av.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(av.shape()) + " as " + shape_string(shape));
  }
  Tensor out(std::move(shape), av.storage());
  const std::size_t ia = a.id();
  return tape.record("reshape", std::move(out), {a},
                     [ia](Tape& t, const Tensor& g, const Tensor&) { add_into(t.accumulator(ia), g); });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_2d("add", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  ensure_finite("add", out);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("add", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    add_into(t.accumulator(ia), g);
    add_into(t.accumulator(ib), g);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_2d("sub", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  ensure_finite("sub", out);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("sub", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    add_into(t.accumulator(ia), g);
    add_into(t.accumulator(ib), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_2d("mul", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  ensure_finite("mul", out);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) {
      const Tensor& bv = t.value_at(ib);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.accumulator(ib)) {
      const Tensor& av = t.value_at(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var add_scalar(Var a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_bias(Var m, Var bias) {
  Tape& tape = tape_of(m, bias);
  const Tensor& mv = m.value();
  const Tensor& bv = bias.value();
  if (mv.rank() > 2 || bv.size() != mv.cols()) mismatch("add_bias", mv, bv);
  Tensor out = mv;
  view(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.storage().data(), bv.size());
  ensure_finite("add_bias", out);
  const std::size_t im = m.id(), ib = bias.id();
  return tape.record("add_bias", std::move(out), {m, bias}, [im, ib](Tape& t, const Tensor& g, const Tensor&) {
    add_into(t.accumulator(im), g);
    if (Tensor* gb = t.accumulator(ib)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->storage().data(), gb->size()) += view(g).colwise().sum();
    }
  });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var minimum(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_2d("minimum", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("minimum", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value_at(ia);
    const Tensor& bv = t.value_at(ib);
    Tensor* ga = t.accumulator(ia);
    Tensor* gb = t.accumulator(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] <= bv[i]) {
        if (ga) (*ga)[i] += g[i];
      } else if (gb) {
        (*gb)[i] += g[i];
      }
    }
  });
}

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw ParameterError("clamp: lower bound exceeds upper bound");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const std::size_t ia = a.id();
  return tape.record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) {
      for (double& v : ga->values()) v += g[0];
    }
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum_axis(Var a, int axis) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (axis != 0 && axis != 1) throw ParameterError("sum_axis: axis must be 0 or 1");
  Tensor out = axis == 0 ? mat(1, av.cols()) : mat(av.rows(), 1);
  if (axis == 0) {
    view(out) = view(av).colwise().sum();
  } else {
    view(out) = view(av).rowwise().sum();
  }
  ensure_finite("sum_axis", out);
  const std::size_t ia = a.id();
  return tape.record("sum_axis", std::move(out), {a}, [ia, axis](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* ga = t.accumulator(ia);
    if (!ga) return;
    if (axis == 0) {
      view(*ga).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(g.storage().data(), g.size());
    } else {
      view(*ga).colwise() += Eigen::Map<const Eigen::VectorXd>(g.storage().data(), g.size());
    }
  });
}

Var mean_axis(Var a, int axis) {
  const double n = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return scale(sum_axis(a, axis), 1.0 / n);
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  if (axis != 0 && axis != 1) throw ParameterError("concat: axis must be 0 or 1");
  Tape& tape = tape_of(parts.front());
  const Tensor& first = parts.front().value();
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    const Tensor& pv = p.value();
    if (axis == 0 && pv.cols() != first.cols()) mismatch("concat", first, pv);
    if (axis == 1 && pv.rows() != first.rows()) mismatch("concat", first, pv);
    total += axis == 0 ? pv.rows() : pv.cols();
  }
  Tensor out = axis == 0 ? mat(total, first.cols()) : mat(first.rows(), total);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    if (axis == 0) {
      view(out).middleRows(offset, pv.rows()) = view(pv);
    } else {
      view(out).middleCols(offset, pv.cols()) = view(pv);
    }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += axis == 0 ? pv.rows() : pv.cols();
  }
  return tape.record("concat", std::move(out), parts,
                     [ids, offsets, axis](Tape& t, const Tensor& g, const Tensor&) {
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         Tensor* gp = t.accumulator(ids[k]);
                         if (!gp) continue;
                         if (axis == 0) {
                           view(*gp) += view(g).middleRows(offsets[k], gp->rows());
                         } else {
                           view(*gp) += view(g).middleCols(offsets[k], gp->cols());
                         }
                       }
                     });
}

Var stack_scalars(const std::vector<Var>& scalars, std::size_t rows, std::size_t cols) {
  if (scalars.size() != rows * cols || scalars.empty()) {
    throw DimensionError("stack_scalars: " + std::to_string(scalars.size()) + " scalars for a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
  }
  Tape& tape = tape_of(scalars.front());
  Tensor out = mat(rows, cols);
  std::vector<std::size_t> ids;
  ids.reserve(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    tape_of(scalars.front(), scalars[i]);
    out[i] = scalars[i].value().item();
    ids.push_back(scalars[i].id());
  }
  return tape.record("stack_scalars", std::move(out), scalars, [ids](Tape& t, const Tensor& g, const Tensor&) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (Tensor* gs = t.accumulator(ids[i])) (*gs)[0] += g[i];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (begin >= end || end > av.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_string(av.shape()));
  }
  Tensor out = mat(end - begin, av.cols());
  view(out) = view(av).middleRows(begin, end - begin);
  const std::size_t ia = a.id();
  return tape.record("slice_rows", std::move(out), {a}, [ia, begin](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) view(*ga).middleRows(begin, g.rows()) += view(g);
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (begin >= end || end > av.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_string(av.shape()));
  }
  Tensor out = mat(av.rows(), end - begin);
  view(out) = view(av).middleCols(begin, end - begin);
  const std::size_t ia = a.id();
  return tape.record("slice_cols", std::move(out), {a}, [ia, begin](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) view(*ga).middleCols(begin, g.cols()) += view(g);
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Tape& tape = tape_of(table);
  const Tensor& tv = table.value();
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t c = tv.cols();
  Tensor out = mat(ids.size(), c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                           shape_string(tv.shape()));
    }
    std::copy_n(tv.storage().data() + ids[i] * c, c, out.storage().data() + i * c);
  }
  const std::size_t it = table.id();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return tape.record("gather_rows", std::move(out), {table},
                     [it, idv = std::move(idv), c](Tape& t, const Tensor& g, const Tensor&) {
                       Tensor* gt = t.accumulator(it);
                       if (!gt) return;
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         double* dst = gt->storage().data() + idv[i] * c;
                         const double* src = g.storage().data() + i * c;
                         for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                     });
}

Var embedding_bag(Var table, std::span<const std::size_t> ids, std::size_t per_row) {
  Tape& tape = tape_of(table);
  const Tensor& tv = table.value();
  if (per_row == 0 || ids.empty() || ids.size() % per_row != 0) {
    throw DimensionError("embedding_bag: " + std::to_string(ids.size()) + " ids not divisible into bags of " +
                         std::to_string(per_row));
  }
  const std::size_t c = tv.cols();
  const std::size_t n = ids.size() / per_row;
  Tensor out = mat(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    double* dst = out.storage().data() + i * c;
    for (std::size_t k = 0; k < per_row; ++k) {
      const std::size_t id = ids[i * per_row + k];
      if (id >= tv.rows()) {
        throw DimensionError("embedding_bag: id " + std::to_string(id) + " outside table " +
                             shape_string(tv.shape()));
      }
      const double* src = tv.storage().data() + id * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  }
  ensure_finite("embedding_bag", out);
  const std::size_t it = table.id();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return tape.record("embedding_bag", std::move(out), {table},
                     [it, idv = std::move(idv), c, per_row](Tape& t, const Tensor& g, const Tensor&) {
                       Tensor* gt = t.accumulator(it);
                       if (!gt) return;
                       for (std::size_t k = 0; k < idv.size(); ++k) {
                         double* dst = gt->storage().data() + idv[k] * c;
                         const double* src = g.storage().data() + (k / per_row) * c;
                         for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                     });
}

Var pick(Var a, std::span<const std::size_t> cols) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (cols.size() != av.rows()) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_string(av.shape()));
  }
  Tensor out = mat(av.rows(), 1);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= av.cols()) throw DimensionError("pick: column index out of range");
    out[i] = av.at(i, cols[i]);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> cv(cols.begin(), cols.end());
  return tape.record("pick", std::move(out), {a}, [ia, cv = std::move(cv)](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.accumulator(ia)) {
      for (std::size_t i = 0; i < cv.size(); ++i) ga->at(i, cv[i]) += g[i];
    }
  });
}

Var softmax_temp(Var v, double tau) {
  require_positive_tau("softmax_temp", tau);
  const Tensor& vv = v.value();
  if (vv.rank() == 2 && vv.rows() != 1 && vv.cols() != 1) {
    throw DimensionError("softmax_temp expects a vector, got " + shape_string(vv.shape()));
  }
  const Shape original = vv.shape();
  Var row = vv.rank() == 2 && vv.rows() != 1 ? reshape(v, Shape{1, vv.size()}) : v;
  Var out = softmax_rows(row, tau);
  return out.shape() == original ? out : reshape(out, original);
}

Var softmax_rows(Var a, double tau) {
  require_positive_tau("softmax_rows", tau);
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() > 2) throw DimensionError("softmax_rows: rank > 2 in " + shape_string(av.shape()));
  Tensor out(av.shape());
  softmax_rows_into(av, tau, out);
  ensure_finite("softmax_rows", out);
  const std::size_t ia = a.id();
  return tape.record("softmax_rows", std::move(out), {a}, [ia, tau](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor* ga = t.accumulator(ia);
    if (!ga) return;
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += y[i * c + j] * (g[i * c + j] - dot) / tau;
    }
  });
}

Var log_softmax_rows(Var a, double tau) {
  require_positive_tau("log_softmax_rows", tau);
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() > 2) throw DimensionError("log_softmax_rows: rank > 2 in " + shape_string(av.shape()));
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = av.storage().data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp((xi[j] - mx) / tau);
    const double lse = std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (xi[j] - mx) / tau - lse;
  }
  ensure_finite("log_softmax_rows", out);
  const std::size_t ia = a.id();
  return tape.record("log_softmax_rows", std::move(out), {a},
                     [ia, tau](Tape& t, const Tensor& g, const Tensor& y) {
                       Tensor* ga = t.accumulator(ia);
                       if (!ga) return;
                       const std::size_t r = y.rows(), c = y.cols();
                       for (std::size_t i = 0; i < r; ++i) {
                         double gsum = 0.0;
                         for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j) {
                           (*ga)[i * c + j] += (g[i * c + j] - std::exp(y[i * c + j]) * gsum) / tau;
                         }
                       }
                     });
}

Var l2_normalize_rows(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() > 2) throw DimensionError("l2_normalize_rows: rank > 2 in " + shape_string(av.shape()));
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += av[i * c + j] * av[i * c + j];
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / norm;
  }
  ensure_finite("l2_normalize_rows", out);
  const std::size_t ia = a.id();
  return tape.record("l2_normalize_rows", std::move(out), {a}, [ia](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor* ga = t.accumulator(ia);
    if (!ga) return;
    const Tensor& x = t.value_at(ia);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double sq = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        sq += x[i * c + j] * x[i * c + j];
        dot += g[i * c + j] * y[i * c + j];
      }
      const double norm = std::sqrt(sq);
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norm;
    }
  });
}

}  // namespace carel::ndgrad
