#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "carel/errors.hpp"
#include "carel/ndgrad/checkpoint.hpp"
#include "carel/ndgrad/gru.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace carel;
using namespace carel::ndgrad;
using carel::testing::max_gradient_error;
using carel::testing::random_tensor;

TEST_CASE("matmul examples") {
  Tape tape;
  Var i2 = tape.constant(Tensor::identity(2));
  CHECK(matmul(i2, i2).value() == Tensor::identity(2));

  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var ones = tape.constant(Tensor::matrix({{1}, {1}}));
  CHECK(matmul(a, ones).value() == Tensor::matrix({{3}, {7}}));
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(11);
  const double err = max_gradient_error([](const std::vector<Var>& v) { return sum(matmul(v[0], v[1])); },
                                        {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})});
  CHECK(err < 1e-6);
  // Weighted output so that every gradient entry differs.
  const Tensor w = random_tensor(rng, {3, 2});
  const double err2 = max_gradient_error(
      [&](const std::vector<Var>& v) {
        Var out = matmul(v[0], v[1]);
        return sum(mul(out, out.tape()->constant(w)));
      },
      {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})});
  CHECK(err2 < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3] and [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax_temp examples") {
  Tape tape;
  for (double tau : {0.1, 1.0, 7.0}) {
    Var out = softmax_temp(tape.constant(Tensor::vector({2.5, 2.5, 2.5})), tau);
    for (double v : out.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  Var two = softmax_temp(tape.constant(Tensor::vector({0.0, std::log(3.0)})), 1.0);
  CHECK(std::abs(two.value()[0] - 0.25) < 1e-15);
  CHECK(std::abs(two.value()[1] - 0.75) < 1e-15);

  Var hot = softmax_temp(tape.constant(Tensor::vector({0.0, 1.0, 2.0})), 1e6);
  for (double v : hot.value().values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("softmax_temp errors") {
  Tape tape;
  Var v = tape.constant(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(softmax_temp(v, 0.0), ParameterError);
  CHECK_THROWS_AS(softmax_temp(v, -1.0), ParameterError);
  CHECK_THROWS_AS(Tensor::vector({}), DimensionError);
  CHECK_THROWS_AS(softmax_temp(tape.constant(Tensor(Shape{2, 2})), 1.0), DimensionError);
}

TEST_CASE("softmax_temp output is a probability vector") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t len = 1 + rng.below(12);
    Tensor v = random_tensor(rng, {len}, -50.0, 50.0);
    const double tau = std::exp(rng.uniform(-6.0, 6.0));
    Tape tape;
    const Tensor p = softmax_temp(tape.constant(v), tau).value();
    double total = 0.0;
    for (double x : p.values()) {
      CHECK(x >= 0.0);
      total += x;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("backward examples") {
  {
    Tape tape;
    Var w = tape.variable(Tensor::vector({0.3, -1.0, 2.0}));
    tape.backward(sum(w));
    CHECK(tape.grad(w) == Tensor::vector({1.0, 1.0, 1.0}));
  }
  {
    Tape tape;
    Var w = tape.variable(Tensor::matrix({{1.0}, {2.0}}));
    Var loss = matmul(transpose(w), w);
    tape.backward(loss);
    CHECK(tape.grad(w) == Tensor::matrix({{2.0}, {4.0}}));
  }
  {
    Rng rng(3);
    const double err = max_gradient_error(
        [](const std::vector<Var>& v) {
          Var logits = matmul(v[0], v[1]);
          Var p = softmax_temp(reshape(logits, Shape{logits.size()}), 0.7);
          return sum(mul(p, p));
        },
        {random_tensor(rng, {1, 4}), random_tensor(rng, {4, 5})});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("backward contract") {
  Tape tape;
  Var w = tape.variable(Tensor::vector({1.0, 2.0}));
  Var unused = tape.variable(Tensor::vector({5.0, 6.0, 7.0}));
  CHECK_THROWS_AS(tape.backward(w), ContractError);
  CHECK_THROWS_AS(tape.grad(w), ContractError);

  Var loss = sum(square(w));
  tape.backward(loss);
  CHECK(tape.grad(unused) == Tensor::vector({0.0, 0.0, 0.0}));
  // Single-use tape: a second pass or further recording is rejected.
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
  CHECK_THROWS_AS(sum(w), ContractError);
  CHECK_THROWS_AS(tape.constant(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("non-finite results are surfaced") {
  Tape tape;
  CHECK_THROWS_AS(log(tape.constant(Tensor::vector({1.0, -1.0}))), NumericError);
  CHECK_THROWS_AS(exp(tape.constant(Tensor::vector({1000.0}))), NumericError);
  CHECK_THROWS_AS(l2_normalize_rows(tape.constant(Tensor(Shape{1, 3}))), NumericError);
}

TEST_CASE("every primitive agrees with central differences") {
  Rng rng(17);
  using Inputs = std::vector<Tensor>;
  struct Case {
    const char* name;
    carel::testing::LossBuilder build;
    Inputs inputs;
  };
  const Tensor weights = random_tensor(rng, {3, 4});
  // Weighted sum makes every output element matter with a distinct factor.
  auto weigh = [weights](Var out) {
    Tensor w(Shape{out.rows(), out.cols()});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = weights[i % weights.size()] + 0.1 * static_cast<double>(i);
    return sum(mul(out, out.tape()->constant(w)));
  };
  std::vector<std::size_t> ids = {2, 0, 2, 1};
  std::vector<std::size_t> picks = {3, 0, 1};
  std::vector<Case> cases = {
      {"add", [&](auto& v) { return weigh(add(v[0], v[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"sub", [&](auto& v) { return weigh(sub(v[0], v[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"mul", [&](auto& v) { return weigh(mul(v[0], v[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"scale", [&](auto& v) { return weigh(scale(v[0], -1.7)); }, {random_tensor(rng, {3, 4})}},
      {"add_scalar", [&](auto& v) { return weigh(add_scalar(v[0], 0.4)); }, {random_tensor(rng, {3, 4})}},
      {"add_bias", [&](auto& v) { return weigh(add_bias(v[0], v[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {4})}},
      {"tanh", [&](auto& v) { return weigh(tanh(v[0])); }, {random_tensor(rng, {3, 4}, -2, 2)}},
      {"sigmoid", [&](auto& v) { return weigh(sigmoid(v[0])); }, {random_tensor(rng, {3, 4}, -3, 3)}},
      {"exp", [&](auto& v) { return weigh(exp(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"log", [&](auto& v) { return weigh(log(v[0])); }, {random_tensor(rng, {3, 4}, 0.5, 2.0)}},
      {"relu", [&](auto& v) { return weigh(relu(v[0])); }, {Tensor::matrix({{0.5, -0.3, 1.2, -2.0}, {0.1, 0.9, -0.7, 0.2}, {-0.1, 0.3, 0.6, -0.4}})}},
      {"square", [&](auto& v) { return weigh(square(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"minimum", [&](auto& v) { return weigh(minimum(v[0], v[1])); }, {Tensor::matrix({{0.5, -0.3, 1.2, -2.0}, {0.1, 0.9, -0.7, 0.2}, {-0.1, 0.3, 0.6, -0.4}}), Tensor::matrix({{0.1, 0.3, 1.0, -1.0}, {0.4, 0.2, -0.2, 0.8}, {0.5, -0.3, 0.1, 0.4}})}},
      {"clamp", [&](auto& v) { return weigh(clamp(v[0], -0.5, 0.5)); }, {Tensor::matrix({{0.45, -0.3, 1.2, -2.0}, {0.1, 0.9, -0.7, 0.2}, {-0.1, 0.3, 0.6, -0.4}})}},
      {"sum_axis0", [&](auto& v) { return weigh(sum_axis(v[0], 0)); }, {random_tensor(rng, {3, 4})}},
      {"sum_axis1", [&](auto& v) { return weigh(sum_axis(v[0], 1)); }, {random_tensor(rng, {3, 4})}},
      {"mean_axis0", [&](auto& v) { return weigh(mean_axis(v[0], 0)); }, {random_tensor(rng, {3, 4})}},
      {"mean", [&](auto& v) { return mean(square(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"concat0", [&](auto& v) { return weigh(concat({v[0], v[1]}, 0)); }, {random_tensor(rng, {1, 4}), random_tensor(rng, {2, 4})}},
      {"concat1", [&](auto& v) { return weigh(concat({v[0], v[1]}, 1)); }, {random_tensor(rng, {3, 1}), random_tensor(rng, {3, 3})}},
      {"stack_scalars", [&](auto& v) { return weigh(stack_scalars({sum(v[0]), sum(square(v[0])), mean(v[1]), sum(v[1])}, 2, 2)); }, {random_tensor(rng, {2, 2}), random_tensor(rng, {3})}},
      {"slice_rows", [&](auto& v) { return weigh(slice_rows(v[0], 1, 3)); }, {random_tensor(rng, {4, 4})}},
      {"slice_cols", [&](auto& v) { return weigh(slice_cols(v[0], 1, 3)); }, {random_tensor(rng, {3, 5})}},
      {"transpose", [&](auto& v) { return weigh(transpose(v[0])); }, {random_tensor(rng, {4, 3})}},
      {"reshape", [&](auto& v) { return weigh(reshape(v[0], Shape{3, 4})); }, {random_tensor(rng, {2, 6})}},
      {"gather_rows", [&](auto& v) { return weigh(gather_rows(v[0], ids)); }, {random_tensor(rng, {3, 4})}},
      {"embedding_bag", [&](auto& v) { return weigh(embedding_bag(v[0], ids, 2)); }, {random_tensor(rng, {3, 4})}},
      {"pick", [&](auto& v) { return weigh(pick(v[0], picks)); }, {random_tensor(rng, {3, 4})}},
      {"softmax_rows", [&](auto& v) { return weigh(softmax_rows(v[0], 0.6)); }, {random_tensor(rng, {3, 4})}},
      {"log_softmax_rows", [&](auto& v) { return weigh(log_softmax_rows(v[0], 1.3)); }, {random_tensor(rng, {3, 4})}},
      {"softmax_temp", [&](auto& v) { return weigh(softmax_temp(v[0], 2.0)); }, {random_tensor(rng, {5})}},
      {"l2_normalize_rows", [&](auto& v) { return weigh(l2_normalize_rows(v[0])); }, {random_tensor(rng, {3, 4})}},
      {"matmul", [&](auto& v) { return weigh(matmul(v[0], v[1])); }, {random_tensor(rng, {3, 2}), random_tensor(rng, {2, 4})}},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    CHECK(max_gradient_error(c.build, c.inputs) < 1e-4);
  }
}

TEST_CASE("random compositions up to depth 6 agree with central differences") {
  Rng rng(23);
  const Tensor mixer = random_tensor(rng, {3, 3});
  for (int trial = 0; trial < 60; ++trial) {
    const int depth = 1 + static_cast<int>(rng.below(6));
    std::vector<int> ops;
    for (int i = 0; i < depth; ++i) ops.push_back(static_cast<int>(rng.below(8)));
    const Tensor w = random_tensor(rng, {3, 3});
    auto build = [&](const std::vector<Var>& v) {
      Var x = v[0];
      for (int op : ops) {
        switch (op) {
          case 0: x = tanh(x); break;
          case 1: x = sigmoid(x); break;
          case 2: x = softmax_rows(x, 0.8); break;
          case 3: x = l2_normalize_rows(x); break;
          case 4: x = matmul(x, x.tape()->constant(mixer)); break;
          case 5: x = add(mul(x, v[1]), x); break;
          case 6: x = log_softmax_rows(x, 1.0); break;
          default: x = transpose(add_bias(x, slice_rows(v[1], 0, 1))); break;
        }
      }
      return sum(mul(x, x.tape()->constant(w)));
    };
    CAPTURE(trial);
    CHECK(max_gradient_error(build, {random_tensor(rng, {3, 3}), random_tensor(rng, {3, 3})}) < 1e-4);
  }
}

TEST_CASE("identical inputs give bit-identical outputs") {
  Rng rng(31);
  const Tensor a = random_tensor(rng, {4, 6});
  const Tensor b = random_tensor(rng, {6, 3});
  auto run = [&] {
    Tape tape;
    Var out = softmax_rows(tanh(matmul(tape.constant(a), tape.constant(b))), 0.5);
    return out.value();
  };
  CHECK(run() == run());
}

namespace {

GruVars make_gru(Tape& tape, const std::vector<Tensor>& p) {
  return GruVars{tape.variable(p[0]), tape.variable(p[1]), tape.variable(p[2]), tape.variable(p[3])};
}

}  // namespace

TEST_CASE("gru cell all-zero case") {
  Tape tape;
  const std::size_t in = 3, hid = 4;
  GruVars p = make_gru(tape, {Tensor(Shape{in, 3 * hid}), Tensor(Shape{hid, 3 * hid}), Tensor(Shape{3 * hid}),
                              Tensor(Shape{3 * hid})});
  Var h = gru_cell(tape.constant(Tensor(Shape{1, in})), tape.constant(Tensor(Shape{1, hid})), p);
  CHECK(h.value() == Tensor(Shape{1, hid}));
}

TEST_CASE("gru gradients agree with central differences") {
  Rng rng(41);
  const std::size_t in = 3, hid = 4, steps = 3;
  std::vector<Tensor> inputs = {random_tensor(rng, {in, 3 * hid}), random_tensor(rng, {hid, 3 * hid}),
                                random_tensor(rng, {3 * hid}), random_tensor(rng, {3 * hid}),
                                random_tensor(rng, {2, hid})};
  std::vector<Tensor> xs;
  for (std::size_t t = 0; t < steps; ++t) xs.push_back(random_tensor(rng, {2, in}));
  const Tensor w = random_tensor(rng, {2, hid});
  auto build = [&](const std::vector<Var>& v) {
    Tape& tape = *v[0].tape();
    GruVars p{v[0], v[1], v[2], v[3]};
    std::vector<Var> seq;
    for (const Tensor& x : xs) seq.push_back(tape.constant(x));
    Var h = gru_unroll(seq, v[4], p).back();
    return sum(mul(h, tape.constant(w)));
  };
  CHECK(max_gradient_error(build, inputs) < 1e-4);
}

TEST_CASE("gru unroll of length 1 equals a single cell") {
  Rng rng(43);
  std::vector<Tensor> p = {random_tensor(rng, {2, 9}), random_tensor(rng, {3, 9}), random_tensor(rng, {9}),
                           random_tensor(rng, {9})};
  const Tensor x = random_tensor(rng, {1, 2});
  const Tensor h0 = random_tensor(rng, {1, 3});
  Tape tape;
  GruVars g = make_gru(tape, p);
  Var single = gru_cell(tape.constant(x), tape.constant(h0), g);
  Var unrolled = gru_unroll({tape.constant(x)}, tape.constant(h0), g).back();
  CHECK(single.value() == unrolled.value());
}

TEST_CASE("gru rejects inconsistent shapes") {
  Tape tape;
  GruVars p = make_gru(tape, {Tensor(Shape{3, 12}), Tensor(Shape{4, 12}), Tensor(Shape{12}), Tensor(Shape{12})});
  CHECK_THROWS_AS(gru_cell(tape.constant(Tensor(Shape{1, 2})), tape.constant(Tensor(Shape{1, 4})), p),
                  DimensionError);
  CHECK_THROWS_AS(gru_cell(tape.constant(Tensor(Shape{1, 3})), tape.constant(Tensor(Shape{1, 5})), p),
                  DimensionError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(53);
  Checkpoint ckpt;
  ckpt.config_digest = fnv1a64("level=GoToSeq");
  ckpt.put_text("config", "level=GoToSeq\nseed=1\n");
  ckpt.put("a", random_tensor(rng, {3, 5}, -1e300, 1e300));
  ckpt.put("b", Tensor::vector({-0.0, 4.9e-324, std::numeric_limits<double>::max(), 1.0 / 3.0}));
  ckpt.put("s", Tensor::scalar(std::numbers::pi));
  std::stringstream buf;
  write_checkpoint(buf, ckpt);
  const Checkpoint back = read_checkpoint(buf);
  CHECK(back.config_digest == ckpt.config_digest);
  CHECK(back.text("config") == "level=GoToSeq\nseed=1\n");
  REQUIRE(back.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].first == ckpt.tensors[i].first);
    CHECK(back.tensors[i].second.shape() == ckpt.tensors[i].second.shape());
    CHECK(std::memcmp(back.tensors[i].second.storage().data(), ckpt.tensors[i].second.storage().data(),
                      ckpt.tensors[i].second.size() * sizeof(double)) == 0);
  }
  CHECK(std::signbit(back.tensor("b")[0]));
  CHECK_THROWS_AS(back.tensor("missing"), VersionError);
}

TEST_CASE("checkpoint rejects foreign data") {
  std::stringstream junk("not a checkpoint at all");
  CHECK_THROWS_AS(read_checkpoint(junk), VersionError);
  std::stringstream truncated;
  Checkpoint ckpt;
  ckpt.put("a", Tensor::vector({1.0, 2.0}));
  write_checkpoint(truncated, ckpt);
  std::string bytes = truncated.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(cut), IoError);
}
