#include <doctest.h>

#include <cmath>
#include <numeric>

#include "carel/errors.hpp"
#include "carel/ndgrad/ops.hpp"
#include "carel/verify/naive.hpp"
#include "carel/xclip/xclip.hpp"
#include "test_support.hpp"

using namespace carel;
using namespace carel::xclip;
using carel::testing::random_tensor;
using ndgrad::Tape;
using ndgrad::Tensor;
namespace nd = carel::ndgrad;

namespace {

verify::Matrix to_matrix(const Tensor& t) {
  verify::Matrix m(t.rows(), verify::Vector(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

verify::Vector to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor unit_rows(Rng& rng, std::size_t r, std::size_t d) {
  Tensor t = random_tensor(rng, {r, d});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t.at(i, c) * t.at(i, c);
    for (std::size_t c = 0; c < d; ++c) t.at(i, c) /= std::sqrt(s);
  }
  return t;
}

double aosm_value(const std::vector<double>& v, double tau) {
  Tape tape;
  return aosm_aggregate(tape.constant(Tensor::vector(v)), tau).value().item();
}

}  // namespace

TEST_CASE("AOSM examples") {
  CHECK(aosm_value({0.5, 0.5, 0.5}, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(aosm_value({0.0, std::log(3.0)}, 1.0) - 0.75 * std::log(3.0)) < 1e-12);
  CHECK(std::abs(aosm_value({0.0, std::log(3.0)}, 1.0) - 0.823959) < 1e-6);
  Tape tape;
  CHECK_THROWS_AS(aosm_aggregate(tape.constant(Tensor::vector({1.0})), 0.0), ParameterError);
}

TEST_CASE("AOSM properties over random vectors") {
  Rng rng(11);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t len = 1 + rng.below(9);
    std::vector<double> v(len);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    const double tau = std::exp(rng.uniform(-3.0, 3.0));
    const double a = aosm_value(v, tau);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    REQUIRE(a >= *lo - 1e-12);
    REQUIRE(a <= *hi + 1e-12);
    const double c = rng.uniform(-5.0, 5.0);
    std::vector<double> shifted(v);
    for (double& x : shifted) x += c;
    REQUIRE(std::abs(aosm_value(shifted, tau) - (a + c)) < 1e-12);
  }
}

TEST_CASE("AOSM temperature limits") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 2 + rng.below(8);
    std::vector<double> v(len);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    const double mx = *std::max_element(v.begin(), v.end());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(len);
    CHECK(std::abs(aosm_value(v, 1e-4) - mx) < 1e-3);
    CHECK(std::abs(aosm_value(v, 1e6) - mean) < 1e-3);
  }
}

TEST_CASE("granular scores") {
  Rng rng(13);
  SUBCASE("degenerate alignment") {
    const Tensor u = unit_rows(rng, 1, 4);
    Tensor X({3, 4}), V({5, 4});
    for (std::size_t r = 0; r < 3; ++r) std::copy(u.values().begin(), u.values().end(), X.values().begin() + 4 * r);
    for (std::size_t r = 0; r < 5; ++r) std::copy(u.values().begin(), u.values().end(), V.values().begin() + 4 * r);
    Tape tape;
    const auto s = similarity({tape.constant(X), tape.constant(u)}, {tape.constant(V), tape.constant(u)}, 1.0);
    CHECK(s.s_ei.value().item() == doctest::Approx(1.0).epsilon(1e-14));
    for (double v : s.s_ew.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
    for (double v : s.s_oi.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
    for (double v : s.s_ow.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(s.final.value().item() == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("orthogonal globals") {
    Tape tape;
    const Var x = tape.constant(Tensor::matrix({{1, 0, 0}}));
    const Var v = tape.constant(Tensor::matrix({{0, 1, 0}}));
    CHECK(granular_scores({x, x}, {v, v}).s_ei.value().item() == 0.0);
  }
  SUBCASE("single element collapse") {
    const Tensor x = unit_rows(rng, 1, 6), v = unit_rows(rng, 1, 6);
    Tape tape;
    const auto s = similarity({tape.constant(x), tape.constant(x)}, {tape.constant(v), tape.constant(v)}, 1.0);
    CHECK(std::abs(s.final.value().item() - s.s_ei.value().item()) < 1e-14);
  }
  SUBCASE("shapes and width mismatch") {
    Tape tape;
    const auto s = granular_scores({tape.constant(Tensor({3, 5})), tape.constant(Tensor({1, 5}))},
                                   {tape.constant(Tensor({4, 5})), tape.constant(Tensor({1, 5}))});
    CHECK(s.s_ew.shape() == nd::Shape{1, 4});
    CHECK(s.s_oi.shape() == nd::Shape{3, 1});
    CHECK(s.s_ow.shape() == nd::Shape{3, 4});
    CHECK_THROWS_AS(granular_scores({tape.constant(Tensor({3, 5})), tape.constant(Tensor({1, 5}))},
                                    {tape.constant(Tensor({4, 6})), tape.constant(Tensor({1, 6}))}),
                    DimensionError);
  }
  SUBCASE("against the loop oracle") {
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor X = random_tensor(rng, {3, 5}), xg = random_tensor(rng, {1, 5});
      const Tensor V = random_tensor(rng, {4, 5}), vg = random_tensor(rng, {1, 5});
      const double tau = rng.uniform(0.2, 2.0);
      Tape tape;
      const auto s = similarity({tape.constant(X), tape.constant(xg)}, {tape.constant(V), tape.constant(vg)}, tau);
      const auto o = verify::naive_scores({to_matrix(X), to_vector(xg)}, {to_matrix(V), to_vector(vg)}, tau);
      CHECK(std::abs(s.s_ei.value().item() - o.s_ei) < 1e-12);
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s.s_ew.value()[j] - o.s_ew[j]) < 1e-12);
      for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s.s_oi.value()[i] - o.s_oi[i]) < 1e-12);
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s.s_ow.value().at(i, j) - o.s_ow[i][j]) < 1e-12);
      }
      CHECK(std::abs(s.final.value().item() - o.final) < 1e-12);
    }
  }
}

TEST_CASE("aggregated scores") {
  Rng rng(14);
  SUBCASE("all-ones raw scores") {
    Tape tape;
    SimilarityScores s;
    s.s_ei = tape.constant(Tensor({1, 1}, 1.0));
    s.s_ew = tape.constant(Tensor({1, 6}, 1.0));
    s.s_oi = tape.constant(Tensor({4, 1}, 1.0));
    s.s_ow = tape.constant(Tensor({4, 6}, 1.0));
    aggregate_scores(s, 1.0);
    for (Var v : {s.agg_ew, s.agg_oi, s.agg_ow, s.final}) CHECK(v.value().item() == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("random 4x6 S_O-W against the literal formulas") {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor ow = random_tensor(rng, {4, 6});
      const double tau = rng.uniform(0.3, 3.0);
      Tape tape;
      SimilarityScores s;
      s.s_ei = tape.constant(Tensor({1, 1}, 0.2));
      s.s_ew = tape.constant(random_tensor(rng, {1, 6}));
      s.s_oi = tape.constant(random_tensor(rng, {4, 1}));
      s.s_ow = tape.constant(ow);
      aggregate_scores(s, tau);
      // s_instr[i] = sum_j softmax_j(ow[i][.]/tau) ow[i][j]; s_ep likewise per column.
      std::vector<double> instr(4), ep(6);
      for (std::size_t i = 0; i < 4; ++i) {
        double z = 0.0, acc = 0.0;
        for (std::size_t j = 0; j < 6; ++j) z += std::exp(ow.at(i, j) / tau);
        for (std::size_t j = 0; j < 6; ++j) acc += std::exp(ow.at(i, j) / tau) / z * ow.at(i, j);
        instr[i] = acc;
        CHECK(std::abs(s.s_instr.value()[i] - acc) < 1e-12);
      }
      for (std::size_t j = 0; j < 6; ++j) {
        double z = 0.0, acc = 0.0;
        for (std::size_t i = 0; i < 4; ++i) z += std::exp(ow.at(i, j) / tau);
        for (std::size_t i = 0; i < 4; ++i) acc += std::exp(ow.at(i, j) / tau) / z * ow.at(i, j);
        ep[j] = acc;
        CHECK(std::abs(s.s_ep.value()[j] - acc) < 1e-12);
      }
      auto direct_aosm = [tau](const std::vector<double>& v) {
        double z = 0.0, acc = 0.0;
        for (double x : v) z += std::exp(x / tau);
        for (double x : v) acc += std::exp(x / tau) / z * x;
        return acc;
      };
      CHECK(std::abs(s.agg_ow.value().item() - 0.5 * (direct_aosm(ep) + direct_aosm(instr))) < 1e-12);
    }
  }
}

TEST_CASE("contrastive loss examples") {
  Tape tape;
  const double tau = 1.0;
  CHECK(contrastive_loss_from_scores(tape.constant(Tensor::matrix({{0.37}})), tau).value().item() == 0.0);
  for (std::size_t n : {2, 4, 8}) {
    const double l = contrastive_loss_from_scores(tape.constant(Tensor({n, n}, 0.3)), tau).value().item();
    CHECK(std::abs(l - 2.0 * std::log(static_cast<double>(n))) < 1e-12);
  }
  const double l = contrastive_loss_from_scores(tape.constant(Tensor::matrix({{2, 0}, {0, 2}})), tau).value().item();
  CHECK(std::abs(l - 2.0 * std::log(1.0 + std::exp(-2.0))) < 1e-12);
  CHECK(std::abs(l - 0.253856) < 1e-6);
  CHECK_THROWS_AS(contrastive_loss({}, {}, tau), ContractError);
  CHECK(total_loss(1.0, 2.0, 0.01) == doctest::Approx(1.02).epsilon(1e-15));
  CHECK(total_loss(1.5, 7.0, 0.0) == 1.5);
}

TEST_CASE("contrastive loss invariants") {
  Rng rng(15);
  SUBCASE("batch permutation") {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor S = random_tensor(rng, {5, 5});
      Tensor P({5, 5});
      std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
      for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) P.at(i, j) = S.at(perm[i], perm[j]);
      }
      Tape tape;
      const double a = contrastive_loss_from_scores(tape.constant(S), 1.0).value().item();
      const double b = contrastive_loss_from_scores(tape.constant(P), 1.0).value().item();
      CHECK(std::abs(a - b) < 1e-12);
    }
  }
  SUBCASE("raising a diagonal score lowers the loss") {
    for (int trial = 0; trial < 50; ++trial) {
      Tensor S = random_tensor(rng, {4, 4});
      const std::size_t i = rng.below(4);
      Tape t1;
      const double before = contrastive_loss_from_scores(t1.constant(S), 1.0).value().item();
      S.at(i, i) += rng.uniform(0.01, 1.0);
      Tape t2;
      const double after = contrastive_loss_from_scores(t2.constant(S), 1.0).value().item();
      CHECK(after < before);
    }
  }
}

TEST_CASE("contrastive loss gradients and the loop oracle") {
  Rng rng(16);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t N = 3, d = 8;
    std::vector<Tensor> inputs;
    std::vector<std::size_t> ns, ms;
    for (std::size_t i = 0; i < N; ++i) {
      ns.push_back(1 + rng.below(5));
      ms.push_back(1 + rng.below(7));
      inputs.push_back(unit_rows(rng, ns.back(), d));
      inputs.push_back(unit_rows(rng, 1, d));
      inputs.push_back(unit_rows(rng, ms.back(), d));
      inputs.push_back(unit_rows(rng, 1, d));
    }
    const double tau = rng.uniform(0.5, 1.5);
    const testing::LossBuilder build = [&](const std::vector<Var>& v) {
      std::vector<EpisodeReps> eps;
      std::vector<InstructionReps> ins;
      for (std::size_t i = 0; i < N; ++i) {
        eps.push_back({v[4 * i], v[4 * i + 1]});
        ins.push_back({v[4 * i + 2], v[4 * i + 3]});
      }
      return contrastive_loss(eps, ins, tau);
    };
    CHECK(testing::max_gradient_error(build, inputs) < 1e-4);

    std::vector<verify::NaiveEpisode> neps;
    std::vector<verify::NaiveInstruction> nins;
    for (std::size_t i = 0; i < N; ++i) {
      neps.push_back({to_matrix(inputs[4 * i]), to_vector(inputs[4 * i + 1])});
      nins.push_back({to_matrix(inputs[4 * i + 2]), to_vector(inputs[4 * i + 3])});
    }
    CHECK(std::abs(testing::evaluate_loss(build, inputs) - verify::naive_contrastive(neps, nins, tau)) < 1e-10);
  }
}

TEST_CASE("fused score matrix agrees with the composed one") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t N = 1 + rng.below(4), d = 6;
    std::vector<std::size_t> ns, ms;
    for (std::size_t i = 0; i < N; ++i) {
      ns.push_back(1 + rng.below(5));
      ms.push_back(1 + rng.below(7));
    }
    const std::size_t R = std::accumulate(ns.begin(), ns.end(), std::size_t{0});
    const std::size_t M = std::accumulate(ms.begin(), ms.end(), std::size_t{0});
    const std::vector<Tensor> inputs = {unit_rows(rng, R, d), unit_rows(rng, N, d), unit_rows(rng, M, d),
                                        unit_rows(rng, N, d)};
    const double tau = rng.uniform(0.5, 1.5);
    const auto eo = block_offsets(ns), io = block_offsets(ms);
    const Tensor W = random_tensor(rng, {N, N});

    const testing::LossBuilder fused = [&](const std::vector<Var>& v) {
      return nd::sum(nd::mul(score_matrix_fused(v[0], v[1], eo, v[2], v[3], io, tau), v[0].tape()->constant(W)));
    };
    const testing::LossBuilder composed = [&](const std::vector<Var>& v) {
      std::vector<EpisodeReps> eps;
      std::vector<InstructionReps> ins;
      for (std::size_t i = 0; i < N; ++i) {
        eps.push_back({nd::slice_rows(v[0], eo[i], eo[i + 1]), nd::slice_rows(v[1], i, i + 1)});
        ins.push_back({nd::slice_rows(v[2], io[i], io[i + 1]), nd::slice_rows(v[3], i, i + 1)});
      }
      return nd::sum(nd::mul(score_matrix(eps, ins, tau), v[0].tape()->constant(W)));
    };
    CHECK(std::abs(testing::evaluate_loss(fused, inputs) - testing::evaluate_loss(composed, inputs)) < 1e-12);
    CHECK(testing::max_gradient_error(fused, inputs) < 1e-5);

    // Gradients of the two forms agree entry by entry.
    std::vector<Tensor> ga, gb;
    for (const auto* build : {&fused, &composed}) {
      Tape tape;
      std::vector<Var> vars;
      for (const Tensor& t : inputs) vars.push_back(tape.variable(t));
      tape.backward((*build)(vars));
      for (const Var& v : vars) (build == &fused ? ga : gb).push_back(tape.grad(v));
    }
    for (std::size_t k = 0; k < ga.size(); ++k) {
      for (std::size_t e = 0; e < ga[k].size(); ++e) CHECK(std::abs(ga[k][e] - gb[k][e]) < 1e-12);
    }
  }
  Tape tape;
  const Var X = tape.constant(Tensor({3, 4}));
  const Var g = tape.constant(Tensor({2, 4}));
  CHECK_THROWS_AS(score_matrix_fused(X, g, {0, 3, 3}, X, g, {0, 1, 3}, 1.0), DimensionError);
}
