#include "carel/xclip/xclip.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "carel/errors.hpp"
#include "carel/ndgrad/ops.hpp"

namespace carel::xclip {

namespace nd = ndgrad;
using ndgrad::Tape;
using ndgrad::Tensor;

void CarelConfig::validate() const {
  if (!(lambda_c >= 0.0) || !std::isfinite(lambda_c)) throw ParameterError("lambda_c must be a finite value >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("tau must be a finite value > 0");
  if (!(success_fraction > 0.0 && success_fraction <= 1.0)) {
    throw ParameterError("success_fraction must lie in (0, 1]");
  }
  if (aux_batch_max < 2) throw ParameterError("aux_batch_max must be at least 2");
}

Var aosm_aggregate(Var v, double tau) {
  if (v.rows() != 1 && v.cols() != 1) {
    throw DimensionError("AOSM expects a vector, got " + nd::shape_string(v.shape()));
  }
  return nd::sum(nd::mul(nd::softmax_temp(v, tau), v));
}

Var aosm_rows(Var M, double tau) { return nd::sum_axis(nd::mul(nd::softmax_rows(M, tau), M), 1); }

SimilarityScores granular_scores(const EpisodeReps& ep, const InstructionReps& instr) {
  const std::size_t d = ep.X.cols();
  if (ep.x_global.cols() != d || instr.V.cols() != d || instr.v_global.cols() != d || ep.x_global.rows() != 1 ||
      instr.v_global.rows() != 1) {
    throw DimensionError("representation widths disagree: X " + nd::shape_string(ep.X.shape()) + ", x_global " +
                         nd::shape_string(ep.x_global.shape()) + ", V " + nd::shape_string(instr.V.shape()) +
                         ", v_global " + nd::shape_string(instr.v_global.shape()));
  }
  SimilarityScores s;
  const Var Vt = nd::transpose(instr.V);
  const Var vt = nd::transpose(instr.v_global);
  s.s_ei = nd::matmul(ep.x_global, vt);
  s.s_ew = nd::matmul(ep.x_global, Vt);
  s.s_oi = nd::matmul(ep.X, vt);
  s.s_ow = nd::matmul(ep.X, Vt);
  return s;
}

void aggregate_scores(SimilarityScores& s, double tau) {
  s.agg_ew = aosm_aggregate(s.s_ew, tau);
  s.agg_oi = aosm_aggregate(s.s_oi, tau);
  s.s_instr = aosm_rows(s.s_ow, tau);
  s.s_ep = nd::transpose(aosm_rows(nd::transpose(s.s_ow), tau));
  s.agg_ow = nd::scale(nd::add(aosm_aggregate(s.s_ep, tau), aosm_aggregate(s.s_instr, tau)), 0.5);
  const Var total = nd::add(nd::add(nd::reshape(s.s_ei, {}), s.agg_ew), nd::add(s.agg_oi, s.agg_ow));
  s.final = nd::scale(total, 0.25);
}

SimilarityScores similarity(const EpisodeReps& ep, const InstructionReps& instr, double tau) {
  SimilarityScores s = granular_scores(ep, instr);
  aggregate_scores(s, tau);
  return s;
}

Var score_matrix(const std::vector<EpisodeReps>& eps, const std::vector<InstructionReps>& instrs, double tau) {
  std::vector<Var> cells;
  cells.reserve(eps.size() * instrs.size());
  for (const auto& ep : eps) {
    for (const auto& in : instrs) cells.push_back(similarity(ep, in, tau).final);
  }
  return nd::stack_scalars(cells, eps.size(), instrs.size());
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstBlock = Eigen::Map<const RowMat>;
using MutBlock = Eigen::Map<RowMat>;
using Col = Eigen::VectorXd;

// a = softmax(v/tau)^T v and, into w, its derivative p_k (1 + (v_k - a)/tau).
double aosm_with_slope(const Col& v, double tau, Col* w) {
  const double hi = v.maxCoeff();
  Col p = ((v.array() - hi) / tau).exp();
  p /= p.sum();
  const double a = p.dot(v);
  if (w) *w = p.array() * (1.0 + (v.array() - a) / tau);
  return a;
}

struct PairGrads {
  RowMat dX, dV;
  Col dxg, dvg;
};

// Final score of one pair; when `grads` is given, also d(score)/d(inputs)
// scaled by g.
double pair_score(const ConstBlock& X, const Col& xg, const ConstBlock& V, const Col& vg, double tau, double g,
                  PairGrads* grads) {
  const std::size_t n = static_cast<std::size_t>(X.rows()), m = static_cast<std::size_t>(V.rows());
  const double s_ei = xg.dot(vg);
  const Col s_ew = V * xg;
  const Col s_oi = X * vg;
  const RowMat s_ow = X * V.transpose();
  Col w_ew, w_oi, w_instr, w_ep;
  const bool slopes = grads != nullptr;
  const double a_ew = aosm_with_slope(s_ew, tau, slopes ? &w_ew : nullptr);
  const double a_oi = aosm_with_slope(s_oi, tau, slopes ? &w_oi : nullptr);
  Col s_instr(n), s_ep(m);
  std::vector<Col> w_rows(slopes ? n : 0), w_cols(slopes ? m : 0);
  for (std::size_t i = 0; i < n; ++i) {
    s_instr[i] = aosm_with_slope(s_ow.row(i).transpose(), tau, slopes ? &w_rows[i] : nullptr);
  }
  for (std::size_t j = 0; j < m; ++j) s_ep[j] = aosm_with_slope(s_ow.col(j), tau, slopes ? &w_cols[j] : nullptr);
  const double a_ep = aosm_with_slope(s_ep, tau, slopes ? &w_ep : nullptr);
  const double a_instr = aosm_with_slope(s_instr, tau, slopes ? &w_instr : nullptr);
  const double score = 0.25 * (s_ei + a_ew + a_oi + 0.5 * (a_ep + a_instr));
  if (!grads) return score;

  const double g_ei = 0.25 * g;
  const Col g_ew = 0.25 * g * w_ew;
  const Col g_oi = 0.25 * g * w_oi;
  const Col g_ep = 0.125 * g * w_ep;
  const Col g_instr = 0.125 * g * w_instr;
  RowMat G(n, m);
  for (std::size_t i = 0; i < n; ++i) G.row(i) = g_instr[i] * w_rows[i].transpose();
  for (std::size_t j = 0; j < m; ++j) G.col(j) += g_ep[j] * w_cols[j];
  grads->dX = G * V + g_oi * vg.transpose();
  grads->dV = G.transpose() * X + g_ew * xg.transpose();
  grads->dxg = V.transpose() * g_ew + g_ei * vg;
  grads->dvg = X.transpose() * g_oi + g_ei * xg;
  return score;
}

void check_offsets(const std::vector<std::size_t>& offsets, std::size_t blocks, std::size_t rows, const char* what) {
  if (offsets.size() != blocks + 1 || offsets.front() != 0 || offsets.back() != rows) {
    throw DimensionError(std::string(what) + " offsets do not partition the local rows");
  }
  for (std::size_t i = 0; i < blocks; ++i) {
    if (offsets[i + 1] <= offsets[i]) throw DimensionError(std::string(what) + " block " + std::to_string(i) + " is empty");
  }
}

}  // namespace

std::vector<std::size_t> block_offsets(const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> out{0};
  for (std::size_t s : sizes) out.push_back(out.back() + s);
  return out;
}

Var score_matrix_fused(Var X_all, Var x_globals, const std::vector<std::size_t>& ep_offsets, Var V_all,
                       Var v_globals, const std::vector<std::size_t>& instr_offsets, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("tau must be positive and finite");
  const std::size_t d = X_all.cols();
  const std::size_t ne = x_globals.rows(), ni = v_globals.rows();
  if (x_globals.cols() != d || V_all.cols() != d || v_globals.cols() != d) {
    throw DimensionError("representation widths disagree in the fused score matrix");
  }
  check_offsets(ep_offsets, ne, X_all.rows(), "episode");
  check_offsets(instr_offsets, ni, V_all.rows(), "instruction");

  const std::size_t ix = X_all.id(), ixg = x_globals.id(), iv = V_all.id(), ivg = v_globals.id();
  auto evaluate = [=](const Tensor& X, const Tensor& XG, const Tensor& Vt, const Tensor& VG, const Tensor* g,
                      Tensor* gX, Tensor* gXG, Tensor* gV, Tensor* gVG) {
    Tensor out({ne, ni});
    PairGrads pg;
    for (std::size_t i = 0; i < ne; ++i) {
      const ConstBlock Xi(X.storage().data() + ep_offsets[i] * d, static_cast<Eigen::Index>(ep_offsets[i + 1] - ep_offsets[i]),
                          static_cast<Eigen::Index>(d));
      const Col xg = Eigen::Map<const Col>(XG.storage().data() + i * d, static_cast<Eigen::Index>(d));
      for (std::size_t j = 0; j < ni; ++j) {
        const ConstBlock Vj(Vt.storage().data() + instr_offsets[j] * d,
                            static_cast<Eigen::Index>(instr_offsets[j + 1] - instr_offsets[j]), static_cast<Eigen::Index>(d));
        const Col vg = Eigen::Map<const Col>(VG.storage().data() + j * d, static_cast<Eigen::Index>(d));
        if (!g) {
          out.at(i, j) = pair_score(Xi, xg, Vj, vg, tau, 0.0, nullptr);
          continue;
        }
        const double gij = g->at(i, j);
        if (gij == 0.0) continue;
        pair_score(Xi, xg, Vj, vg, tau, gij, &pg);
        if (gX) MutBlock(gX->storage().data() + ep_offsets[i] * d, Xi.rows(), Xi.cols()) += pg.dX;
        if (gV) MutBlock(gV->storage().data() + instr_offsets[j] * d, Vj.rows(), Vj.cols()) += pg.dV;
        if (gXG) Eigen::Map<Col>(gXG->storage().data() + i * d, static_cast<Eigen::Index>(d)) += pg.dxg;
        if (gVG) Eigen::Map<Col>(gVG->storage().data() + j * d, static_cast<Eigen::Index>(d)) += pg.dvg;
      }
    }
    return out;
  };

  Tensor out = evaluate(X_all.value(), x_globals.value(), V_all.value(), v_globals.value(), nullptr, nullptr, nullptr,
                        nullptr, nullptr);
  if (!out.all_finite()) throw NumericError("fused score matrix produced a non-finite value");
  Tape& tape = *X_all.tape();
  return tape.record("score_matrix_fused", std::move(out), {X_all, x_globals, V_all, v_globals},
                     [=](Tape& t, const Tensor& g, const Tensor&) {
                       evaluate(t.value_at(ix), t.value_at(ixg), t.value_at(iv), t.value_at(ivg), &g,
                                t.accumulator(ix), t.accumulator(ixg), t.accumulator(iv), t.accumulator(ivg));
                     });
}

Var contrastive_loss_from_scores(Var scores, double tau) {
  const std::size_t n = scores.rows();
  if (n == 0 || scores.cols() != n) throw ContractError("contrastive loss needs a square, non-empty score matrix");
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  const Var rows = nd::pick(nd::log_softmax_rows(scores, tau), diag);
  const Var cols = nd::pick(nd::log_softmax_rows(nd::transpose(scores), tau), diag);
  return nd::scale(nd::add(nd::sum(rows), nd::sum(cols)), -1.0 / static_cast<double>(n));
}

Var contrastive_loss(const std::vector<EpisodeReps>& eps, const std::vector<InstructionReps>& instrs, double tau) {
  if (eps.empty()) throw ContractError("contrastive loss needs at least one episode-instruction pair");
  if (eps.size() != instrs.size()) {
    throw ContractError("got " + std::to_string(eps.size()) + " episodes but " + std::to_string(instrs.size()) +
                        " instructions");
  }
  return contrastive_loss_from_scores(score_matrix(eps, instrs, tau), tau);
}

}  // namespace carel::xclip
