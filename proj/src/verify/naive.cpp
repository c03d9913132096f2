#include "carel/verify/naive.hpp"

#include <cmath>

namespace carel::verify {

namespace {

double dot(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// log(sum_j exp(v_j / tau)), shifted by the maximum.
double log_sum_exp(const Vector& v, double tau) {
  double hi = v[0] / tau;
  for (double x : v) hi = std::max(hi, x / tau);
  double s = 0.0;
  for (double x : v) s += std::exp(x / tau - hi);
  return hi + std::log(s);
}

}  // namespace

double naive_aosm(const Vector& v, double tau) {
  const double lse = log_sum_exp(v, tau);
  double out = 0.0;
  for (double x : v) out += std::exp(x / tau - lse) * x;
  return out;
}

NaiveScores naive_scores(const NaiveEpisode& ep, const NaiveInstruction& instr, double tau) {
  const std::size_t n = ep.X.size();
  const std::size_t m = instr.V.size();
  NaiveScores s;
  s.s_ei = dot(ep.x_global, instr.v_global);
  for (std::size_t j = 0; j < m; ++j) s.s_ew.push_back(dot(instr.V[j], ep.x_global));
  for (std::size_t i = 0; i < n; ++i) s.s_oi.push_back(dot(ep.X[i], instr.v_global));
  s.s_ow.assign(n, Vector(m));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) s.s_ow[i][j] = dot(ep.X[i], instr.V[j]);
  }
  s.agg_ew = naive_aosm(s.s_ew, tau);
  s.agg_oi = naive_aosm(s.s_oi, tau);
  for (std::size_t i = 0; i < n; ++i) s.s_instr.push_back(naive_aosm(s.s_ow[i], tau));
  for (std::size_t j = 0; j < m; ++j) {
    Vector column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = s.s_ow[i][j];
    s.s_ep.push_back(naive_aosm(column, tau));
  }
  s.agg_ow = 0.5 * (naive_aosm(s.s_ep, tau) + naive_aosm(s.s_instr, tau));
  s.final = 0.25 * (s.s_ei + s.agg_ew + s.agg_oi + s.agg_ow);
  return s;
}

Matrix naive_score_matrix(const std::vector<NaiveEpisode>& eps, const std::vector<NaiveInstruction>& instrs,
                          double tau) {
  Matrix out(eps.size(), Vector(instrs.size()));
  for (std::size_t i = 0; i < eps.size(); ++i) {
    for (std::size_t j = 0; j < instrs.size(); ++j) out[i][j] = naive_scores(eps[i], instrs[j], tau).final;
  }
  return out;
}

double naive_contrastive_from_scores(const Matrix& scores, double tau) {
  const std::size_t n = scores.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Vector column(n);
    for (std::size_t k = 0; k < n; ++k) column[k] = scores[k][i];
    total += scores[i][i] / tau - log_sum_exp(scores[i], tau);
    total += scores[i][i] / tau - log_sum_exp(column, tau);
  }
  return -total / static_cast<double>(n);
}

double naive_contrastive(const std::vector<NaiveEpisode>& eps, const std::vector<NaiveInstruction>& instrs,
                         double tau) {
  return naive_contrastive_from_scores(naive_score_matrix(eps, instrs, tau), tau);
}

}  // namespace carel::verify
