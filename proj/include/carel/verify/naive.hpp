#pragma once

#include <vector>

// Straight-loop reference evaluation of the similarity, AOSM and contrastive
// formulas. Shares no code with the tape-based implementation; used by
// `carel oracle-check` and the tests.
namespace carel::verify {

using Matrix = std::vector<std::vector<double>>;  // row-major rows
using Vector = std::vector<double>;

struct NaiveEpisode {
  Matrix X;  // n rows of width d
  Vector x_global;
};
struct NaiveInstruction {
  Matrix V;  // m rows of width d
  Vector v_global;
};

struct NaiveScores {
  double s_ei = 0.0;
  Vector s_ew;  // m
  Vector s_oi;  // n
  Matrix s_ow;  // n x m
  double agg_ew = 0.0;
  double agg_oi = 0.0;
  Vector s_instr;  // n
  Vector s_ep;     // m
  double agg_ow = 0.0;
  double final = 0.0;
};

double naive_aosm(const Vector& v, double tau);
NaiveScores naive_scores(const NaiveEpisode& ep, const NaiveInstruction& instr, double tau);
Matrix naive_score_matrix(const std::vector<NaiveEpisode>& eps, const std::vector<NaiveInstruction>& instrs,
                          double tau);
double naive_contrastive_from_scores(const Matrix& scores, double tau);
double naive_contrastive(const std::vector<NaiveEpisode>& eps, const std::vector<NaiveInstruction>& instrs,
                         double tau);

}  // namespace carel::verify
