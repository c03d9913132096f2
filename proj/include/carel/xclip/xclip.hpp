#pragma once

#include <cstddef>
#include <vector>

#include "carel/ndgrad/tape.hpp"

namespace carel::xclip {

using ndgrad::Var;

struct CarelConfig {
  double lambda_c = 0.01;
  double tau = 1.0;  // shared by every AOSM softmax and the contrastive softmax
  double success_fraction = 0.5;
  std::size_t aux_batch_max = 32;
  bool normalize_reps = true;

  void validate() const;  // ParameterError naming the offending field
};

// Local reps X (n x d) with their global x~ (1 x d), and likewise V, v~.
struct EpisodeReps {
  Var X;
  Var x_global;
};
struct InstructionReps {
  Var V;
  Var v_global;
};

struct SimilarityScores {
  // Raw granular scores.
  Var s_ei;  // 1 x 1
  Var s_ew;  // 1 x m
  Var s_oi;  // n x 1
  Var s_ow;  // n x m
  // AOSM aggregates (1 x 1 unless noted).
  Var agg_ew;
  Var agg_oi;
  Var s_instr;  // n x 1, row-wise AOSM of s_ow
  Var s_ep;     // 1 x m, column-wise AOSM of s_ow
  Var agg_ow;
  Var final;
};

// softmax(v / tau)^T v over every element of v (a row or column vector);
// DimensionError when empty, ParameterError when tau <= 0.
Var aosm_aggregate(Var v, double tau);
// AOSM of each row of M: r x 1.
Var aosm_rows(Var M, double tau);

SimilarityScores granular_scores(const EpisodeReps& ep, const InstructionReps& instr);
void aggregate_scores(SimilarityScores& s, double tau);
// granular_scores followed by aggregate_scores.
SimilarityScores similarity(const EpisodeReps& ep, const InstructionReps& instr, double tau);

// N x N matrix of final scores s(ep_i, instr_j).
Var score_matrix(const std::vector<EpisodeReps>& eps, const std::vector<InstructionReps>& instrs, double tau);
// Same matrix as score_matrix, computed as a single tape node with a
// hand-derived backward rule. Episode i owns rows [ep_offsets[i],
// ep_offsets[i+1]) of X_all and row i of x_globals (likewise for
// instructions). Used by training, where N^2 pairs per step make the
// composed form too slow.
Var score_matrix_fused(Var X_all, Var x_globals, const std::vector<std::size_t>& ep_offsets, Var V_all,
                       Var v_globals, const std::vector<std::size_t>& instr_offsets, double tau);
// Offsets [0, r_0, r_0 + r_1, ...] for consecutive blocks of the given sizes.
std::vector<std::size_t> block_offsets(const std::vector<std::size_t>& sizes);

// Symmetric contrastive loss over a score matrix: the mean over i of the
// row-i and column-i log-softmax terms at (i, i), negated.
Var contrastive_loss_from_scores(Var scores, double tau);
// ContractError when N = 0 or the two lists differ in length.
Var contrastive_loss(const std::vector<EpisodeReps>& eps, const std::vector<InstructionReps>& instrs,
                     double tau);

inline double total_loss(double rl_loss, double aux_loss, double lambda_c) { return rl_loss + lambda_c * aux_loss; }

}  // namespace carel::xclip
