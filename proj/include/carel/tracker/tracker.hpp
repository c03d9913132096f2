#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carel/gridworld/world.hpp"
#include "carel/rng.hpp"

namespace carel::track {

using grid::TokenSpan;

enum class ScoreSource : std::uint8_t { EW, OW };
std::string_view to_string(ScoreSource s);
ScoreSource parse_score_source(std::string_view s);  // "E-W" / "O-W" (case-insensitive, dash optional)

struct TrackerConfig {
  bool enabled = false;
  double k = 2.0;
  std::size_t warmup_steps = 3;
  std::uint64_t max_frames = 1'000'000;
  ScoreSource score_source = ScoreSource::EW;
  // Require a positive running mean before a spike can trigger. Off gives
  // the threshold rule exactly as written.
  bool positive_mean_guard = true;
  // Overrides the tanh schedule (tests and audits).
  std::optional<double> forced_probability;

  void validate() const;
};

enum class SubtaskStatus : std::uint8_t { Pending, Acceptable, Masked };

struct SubtaskState {
  TokenSpan span;
  // The conjunction between this subtask and the next one; masked together
  // with the subtask. The last subtask has none.
  std::optional<TokenSpan> conjunction;
  SubtaskStatus status = SubtaskStatus::Pending;
  std::vector<double> score_history;
  double running_mean = 0.0;

  void record(double score);
};

// Splits on "and", "then" and ", then". Subtask spans are the clauses
// between conjunctions; trailing punctuation belongs to the last clause.
// The first subtask starts out acceptable. ParseError when a clause is empty.
std::vector<SubtaskState> split_instruction(const std::vector<std::string>& tokens);

// Partial-episode scores against every instruction token: s_ew[j] = v_j . x~
// and s_ow_max[j] = max_t x_t . v_j.
struct TokenScores {
  std::vector<double> s_ew;
  std::vector<double> s_ow_max;
};

// E-W: mean of s_ew over the span; O-W: mean over the span of s_ow_max.
// ContractError when the subtask is masked or the span is out of range.
double subtask_score(const TokenScores& scores, const SubtaskState& subtask, ScoreSource source);

// Triggered iff the history holds at least `warmup` scores, the running mean
// is positive (when guarded) and new_score >= k * running mean. new_score is
// appended to the history afterwards either way.
bool spike_check(SubtaskState& state, double new_score, double k, std::size_t warmup, bool guard = true);

double masking_probability(std::uint64_t current_frame, std::uint64_t max_frames);

// Replaces the span and its conjunction with <mask>, marks the subtask masked
// and makes the next pending subtask acceptable. ContractError on a subtask
// that is already masked.
void apply_mask(std::vector<std::string>& tokens, std::vector<SubtaskState>& subtasks, std::size_t index);

inline constexpr std::string_view kMaskToken = "<mask>";

// Incremental scores of a growing episode against fixed token reps V (m x d,
// row-major). x~ is the running mean of the x_t rows, renormalised when
// `normalize` is set.
class PartialEpisodeScorer {
 public:
  struct Snapshot {
    std::vector<double> V, sum, global, ow_max;
    std::size_t m = 0, d = 0, steps = 0;
    bool normalize = true;
  };
  Snapshot snapshot() const { return {V_, sum_, global_, ow_max_, m_, d_, steps_, normalize_}; }
  static PartialEpisodeScorer restore(const Snapshot& s);

  PartialEpisodeScorer() = default;
  PartialEpisodeScorer(std::vector<double> V, std::size_t rows, std::size_t dim, bool normalize);

  void add(std::span<const double> x_t);
  // Replaces the running-mean global with a given x~ (scripted harnesses).
  void set_global(std::span<const double> x_global);
  std::size_t steps() const { return steps_; }
  TokenScores scores() const;

 private:
  std::vector<double> V_;
  std::size_t m_ = 0;
  std::size_t d_ = 0;
  bool normalize_ = true;
  std::vector<double> sum_;
  std::vector<double> global_;
  std::vector<double> ow_max_;
  std::size_t steps_ = 0;
};

struct MaskEvent {
  std::uint64_t episode = 0;
  int step = 0;  // 1-based episode step
  std::size_t subtask = 0;
  double score = 0.0;
  double running_mean = 0.0;
  double probability = 0.0;
  double draw = 0.0;
  bool applied = false;
};

// Per-episode instruction tracker (one per environment).
class InstructionTracker {
 public:
  InstructionTracker() = default;
  InstructionTracker(TrackerConfig cfg, std::uint64_t seed);

  // Episode start: parse the original instruction and clear all state.
  void reset(const std::vector<std::string>& original, std::uint64_t episode_id);

  // One environment step. With tracking disabled nothing happens. Otherwise
  // the acceptable subtask is scored, checked for a spike and, when
  // triggered, masked with the scheduled probability. Returns the spike
  // record whenever the check triggered.
  std::optional<MaskEvent> step(const TokenScores& scores, std::uint64_t frame);

  const std::vector<std::string>& instruction() const { return masked_; }
  const std::vector<SubtaskState>& subtasks() const { return subtasks_; }
  std::optional<std::size_t> acceptable() const;
  std::size_t masked_count() const;
  const TrackerConfig& config() const { return cfg_; }

  struct Snapshot {
    std::string rng;
    std::vector<std::string> original, masked;
    std::vector<SubtaskState> subtasks;
    std::uint64_t episode = 0;
    int step = 0;
  };
  Snapshot snapshot() const { return {rng_.state(), original_, masked_, subtasks_, episode_, step_}; }
  void restore(const Snapshot& s);

 private:
  TrackerConfig cfg_;
  Rng rng_;
  std::vector<std::string> original_;
  std::vector<std::string> masked_;
  std::vector<SubtaskState> subtasks_;
  std::uint64_t episode_ = 0;
  int step_ = 0;
};

}  // namespace carel::track
