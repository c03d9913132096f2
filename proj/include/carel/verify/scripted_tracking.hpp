#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "carel/tracker/tracker.hpp"

namespace carel::verify {

// Tracker run on oracle-solved gridworld episodes with hand-built reps: the
// tokens of subtask i are the unit vector e_i, and the partial-episode global
// x~ has component i equal to `low` on every step except the ground-truth
// completion step of subtask i, where it is `high`. Only episodes whose
// completions are at least warmup + 1 steps apart are used.
struct ScriptedTrackingResult {
  std::size_t episodes = 0;
  std::size_t subtasks = 0;
  std::size_t exact = 0;         // masks fired exactly at the completion step
  std::size_t early = 0;         // fired before its completion step
  std::size_t before_warmup = 0; // fired with fewer than warmup scores recorded
  std::size_t out_of_order = 0;  // a later subtask masked before an earlier one
  std::size_t missed = 0;
  std::vector<std::string> failures;

  bool all_exact() const { return exact == subtasks && early == 0 && before_warmup == 0 && out_of_order == 0; }
};

ScriptedTrackingResult run_scripted_tracking(std::size_t episodes, std::uint64_t seed,
                                             const track::TrackerConfig& cfg, double low = 0.1, double high = 0.9);

}  // namespace carel::verify
