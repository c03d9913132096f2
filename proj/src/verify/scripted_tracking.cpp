#include "carel/verify/scripted_tracking.hpp"

#include <cmath>

#include "carel/gridworld/levels.hpp"
#include "carel/gridworld/solver.hpp"

namespace carel::verify {

ScriptedTrackingResult run_scripted_tracking(std::size_t episodes, std::uint64_t seed,
                                             const track::TrackerConfig& base, double low, double high) {
  track::TrackerConfig cfg = base;
  cfg.enabled = true;
  cfg.forced_probability = 1.0;
  ScriptedTrackingResult res;

  for (std::uint64_t s = seed; res.episodes < episodes; ++s) {
    grid::LevelConfig level = grid::default_level_config(grid::Level::GoToSeq);
    level.subtasks = 2 + static_cast<int>(s % 2);
    auto g = grid::generate(grid::Level::GoToSeq, s, grid::HoldoutPolicy::Train, level);
    const auto plan = grid::solve(g.world);
    grid::GridWorld world = g.world;
    for (grid::Action a : *plan) world.step(a);
    const std::vector<int>& done_at = world.completion_steps();

    bool spaced = done_at.front() > static_cast<int>(cfg.warmup_steps);
    for (std::size_t i = 1; i < done_at.size(); ++i) {
      spaced = spaced && done_at[i] - done_at[i - 1] > static_cast<int>(cfg.warmup_steps);
    }
    if (!spaced) continue;

    const auto& words = g.instruction.words;
    const auto parsed = track::split_instruction(words);
    const std::size_t n_sub = parsed.size();
    const std::size_t d = n_sub + 1;
    std::vector<double> V(words.size() * d, 0.0);
    for (std::size_t j = 0; j < words.size(); ++j) V[j * d + n_sub] = 1.0;  // conjunctions, punctuation
    for (std::size_t i = 0; i < n_sub; ++i) {
      for (std::size_t j = parsed[i].span.begin; j < parsed[i].span.end; ++j) {
        V[j * d + n_sub] = 0.0;
        V[j * d + i] = 1.0;
      }
    }
    track::PartialEpisodeScorer scorer(V, words.size(), d, true);
    track::InstructionTracker tracker(cfg, s);
    tracker.reset(words, s);

    ++res.episodes;
    res.subtasks += n_sub;
    std::vector<int> masked_at(n_sub, -1);
    for (int t = 1; t <= world.step_count(); ++t) {
      std::vector<double> xg(d, 0.0);
      double sq = 0.0;
      for (std::size_t i = 0; i < n_sub; ++i) {
        xg[i] = t == done_at[i] ? high : low;
        sq += xg[i] * xg[i];
      }
      xg[n_sub] = std::sqrt(std::max(0.0, 1.0 - sq));
      scorer.set_global(xg);
      const std::size_t history =
          tracker.acceptable() ? tracker.subtasks()[*tracker.acceptable()].score_history.size() : 0;
      const auto ev = tracker.step(scorer.scores(), 0);
      if (!ev || !ev->applied) continue;
      masked_at[ev->subtask] = t;
      if (history < cfg.warmup_steps) ++res.before_warmup;
      for (std::size_t j = 0; j < ev->subtask; ++j) {
        if (masked_at[j] < 0) ++res.out_of_order;
      }
    }
    for (std::size_t i = 0; i < n_sub; ++i) {
      if (masked_at[i] == done_at[i]) {
        ++res.exact;
      } else if (masked_at[i] < 0) {
        ++res.missed;
        res.failures.push_back("seed " + std::to_string(s) + ": subtask " + std::to_string(i) + " never masked");
      } else {
        if (masked_at[i] < done_at[i]) ++res.early;
        res.failures.push_back("seed " + std::to_string(s) + ": subtask " + std::to_string(i) + " masked at step " +
                               std::to_string(masked_at[i]) + ", completed at " + std::to_string(done_at[i]));
      }
    }
  }
  return res;
}

}  // namespace carel::verify
