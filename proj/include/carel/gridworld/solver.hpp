#pragma once

#include <optional>
#include <vector>

#include "carel/gridworld/world.hpp"

namespace carel::grid {

// Scripted oracle: breadth-first search over (position, direction) for each
// subtask in dependency order, never facing a strict later target early.
// Returns the full action sequence, or nullopt when the mission cannot be
// completed from the given state.
std::optional<std::vector<Action>> solve(const GridWorld& world);

// Next action of the oracle plan from the current state (replans each call).
std::optional<Action> oracle_action(const GridWorld& world);

}  // namespace carel::grid
