#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "carel/gridworld/world.hpp"
#include "carel/rng.hpp"

namespace carel::grid {

struct ColorKind {
  Color color = Color::Red;
  Kind kind = Kind::Box;
  friend bool operator==(const ColorKind&, const ColorKind&) = default;
};
using HoldoutSet = std::vector<ColorKind>;

// "yellow:ball,green:key" <-> HoldoutSet
HoldoutSet parse_holdout(std::string_view text);
std::string format_holdout(const HoldoutSet& set);

// train: no instruction target is a held-out pair.
// eval:  every target is a held-out pair when the holdout set has enough pairs
//        of the level's target kind; otherwise at least one is.
enum class HoldoutPolicy : std::uint8_t { Train, Eval };
std::string_view to_string(HoldoutPolicy p);
HoldoutPolicy parse_holdout_policy(std::string_view name);

struct LevelConfig {
  int room_size = 6;    // side length including walls
  int subtasks = 2;     // GoToSeq only
  int distractors = 2;  // extra objects not named by the instruction
  int doors = 2;        // OpenDoorsOrder only
  HoldoutSet holdout;
};

LevelConfig default_level_config(Level level);
HoldoutSet default_holdout(Level level);
// max_steps = 8 * room_size^2.
int max_steps_for(const LevelConfig& cfg);

bool uses_holdout(const MissionSpec& mission, const HoldoutSet& holdout);
// `available` is the number of held-out pairs of the level's target kinds.
bool targets_admissible(const std::vector<ColorKind>& targets, HoldoutPolicy policy, const HoldoutSet& holdout,
                        std::size_t available);
bool mission_admissible(const MissionSpec& mission, HoldoutPolicy policy, const HoldoutSet& holdout);

// Instruction text for a mission: "go to a/the {color} {kind}" clauses joined
// by "and" / ", then"; OpenDoorsOrder missions are stated in their expanded
// go-to/open form.
Instruction describe(const MissionSpec& mission, Rng& rng);

// Lower-cases and splits on whitespace, with ',' and '.' as separate tokens.
std::vector<std::string> tokenize(std::string_view text);

// Every word the templates can emit, in a fixed order.
const std::vector<std::string>& mission_words();

struct GeneratedLevel {
  GridWorld world;
  MissionSpec mission;
  Instruction instruction;
};

// Deterministic in (level, seed, policy, cfg). Every generated mission is
// solvable by the scripted oracle.
GeneratedLevel generate(Level level, std::uint64_t seed, HoldoutPolicy policy, const LevelConfig& cfg);
GeneratedLevel generate(Level level, std::uint64_t seed, HoldoutPolicy policy);

}  // namespace carel::grid
