#include "carel/gridworld/levels.hpp"

#include <algorithm>
#include <cctype>
#include <span>
#include <sstream>

#include "carel/errors.hpp"
#include "carel/gridworld/solver.hpp"

namespace carel::grid {
namespace {

Color parse_color(std::string_view s) {
  for (Color c : kAllColors) {
    if (s == to_string(c)) return c;
  }
  throw ParameterError("unknown color '" + std::string(s) + "'");
}

Kind parse_kind(std::string_view s) {
  for (Kind k : {Kind::Box, Kind::Ball, Kind::Key, Kind::Door}) {
    if (s == to_string(k)) return k;
  }
  throw ParameterError("unknown kind '" + std::string(s) + "'");
}

bool in_set(const HoldoutSet& set, ColorKind ck) { return std::find(set.begin(), set.end(), ck) != set.end(); }

std::size_t held_out_of_kind(const HoldoutSet& holdout, std::span<const Kind> kinds) {
  return static_cast<std::size_t>(std::count_if(holdout.begin(), holdout.end(), [&](ColorKind ck) {
    return std::find(kinds.begin(), kinds.end(), ck.kind) != kinds.end();
  }));
}

std::vector<ColorKind> all_pairs(std::span<const Kind> kinds) {
  std::vector<ColorKind> out;
  for (Kind k : kinds) {
    for (Color c : kAllColors) out.push_back({c, k});
  }
  return out;
}

// Distinct pairs drawn without replacement.
std::vector<ColorKind> draw_distinct(Rng& rng, std::vector<ColorKind> pool, std::size_t count) {
  if (count > pool.size()) throw ParameterError("not enough distinct (color, kind) pairs for this level");
  std::vector<ColorKind> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

std::vector<ColorKind> draw_targets(Rng& rng, std::span<const Kind> kinds, std::size_t count, HoldoutPolicy policy,
                                    const HoldoutSet& holdout) {
  const std::vector<ColorKind> pool = all_pairs(kinds);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    auto targets = draw_distinct(rng, pool, count);
    if (targets_admissible(targets, policy, holdout, held_out_of_kind(holdout, kinds))) return targets;
  }
  throw ParameterError("holdout configuration leaves no admissible instruction targets");
}

std::vector<Position> interior_cells(const GridWorld& w, int x_end) {
  std::vector<Position> cells;
  for (int y = 1; y < w.height() - 1; ++y) {
    for (int x = 1; x < x_end; ++x) {
      if (w.at({x, y}).type == Cell::Type::Empty) cells.push_back({x, y});
    }
  }
  return cells;
}

Position take_cell(Rng& rng, std::vector<Position>& free) {
  if (free.empty()) throw ParameterError("room too small for the requested objects");
  const std::size_t i = rng.below(free.size());
  const Position p = free[i];
  free.erase(free.begin() + static_cast<std::ptrdiff_t>(i));
  return p;
}

GeneratedLevel build_object_level(Level level, Rng& rng, HoldoutPolicy policy, const LevelConfig& cfg,
                                  std::size_t n_targets) {
  const std::vector<ColorKind> targets = draw_targets(rng, kObjectKinds, n_targets, policy, cfg.holdout);
  std::vector<ColorKind> rest;
  for (ColorKind ck : all_pairs(kObjectKinds)) {
    if (!in_set(targets, ck)) rest.push_back(ck);
  }
  const auto distractors = draw_distinct(rng, rest, static_cast<std::size_t>(cfg.distractors));

  MissionSpec mission;
  mission.level = level;
  mission.room_size = cfg.room_size;
  for (ColorKind t : targets) mission.subtasks.push_back(Subtask{Verb::GoTo, t.color, t.kind, true});

  GridWorld world(cfg.room_size, cfg.room_size, max_steps_for(cfg), mission);
  auto free = interior_cells(world, cfg.room_size - 1);
  for (ColorKind ck : targets) world.at(take_cell(rng, free)) = Cell::object(ck.kind, ck.color);
  for (ColorKind ck : distractors) world.at(take_cell(rng, free)) = Cell::object(ck.kind, ck.color);
  world.place_agent(take_cell(rng, free), static_cast<Direction>(rng.below(4)));
  Instruction instruction = describe(mission, rng);
  return {std::move(world), std::move(mission), std::move(instruction)};
}

// Two rooms side by side: the agent's room (interior room_size-2 square), a
// dividing wall holding the doors, and a one-cell corridor behind it.
GeneratedLevel build_doors_level(Rng& rng, HoldoutPolicy policy, const LevelConfig& cfg) {
  const int interior = cfg.room_size - 2;
  if (cfg.doors < 2 || cfg.doors > interior) throw ParameterError("OpenDoorsOrder needs 2..interior doors");
  const Kind door_kind[] = {Kind::Door};
  const auto targets = draw_targets(rng, door_kind, 2, policy, cfg.holdout);
  std::vector<ColorKind> door_colors = targets;
  if (cfg.doors > 2) {
    std::vector<ColorKind> rest;
    for (ColorKind ck : all_pairs(door_kind)) {
      if (!in_set(targets, ck)) rest.push_back(ck);
    }
    for (ColorKind ck : draw_distinct(rng, rest, static_cast<std::size_t>(cfg.doors - 2))) door_colors.push_back(ck);
  }

  MissionSpec mission;
  mission.level = Level::OpenDoorsOrder;
  mission.room_size = cfg.room_size;
  mission.door_count = cfg.doors;
  for (ColorKind t : targets) {
    mission.subtasks.push_back(Subtask{Verb::GoTo, t.color, Kind::Door, false});
    mission.subtasks.push_back(Subtask{Verb::Open, t.color, Kind::Door, true});
  }

  const int divider = cfg.room_size - 1;
  GridWorld world(cfg.room_size + 2, cfg.room_size, max_steps_for(cfg), mission);
  for (int y = 1; y < cfg.room_size - 1; ++y) world.at({divider, y}) = Cell::wall();
  std::vector<int> rows;
  for (int y = 1; y <= interior; ++y) rows.push_back(y);
  for (ColorKind ck : door_colors) {
    const std::size_t i = rng.below(rows.size());
    world.at({divider, rows[i]}) = Cell::door(ck.color);
    rows.erase(rows.begin() + static_cast<std::ptrdiff_t>(i));
  }
  auto free = interior_cells(world, divider);
  const auto distractors = draw_distinct(rng, all_pairs(kObjectKinds), static_cast<std::size_t>(cfg.distractors));
  for (ColorKind ck : distractors) world.at(take_cell(rng, free)) = Cell::object(ck.kind, ck.color);
  world.place_agent(take_cell(rng, free), static_cast<Direction>(rng.below(4)));
  Instruction instruction = describe(mission, rng);
  return {std::move(world), std::move(mission), std::move(instruction)};
}

void append(Instruction& instr, std::initializer_list<std::string_view> words) {
  for (auto w : words) instr.words.emplace_back(w);
}

}  // namespace

HoldoutSet parse_holdout(std::string_view text) {
  HoldoutSet out;
  std::string s(text);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ParameterError("holdout entry '" + item + "' is not color:kind");
    out.push_back({parse_color(item.substr(0, colon)), parse_kind(item.substr(colon + 1))});
  }
  return out;
}

std::string format_holdout(const HoldoutSet& set) {
  std::string out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (i) out += ',';
    out += std::string(to_string(set[i].color)) + ":" + std::string(to_string(set[i].kind));
  }
  return out;
}

std::string_view to_string(HoldoutPolicy p) { return p == HoldoutPolicy::Train ? "train" : "holdout"; }

HoldoutPolicy parse_holdout_policy(std::string_view name) {
  if (name == "train") return HoldoutPolicy::Train;
  if (name == "holdout" || name == "eval") return HoldoutPolicy::Eval;
  throw ParameterError("unknown split '" + std::string(name) + "' (expected train or holdout)");
}

HoldoutSet default_holdout(Level level) {
  if (level == Level::OpenDoorsOrder) {
    return {{Color::Yellow, Kind::Door}, {Color::Green, Kind::Ball}, {Color::Blue, Kind::Key}};
  }
  return {{Color::Yellow, Kind::Ball}, {Color::Green, Kind::Key}, {Color::Blue, Kind::Box}};
}

LevelConfig default_level_config(Level level) {
  LevelConfig cfg;
  cfg.holdout = default_holdout(level);
  switch (level) {
    case Level::GoToSeq: cfg.subtasks = 2; cfg.distractors = 2; break;
    case Level::OpenDoorsOrder: cfg.subtasks = 4; cfg.distractors = 1; cfg.doors = 2; break;
    case Level::GoToObj: cfg.subtasks = 1; cfg.distractors = 2; break;
  }
  return cfg;
}

int max_steps_for(const LevelConfig& cfg) { return 8 * cfg.room_size * cfg.room_size; }

bool targets_admissible(const std::vector<ColorKind>& targets, HoldoutPolicy policy, const HoldoutSet& holdout,
                        std::size_t available) {
  const auto held = static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [&](ColorKind ck) { return in_set(holdout, ck); }));
  if (policy == HoldoutPolicy::Train) return held == 0;
  // Only held-out targets when the level has enough of them; otherwise (one
  // held-out door for a two-door mission) at least one.
  return available >= targets.size() ? held == targets.size() : held > 0;
}

bool mission_admissible(const MissionSpec& mission, HoldoutPolicy policy, const HoldoutSet& holdout) {
  std::vector<ColorKind> targets;
  for (const Subtask& t : mission.subtasks) {
    if (t.verb == Verb::Open) continue;  // the go-to step already names the door
    targets.push_back({t.color, t.kind});
  }
  const std::vector<Kind> kinds =
      mission.level == Level::OpenDoorsOrder ? std::vector<Kind>{Kind::Door}
                                             : std::vector<Kind>(kObjectKinds.begin(), kObjectKinds.end());
  return targets_admissible(targets, policy, holdout, held_out_of_kind(holdout, kinds));
}

bool uses_holdout(const MissionSpec& mission, const HoldoutSet& holdout) {
  return std::any_of(mission.subtasks.begin(), mission.subtasks.end(),
                     [&](const Subtask& t) { return in_set(holdout, {t.color, t.kind}); });
}

Instruction describe(const MissionSpec& mission, Rng& rng) {
  Instruction instr;
  const auto& tasks = mission.subtasks;
  const bool doors = mission.level == Level::OpenDoorsOrder;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i > 0) {
      const std::size_t begin = instr.words.size();
      // n = 2: ", then"; n = 3: "and", ", then"; n = 4: "and", ", then", "and".
      const bool then = doors || i == (tasks.size() + 1) / 2;
      if (then) {
        append(instr, {",", "then"});
      } else {
        append(instr, {"and"});
      }
      instr.conjunction_spans.push_back({begin, instr.words.size()});
    }
    const std::size_t begin = instr.words.size();
    const Subtask& t = tasks[i];
    const std::string color(to_string(t.color));
    const std::string kind(to_string(t.kind));
    if (t.verb == Verb::Open) {
      append(instr, {"open", "the", color, kind});
    } else {
      const std::string_view article = (t.kind == Kind::Door || rng.below(2) == 0) ? "the" : "a";
      append(instr, {"go", "to", article, color, kind});
    }
    instr.subtask_spans.push_back({begin, instr.words.size()});
  }
  return instr;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (ch == ',' || ch == '.') {
      flush();
      out.emplace_back(1, ch);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

const std::vector<std::string>& mission_words() {
  static const std::vector<std::string> words = {"go",  "to",    "a",     "the",  "open",   "and",
                                                 "then", ",",    ".",     "red",  "green",  "blue",
                                                 "yellow", "box", "ball", "key",  "door"};
  return words;
}

GeneratedLevel generate(Level level, std::uint64_t seed, HoldoutPolicy policy, const LevelConfig& cfg) {
  if (cfg.room_size < 4 || cfg.room_size > 8) throw ParameterError("room_size must be in [4, 8]");
  if (level == Level::GoToSeq && (cfg.subtasks < 2 || cfg.subtasks > 4)) {
    throw ParameterError("GoToSeq supports 2-4 subtasks");
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(level)));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    GeneratedLevel g = level == Level::OpenDoorsOrder
                           ? build_doors_level(rng, policy, cfg)
                           : build_object_level(level, rng, policy, cfg,
                                                level == Level::GoToObj ? 1 : static_cast<std::size_t>(cfg.subtasks));
    if (solve(g.world)) return g;
  }
  throw ParameterError("could not generate a solvable mission for seed " + std::to_string(seed));
}

GeneratedLevel generate(Level level, std::uint64_t seed, HoldoutPolicy policy) {
  return generate(level, seed, policy, default_level_config(level));
}

}  // namespace carel::grid
