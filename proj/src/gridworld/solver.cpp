#include "carel/gridworld/solver.hpp"

#include <array>
#include <deque>

namespace carel::grid {
namespace {

struct Node {
  Position pos;
  Direction dir;
};

Cell cell_at(const GridWorld& w, Position p) { return w.in_bounds(p) ? w.at(p) : Cell::wall(); }

bool faces_strict_later_target(const GridWorld& w, Node n, std::size_t current) {
  const Cell front = cell_at(w, step_toward(n.pos, n.dir));
  const auto& tasks = w.mission().subtasks;
  for (std::size_t j = current + 1; j < tasks.size(); ++j) {
    if (tasks[j].strict && tasks[j].verb == Verb::GoTo && front.matches(tasks[j].kind, tasks[j].color)) return true;
  }
  return false;
}

// Shortest turn/forward sequence after which the agent faces a cell matching
// (kind, color). Empty when already facing it.
std::optional<std::vector<Action>> plan_face(const GridWorld& w, std::size_t current, Kind kind, Color color) {
  const Node start{w.agent_position(), w.agent_direction()};
  if (cell_at(w, step_toward(start.pos, start.dir)).matches(kind, color)) return std::vector<Action>{};

  const int states = w.width() * w.height() * 4;
  auto key = [&](Node n) { return (n.pos.y * w.width() + n.pos.x) * 4 + static_cast<int>(n.dir); };
  std::vector<int> parent(static_cast<std::size_t>(states), -1);
  std::vector<Action> via(static_cast<std::size_t>(states), Action::Done);
  std::vector<char> seen(static_cast<std::size_t>(states), 0);
  std::deque<Node> queue{start};
  seen[static_cast<std::size_t>(key(start))] = 1;

  while (!queue.empty()) {
    const Node n = queue.front();
    queue.pop_front();
    const std::array<std::pair<Action, Node>, 3> moves = {{
        {Action::Left, Node{n.pos, turn_left(n.dir)}},
        {Action::Right, Node{n.pos, turn_right(n.dir)}},
        {Action::Forward, Node{step_toward(n.pos, n.dir), n.dir}},
    }};
    for (const auto& [action, next] : moves) {
      if (action == Action::Forward && !cell_at(w, next.pos).walkable()) continue;
      const auto k = static_cast<std::size_t>(key(next));
      if (seen[k] || faces_strict_later_target(w, next, current)) continue;
      seen[k] = 1;
      parent[k] = key(n);
      via[k] = action;
      if (cell_at(w, step_toward(next.pos, next.dir)).matches(kind, color)) {
        std::vector<Action> path;
        for (int at = key(next); at != key(start); at = parent[static_cast<std::size_t>(at)]) {
          path.push_back(via[static_cast<std::size_t>(at)]);
        }
        return std::vector<Action>(path.rbegin(), path.rend());
      }
      queue.push_back(next);
    }
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::vector<Action>> solve(const GridWorld& world) {
  GridWorld sim = world;
  std::vector<Action> plan;
  while (!sim.done()) {
    const std::size_t current = sim.next_subtask();
    const Subtask task = sim.mission().subtasks[current];
    const Kind target_kind = task.verb == Verb::Open ? Kind::Door : task.kind;
    auto path = plan_face(sim, current, target_kind, task.color);
    if (!path) return std::nullopt;
    if (task.verb == Verb::GoTo) {
      if (path->empty()) path->push_back(Action::Done);
    } else {
      // An already-open door is closed first so that opening registers.
      const Cell door = cell_at(sim, step_toward(sim.agent_position(), sim.agent_direction()));
      const bool already_facing = path->empty();
      if (already_facing && door.open) path->push_back(Action::Open);
      if (!already_facing) {
        // Door state is unaffected by turning or walking; check the target.
        Node end{sim.agent_position(), sim.agent_direction()};
        for (Action a : *path) {
          if (a == Action::Left) end.dir = turn_left(end.dir);
          if (a == Action::Right) end.dir = turn_right(end.dir);
          if (a == Action::Forward) end.pos = step_toward(end.pos, end.dir);
        }
        if (cell_at(sim, step_toward(end.pos, end.dir)).open) path->push_back(Action::Open);
      }
      path->push_back(Action::Open);
    }
    for (Action a : *path) {
      if (sim.done()) break;
      sim.step(a);
      plan.push_back(a);
    }
    if (sim.done() && sim.outcome() != Outcome::Success) return std::nullopt;
    if (!sim.done() && sim.next_subtask() == current) return std::nullopt;
  }
  return plan;
}

std::optional<Action> oracle_action(const GridWorld& world) {
  if (world.done()) return std::nullopt;
  auto plan = solve(world);
  if (!plan || plan->empty()) return std::nullopt;
  return plan->front();
}

}  // namespace carel::grid
