#include "carel/gridworld/world.hpp"

#include <string>

#include "carel/errors.hpp"

namespace carel::grid {

std::string_view to_string(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "?";
}

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Box: return "box";
    case Kind::Ball: return "ball";
    case Kind::Key: return "key";
    case Kind::Door: return "door";
  }
  return "?";
}

std::string_view to_string(Action a) {
  switch (a) {
    case Action::Left: return "left";
    case Action::Right: return "right";
    case Action::Forward: return "forward";
    case Action::Open: return "open";
    case Action::Pickup: return "pickup";
    case Action::Drop: return "drop";
    case Action::Done: return "done";
  }
  return "?";
}

std::string_view to_string(Verb v) { return v == Verb::GoTo ? "go-to" : "open"; }

std::string_view to_string(Level level) {
  switch (level) {
    case Level::GoToSeq: return "GoToSeq";
    case Level::OpenDoorsOrder: return "OpenDoorsOrder";
    case Level::GoToObj: return "GoToObj";
  }
  return "?";
}

Level parse_level(std::string_view name) {
  for (Level l : {Level::GoToSeq, Level::OpenDoorsOrder, Level::GoToObj}) {
    if (name == to_string(l)) return l;
  }
  throw ParameterError("unsupported level '" + std::string(name) +
                       "' (expected GoToSeq, OpenDoorsOrder or GoToObj)");
}

Position step_toward(Position p, Direction d) {
  switch (d) {
    case Direction::East: return {p.x + 1, p.y};
    case Direction::South: return {p.x, p.y + 1};
    case Direction::West: return {p.x - 1, p.y};
    case Direction::North: return {p.x, p.y - 1};
  }
  return p;
}

Direction turn_left(Direction d) { return static_cast<Direction>((static_cast<int>(d) + 3) % 4); }
Direction turn_right(Direction d) { return static_cast<Direction>((static_cast<int>(d) + 1) % 4); }

std::string Instruction::text() const {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::string& w = words[i];
    if (i > 0 && w != "," && w != ".") out += ' ';
    out += w;
  }
  return out;
}

GridWorld::GridWorld(int width, int height, int max_steps, MissionSpec mission)
    : width_(width), height_(height), max_steps_(max_steps), mission_(std::move(mission)) {
  if (width < 3 || height < 3) throw ParameterError("grid must be at least 3x3");
  if (max_steps <= 0) throw ParameterError("max_steps must be positive");
  if (mission_.subtasks.empty()) throw ParameterError("mission needs at least one subtask");
  cells_.assign(static_cast<std::size_t>(width * height), Cell{});
  for (int x = 0; x < width; ++x) {
    at({x, 0}) = Cell::wall();
    at({x, height - 1}) = Cell::wall();
  }
  for (int y = 0; y < height; ++y) {
    at({0, y}) = Cell::wall();
    at({width - 1, y}) = Cell::wall();
  }
}

Cell GridWorld::front_cell() const {
  const Position f = front_position();
  return in_bounds(f) ? at(f) : Cell::wall();
}

void GridWorld::place_agent(Position p, Direction d) {
  if (!in_bounds(p) || !at(p).walkable()) {
    throw ContractError("agent must stand on an in-bounds walkable cell");
  }
  agent_pos_ = p;
  agent_dir_ = d;
}

void GridWorld::restore_progress(const Progress& p) {
  if (p.step_count < 0 || p.step_count > max_steps_ || p.next_subtask > mission_.subtasks.size() ||
      p.completion_steps.size() != p.next_subtask) {
    throw ContractError("inconsistent episode progress");
  }
  step_count_ = p.step_count;
  next_subtask_ = p.next_subtask;
  completion_steps_ = p.completion_steps;
  outcome_ = p.outcome;
  carrying_ = p.carrying;
}

double GridWorld::success_reward(int steps, int max_steps) {
  return 1.0 - 0.9 * (static_cast<double>(steps) / static_cast<double>(max_steps));
}

bool GridWorld::subtask_satisfied(const Subtask& task, Action action, bool opened_door) const {
  const Cell front = front_cell();
  if (task.verb == Verb::GoTo) return front.matches(task.kind, task.color);
  return action == Action::Open && opened_door && front.matches(Kind::Door, task.color);
}

StepResult GridWorld::step(Action action) {
  if (done()) throw ContractError("step() called after the episode terminated");
  ++step_count_;
  bool opened_door = false;
  const Position front = front_position();
  const bool front_ok = in_bounds(front);
  switch (action) {
    case Action::Left: agent_dir_ = turn_left(agent_dir_); break;
    case Action::Right: agent_dir_ = turn_right(agent_dir_); break;
    case Action::Forward:
      if (front_ok && at(front).walkable()) agent_pos_ = front;
      break;
    case Action::Open:
      if (front_ok && at(front).type == Cell::Type::Door) {
        Cell& door = at(front);
        door.open = !door.open;
        opened_door = door.open;
      }
      break;
    case Action::Pickup:
      if (front_ok && !carrying_ && at(front).type == Cell::Type::Object) {
        carrying_ = at(front);
        at(front) = Cell{};
      }
      break;
    case Action::Drop:
      if (front_ok && carrying_ && at(front).type == Cell::Type::Empty) {
        at(front) = *carrying_;
        carrying_.reset();
      }
      break;
    case Action::Done: break;
  }

  double reward = 0.0;
  const auto& tasks = mission_.subtasks;
  if (subtask_satisfied(tasks[next_subtask_], action, opened_door)) {
    completion_steps_.push_back(step_count_);
    if (++next_subtask_ == tasks.size()) {
      outcome_ = Outcome::Success;
      reward = success_reward(step_count_, max_steps_);
    }
  } else {
    for (std::size_t j = next_subtask_ + 1; j < tasks.size(); ++j) {
      if (tasks[j].strict && subtask_satisfied(tasks[j], action, opened_door)) {
        outcome_ = Outcome::Failure;
        break;
      }
    }
  }
  if (outcome_ == Outcome::Running && step_count_ >= max_steps_) outcome_ = Outcome::Timeout;
  return StepResult{observe(), reward, done()};
}

namespace {

Observation::Entry encode(const Cell& cell) {
  switch (cell.type) {
    case Cell::Type::Empty: return {obs_id::kEmpty, 0, obs_id::kStateNone};
    case Cell::Type::Wall: return {obs_id::kWall, 0, obs_id::kStateNone};
    case Cell::Type::Door:
      return {obs_id::kDoor, static_cast<std::uint8_t>(static_cast<int>(cell.color) + 1),
              cell.open ? obs_id::kStateOpen : obs_id::kStateClosed};
    case Cell::Type::Object: {
      std::uint8_t kind = obs_id::kBox;
      if (cell.kind == Kind::Key) kind = obs_id::kKey;
      if (cell.kind == Kind::Ball) kind = obs_id::kBall;
      return {kind, static_cast<std::uint8_t>(static_cast<int>(cell.color) + 1), obs_id::kStateNone};
    }
  }
  return {};
}

}  // namespace

Observation GridWorld::observe(std::size_t view_size) const {
  const int v = static_cast<int>(view_size);
  if (v < 1 || v % 2 == 0) throw ParameterError("view_size must be odd and positive");
  const Position fwd = step_toward({0, 0}, agent_dir_);
  const Position right = step_toward({0, 0}, turn_right(agent_dir_));
  const int half = v / 2;

  std::vector<Cell> view(view_size * view_size);
  for (int row = 0; row < v; ++row) {
    for (int col = 0; col < v; ++col) {
      const int f = v - 1 - row;
      const int r = col - half;
      const Position p{agent_pos_.x + f * fwd.x + r * right.x, agent_pos_.y + f * fwd.y + r * right.y};
      view[static_cast<std::size_t>(row * v + col)] = in_bounds(p) ? at(p) : Cell::wall();
    }
  }

  // Light propagation from the agent: a cell is visible if reachable from the
  // agent's row through cells that do not block the view.
  std::vector<char> mask(view_size * view_size, 0);
  auto idx = [v](int col, int row) { return static_cast<std::size_t>(row * v + col); };
  mask[idx(half, v - 1)] = 1;
  for (int row = v - 1; row >= 0; --row) {
    for (int col = 0; col < v - 1; ++col) {
      if (!mask[idx(col, row)] || view[idx(col, row)].blocks_view()) continue;
      mask[idx(col + 1, row)] = 1;
      if (row > 0) {
        mask[idx(col + 1, row - 1)] = 1;
        mask[idx(col, row - 1)] = 1;
      }
    }
    for (int col = v - 1; col > 0; --col) {
      if (!mask[idx(col, row)] || view[idx(col, row)].blocks_view()) continue;
      mask[idx(col - 1, row)] = 1;
      if (row > 0) {
        mask[idx(col - 1, row - 1)] = 1;
        mask[idx(col, row - 1)] = 1;
      }
    }
  }

  Observation obs;
  obs.view_size = view_size;
  obs.cells.resize(view_size * view_size);
  for (std::size_t i = 0; i < obs.cells.size(); ++i) {
    if (mask[i]) obs.cells[i] = encode(view[i]);
  }
  obs.cells[idx(half, v - 1)] = carrying_ ? encode(*carrying_) : encode(Cell{});
  return obs;
}

Episode play(GridWorld world, Instruction instruction, const std::vector<Action>& actions, std::size_t view_size) {
  Episode ep;
  ep.instruction = std::move(instruction);
  for (Action a : actions) {
    if (world.outcome() != Outcome::Running) break;
    EpisodeStep s;
    s.observation = world.observe(view_size);
    s.action = a;
    const StepResult r = world.step(a);
    s.reward = r.reward;
    s.done = r.done;
    ep.total_reward += r.reward;
    ep.steps.push_back(std::move(s));
  }
  ep.success = world.outcome() == Outcome::Success;
  ep.subtask_completion_steps = world.completion_steps();
  return ep;
}

}  // namespace carel::grid
