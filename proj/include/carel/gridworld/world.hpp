#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace carel::grid {

enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Kind : std::uint8_t { Box, Ball, Key, Door };
// Clockwise order; the integer value is the number of quarter turns from east.
enum class Direction : std::uint8_t { East, South, West, North };
enum class Action : std::uint8_t { Left, Right, Forward, Open, Pickup, Drop, Done };
enum class Verb : std::uint8_t { GoTo, Open };

inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kNumKinds = 4;
inline constexpr std::size_t kNumActions = 7;

inline constexpr std::array<Color, kNumColors> kAllColors = {Color::Red, Color::Green, Color::Blue, Color::Yellow};
inline constexpr std::array<Kind, 3> kObjectKinds = {Kind::Box, Kind::Ball, Kind::Key};

std::string_view to_string(Color c);
std::string_view to_string(Kind k);
std::string_view to_string(Action a);
std::string_view to_string(Verb v);

// Observation vocabularies. Each visible cell is a (kind, color, state) triple
// drawn from these closed id ranges.
namespace obs_id {
inline constexpr std::uint8_t kUnseen = 0;
inline constexpr std::uint8_t kEmpty = 1;
inline constexpr std::uint8_t kWall = 2;
inline constexpr std::uint8_t kDoor = 3;
inline constexpr std::uint8_t kKey = 4;
inline constexpr std::uint8_t kBall = 5;
inline constexpr std::uint8_t kBox = 6;
inline constexpr std::size_t kKindCount = 7;
inline constexpr std::size_t kColorCount = kNumColors + 1;  // 0 = none
inline constexpr std::uint8_t kStateNone = 0;
inline constexpr std::uint8_t kStateOpen = 1;
inline constexpr std::uint8_t kStateClosed = 2;
inline constexpr std::size_t kStateCount = 3;
}  // namespace obs_id

struct Cell {
  enum class Type : std::uint8_t { Empty, Wall, Door, Object };
  Type type = Type::Empty;
  Kind kind = Kind::Box;
  Color color = Color::Red;
  bool open = false;  // doors only

  static Cell wall() { return Cell{Type::Wall}; }
  static Cell door(Color c, bool is_open = false) { return Cell{Type::Door, Kind::Door, c, is_open}; }
  static Cell object(Kind k, Color c) { return Cell{Type::Object, k, c, false}; }

  bool walkable() const { return type == Type::Empty || (type == Type::Door && open); }
  bool blocks_view() const { return type == Type::Wall || (type == Type::Door && !open); }
  bool matches(Kind k, Color c) const {
    return (type == Type::Object || type == Type::Door) && kind == k && color == c;
  }

  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Position {
  int x = 0;
  int y = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

Position step_toward(Position p, Direction d);
Direction turn_left(Direction d);
Direction turn_right(Direction d);

// Egocentric view: view_size x view_size cells, row 0 farthest ahead, the
// agent at the bottom-centre cell facing "up".
struct Observation {
  struct Entry {
    std::uint8_t kind = obs_id::kUnseen;
    std::uint8_t color = 0;
    std::uint8_t state = obs_id::kStateNone;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::size_t view_size = 7;
  std::vector<Entry> cells;

  const Entry& at(std::size_t row, std::size_t col) const { return cells[row * view_size + col]; }
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct Subtask {
  Verb verb = Verb::GoTo;
  Color color = Color::Red;
  Kind kind = Kind::Box;
  // Completing this subtask before it is acceptable fails the episode.
  bool strict = true;
  friend bool operator==(const Subtask&, const Subtask&) = default;
};

enum class Level : std::uint8_t { GoToSeq, OpenDoorsOrder, GoToObj };
std::string_view to_string(Level level);
Level parse_level(std::string_view name);

struct MissionSpec {
  Level level = Level::GoToSeq;
  std::vector<Subtask> subtasks;  // sequential dependency chain
  int room_size = 6;
  int door_count = 0;
  friend bool operator==(const MissionSpec&, const MissionSpec&) = default;
};

struct TokenSpan {
  std::size_t begin = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Templated language instruction. Subtask span i describes MissionSpec
// subtask i; conjunction span i joins subtask i and i + 1.
struct Instruction {
  std::vector<std::string> words;
  std::vector<TokenSpan> subtask_spans;
  std::vector<TokenSpan> conjunction_spans;

  std::size_t size() const { return words.size(); }
  std::string text() const;
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
};

enum class Outcome : std::uint8_t { Running, Success, Failure, Timeout };

// Deterministic POMDP gridworld. The mission is verified on every step:
// subtasks must complete in order; a strict subtask satisfied out of order
// ends the episode with reward 0.
class GridWorld {
 public:
  GridWorld() = default;
  GridWorld(int width, int height, int max_steps, MissionSpec mission);

  int width() const { return width_; }
  int height() const { return height_; }
  bool in_bounds(Position p) const { return p.x >= 0 && p.y >= 0 && p.x < width_ && p.y < height_; }
  const Cell& at(Position p) const { return cells_[index(p)]; }
  Cell& at(Position p) { return cells_[index(p)]; }

  Position agent_position() const { return agent_pos_; }
  Direction agent_direction() const { return agent_dir_; }
  const std::optional<Cell>& carrying() const { return carrying_; }
  Position front_position() const { return step_toward(agent_pos_, agent_dir_); }
  // Cell in front of the agent; out-of-bounds reads as wall.
  Cell front_cell() const;

  void place_agent(Position p, Direction d);

  int step_count() const { return step_count_; }
  int max_steps() const { return max_steps_; }
  bool done() const { return outcome_ != Outcome::Running; }
  Outcome outcome() const { return outcome_; }
  const MissionSpec& mission() const { return mission_; }
  std::size_t next_subtask() const { return next_subtask_; }
  // Step count (1-based) at which each completed subtask was satisfied.
  const std::vector<int>& completion_steps() const { return completion_steps_; }

  StepResult step(Action action);

  // Episode progress beyond the grid and agent pose, for exact resumption.
  struct Progress {
    int step_count = 0;
    std::size_t next_subtask = 0;
    std::vector<int> completion_steps;
    Outcome outcome = Outcome::Running;
    std::optional<Cell> carrying;
  };
  Progress progress() const { return {step_count_, next_subtask_, completion_steps_, outcome_, carrying_}; }
  void restore_progress(const Progress& p);
  Observation observe(std::size_t view_size = 7) const;

  // Supremum of the terminal reward.
  static double max_reward() { return 1.0; }
  // Terminal reward for success after `steps` of `max_steps`.
  static double success_reward(int steps, int max_steps);

  friend bool operator==(const GridWorld&, const GridWorld&) = default;

 private:
  std::size_t index(Position p) const { return static_cast<std::size_t>(p.y * width_ + p.x); }
  bool subtask_satisfied(const Subtask& task, Action action, bool opened_door) const;

  int width_ = 0;
  int height_ = 0;
  std::vector<Cell> cells_;
  Position agent_pos_{};
  Direction agent_dir_ = Direction::East;
  std::optional<Cell> carrying_;
  int step_count_ = 0;
  int max_steps_ = 1;
  MissionSpec mission_;
  std::size_t next_subtask_ = 0;
  std::vector<int> completion_steps_;
  Outcome outcome_ = Outcome::Running;
};

struct EpisodeStep {
  Observation observation;  // seen before acting
  Action action = Action::Done;
  double reward = 0.0;
  bool done = false;
};

struct Episode {
  std::vector<EpisodeStep> steps;
  Instruction instruction;  // original, unmasked
  bool success = false;
  double total_reward = 0.0;
  std::vector<int> subtask_completion_steps;  // ground truth; never shown to the agent
};

// Runs actions from the given state until they run out or the episode ends.
Episode play(GridWorld world, Instruction instruction, const std::vector<Action>& actions, std::size_t view_size = 7);

}  // namespace carel::grid
