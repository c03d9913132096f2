#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "carel/encoders/agent.hpp"
#include "carel/gridworld/levels.hpp"
#include "carel/tracker/tracker.hpp"
#include "carel/trainer/trainer.hpp"

namespace carel::harness {

// Everything a run consumes. Serialized as flat `key = value` lines, one per
// field, in a fixed order; the CLI exposes each key as --kebab-case.
struct RunConfig {
  std::optional<grid::Level> level;  // required
  std::vector<std::uint64_t> seeds{1};
  std::uint64_t frames = 1'000'000;
  bool carel = false;
  bool tracking = false;

  // Level generation.
  int room_size = 6;
  int subtasks = 2;
  int distractors = 2;
  int doors = 2;
  std::string holdout;  // empty: the level's default set

  // Auxiliary objective.
  double lambda_c = 0.01;
  double tau = 1.0;
  double success_fraction = 0.5;
  std::size_t aux_batch_max = 32;
  bool share_aux_optimizer = false;

  // Instruction tracking.
  double k = 2.0;
  std::size_t warmup_steps = 3;
  std::uint64_t mask_max_frames = 0;  // 0: the frame budget
  track::ScoreSource score_source = track::ScoreSource::EW;
  bool positive_mean_guard = true;
  std::optional<double> mask_probability;  // empty: the tanh schedule

  // Agent.
  std::size_t embed_dim = 32;
  std::size_t rep_dim = 64;
  std::size_t instr_hidden = 64;
  std::size_t obs_hidden = 64;
  std::size_t memory_hidden = 128;
  std::size_t head_hidden = 64;
  bool normalize_reps = true;
  bool action_embeddings = true;
  enc::Aggregation aggregation = enc::Aggregation::Mean;
  enc::TokenSource token_source = enc::TokenSource::Embedding;

  // PPO.
  double learning_rate = 7e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 256;
  double clip_epsilon = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.99;
  std::size_t ppo_epochs = 4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  std::size_t rollout_length = 40;
  std::size_t num_envs = 16;
  std::size_t recurrence = 8;
  bool normalize_advantages = true;

  // Evaluation and output.
  std::uint64_t eval_interval = 25'000;
  std::size_t eval_episodes = 100;
  bool eval_greedy = true;
  bool log_timing = true;  // off: fps and wall_seconds cells left empty
  std::string output_dir = "runs/default";

  // UsageError naming the first offending field.
  void validate() const;

  std::string to_text() const;
  // Overrides the fields named in `text`; UsageError on unknown keys or bad values.
  void apply_text(std::string_view text, std::string_view origin = "config");
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  // Field names in serialization order.
  static const std::vector<std::string>& keys();
  static std::string_view help(std::string_view key);

  train::TrainerConfig trainer_config(std::uint64_t seed) const;
  grid::LevelConfig level_config() const;
  track::TrackerConfig tracker_config() const;

  // output_dir, under $CAREL_OUTPUT_ROOT when that is set and output_dir is relative.
  std::filesystem::path output_path() const;
};

inline constexpr const char* kOutputRootEnv = "CAREL_OUTPUT_ROOT";

RunConfig load_run_config(const std::filesystem::path& path);

// Shortest text that parses back to exactly the same double.
std::string format_double(double v);

}  // namespace carel::harness
