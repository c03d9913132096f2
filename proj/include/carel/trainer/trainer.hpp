#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <vector>

#include "carel/encoders/agent.hpp"
#include "carel/gridworld/levels.hpp"
#include "carel/gridworld/world.hpp"
#include "carel/ndgrad/checkpoint.hpp"
#include "carel/rng.hpp"
#include "carel/tracker/tracker.hpp"
#include "carel/trainer/ppo.hpp"
#include "carel/xclip/xclip.hpp"

namespace carel::train {

struct TrainerConfig {
  grid::Level level = grid::Level::GoToSeq;
  grid::LevelConfig level_cfg = grid::default_level_config(grid::Level::GoToSeq);
  enc::AgentConfig agent;  // vocab_size is filled from the vocabulary
  PpoConfig ppo;
  xclip::CarelConfig carel;
  bool carel_enabled = false;
  // One Adam state for both objectives instead of a separate auxiliary one.
  bool share_aux_optimizer = false;
  track::TrackerConfig tracker;
  std::uint64_t seed = 0;

  void validate() const;
};

// Accepted iff total_reward >= fraction * max_reward.
bool accepts(const grid::Episode& ep, double success_fraction);
std::vector<grid::Episode> filter_successful(const std::vector<grid::Episode>& episodes, double success_fraction);

// Bounded FIFO of successful episodes (oldest evicted first).
class SuccessBuffer {
 public:
  explicit SuccessBuffer(std::size_t capacity = 32, double success_fraction = 0.5)
      : capacity_(capacity), fraction_(success_fraction) {}
  // Offers an episode; returns whether the success filter accepted it.
  bool offer(const grid::Episode& ep);
  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  double success_fraction() const { return fraction_; }
  const std::deque<grid::Episode>& episodes() const { return episodes_; }
  void clear() { episodes_.clear(); }

 private:
  std::size_t capacity_;
  double fraction_;
  std::deque<grid::Episode> episodes_;
};

// Transitions of one collection phase, env-major: index = env * length + t.
struct RolloutBuffer {
  std::size_t num_envs = 0;
  std::size_t length = 0;
  std::size_t ids_per_obs = 0;
  std::size_t memory_width = 0;

  std::vector<std::uint16_t> obs_ids;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
  std::vector<bool> dones;
  std::vector<double> values;
  std::vector<double> log_probs;
  std::vector<double> memory_in;    // policy memory entering the step
  std::vector<double> memory_mask;  // 0 on the first step of an episode
  std::vector<std::size_t> instruction;  // index into `instructions`
  std::vector<std::vector<std::size_t>> instructions;  // token ids, as the policy saw them
  std::vector<double> bootstrap;  // value after the last step, per env
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return num_envs * length; }
  std::size_t index(std::size_t env, std::size_t t) const { return env * length + t; }
  void reset(std::size_t envs, std::size_t len, std::size_t ids, std::size_t memory);
};

// Fills advantages and returns (raw) for every env sequence of the buffer.
void compute_buffer_advantages(RolloutBuffer& buf, double gamma, double lambda);

struct PpoStats {
  double loss = 0.0;  // total RL loss averaged over minibatches
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  std::size_t minibatches = 0;
};

enum class SurrogateKind { Clipped, Vanilla };

// Loss of one minibatch, given as sequence starts (env, t0) of `recurrence`
// steps, without updating anything. Vanilla is -mean(ratio * advantage).
PpoStats ppo_minibatch_loss(const RolloutBuffer& buf, const enc::AgentParams& params, const PpoConfig& cfg,
                            const std::vector<std::pair<std::size_t, std::size_t>>& starts,
                            SurrogateKind kind = SurrogateKind::Clipped);

// Clipped-surrogate PPO over the buffer for cfg.epochs epochs of shuffled
// minibatches. NumericError (with a diagnostic) when the loss is not finite.
PpoStats ppo_update(const RolloutBuffer& buf, enc::AgentParams& params, Adam& adam, const PpoConfig& cfg, Rng& rng);

struct AuxStats {
  std::optional<double> loss;  // absent when skipped
  std::size_t n = 0;
};

// Contrastive loss of the given episodes against their original
// instructions, on a fresh tape (no update).
double auxiliary_loss_value(const std::vector<const grid::Episode*>& episodes, const enc::AgentParams& params,
                            double tau);

struct AuxGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;  // d L_aux / d params, in parameter order
};
AuxGradient auxiliary_gradients(const std::vector<const grid::Episode*>& episodes, const enc::AgentParams& params,
                                double tau);

// One Adam step on lambda_c * L_aux over the buffer; skipped with fewer than
// two episodes. lambda_c = 0 reports the loss but applies no step.
AuxStats auxiliary_update(const SuccessBuffer& buffer, enc::AgentParams& params, const xclip::CarelConfig& cfg,
                          Adam& adam);

struct CollectStats {
  std::vector<grid::Episode> completed;
  std::vector<track::MaskEvent> mask_events;  // every triggered spike
  std::size_t masks_applied = 0;
  std::uint64_t frames = 0;
};

class ActorPool;

class Trainer {
 public:
  explicit Trainer(TrainerConfig cfg);
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainerConfig& config() const { return cfg_; }
  enc::AgentParams& params() { return params_; }
  const enc::AgentParams& params() const { return params_; }
  std::uint64_t frames() const { return frames_; }
  std::uint64_t episodes() const { return episodes_; }
  const RolloutBuffer& buffer() const { return buffer_; }
  const SuccessBuffer& success_buffer() const { return success_; }

  CollectStats collect_rollouts();
  PpoStats ppo_update();
  // No-op (absent loss) when CAREL is disabled.
  AuxStats auxiliary_update();

  // Everything needed to continue bit-exactly: parameters, optimizer states,
  // random streams, environments mid-episode, trackers and the success buffer.
  ndgrad::Checkpoint checkpoint() const;
  void restore(const ndgrad::Checkpoint& ckpt);

 private:
  TrainerConfig cfg_;
  enc::AgentParams params_;
  Adam rl_adam_;
  Adam aux_adam_;
  Rng rng_;
  std::unique_ptr<ActorPool> pool_;
  RolloutBuffer buffer_;
  SuccessBuffer success_;
  std::uint64_t frames_ = 0;
  std::uint64_t episodes_ = 0;
};

struct EvalSpec {
  grid::Level level = grid::Level::GoToSeq;
  grid::LevelConfig level_cfg = grid::default_level_config(grid::Level::GoToSeq);
  grid::HoldoutPolicy split = grid::HoldoutPolicy::Train;
  std::size_t episodes = 100;
  std::uint64_t seed = 0;
  std::size_t num_envs = 16;
  bool greedy = true;
  track::TrackerConfig tracker;   // applied iff enabled
  std::uint64_t frame = 0;        // position on the masking schedule
};

struct EvalResult {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double success_rate() const { return episodes ? static_cast<double>(successes) / static_cast<double>(episodes) : 0.0; }
  std::vector<grid::MissionSpec> missions;
  std::uint64_t frames = 0;
};

// Mission seeds by episode id. Training seeds have the top bit clear and
// evaluation seeds have it set, so the two sets never meet.
std::uint64_t training_mission_seed(std::uint64_t seed, std::uint64_t id);
std::uint64_t evaluation_mission_seed(std::uint64_t seed, grid::HoldoutPolicy split, std::uint64_t id);

EvalResult evaluate_policy(const enc::AgentParams& params, const EvalSpec& spec);

}  // namespace carel::train
