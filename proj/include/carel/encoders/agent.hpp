#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carel/gridworld/world.hpp"
#include "carel/ndgrad/checkpoint.hpp"
#include "carel/ndgrad/gru.hpp"
#include "carel/ndgrad/tape.hpp"
#include "carel/rng.hpp"

namespace carel::enc {

using ndgrad::Tape;
using ndgrad::Tensor;
using ndgrad::Var;

enum class Aggregation : std::uint8_t { Mean, Attention };
// Where the local token reps V come from: projected token embeddings, or
// projected per-token GRU hidden states (ablation).
enum class TokenSource : std::uint8_t { Embedding, GruHidden };

std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);
std::string_view to_string(TokenSource s);
TokenSource parse_token_source(std::string_view s);

struct AgentConfig {
  std::size_t vocab_size = 0;
  std::size_t view_size = 7;
  std::size_t embed_dim = 32;       // e
  std::size_t rep_dim = 64;         // d
  std::size_t instr_hidden = 64;    // instruction GRU
  std::size_t obs_hidden = 64;      // both MLP layers
  std::size_t memory_hidden = 128;  // policy GRU
  std::size_t head_hidden = 64;
  bool normalize_reps = true;
  bool action_embeddings = true;
  Aggregation aggregation = Aggregation::Mean;
  TokenSource token_source = TokenSource::Embedding;

  std::string describe() const;  // stable key=value text, hashed into checkpoints
};

// One-hot layout of an egocentric view: every cell contributes a kind, a
// color and a state slot.
inline constexpr std::size_t kSlotsPerCell = grid::obs_id::kKindCount + grid::obs_id::kColorCount +
                                             grid::obs_id::kStateCount;
std::size_t observation_width(std::size_t view_size);
// Indices of the hot entries (three per cell), cell-major.
void append_observation_ids(const grid::Observation& obs, std::vector<std::size_t>& out);

// Named parameter tensors in a fixed order.
class AgentParams {
 public:
  AgentParams() = default;
  // Uniform fan-in scaled initialisation, zero biases.
  static AgentParams init(const AgentConfig& cfg, Rng& rng);

  const AgentConfig& config() const { return cfg_; }
  std::size_t count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  std::size_t index(std::string_view name) const;  // ParameterError if absent
  Tensor& operator[](std::string_view name) { return tensors_[index(name)]; }
  const Tensor& operator[](std::string_view name) const { return tensors_[index(name)]; }

  // Parameter class used for gradient reports: embeddings, gru, mlp,
  // projections, action_table, attention, policy.
  static std::string_view parameter_class(std::string_view name);

  bool all_finite() const;
  std::uint64_t checksum() const;  // FNV-1a over the raw value bytes

  void save(ndgrad::Checkpoint& ckpt, std::string_view prefix = "param/") const;
  void load(const ndgrad::Checkpoint& ckpt, std::string_view prefix = "param/");

  friend bool operator==(const AgentParams&, const AgentParams&) = default;

 private:
  void add(std::string name, Tensor value);

  AgentConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

bool operator==(const AgentConfig& a, const AgentConfig& b);

// Parameters placed on a tape, either as trainable leaves or as constants.
struct AgentVars {
  const AgentConfig* cfg = nullptr;
  std::vector<Var> all;  // same order as AgentParams

  Var token_embedding;  // |vocab| x e
  ndgrad::GruVars instr_gru;
  Var token_proj_w, token_proj_b;  // (e or instr_hidden) x d
  Var instr_proj_w, instr_proj_b;  // instr_hidden x d
  Var obs_w1, obs_b1, obs_w2, obs_b2;
  Var obs_proj_w, obs_proj_b;  // obs_hidden x d
  Var action_embedding;        // |actions| x d
  Var attention_query;         // d
  ndgrad::GruVars memory_gru;  // 2d -> memory_hidden
  Var actor_w1, actor_b1, actor_w2, actor_b2;
  Var critic_w1, critic_b1, critic_w2, critic_b2;
};

AgentVars bind(Tape& tape, const AgentParams& params, bool trainable);
// Gradients of every bound parameter after tape.backward().
std::vector<Tensor> gradients(const Tape& tape, const AgentVars& vars);

struct InstructionReps {
  Var V;                     // m x d local token reps
  Var v_global;              // 1 x d
  std::vector<Var> hiddens;  // per-token GRU states, each 1 x instr_hidden
};

// Tokens are vocabulary ids; VocabularyError for an id outside the table.
InstructionReps encode_instruction(const AgentVars& p, std::span<const std::size_t> tokens);
// Global reps of several equal-length instructions at once (B x d); row b
// equals encode_instruction(p, batch[b]).v_global.
Var encode_instruction_globals(const AgentVars& p, const std::vector<std::vector<std::size_t>>& batch);

// Token reps of many instructions at once: all V blocks stacked (sum of m_b
// rows, in batch order) and one global per instruction (B x d). Equal to
// encode_instruction applied to each entry.
struct InstructionBatch {
  Var V_all;
  Var v_globals;
  std::vector<std::size_t> offsets;  // V_all rows of instruction b: [offsets[b], offsets[b+1])
};
InstructionBatch encode_instruction_batch(const AgentVars& p, const std::vector<std::vector<std::size_t>>& batch);

// projection(MLP(one-hot(obs))), unnormalised, no action: B x d. `ids` holds
// B * 3 * view_size^2 hot indices (see append_observation_ids).
Var observation_features(const AgentVars& p, std::span<const std::size_t> ids);
// x_t rows: features plus the action embedding (when enabled), normalised
// (when enabled). ParameterError for an action id outside the table.
Var local_observation_reps(const AgentVars& p, Var features, std::span<const std::size_t> actions);
Var encode_observation(const AgentVars& p, const grid::Observation& obs, std::size_t action);

// x_global over the rows of X (n x d) -> 1 x d; DimensionError when n = 0.
Var aggregate_global(const AgentVars& p, Var X);

// Running mean over a growing prefix of rows; mean-mode x_global of the
// prefix is normalize(mean()).
class RunningMean {
 public:
  explicit RunningMean(std::size_t dim = 0) : sum_(dim, 0.0) {}
  void add(std::span<const double> row);
  std::size_t count() const { return count_; }
  std::vector<double> mean() const;
  std::vector<double> normalized_mean() const;
  void reset();

 private:
  std::vector<double> sum_;
  std::size_t count_ = 0;
};

struct PolicyOutput {
  Var logits;  // B x |actions|
  Var value;   // B x 1
  Var memory;  // B x memory_hidden, the state after this step
};

// One recurrent policy step: memory' = GRU(concat(features, v_global), memory).
PolicyOutput policy_step(const AgentVars& p, Var features, Var v_global, Var memory);

}  // namespace carel::enc
