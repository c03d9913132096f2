#include "carel/encoders/agent.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "carel/errors.hpp"
#include "carel/ndgrad/ops.hpp"

namespace carel::enc {

namespace nd = ndgrad;

std::string_view to_string(Aggregation a) { return a == Aggregation::Mean ? "mean" : "attention"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::Mean;
  if (s == "attention") return Aggregation::Attention;
  throw ParameterError("aggregation must be mean or attention, got '" + std::string(s) + "'");
}

std::string_view to_string(TokenSource s) { return s == TokenSource::Embedding ? "embedding" : "gru"; }

TokenSource parse_token_source(std::string_view s) {
  if (s == "embedding") return TokenSource::Embedding;
  if (s == "gru") return TokenSource::GruHidden;
  throw ParameterError("token source must be embedding or gru, got '" + std::string(s) + "'");
}

std::string AgentConfig::describe() const {
  std::ostringstream os;
  os << "vocab_size=" << vocab_size << "\nview_size=" << view_size << "\nembed_dim=" << embed_dim
     << "\nrep_dim=" << rep_dim << "\ninstr_hidden=" << instr_hidden << "\nobs_hidden=" << obs_hidden
     << "\nmemory_hidden=" << memory_hidden << "\nhead_hidden=" << head_hidden
     << "\nnormalize_reps=" << normalize_reps << "\naction_embeddings=" << action_embeddings
     << "\naggregation=" << to_string(aggregation) << "\ntoken_source=" << to_string(token_source) << '\n';
  return os.str();
}

bool operator==(const AgentConfig& a, const AgentConfig& b) { return a.describe() == b.describe(); }

std::size_t observation_width(std::size_t view_size) { return view_size * view_size * kSlotsPerCell; }

void append_observation_ids(const grid::Observation& obs, std::vector<std::size_t>& out) {
  using namespace grid::obs_id;
  for (std::size_t c = 0; c < obs.cells.size(); ++c) {
    const auto& e = obs.cells[c];
    const std::size_t base = c * kSlotsPerCell;
    out.push_back(base + e.kind);
    out.push_back(base + kKindCount + e.color);
    out.push_back(base + kKindCount + kColorCount + e.state);
  }
}

namespace {

Tensor uniform_init(Rng& rng, std::size_t fan_in, nd::Shape shape, double gain = 1.0) {
  Tensor t(std::move(shape));
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

void AgentParams::add(std::string name, Tensor value) {
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

AgentParams AgentParams::init(const AgentConfig& cfg, Rng& rng) {
  if (cfg.vocab_size < 3) throw ParameterError("vocabulary too small");
  if (cfg.embed_dim == 0 || cfg.rep_dim == 0 || cfg.instr_hidden == 0 || cfg.obs_hidden == 0 ||
      cfg.memory_hidden == 0 || cfg.head_hidden == 0) {
    throw ParameterError("model widths must be positive");
  }
  AgentParams p;
  p.cfg_ = cfg;
  const std::size_t e = cfg.embed_dim, d = cfg.rep_dim, hi = cfg.instr_hidden, ho = cfg.obs_hidden;
  const std::size_t hm = cfg.memory_hidden, hh = cfg.head_hidden;
  const std::size_t tok_in = cfg.token_source == TokenSource::Embedding ? e : hi;
  // Each cell lights exactly three inputs, so the first layer's effective
  // fan-in is 3 * cells.
  const std::size_t obs_fan_in = 3 * cfg.view_size * cfg.view_size;

  p.add("token_embedding", uniform_init(rng, 1, {cfg.vocab_size, e}));
  p.add("instr_gru.w_input", uniform_init(rng, hi, {e, 3 * hi}));
  p.add("instr_gru.w_hidden", uniform_init(rng, hi, {hi, 3 * hi}));
  p.add("instr_gru.b_input", Tensor({3 * hi}));
  p.add("instr_gru.b_hidden", Tensor({3 * hi}));
  p.add("token_proj.w", uniform_init(rng, tok_in, {tok_in, d}));
  p.add("token_proj.b", Tensor({d}));
  p.add("instr_proj.w", uniform_init(rng, hi, {hi, d}));
  p.add("instr_proj.b", Tensor({d}));
  p.add("obs_mlp.w1", uniform_init(rng, obs_fan_in, {observation_width(cfg.view_size), ho}));
  p.add("obs_mlp.b1", Tensor({ho}));
  p.add("obs_mlp.w2", uniform_init(rng, ho, {ho, ho}));
  p.add("obs_mlp.b2", Tensor({ho}));
  p.add("obs_proj.w", uniform_init(rng, ho, {ho, d}));
  p.add("obs_proj.b", Tensor({d}));
  p.add("action_embedding", uniform_init(rng, d, {grid::kNumActions, d}));
  p.add("attention_query", uniform_init(rng, d, {d}));
  p.add("memory_gru.w_input", uniform_init(rng, hm, {2 * d, 3 * hm}));
  p.add("memory_gru.w_hidden", uniform_init(rng, hm, {hm, 3 * hm}));
  p.add("memory_gru.b_input", Tensor({3 * hm}));
  p.add("memory_gru.b_hidden", Tensor({3 * hm}));
  p.add("actor.w1", uniform_init(rng, hm, {hm, hh}));
  p.add("actor.b1", Tensor({hh}));
  p.add("actor.w2", uniform_init(rng, hh, {hh, grid::kNumActions}, 0.01));
  p.add("actor.b2", Tensor({grid::kNumActions}));
  p.add("critic.w1", uniform_init(rng, hm, {hm, hh}));
  p.add("critic.b1", Tensor({hh}));
  p.add("critic.w2", uniform_init(rng, hh, {hh, 1}));
  p.add("critic.b2", Tensor({1}));
  return p;
}

std::size_t AgentParams::index(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw ParameterError("no parameter named '" + std::string(name) + "'");
}

std::string_view AgentParams::parameter_class(std::string_view name) {
  if (name == "token_embedding") return "embeddings";
  if (name.starts_with("instr_gru.")) return "gru";
  if (name.starts_with("obs_mlp.")) return "mlp";
  if (name.starts_with("token_proj.") || name.starts_with("instr_proj.") || name.starts_with("obs_proj.")) {
    return "projections";
  }
  if (name == "action_embedding") return "action_table";
  if (name == "attention_query") return "attention";
  return "policy";
}

bool AgentParams::all_finite() const {
  for (const auto& t : tensors_) {
    if (!t.all_finite()) return false;
  }
  return true;
}

std::uint64_t AgentParams::checksum() const {
  std::string bytes;
  for (const auto& t : tensors_) {
    const auto& v = t.storage();
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return nd::fnv1a64(bytes);
}

void AgentParams::save(nd::Checkpoint& ckpt, std::string_view prefix) const {
  ckpt.put_text(std::string(prefix) + "config", cfg_.describe());
  for (std::size_t i = 0; i < tensors_.size(); ++i) ckpt.put(std::string(prefix) + names_[i], tensors_[i]);
}

void AgentParams::load(const nd::Checkpoint& ckpt, std::string_view prefix) {
  if (ckpt.text(std::string(prefix) + "config") != cfg_.describe()) {
    throw VersionError("checkpoint model configuration does not match the requested one");
  }
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const Tensor& t = ckpt.tensor(std::string(prefix) + names_[i]);
    if (t.shape() != tensors_[i].shape()) {
      throw VersionError("checkpoint tensor '" + names_[i] + "' has shape " + nd::shape_string(t.shape()) +
                         ", expected " + nd::shape_string(tensors_[i].shape()));
    }
    tensors_[i] = t;
  }
}

AgentVars bind(Tape& tape, const AgentParams& params, bool trainable) {
  AgentVars v;
  v.cfg = &params.config();
  for (std::size_t i = 0; i < params.count(); ++i) {
    v.all.push_back(trainable ? tape.variable(params.tensor(i)) : tape.constant(params.tensor(i)));
  }
  std::size_t i = 0;
  auto next = [&] { return v.all[i++]; };
  v.token_embedding = next();
  v.instr_gru = {next(), next(), next(), next()};
  v.token_proj_w = next();
  v.token_proj_b = next();
  v.instr_proj_w = next();
  v.instr_proj_b = next();
  v.obs_w1 = next();
  v.obs_b1 = next();
  v.obs_w2 = next();
  v.obs_b2 = next();
  v.obs_proj_w = next();
  v.obs_proj_b = next();
  v.action_embedding = next();
  v.attention_query = next();
  v.memory_gru = {next(), next(), next(), next()};
  v.actor_w1 = next();
  v.actor_b1 = next();
  v.actor_w2 = next();
  v.actor_b2 = next();
  v.critic_w1 = next();
  v.critic_b1 = next();
  v.critic_w2 = next();
  v.critic_b2 = next();
  return v;
}

std::vector<Tensor> gradients(const Tape& tape, const AgentVars& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.all.size());
  for (const Var& v : vars.all) out.push_back(tape.grad(v));
  return out;
}

namespace {

Var linear(Var x, Var w, Var b) { return nd::add_bias(nd::matmul(x, w), b); }

Var maybe_normalize(const AgentVars& p, Var x) { return p.cfg->normalize_reps ? nd::l2_normalize_rows(x) : x; }

void check_tokens(const AgentVars& p, std::span<const std::size_t> tokens) {
  if (tokens.empty()) throw DimensionError("instruction must contain at least one token");
  for (std::size_t t : tokens) {
    if (t >= p.cfg->vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) + " out of range (vocabulary size " +
                            std::to_string(p.cfg->vocab_size) + ")");
    }
  }
}

}  // namespace

InstructionReps encode_instruction(const AgentVars& p, std::span<const std::size_t> tokens) {
  check_tokens(p, tokens);
  Tape& tape = *p.token_embedding.tape();
  const Var emb = nd::gather_rows(p.token_embedding, tokens);  // m x e
  std::vector<Var> steps;
  steps.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) steps.push_back(nd::slice_rows(emb, i, i + 1));
  const Var h0 = tape.constant(Tensor({1, p.cfg->instr_hidden}));
  InstructionReps reps;
  reps.hiddens = nd::gru_unroll(steps, h0, p.instr_gru);

  const Var local = p.cfg->token_source == TokenSource::Embedding ? emb : nd::concat(reps.hiddens, 0);
  reps.V = maybe_normalize(p, linear(local, p.token_proj_w, p.token_proj_b));
  reps.v_global = maybe_normalize(p, linear(reps.hiddens.back(), p.instr_proj_w, p.instr_proj_b));
  return reps;
}

Var encode_instruction_globals(const AgentVars& p, const std::vector<std::vector<std::size_t>>& batch) {
  if (batch.empty()) throw DimensionError("empty instruction batch");
  const std::size_t m = batch.front().size();
  for (const auto& tokens : batch) {
    if (tokens.size() != m) throw DimensionError("batched instructions must share one length");
    check_tokens(p, tokens);
  }
  Tape& tape = *p.token_embedding.tape();
  Var h = tape.constant(Tensor({batch.size(), p.cfg->instr_hidden}));
  std::vector<std::size_t> column(batch.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t b = 0; b < batch.size(); ++b) column[b] = batch[b][i];
    h = nd::gru_cell(nd::gather_rows(p.token_embedding, column), h, p.instr_gru);
  }
  return maybe_normalize(p, linear(h, p.instr_proj_w, p.instr_proj_b));
}

InstructionBatch encode_instruction_batch(const AgentVars& p, const std::vector<std::vector<std::size_t>>& batch) {
  if (batch.empty()) throw DimensionError("empty instruction batch");
  InstructionBatch out;
  out.offsets.push_back(0);
  std::vector<std::size_t> all_tokens;
  for (const auto& tokens : batch) {
    check_tokens(p, tokens);
    all_tokens.insert(all_tokens.end(), tokens.begin(), tokens.end());
    out.offsets.push_back(all_tokens.size());
  }
  Tape& tape = *p.token_embedding.tape();
  const bool from_hidden = p.cfg->token_source == TokenSource::GruHidden;

  // Group equal lengths so each group runs one batched recurrence.
  std::vector<std::size_t> order(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) order[b] = b;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return batch[a].size() < batch[b].size(); });
  std::vector<Var> final_rows(batch.size());
  std::vector<Var> local_rows(from_hidden ? all_tokens.size() : 0);
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    const std::size_t m = batch[order[g]].size();
    while (end < order.size() && batch[order[end]].size() == m) ++end;
    const std::size_t width = end - g;
    Var h = tape.constant(Tensor({width, p.cfg->instr_hidden}));
    std::vector<std::size_t> column(width);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < width; ++k) column[k] = batch[order[g + k]][i];
      h = nd::gru_cell(nd::gather_rows(p.token_embedding, column), h, p.instr_gru);
      if (from_hidden) {
        for (std::size_t k = 0; k < width; ++k) local_rows[out.offsets[order[g + k]] + i] = nd::slice_rows(h, k, k + 1);
      }
    }
    for (std::size_t k = 0; k < width; ++k) final_rows[order[g + k]] = width == 1 ? h : nd::slice_rows(h, k, k + 1);
    g = end;
  }
  const Var local = from_hidden ? nd::concat(local_rows, 0) : nd::gather_rows(p.token_embedding, all_tokens);
  out.V_all = maybe_normalize(p, linear(local, p.token_proj_w, p.token_proj_b));
  const Var finals = batch.size() == 1 ? final_rows[0] : nd::concat(final_rows, 0);
  out.v_globals = maybe_normalize(p, linear(finals, p.instr_proj_w, p.instr_proj_b));
  return out;
}

Var observation_features(const AgentVars& p, std::span<const std::size_t> ids) {
  const std::size_t per_row = 3 * p.cfg->view_size * p.cfg->view_size;
  Var h = nd::relu(nd::add_bias(nd::embedding_bag(p.obs_w1, ids, per_row), p.obs_b1));
  h = nd::relu(linear(h, p.obs_w2, p.obs_b2));
  return linear(h, p.obs_proj_w, p.obs_proj_b);
}

Var local_observation_reps(const AgentVars& p, Var features, std::span<const std::size_t> actions) {
  if (actions.size() != features.rows()) {
    throw DimensionError("expected one action per observation row, got " + std::to_string(actions.size()) +
                         " for " + std::to_string(features.rows()));
  }
  for (std::size_t a : actions) {
    if (a >= grid::kNumActions) throw ParameterError("action id " + std::to_string(a) + " is not in [0, 7)");
  }
  Var x = features;
  if (p.cfg->action_embeddings) x = nd::add(x, nd::gather_rows(p.action_embedding, actions));
  return maybe_normalize(p, x);
}

Var encode_observation(const AgentVars& p, const grid::Observation& obs, std::size_t action) {
  if (obs.view_size != p.cfg->view_size) throw DimensionError("observation view size does not match the model");
  std::vector<std::size_t> ids;
  append_observation_ids(obs, ids);
  const std::size_t actions[] = {action};
  return local_observation_reps(p, observation_features(p, ids), actions);
}

Var aggregate_global(const AgentVars& p, Var X) {
  if (X.rows() == 0) throw DimensionError("cannot aggregate zero local representations");
  if (p.cfg->aggregation == Aggregation::Mean) return maybe_normalize(p, nd::mean_axis(X, 0));
  const Var q = nd::reshape(p.attention_query, {p.cfg->rep_dim, 1});
  const Var weights = nd::softmax_temp(nd::matmul(X, q), 1.0);  // n x 1
  return maybe_normalize(p, nd::matmul(nd::transpose(weights), X));
}

void RunningMean::add(std::span<const double> row) {
  if (row.size() != sum_.size()) throw DimensionError("running mean row width mismatch");
  for (std::size_t i = 0; i < row.size(); ++i) sum_[i] += row[i];
  ++count_;
}

std::vector<double> RunningMean::mean() const {
  if (count_ == 0) throw DimensionError("running mean over zero rows");
  std::vector<double> out(sum_);
  for (double& v : out) v /= static_cast<double>(count_);
  return out;
}

std::vector<double> RunningMean::normalized_mean() const {
  std::vector<double> out = mean();
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw NumericError("cannot normalise a zero running mean");
  for (double& v : out) v /= norm;
  return out;
}

void RunningMean::reset() {
  std::fill(sum_.begin(), sum_.end(), 0.0);
  count_ = 0;
}

PolicyOutput policy_step(const AgentVars& p, Var features, Var v_global, Var memory) {
  const Var fused = nd::concat({features, v_global}, 1);
  PolicyOutput out;
  out.memory = nd::gru_cell(fused, memory, p.memory_gru);
  out.logits = linear(nd::tanh(linear(out.memory, p.actor_w1, p.actor_b1)), p.actor_w2, p.actor_b2);
  out.value = linear(nd::tanh(linear(out.memory, p.critic_w1, p.critic_b1)), p.critic_w2, p.critic_b2);
  return out;
}

}  // namespace carel::enc
