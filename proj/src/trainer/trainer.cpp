#include "carel/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <map>
#include <sstream>

#include "carel/encoders/vocabulary.hpp"
#include "carel/errors.hpp"
#include "carel/ndgrad/ops.hpp"

namespace carel::train {

namespace nd = ndgrad;
using enc::AgentVars;
using ndgrad::Tape;
using ndgrad::Var;

namespace {

constexpr std::uint64_t kTrainMissionSalt = 0x747261696e000001ULL;
constexpr std::uint64_t kEvalMissionSalt = 0x6576616c00000001ULL;
constexpr std::uint64_t kTrackerSalt = 0x747261636b000001ULL;

Tensor rows_tensor(const std::vector<const std::vector<double>*>& rows, std::size_t width) {
  Tensor t({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r]->begin(), rows[r]->end(), t.values().begin() + r * width);
  return t;
}

}  // namespace

void TrainerConfig::validate() const {
  ppo.validate();
  carel.validate();
  tracker.validate();
  if (level == grid::Level::GoToSeq && (level_cfg.subtasks < 2 || level_cfg.subtasks > 4)) {
    throw ParameterError("subtasks must lie in [2, 4] for GoToSeq");
  }
  if (level_cfg.room_size < 4 || level_cfg.room_size > 8) throw ParameterError("room_size must lie in [4, 8]");
}

bool accepts(const grid::Episode& ep, double success_fraction) {
  return ep.total_reward >= success_fraction * grid::GridWorld::max_reward();
}

std::vector<grid::Episode> filter_successful(const std::vector<grid::Episode>& episodes, double success_fraction) {
  std::vector<grid::Episode> out;
  for (const auto& ep : episodes) {
    if (accepts(ep, success_fraction)) out.push_back(ep);
  }
  return out;
}

bool SuccessBuffer::offer(const grid::Episode& ep) {
  if (!accepts(ep, fraction_)) return false;
  episodes_.push_back(ep);
  while (episodes_.size() > capacity_) episodes_.pop_front();
  return true;
}

void RolloutBuffer::reset(std::size_t envs, std::size_t len, std::size_t ids, std::size_t memory) {
  num_envs = envs;
  length = len;
  ids_per_obs = ids;
  memory_width = memory;
  const std::size_t n = envs * len;
  obs_ids.assign(n * ids, 0);
  actions.assign(n, 0);
  rewards.assign(n, 0.0);
  dones.assign(n, false);
  values.assign(n, 0.0);
  log_probs.assign(n, 0.0);
  memory_in.assign(n * memory, 0.0);
  memory_mask.assign(n, 1.0);
  instruction.assign(n, 0);
  instructions.clear();
  bootstrap.assign(envs, 0.0);
  advantages.assign(n, 0.0);
  returns.assign(n, 0.0);
}

void compute_buffer_advantages(RolloutBuffer& buf, double gamma, double lambda) {
  for (std::size_t e = 0; e < buf.num_envs; ++e) {
    const std::size_t b = buf.index(e, 0);
    std::vector<double> r(buf.rewards.begin() + b, buf.rewards.begin() + b + buf.length);
    std::vector<double> v(buf.values.begin() + b, buf.values.begin() + b + buf.length);
    std::vector<bool> d(buf.dones.begin() + b, buf.dones.begin() + b + buf.length);
    const GaeResult g = compute_gae(r, v, d, buf.bootstrap[e], gamma, lambda);
    std::copy(g.advantages.begin(), g.advantages.end(), buf.advantages.begin() + b);
    std::copy(g.returns.begin(), g.returns.end(), buf.returns.begin() + b);
  }
}

std::uint64_t training_mission_seed(std::uint64_t seed, std::uint64_t id) {
  return mix_seed(mix_seed(seed, kTrainMissionSalt), id) & ~(1ULL << 63);
}

std::uint64_t evaluation_mission_seed(std::uint64_t seed, grid::HoldoutPolicy split, std::uint64_t id) {
  const std::uint64_t salt = kEvalMissionSalt + static_cast<std::uint64_t>(split);
  return mix_seed(mix_seed(seed, salt), id) | (1ULL << 63);
}

// ---------------------------------------------------------------------------
// State serialization

namespace {

using json = nlohmann::json;

json span_json(const grid::TokenSpan& s) { return json::array({s.begin, s.end}); }
grid::TokenSpan span_from(const json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }

json spans_json(const std::vector<grid::TokenSpan>& spans) {
  json j = json::array();
  for (const auto& s : spans) j.push_back(span_json(s));
  return j;
}

std::vector<grid::TokenSpan> spans_from(const json& j) {
  std::vector<grid::TokenSpan> out;
  for (const auto& s : j) out.push_back(span_from(s));
  return out;
}

json tracker_json(const track::InstructionTracker::Snapshot& s) {
  json subtasks = json::array();
  for (const auto& st : s.subtasks) {
    subtasks.push_back({{"span", span_json(st.span)},
                        {"conjunction", st.conjunction ? span_json(*st.conjunction) : json()},
                        {"status", static_cast<int>(st.status)},
                        {"history", st.score_history},
                        {"mean", st.running_mean}});
  }
  return {{"rng", s.rng},        {"original", s.original}, {"masked", s.masked},
          {"subtasks", subtasks}, {"episode", s.episode},   {"step", s.step}};
}

track::InstructionTracker::Snapshot tracker_from(const json& j) {
  track::InstructionTracker::Snapshot s;
  s.rng = j.at("rng").get<std::string>();
  s.original = j.at("original").get<std::vector<std::string>>();
  s.masked = j.at("masked").get<std::vector<std::string>>();
  for (const auto& st : j.at("subtasks")) {
    track::SubtaskState x;
    x.span = span_from(st.at("span"));
    if (!st.at("conjunction").is_null()) x.conjunction = span_from(st.at("conjunction"));
    x.status = static_cast<track::SubtaskStatus>(st.at("status").get<int>());
    x.score_history = st.at("history").get<std::vector<double>>();
    x.running_mean = st.at("mean").get<double>();
    s.subtasks.push_back(std::move(x));
  }
  s.episode = j.at("episode").get<std::uint64_t>();
  s.step = j.at("step").get<int>();
  return s;
}

json scorer_json(const track::PartialEpisodeScorer::Snapshot& s) {
  return {{"V", s.V},     {"sum", s.sum},     {"global", s.global},       {"ow_max", s.ow_max},
          {"m", s.m},     {"d", s.d},         {"steps", s.steps},         {"normalize", s.normalize}};
}

track::PartialEpisodeScorer::Snapshot scorer_from(const json& j) {
  track::PartialEpisodeScorer::Snapshot s;
  s.V = j.at("V").get<std::vector<double>>();
  s.sum = j.at("sum").get<std::vector<double>>();
  s.global = j.at("global").get<std::vector<double>>();
  s.ow_max = j.at("ow_max").get<std::vector<double>>();
  s.m = j.at("m").get<std::size_t>();
  s.d = j.at("d").get<std::size_t>();
  s.steps = j.at("steps").get<std::size_t>();
  s.normalize = j.at("normalize").get<bool>();
  return s;
}

json instruction_json(const grid::Instruction& in) {
  return {{"words", in.words}, {"subtasks", spans_json(in.subtask_spans)}, {"conj", spans_json(in.conjunction_spans)}};
}

grid::Instruction instruction_from(const json& j) {
  grid::Instruction in;
  in.words = j.at("words").get<std::vector<std::string>>();
  in.subtask_spans = spans_from(j.at("subtasks"));
  in.conjunction_spans = spans_from(j.at("conj"));
  return in;
}

json episode_json(const grid::Episode& ep) {
  json steps = json::array();
  for (const auto& s : ep.steps) {
    std::vector<int> cells;
    for (const auto& c : s.observation.cells) {
      cells.insert(cells.end(), {c.kind, c.color, c.state});
    }
    steps.push_back({{"view", s.observation.view_size},
                     {"obs", cells},
                     {"a", static_cast<int>(s.action)},
                     {"r", s.reward},
                     {"d", s.done}});
  }
  return {{"instruction", instruction_json(ep.instruction)},
          {"success", ep.success},
          {"reward", ep.total_reward},
          {"completion", ep.subtask_completion_steps},
          {"steps", steps}};
}

grid::Episode episode_from(const json& j) {
  grid::Episode ep;
  ep.instruction = instruction_from(j.at("instruction"));
  ep.success = j.at("success").get<bool>();
  ep.total_reward = j.at("reward").get<double>();
  ep.subtask_completion_steps = j.at("completion").get<std::vector<int>>();
  for (const auto& s : j.at("steps")) {
    grid::EpisodeStep st;
    st.observation.view_size = s.at("view").get<std::size_t>();
    const auto cells = s.at("obs").get<std::vector<int>>();
    for (std::size_t i = 0; i + 2 < cells.size(); i += 3) {
      st.observation.cells.push_back({static_cast<std::uint8_t>(cells[i]), static_cast<std::uint8_t>(cells[i + 1]),
                                      static_cast<std::uint8_t>(cells[i + 2])});
    }
    st.action = static_cast<grid::Action>(s.at("a").get<int>());
    st.reward = s.at("r").get<double>();
    st.done = s.at("d").get<bool>();
    ep.steps.push_back(std::move(st));
  }
  return ep;
}

// The parts of the configuration a checkpoint's state depends on.
std::string state_fingerprint(const TrainerConfig& c) {
  std::ostringstream os;
  os << "level=" << grid::to_string(c.level) << " room=" << c.level_cfg.room_size
     << " subtasks=" << c.level_cfg.subtasks << " distractors=" << c.level_cfg.distractors
     << " doors=" << c.level_cfg.doors << " envs=" << c.ppo.num_envs << " carel=" << c.carel_enabled
     << " aux_batch=" << c.carel.aux_batch_max << " tracker=" << c.tracker.enabled << " seed=" << c.seed;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Acting

struct EnvSlot {
  bool active = false;
  std::uint64_t episode_id = 0;  // also selects the mission
  grid::GridWorld world;
  std::vector<std::size_t> original_ids;
  std::vector<std::size_t> current_ids;
  std::vector<double> v_global;
  std::vector<double> memory;
  bool fresh = true;
  track::InstructionTracker tracker;
  track::PartialEpisodeScorer scorer;
  grid::Episode episode;
};

struct StepRecord {
  std::size_t env = 0;
  std::vector<std::size_t> obs_ids;
  std::size_t action = 0;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;
  std::vector<double> memory_in;
  bool fresh = false;
  std::vector<std::size_t> instruction;  // token ids the policy saw
};

// A set of environments driven by the policy in lock step. Every episode
// takes the next id; the mission source maps an id to its mission, or to
// nothing once the pool should wind down.
class ActorPool {
 public:
  using MissionSource = std::function<std::optional<grid::GeneratedLevel>(std::uint64_t)>;

  ActorPool(const enc::AgentConfig& agent, const track::TrackerConfig& tracker, std::size_t envs,
            std::uint64_t tracker_seed, MissionSource source)
      : agent_(agent), tracker_cfg_(tracker), source_(std::move(source)), slots_(envs) {
    for (std::size_t e = 0; e < envs; ++e) {
      slots_[e].tracker = track::InstructionTracker(tracker, mix_seed(tracker_seed, e));
      slots_[e].memory.assign(agent.memory_hidden, 0.0);
    }
  }

  std::size_t size() const { return slots_.size(); }

  // Starts a mission in every idle env.
  void fill(const AgentVars& p) {
    std::vector<std::size_t> started;
    for (std::size_t e = 0; e < slots_.size(); ++e) {
      if (!slots_[e].active && start(slots_[e])) started.push_back(e);
    }
    encode_instructions(p, started, true);
  }

  // Recomputes every active env's instruction global with the current params.
  void refresh(const AgentVars& p) {
    std::vector<std::size_t> all;
    for (std::size_t e = 0; e < slots_.size(); ++e) {
      if (slots_[e].active) all.push_back(e);
    }
    encode_instructions(p, all, false);
  }

  bool any_active() const {
    return std::any_of(slots_.begin(), slots_.end(), [](const EnvSlot& s) { return s.active; });
  }

  // One lock-step move of every active env. sampler == nullptr selects the
  // greedy action. Finished episodes are appended to `completed` and their
  // env starts the next mission.
  std::vector<StepRecord> step(const AgentVars& p, std::uint64_t frame, Rng* sampler,
                               std::vector<grid::Episode>& completed, std::vector<track::MaskEvent>& events) {
    std::vector<std::size_t> act;
    for (std::size_t e = 0; e < slots_.size(); ++e) {
      if (slots_[e].active) act.push_back(e);
    }
    std::vector<StepRecord> recs(act.size());
    if (act.empty()) return recs;

    std::vector<std::size_t> ids;
    std::vector<grid::Observation> obs(act.size());
    for (std::size_t k = 0; k < act.size(); ++k) {
      obs[k] = slots_[act[k]].world.observe(agent_.view_size);
      const std::size_t before = ids.size();
      enc::append_observation_ids(obs[k], ids);
      recs[k].obs_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(before), ids.end());
    }
    const Forward f = forward(p, act, ids);
    const Tensor& logp = f.log_probs.value();

    std::vector<std::size_t> actions(act.size());
    for (std::size_t k = 0; k < act.size(); ++k) {
      if (sampler) {
        std::vector<double> probs(grid::kNumActions);
        for (std::size_t a = 0; a < probs.size(); ++a) probs[a] = std::exp(logp.at(k, a));
        actions[k] = sampler->categorical(probs);
      } else {
        std::size_t best = 0;
        for (std::size_t a = 1; a < grid::kNumActions; ++a) {
          if (logp.at(k, a) > logp.at(k, best)) best = a;
        }
        actions[k] = best;
      }
    }
    std::optional<Tensor> x_rows;
    if (tracker_cfg_.enabled) x_rows = enc::local_observation_reps(p, f.features, actions).value();
    const Tensor& mem = f.memory.value();

    std::vector<std::size_t> reencode, restarted;
    for (std::size_t k = 0; k < act.size(); ++k) {
      EnvSlot& s = slots_[act[k]];
      StepRecord& r = recs[k];
      r.env = act[k];
      r.action = actions[k];
      r.log_prob = logp.at(k, actions[k]);
      r.value = f.values.value().at(k, 0);
      r.memory_in = s.memory;
      r.fresh = s.fresh;
      r.instruction = s.current_ids;

      const auto res = s.world.step(static_cast<grid::Action>(actions[k]));
      r.reward = res.reward;
      r.done = res.done;
      record_step(s, std::move(obs[k]), static_cast<grid::Action>(actions[k]), res);
      const auto row = mem.values().subspan(k * agent_.memory_hidden, agent_.memory_hidden);
      std::copy(row.begin(), row.end(), s.memory.begin());
      s.fresh = false;

      if (res.done) {
        finish(s, completed);
        if (start(s)) restarted.push_back(act[k]);
        continue;
      }
      if (tracker_cfg_.enabled) {
        s.scorer.add(x_rows->values().subspan(k * agent_.rep_dim, agent_.rep_dim));
        if (auto ev = s.tracker.step(s.scorer.scores(), frame)) {
          events.push_back(*ev);
          if (ev->applied) {
            s.current_ids = vocab_.encode(s.tracker.instruction());
            reencode.push_back(act[k]);
          }
        }
      }
    }
    encode_instructions(p, restarted, true);
    encode_instructions(p, reencode, false);
    return recs;
  }

  // Value of the current state of every env (0 for idle ones).
  std::vector<double> values(const AgentVars& p) {
    std::vector<std::size_t> act, ids;
    for (std::size_t e = 0; e < slots_.size(); ++e) {
      if (!slots_[e].active) continue;
      act.push_back(e);
      enc::append_observation_ids(slots_[e].world.observe(agent_.view_size), ids);
    }
    std::vector<double> out(slots_.size(), 0.0);
    if (act.empty()) return out;
    const Forward f = forward(p, act, ids);
    for (std::size_t k = 0; k < act.size(); ++k) out[act[k]] = f.values.value().at(k, 0);
    return out;
  }

  // Worlds are not stored: a restored env regenerates its mission and
  // replays the recorded actions. Instruction globals are recomputed on the
  // next refresh().
  json save() const {
    json envs = json::array();
    for (const EnvSlot& s : slots_) {
      json j = {{"active", s.active}, {"tracker", tracker_json(s.tracker.snapshot())}};
      if (s.active) {
        std::vector<int> actions;
        for (const auto& st : s.episode.steps) actions.push_back(static_cast<int>(st.action));
        j["episode_id"] = s.episode_id;
        j["actions"] = actions;
        j["current"] = s.current_ids;
        j["memory"] = s.memory;
        j["fresh"] = s.fresh;
        if (tracker_cfg_.enabled) j["scorer"] = scorer_json(s.scorer.snapshot());
      }
      envs.push_back(std::move(j));
    }
    return {{"next_episode_id", next_episode_id_}, {"envs", envs}};
  }

  void load(const json& j) {
    const auto& envs = j.at("envs");
    if (envs.size() != slots_.size()) throw VersionError("checkpoint holds a different number of environments");
    for (std::size_t e = 0; e < slots_.size(); ++e) {
      EnvSlot& s = slots_[e];
      const json& x = envs[e];
      s.active = false;
      s.tracker.restore(tracker_from(x.at("tracker")));
      if (!x.at("active").get<bool>()) continue;
      auto g = source_(x.at("episode_id").get<std::uint64_t>());
      if (!g) throw VersionError("checkpoint refers to a mission the source cannot produce");
      const track::InstructionTracker::Snapshot tracker = s.tracker.snapshot();
      begin_episode(s, std::move(*g), x.at("episode_id").get<std::uint64_t>());
      s.tracker.restore(tracker);
      for (int a : x.at("actions").get<std::vector<int>>()) {
        grid::Observation o = s.world.observe(agent_.view_size);
        const auto res = s.world.step(static_cast<grid::Action>(a));
        if (res.done) throw VersionError("replayed episode ended early; the checkpoint does not match this build");
        record_step(s, std::move(o), static_cast<grid::Action>(a), res);
      }
      s.current_ids = x.at("current").get<std::vector<std::size_t>>();
      s.memory = x.at("memory").get<std::vector<double>>();
      s.fresh = x.at("fresh").get<bool>();
      if (tracker_cfg_.enabled) s.scorer = track::PartialEpisodeScorer::restore(scorer_from(x.at("scorer")));
    }
    next_episode_id_ = j.at("next_episode_id").get<std::uint64_t>();
  }

 private:
  struct Forward {
    Var features, log_probs, values, memory;
  };

  Forward forward(const AgentVars& p, const std::vector<std::size_t>& act, const std::vector<std::size_t>& ids) {
    Tape& tape = *p.token_embedding.tape();
    std::vector<const std::vector<double>*> vg, mem;
    for (std::size_t e : act) {
      vg.push_back(&slots_[e].v_global);
      mem.push_back(&slots_[e].memory);
    }
    Forward f;
    f.features = enc::observation_features(p, ids);
    const auto out = enc::policy_step(p, f.features, tape.constant(rows_tensor(vg, agent_.rep_dim)),
                                      tape.constant(rows_tensor(mem, agent_.memory_hidden)));
    f.log_probs = nd::log_softmax_rows(out.logits, 1.0);
    f.values = out.value;
    f.memory = out.memory;
    return f;
  }

  static void record_step(EnvSlot& s, grid::Observation obs, grid::Action action, const grid::StepResult& res) {
    grid::EpisodeStep es;
    es.observation = std::move(obs);
    es.action = action;
    es.reward = res.reward;
    es.done = res.done;
    s.episode.steps.push_back(std::move(es));
    s.episode.total_reward += res.reward;
  }

  static void finish(EnvSlot& s, std::vector<grid::Episode>& completed) {
    s.episode.success = s.world.outcome() == grid::Outcome::Success;
    s.episode.subtask_completion_steps = s.world.completion_steps();
    completed.push_back(std::move(s.episode));
    s.episode = grid::Episode{};
    s.active = false;
  }

  bool start(EnvSlot& s) {
    auto g = source_(next_episode_id_);
    if (!g) return false;
    begin_episode(s, std::move(*g), next_episode_id_++);
    s.tracker.reset(s.episode.instruction.words, s.episode_id);
    return true;
  }

  void begin_episode(EnvSlot& s, grid::GeneratedLevel g, std::uint64_t id) {
    s.active = true;
    s.episode_id = id;
    s.world = std::move(g.world);
    s.episode = grid::Episode{};
    s.episode.instruction = std::move(g.instruction);
    s.original_ids = vocab_.encode(s.episode.instruction.words);
    s.current_ids = s.original_ids;
    std::fill(s.memory.begin(), s.memory.end(), 0.0);
    s.fresh = true;
  }

  // Caches v_global for the listed envs; with `with_scorer` (fresh
  // episodes, current == original) also captures the original token reps.
  void encode_instructions(const AgentVars& p, const std::vector<std::size_t>& envs, bool with_scorer) {
    if (envs.empty()) return;
    std::vector<std::vector<std::size_t>> batch;
    for (std::size_t e : envs) batch.push_back(slots_[e].current_ids);
    const auto enc = enc::encode_instruction_batch(p, batch);
    const std::size_t d = agent_.rep_dim;
    for (std::size_t k = 0; k < envs.size(); ++k) {
      EnvSlot& s = slots_[envs[k]];
      const auto g = enc.v_globals.value().values().subspan(k * d, d);
      s.v_global.assign(g.begin(), g.end());
      if (with_scorer && tracker_cfg_.enabled) {
        const auto V =
            enc.V_all.value().values().subspan(enc.offsets[k] * d, (enc.offsets[k + 1] - enc.offsets[k]) * d);
        s.scorer = track::PartialEpisodeScorer(std::vector<double>(V.begin(), V.end()), s.original_ids.size(), d,
                                               agent_.normalize_reps);
      }
    }
  }

  enc::AgentConfig agent_;
  track::TrackerConfig tracker_cfg_;
  MissionSource source_;
  enc::Vocabulary vocab_;
  std::vector<EnvSlot> slots_;
  std::uint64_t next_episode_id_ = 0;
};

// ---------------------------------------------------------------------------
// PPO

namespace {

struct LossParts {
  Var total;
  double policy = 0.0, value = 0.0, entropy = 0.0;
};

LossParts build_ppo_loss(const RolloutBuffer& buf, const AgentVars& p, const PpoConfig& cfg,
                         const std::vector<std::pair<std::size_t, std::size_t>>& starts, SurrogateKind kind) {
  Tape& tape = *p.token_embedding.tape();
  const std::size_t B = starts.size(), R = cfg.recurrence, mw = buf.memory_width;
  auto idx = [&](std::size_t b, std::size_t k) { return buf.index(starts[b].first, starts[b].second + k); };

  // Instruction globals for every distinct instruction in the minibatch.
  std::map<std::size_t, std::size_t> row_of;
  std::vector<std::vector<std::size_t>> unique;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < R; ++k) {
      const std::size_t ins = buf.instruction[idx(b, k)];
      if (row_of.emplace(ins, unique.size()).second) unique.push_back(buf.instructions[ins]);
    }
  }
  const Var globals = enc::encode_instruction_batch(p, unique).v_globals;

  Tensor h0({B, mw});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(buf.memory_in.begin() + static_cast<std::ptrdiff_t>(idx(b, 0) * mw), mw,
                h0.values().begin() + static_cast<std::ptrdiff_t>(b * mw));
  }
  Var h = tape.constant(std::move(h0));
  LossParts parts;
  Var total;
  for (std::size_t k = 0; k < R; ++k) {
    std::vector<std::size_t> ids, actions(B), rows(B);
    Tensor mask({B, mw}), old_logp({B, 1}), adv({B, 1}), ret({B, 1});
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = idx(b, k);
      for (std::size_t j = 0; j < buf.ids_per_obs; ++j) ids.push_back(buf.obs_ids[i * buf.ids_per_obs + j]);
      actions[b] = buf.actions[i];
      rows[b] = row_of.at(buf.instruction[i]);
      for (std::size_t c = 0; c < mw; ++c) mask.at(b, c) = buf.memory_mask[i];
      old_logp.at(b, 0) = buf.log_probs[i];
      adv.at(b, 0) = buf.advantages[i];
      ret.at(b, 0) = buf.returns[i];
    }
    // The stored memory already starts each sequence; inside it, episode
    // boundaries reset the recurrence.
    if (k > 0) h = nd::mul(h, tape.constant(std::move(mask)));
    const Var feats = enc::observation_features(p, ids);
    const auto out = enc::policy_step(p, feats, nd::gather_rows(globals, rows), h);
    h = out.memory;

    const Var logp_all = nd::log_softmax_rows(out.logits, 1.0);
    const Var logp = nd::pick(logp_all, actions);
    const Var ratio = nd::exp(nd::sub(logp, tape.constant(std::move(old_logp))));
    const Var advv = tape.constant(std::move(adv));
    Var policy_loss;
    if (kind == SurrogateKind::Vanilla) {
      policy_loss = nd::scale(nd::mean(nd::mul(ratio, advv)), -1.0);
    } else {
      const Var surr1 = nd::mul(ratio, advv);
      const Var surr2 = nd::mul(nd::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon), advv);
      policy_loss = nd::scale(nd::mean(nd::minimum(surr1, surr2)), -1.0);
    }
    const Var entropy =
        nd::scale(nd::sum(nd::mul(nd::softmax_rows(out.logits, 1.0), logp_all)), -1.0 / static_cast<double>(B));
    const Var value_loss = nd::mean(nd::square(nd::sub(out.value, tape.constant(std::move(ret)))));
    const Var step_loss =
        nd::add(nd::sub(policy_loss, nd::scale(entropy, cfg.entropy_coef)), nd::scale(value_loss, cfg.value_coef));
    total = k == 0 ? step_loss : nd::add(total, step_loss);
    parts.policy += policy_loss.value().item() / static_cast<double>(R);
    parts.value += value_loss.value().item() / static_cast<double>(R);
    parts.entropy += entropy.value().item() / static_cast<double>(R);
  }
  parts.total = nd::scale(total, 1.0 / static_cast<double>(R));
  return parts;
}

std::vector<std::pair<std::size_t, std::size_t>> sequence_starts(const RolloutBuffer& buf, std::size_t recurrence) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t e = 0; e < buf.num_envs; ++e) {
    for (std::size_t t = 0; t + recurrence <= buf.length; t += recurrence) out.emplace_back(e, t);
  }
  return out;
}

}  // namespace

PpoStats ppo_minibatch_loss(const RolloutBuffer& buf, const enc::AgentParams& params, const PpoConfig& cfg,
                            const std::vector<std::pair<std::size_t, std::size_t>>& starts, SurrogateKind kind) {
  Tape tape;
  const AgentVars p = enc::bind(tape, params, false);
  const LossParts parts = build_ppo_loss(buf, p, cfg, starts, kind);
  PpoStats s;
  s.loss = parts.total.value().item();
  s.policy_loss = parts.policy;
  s.value_loss = parts.value;
  s.entropy = parts.entropy;
  s.minibatches = 1;
  return s;
}

PpoStats ppo_update(const RolloutBuffer& buf, enc::AgentParams& params, Adam& adam, const PpoConfig& cfg, Rng& rng) {
  if (buf.size() == 0) throw ContractError("ppo_update on an empty buffer");
  auto starts = sequence_starts(buf, cfg.recurrence);
  const std::size_t per_batch = std::max<std::size_t>(1, cfg.batch_size / cfg.recurrence);
  PpoStats stats;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng.below(i)]);
    for (std::size_t b = 0; b < starts.size(); b += per_batch) {
      const std::vector<std::pair<std::size_t, std::size_t>> mb(
          starts.begin() + static_cast<std::ptrdiff_t>(b),
          starts.begin() + static_cast<std::ptrdiff_t>(std::min(starts.size(), b + per_batch)));
      Tape tape;
      const AgentVars p = enc::bind(tape, params, true);
      const LossParts parts = build_ppo_loss(buf, p, cfg, mb, SurrogateKind::Clipped);
      const double loss = parts.total.value().item();
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "PPO loss is not finite (policy " << parts.policy << ", value " << parts.value << ", entropy "
           << parts.entropy << ") in epoch " << epoch << ", minibatch at sequence " << b;
        throw NumericError(os.str());
      }
      tape.backward(parts.total);
      std::vector<Tensor> grads = enc::gradients(tape, p);
      stats.grad_norm += clip_grad_norm(grads, cfg.max_grad_norm);
      adam.step(params, grads);
      stats.loss += loss;
      stats.policy_loss += parts.policy;
      stats.value_loss += parts.value;
      stats.entropy += parts.entropy;
      ++stats.minibatches;
    }
  }
  const double n = static_cast<double>(stats.minibatches);
  stats.loss /= n;
  stats.policy_loss /= n;
  stats.value_loss /= n;
  stats.entropy /= n;
  stats.grad_norm /= n;
  return stats;
}

// ---------------------------------------------------------------------------
// Auxiliary objective

namespace {

Var build_aux_loss(const AgentVars& p, const std::vector<const grid::Episode*>& episodes, double tau) {
  const enc::Vocabulary vocab;
  std::vector<std::size_t> ids, actions, lengths;
  std::vector<std::vector<std::size_t>> instructions;
  for (const grid::Episode* ep : episodes) {
    if (ep->steps.empty()) throw ContractError("auxiliary loss on an empty episode");
    for (const auto& s : ep->steps) {
      enc::append_observation_ids(s.observation, ids);
      actions.push_back(static_cast<std::size_t>(s.action));
    }
    lengths.push_back(ep->steps.size());
    instructions.push_back(vocab.encode(ep->instruction.words));
  }
  const Var X_all = enc::local_observation_reps(p, enc::observation_features(p, ids), actions);
  const auto eo = xclip::block_offsets(lengths);
  std::vector<Var> globals;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    globals.push_back(enc::aggregate_global(p, nd::slice_rows(X_all, eo[i], eo[i + 1])));
  }
  const auto instr = enc::encode_instruction_batch(p, instructions);
  const Var S = xclip::score_matrix_fused(X_all, nd::concat(globals, 0), eo, instr.V_all, instr.v_globals,
                                          instr.offsets, tau);
  return xclip::contrastive_loss_from_scores(S, tau);
}

}  // namespace

double auxiliary_loss_value(const std::vector<const grid::Episode*>& episodes, const enc::AgentParams& params,
                            double tau) {
  Tape tape;
  const AgentVars p = enc::bind(tape, params, false);
  return build_aux_loss(p, episodes, tau).value().item();
}

AuxGradient auxiliary_gradients(const std::vector<const grid::Episode*>& episodes, const enc::AgentParams& params,
                                double tau) {
  Tape tape;
  const AgentVars p = enc::bind(tape, params, true);
  const Var loss = build_aux_loss(p, episodes, tau);
  AuxGradient out;
  out.loss = loss.value().item();
  tape.backward(loss);
  out.grads = enc::gradients(tape, p);
  return out;
}

AuxStats auxiliary_update(const SuccessBuffer& buffer, enc::AgentParams& params, const xclip::CarelConfig& cfg,
                          Adam& adam) {
  AuxStats stats;
  if (buffer.size() < 2) return stats;
  std::vector<const grid::Episode*> eps;
  for (const auto& ep : buffer.episodes()) eps.push_back(&ep);
  stats.n = eps.size();
  Tape tape;
  const bool step = cfg.lambda_c > 0.0;
  const AgentVars p = enc::bind(tape, params, step);
  const Var loss = build_aux_loss(p, eps, cfg.tau);
  stats.loss = loss.value().item();
  if (!std::isfinite(*stats.loss)) throw NumericError("auxiliary loss is not finite over " + std::to_string(stats.n) + " episodes");
  if (step) {
    tape.backward(nd::scale(loss, cfg.lambda_c));
    adam.step(params, enc::gradients(tape, p));
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainerConfig cfg)
    : cfg_(std::move(cfg)),
      rng_(mix_seed(cfg_.seed, 0x706f6c6963790001ULL)),
      success_(cfg_.carel.aux_batch_max, cfg_.carel.success_fraction) {
  cfg_.validate();
  cfg_.agent.vocab_size = enc::Vocabulary().size();
  Rng init(mix_seed(cfg_.seed, 0x696e697400000001ULL));
  params_ = enc::AgentParams::init(cfg_.agent, init);
  const auto& pc = cfg_.ppo;
  rl_adam_ = Adam(pc.learning_rate, pc.adam_beta1, pc.adam_beta2, pc.adam_eps);
  aux_adam_ = Adam(pc.learning_rate, pc.adam_beta1, pc.adam_beta2, pc.adam_eps);
  const TrainerConfig* c = &cfg_;
  pool_ = std::make_unique<ActorPool>(
      cfg_.agent, cfg_.tracker, pc.num_envs, mix_seed(cfg_.seed, kTrackerSalt),
      [c](std::uint64_t id) -> std::optional<grid::GeneratedLevel> {
        return grid::generate(c->level, training_mission_seed(c->seed, id), grid::HoldoutPolicy::Train, c->level_cfg);
      });
}

Trainer::~Trainer() = default;

CollectStats Trainer::collect_rollouts() {
  const auto& pc = cfg_.ppo;
  Tape tape;
  const AgentVars p = enc::bind(tape, params_, false);
  const std::size_t mark = tape.size();
  pool_->fill(p);
  pool_->refresh(p);
  tape.truncate(mark);

  const std::size_t ids = 3 * cfg_.agent.view_size * cfg_.agent.view_size;
  buffer_.reset(pc.num_envs, pc.rollout_length, ids, cfg_.agent.memory_hidden);
  std::map<std::vector<std::size_t>, std::size_t> instr_index;
  CollectStats stats;
  for (std::size_t t = 0; t < pc.rollout_length; ++t) {
    const auto recs = pool_->step(p, frames_, &rng_, stats.completed, stats.mask_events);
    for (const StepRecord& r : recs) {
      const std::size_t i = buffer_.index(r.env, t);
      for (std::size_t j = 0; j < ids; ++j) buffer_.obs_ids[i * ids + j] = static_cast<std::uint16_t>(r.obs_ids[j]);
      buffer_.actions[i] = r.action;
      buffer_.rewards[i] = r.reward;
      buffer_.dones[i] = r.done;
      buffer_.values[i] = r.value;
      buffer_.log_probs[i] = r.log_prob;
      std::copy(r.memory_in.begin(), r.memory_in.end(),
                buffer_.memory_in.begin() + static_cast<std::ptrdiff_t>(i * buffer_.memory_width));
      buffer_.memory_mask[i] = r.fresh ? 0.0 : 1.0;
      auto [it, added] = instr_index.emplace(r.instruction, buffer_.instructions.size());
      if (added) buffer_.instructions.push_back(r.instruction);
      buffer_.instruction[i] = it->second;
    }
    frames_ += recs.size();
    stats.frames += recs.size();
    tape.truncate(mark);
  }
  buffer_.bootstrap = pool_->values(p);
  compute_buffer_advantages(buffer_, pc.gamma, pc.gae_lambda);
  if (pc.normalize_advantages) normalize_advantages(buffer_.advantages);

  for (const auto& ev : stats.mask_events) stats.masks_applied += ev.applied ? 1 : 0;
  episodes_ += stats.completed.size();
  if (cfg_.carel_enabled) {
    for (const auto& ep : stats.completed) success_.offer(ep);
  }
  return stats;
}

PpoStats Trainer::ppo_update() { return train::ppo_update(buffer_, params_, rl_adam_, cfg_.ppo, rng_); }

AuxStats Trainer::auxiliary_update() {
  if (!cfg_.carel_enabled) return {};
  return train::auxiliary_update(success_, params_, cfg_.carel, cfg_.share_aux_optimizer ? rl_adam_ : aux_adam_);
}

ndgrad::Checkpoint Trainer::checkpoint() const {
  ndgrad::Checkpoint ck;
  params_.save(ck);
  rl_adam_.save(ck, "adam/rl/");
  aux_adam_.save(ck, "adam/aux/");
  json success = json::array();
  for (const auto& ep : success_.episodes()) success.push_back(episode_json(ep));
  const json state = {{"rng", rng_.state()},
                      {"frames", frames_},
                      {"episodes", episodes_},
                      {"pool", pool_->save()},
                      {"success", success}};
  ck.put_text("trainer/config", state_fingerprint(cfg_));
  ck.put_text("trainer/state", state.dump());
  return ck;
}

void Trainer::restore(const ndgrad::Checkpoint& ck) {
  if (ck.text("trainer/config") != state_fingerprint(cfg_)) {
    throw VersionError("checkpoint was written by a different trainer configuration: " + ck.text("trainer/config"));
  }
  enc::AgentParams params = params_;
  params.load(ck);
  Adam rl = rl_adam_, aux = aux_adam_;
  rl.load(ck, "adam/rl/", params);
  aux.load(ck, "adam/aux/", params);
  const json state = json::parse(ck.text("trainer/state"));
  pool_->load(state.at("pool"));
  success_.clear();
  for (const auto& ep : state.at("success")) success_.offer(episode_from(ep));
  rng_.set_state(state.at("rng").get<std::string>());
  frames_ = state.at("frames").get<std::uint64_t>();
  episodes_ = state.at("episodes").get<std::uint64_t>();
  params_ = std::move(params);
  rl_adam_ = std::move(rl);
  aux_adam_ = std::move(aux);
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate_policy(const enc::AgentParams& params, const EvalSpec& spec) {
  if (spec.num_envs == 0) throw ParameterError("num_envs must be positive");
  EvalResult result;
  std::vector<grid::MissionSpec> missions(spec.episodes);
  ActorPool pool(params.config(), spec.tracker, std::min(spec.num_envs, std::max<std::size_t>(spec.episodes, 1)),
                 mix_seed(spec.seed, kTrackerSalt + 1),
                 [&](std::uint64_t id) -> std::optional<grid::GeneratedLevel> {
                   if (id >= spec.episodes) return std::nullopt;
                   auto g = grid::generate(spec.level, evaluation_mission_seed(spec.seed, spec.split, id), spec.split,
                                           spec.level_cfg);
                   missions[id] = g.mission;
                   return g;
                 });
  Rng sampler(mix_seed(spec.seed, 0x73616d706c650001ULL));
  Tape tape;
  const AgentVars p = enc::bind(tape, params, false);
  const std::size_t mark = tape.size();
  pool.fill(p);
  tape.truncate(mark);
  std::vector<grid::Episode> completed;
  std::vector<track::MaskEvent> events;
  while (pool.any_active()) {
    result.frames += pool.step(p, spec.frame, spec.greedy ? nullptr : &sampler, completed, events).size();
    tape.truncate(mark);
  }
  result.episodes = completed.size();
  for (const auto& ep : completed) result.successes += ep.success ? 1 : 0;
  result.missions = std::move(missions);
  return result;
}

}  // namespace carel::train
