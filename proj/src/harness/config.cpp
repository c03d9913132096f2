#include "carel/harness/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "carel/errors.hpp"

namespace carel::harness {

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view why) {
  throw UsageError(std::string(key) + ": invalid value '" + std::string(value) + "' (" + std::string(why) + ")");
}

template <typename T>
T parse_integer(std::string_view key, std::string_view s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) bad(key, s, "expected an unsigned integer");
  return v;
}

double parse_real(std::string_view key, std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) bad(key, s, "expected a number");
  return v;
}

bool parse_bool(std::string_view key, std::string_view s) {
  std::string l(s);
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (l == "true" || l == "on" || l == "1" || l == "yes") return true;
  if (l == "false" || l == "off" || l == "0" || l == "no") return false;
  bad(key, s, "expected on/off");
}

template <typename Fn>
auto wrap(std::string_view key, std::string_view s, Fn fn) {
  try {
    return fn(s);
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    bad(key, s, e.what());
  }
}

struct Field {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
Field field(std::string name, T RunConfig::*member, std::string help) {
  Field f{name, std::move(help), {}, {}};
  if constexpr (std::is_same_v<T, bool>) {
    f.get = [member](const RunConfig& c) { return std::string(c.*member ? "on" : "off"); };
    f.set = [member, name](RunConfig& c, std::string_view s) { c.*member = parse_bool(name, s); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.get = [member](const RunConfig& c) { return format_double(c.*member); };
    f.set = [member, name](RunConfig& c, std::string_view s) { c.*member = parse_real(name, s); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    f.get = [member](const RunConfig& c) { return c.*member; };
    f.set = [member](RunConfig& c, std::string_view s) { c.*member = std::string(s); };
  } else if constexpr (std::is_same_v<T, int>) {
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member, name](RunConfig& c, std::string_view s) { c.*member = parse_integer<int>(name, s); };
  } else {
    static_assert(std::is_unsigned_v<T>);
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member, name](RunConfig& c, std::string_view s) { c.*member = parse_integer<T>(name, s); };
  }
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    t.push_back({"level", "GoToSeq, OpenDoorsOrder or GoToObj (required)",
                 [](const RunConfig& c) { return c.level ? std::string(grid::to_string(*c.level)) : std::string(); },
                 [](RunConfig& c, std::string_view s) {
                   if (s.empty()) {
                     c.level.reset();
                     return;
                   }
                   c.level = wrap("level", s, [](std::string_view v) { return grid::parse_level(v); });
                 }});
    t.push_back({"seeds", "comma-separated run seeds",
                 [](const RunConfig& c) {
                   std::string out;
                   for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
                   return out;
                 },
                 [](RunConfig& c, std::string_view s) {
                   c.seeds.clear();
                   std::stringstream ss{std::string(s)};
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     item = trim(item);
                     if (!item.empty()) c.seeds.push_back(parse_integer<std::uint64_t>("seeds", item));
                   }
                 }});
    t.push_back(field("frames", &RunConfig::frames, "frame budget per seed"));
    t.push_back(field("carel", &RunConfig::carel, "auxiliary contrastive objective"));
    t.push_back(field("tracking", &RunConfig::tracking, "instruction tracking"));
    t.push_back(field("room_size", &RunConfig::room_size, "room side length including walls"));
    t.push_back(field("subtasks", &RunConfig::subtasks, "GoToSeq subtask count"));
    t.push_back(field("distractors", &RunConfig::distractors, "objects not named by the instruction"));
    t.push_back(field("doors", &RunConfig::doors, "OpenDoorsOrder door count"));
    t.push_back(field("holdout", &RunConfig::holdout, "held-out color:kind pairs (empty: level default)"));
    t.push_back(field("lambda_c", &RunConfig::lambda_c, "auxiliary loss coefficient"));
    t.push_back(field("tau", &RunConfig::tau, "softmax temperature"));
    t.push_back(field("success_fraction", &RunConfig::success_fraction, "success filter threshold"));
    t.push_back(field("aux_batch_max", &RunConfig::aux_batch_max, "success buffer capacity"));
    t.push_back(field("share_aux_optimizer", &RunConfig::share_aux_optimizer, "one Adam state for both objectives"));
    t.push_back(field("k", &RunConfig::k, "spike factor"));
    t.push_back(field("warmup_steps", &RunConfig::warmup_steps, "scores before a spike can trigger"));
    t.push_back(field("mask_max_frames", &RunConfig::mask_max_frames, "masking schedule horizon (0: frame budget)"));
    t.push_back({"score_source", "E-W or O-W",
                 [](const RunConfig& c) { return std::string(track::to_string(c.score_source)); },
                 [](RunConfig& c, std::string_view s) {
                   c.score_source = wrap("score_source", s, [](std::string_view v) { return track::parse_score_source(v); });
                 }});
    t.push_back(field("positive_mean_guard", &RunConfig::positive_mean_guard, "require a positive running mean"));
    t.push_back({"mask_probability", "fixed masking probability (empty: schedule)",
                 [](const RunConfig& c) { return c.mask_probability ? format_double(*c.mask_probability) : std::string(); },
                 [](RunConfig& c, std::string_view s) {
                   if (s.empty()) c.mask_probability.reset();
                   else c.mask_probability = parse_real("mask_probability", s);
                 }});
    t.push_back(field("embed_dim", &RunConfig::embed_dim, "token embedding size"));
    t.push_back(field("rep_dim", &RunConfig::rep_dim, "shared representation size d"));
    t.push_back(field("instr_hidden", &RunConfig::instr_hidden, "instruction GRU size"));
    t.push_back(field("obs_hidden", &RunConfig::obs_hidden, "observation MLP size"));
    t.push_back(field("memory_hidden", &RunConfig::memory_hidden, "policy memory size"));
    t.push_back(field("head_hidden", &RunConfig::head_hidden, "actor/critic hidden size"));
    t.push_back(field("normalize_reps", &RunConfig::normalize_reps, "L2-normalise representations"));
    t.push_back(field("action_embeddings", &RunConfig::action_embeddings, "add action embeddings to step reps"));
    t.push_back({"aggregation", "mean or attention",
                 [](const RunConfig& c) { return std::string(enc::to_string(c.aggregation)); },
                 [](RunConfig& c, std::string_view s) {
                   c.aggregation = wrap("aggregation", s, [](std::string_view v) { return enc::parse_aggregation(v); });
                 }});
    t.push_back({"token_source", "embedding or gru",
                 [](const RunConfig& c) { return std::string(enc::to_string(c.token_source)); },
                 [](RunConfig& c, std::string_view s) {
                   c.token_source = wrap("token_source", s, [](std::string_view v) { return enc::parse_token_source(v); });
                 }});
    t.push_back(field("learning_rate", &RunConfig::learning_rate, "Adam learning rate"));
    t.push_back(field("adam_beta1", &RunConfig::adam_beta1, "Adam beta1"));
    t.push_back(field("adam_beta2", &RunConfig::adam_beta2, "Adam beta2"));
    t.push_back(field("adam_eps", &RunConfig::adam_eps, "Adam epsilon"));
    t.push_back(field("batch_size", &RunConfig::batch_size, "transitions per PPO minibatch"));
    t.push_back(field("clip_epsilon", &RunConfig::clip_epsilon, "PPO clip range"));
    t.push_back(field("gamma", &RunConfig::gamma, "discount"));
    t.push_back(field("gae_lambda", &RunConfig::gae_lambda, "GAE lambda"));
    t.push_back(field("ppo_epochs", &RunConfig::ppo_epochs, "PPO epochs per phase"));
    t.push_back(field("entropy_coef", &RunConfig::entropy_coef, "entropy bonus"));
    t.push_back(field("value_coef", &RunConfig::value_coef, "value loss weight"));
    t.push_back(field("max_grad_norm", &RunConfig::max_grad_norm, "RL gradient norm clip"));
    t.push_back(field("rollout_length", &RunConfig::rollout_length, "steps per env per phase"));
    t.push_back(field("num_envs", &RunConfig::num_envs, "parallel environments"));
    t.push_back(field("recurrence", &RunConfig::recurrence, "BPTT length"));
    t.push_back(field("normalize_advantages", &RunConfig::normalize_advantages, "normalise advantages per batch"));
    t.push_back(field("eval_interval", &RunConfig::eval_interval, "frames between evaluations"));
    t.push_back(field("eval_episodes", &RunConfig::eval_episodes, "episodes per evaluation split"));
    t.push_back(field("eval_greedy", &RunConfig::eval_greedy, "argmax actions at evaluation"));
    t.push_back(field("log_timing", &RunConfig::log_timing, "write fps and wall_seconds"));
    t.push_back(field("output_dir", &RunConfig::output_dir, "output directory"));
    return t;
  }();
  return table;
}

const Field& find(std::string_view key) {
  std::string k(key);
  std::replace(k.begin(), k.end(), '-', '_');
  for (const auto& f : fields()) {
    if (f.name == k) return f;
  }
  throw UsageError("unknown config key '" + std::string(key) + "'");
}

void require(bool ok, std::string_view name, std::string_view why) {
  if (!ok) throw UsageError(std::string(name) + ": " + std::string(why));
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.name);
    return out;
  }();
  return k;
}

std::string_view RunConfig::help(std::string_view key) { return find(key).help; }

void RunConfig::set(std::string_view key, std::string_view value) { find(key).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return find(key).get(*this); }

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.name + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::apply_text(std::string_view text, std::string_view origin) {
  std::stringstream ss{std::string(text)};
  std::string line;
  for (int n = 1; std::getline(ss, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(std::string(origin) + ":" + std::to_string(n) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void RunConfig::validate() const {
  require(level.has_value(), "level", "required");
  require(!seeds.empty(), "seeds", "at least one seed required");
  require(frames > 0, "frames", "must be positive");
  require(room_size >= 4 && room_size <= 8, "room_size", "must lie in [4, 8]");
  require(subtasks >= 2 && subtasks <= 4, "subtasks", "must lie in [2, 4]");
  require(distractors >= 0 && distractors <= 6, "distractors", "must lie in [0, 6]");
  require(doors >= 2 && doors <= 4, "doors", "must lie in [2, 4]");
  if (!holdout.empty()) {
    try {
      grid::parse_holdout(holdout);
    } catch (const Error& e) {
      require(false, "holdout", e.what());
    }
  }
  require(lambda_c >= 0.0, "lambda_c", "must be non-negative");
  require(tau > 0.0, "tau", "must be positive");
  require(success_fraction > 0.0 && success_fraction <= 1.0, "success_fraction", "must lie in (0, 1]");
  require(aux_batch_max >= 2, "aux_batch_max", "must be at least 2");
  require(k > 1.0, "k", "must be greater than 1");
  require(!mask_probability || (*mask_probability >= 0.0 && *mask_probability <= 1.0), "mask_probability",
          "must lie in [0, 1]");
  for (auto [name, v] : {std::pair{"embed_dim", embed_dim}, {"rep_dim", rep_dim}, {"instr_hidden", instr_hidden},
                         {"obs_hidden", obs_hidden}, {"memory_hidden", memory_hidden}, {"head_hidden", head_hidden},
                         {"batch_size", batch_size}, {"ppo_epochs", ppo_epochs}, {"rollout_length", rollout_length},
                         {"num_envs", num_envs}, {"recurrence", recurrence}, {"eval_episodes", eval_episodes}}) {
    require(v > 0, name, "must be positive");
  }
  require(learning_rate > 0.0, "learning_rate", "must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be positive");
  require(clip_epsilon > 0.0, "clip_epsilon", "must be positive");
  require(gamma > 0.0 && gamma <= 1.0, "gamma", "must lie in (0, 1]");
  require(gae_lambda > 0.0 && gae_lambda <= 1.0, "gae_lambda", "must lie in (0, 1]");
  require(entropy_coef >= 0.0, "entropy_coef", "must be non-negative");
  require(value_coef >= 0.0, "value_coef", "must be non-negative");
  require(max_grad_norm > 0.0, "max_grad_norm", "must be positive");
  require(rollout_length % recurrence == 0, "recurrence", "must divide rollout_length");
  require(batch_size % recurrence == 0, "batch_size", "must be a multiple of recurrence");
  require(eval_interval > 0, "eval_interval", "must be positive");
  require(!output_dir.empty(), "output_dir", "required");
}

grid::LevelConfig RunConfig::level_config() const {
  grid::LevelConfig c = grid::default_level_config(level.value_or(grid::Level::GoToSeq));
  c.room_size = room_size;
  c.subtasks = subtasks;
  c.distractors = distractors;
  c.doors = doors;
  if (!holdout.empty()) c.holdout = grid::parse_holdout(holdout);
  return c;
}

track::TrackerConfig RunConfig::tracker_config() const {
  track::TrackerConfig t;
  t.enabled = tracking;
  t.k = k;
  t.warmup_steps = warmup_steps;
  t.max_frames = mask_max_frames ? mask_max_frames : frames;
  t.score_source = score_source;
  t.positive_mean_guard = positive_mean_guard;
  t.forced_probability = mask_probability;
  return t;
}

train::TrainerConfig RunConfig::trainer_config(std::uint64_t seed) const {
  validate();
  train::TrainerConfig t;
  t.level = *level;
  t.level_cfg = level_config();
  t.agent.embed_dim = embed_dim;
  t.agent.rep_dim = rep_dim;
  t.agent.instr_hidden = instr_hidden;
  t.agent.obs_hidden = obs_hidden;
  t.agent.memory_hidden = memory_hidden;
  t.agent.head_hidden = head_hidden;
  t.agent.normalize_reps = normalize_reps;
  t.agent.action_embeddings = action_embeddings;
  t.agent.aggregation = aggregation;
  t.agent.token_source = token_source;
  t.ppo.learning_rate = learning_rate;
  t.ppo.adam_beta1 = adam_beta1;
  t.ppo.adam_beta2 = adam_beta2;
  t.ppo.adam_eps = adam_eps;
  t.ppo.batch_size = batch_size;
  t.ppo.clip_epsilon = clip_epsilon;
  t.ppo.gamma = gamma;
  t.ppo.gae_lambda = gae_lambda;
  t.ppo.epochs = ppo_epochs;
  t.ppo.entropy_coef = entropy_coef;
  t.ppo.value_coef = value_coef;
  t.ppo.max_grad_norm = max_grad_norm;
  t.ppo.rollout_length = rollout_length;
  t.ppo.num_envs = num_envs;
  t.ppo.recurrence = recurrence;
  t.ppo.normalize_advantages = normalize_advantages;
  t.carel.lambda_c = lambda_c;
  t.carel.tau = tau;
  t.carel.success_fraction = success_fraction;
  t.carel.aux_batch_max = aux_batch_max;
  t.carel.normalize_reps = normalize_reps;
  t.carel_enabled = carel;
  t.share_aux_optimizer = share_aux_optimizer;
  t.tracker = tracker_config();
  t.seed = seed;
  return t;
}

std::filesystem::path RunConfig::output_path() const {
  std::filesystem::path p(output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  c.apply_text(ss.str(), path.string());
  return c;
}

}  // namespace carel::harness
