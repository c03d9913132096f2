#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "carel/errors.hpp"
#include "carel/gridworld/levels.hpp"
#include "carel/gridworld/solver.hpp"
#include "carel/trainer/trainer.hpp"

using namespace carel;
using namespace carel::train;

namespace {

TrainerConfig small_config(grid::Level level, std::uint64_t seed) {
  TrainerConfig c;
  c.level = level;
  c.level_cfg = grid::default_level_config(level);
  c.seed = seed;
  c.ppo.num_envs = 4;
  c.ppo.rollout_length = 16;
  c.ppo.recurrence = 8;
  c.ppo.batch_size = 32;
  c.ppo.epochs = 2;
  return c;
}

grid::Episode oracle_episode(grid::Level level, std::uint64_t seed) {
  auto g = grid::generate(level, seed, grid::HoldoutPolicy::Train);
  const auto plan = grid::solve(g.world);
  REQUIRE(plan);
  return grid::play(g.world, g.instruction, *plan);
}

grid::Episode with_reward(double r) {
  grid::Episode ep;
  ep.total_reward = r;
  return ep;
}

}  // namespace

TEST_CASE("GAE examples") {
  auto one = compute_gae({1.0}, {0.0}, {true}, 0.0, 1.0, 1.0);
  CHECK(one.advantages[0] == 1.0);
  CHECK(one.returns[0] == 1.0);

  auto zero = compute_gae(std::vector<double>(5, 0.0), std::vector<double>(5, 0.0), std::vector<bool>(5, false), 0.0,
                          0.99, 0.95);
  for (double a : zero.advantages) CHECK(a == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> r(n), v(n);
    std::vector<bool> d(n);
    for (std::size_t t = 0; t < n; ++t) {
      r[t] = rng.normal();
      v[t] = rng.normal();
      d[t] = rng.uniform() < 0.2;
    }
    const double boot = rng.normal(), gamma = rng.uniform(0.5, 1.0);
    const auto g = compute_gae(r, v, d, boot, gamma, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double next = d[t] ? 0.0 : (t + 1 < n ? v[t + 1] : boot);
      CHECK(std::abs(g.advantages[t] - (r[t] + gamma * next - v[t])) < 1e-12);
      CHECK(std::abs(g.returns[t] - (g.advantages[t] + v[t])) < 1e-12);
    }
  }

  std::vector<double> adv{1.0, 2.0, 3.0, 6.0};
  normalize_advantages(adv);
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / 4.0;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::abs(var / 4.0 - 1.0) < 1e-6);
}

TEST_CASE("success filter boundaries and buffer") {
  CHECK(accepts(with_reward(0.6), 0.5));
  CHECK_FALSE(accepts(with_reward(0.49), 0.5));
  CHECK(accepts(with_reward(0.5), 0.5));
  CHECK_FALSE(accepts(with_reward(0.0), 0.01));
  CHECK(filter_successful({with_reward(0.6), with_reward(0.2), with_reward(0.9)}, 0.5).size() == 2);

  SuccessBuffer buf(3, 0.5);
  for (int i = 0; i < 10; ++i) buf.offer(with_reward(0.1 * i));
  CHECK(buf.size() == 3);
  CHECK(buf.episodes().front().total_reward == doctest::Approx(0.7));
  for (const auto& ep : buf.episodes()) CHECK(ep.total_reward >= 0.5);
}

TEST_CASE("auxiliary update: skip rule, ablation-off and the uniform case") {
  TrainerConfig c = small_config(grid::Level::GoToObj, 1);
  Trainer t(c);
  enc::AgentParams params = t.params();
  Adam adam;
  xclip::CarelConfig cfg;

  SuccessBuffer buf(32, 0.5);
  CHECK_FALSE(auxiliary_update(buf, params, cfg, adam).loss);
  const grid::Episode ep = oracle_episode(grid::Level::GoToObj, 5);
  REQUIRE(buf.offer(ep));
  CHECK_FALSE(auxiliary_update(buf, params, cfg, adam).loss);
  CHECK(params == t.params());

  // Two identical pairs: every score equals the diagonal, so the loss is 2 ln 2.
  REQUIRE(buf.offer(ep));
  cfg.lambda_c = 0.0;
  const auto off = auxiliary_update(buf, params, cfg, adam);
  REQUIRE(off.loss);
  CHECK(std::abs(*off.loss - 2.0 * std::log(2.0)) < 1e-12);
  CHECK(params == t.params());
  CHECK(adam.steps() == 0);

  cfg.lambda_c = 0.01;
  const auto on = auxiliary_update(buf, params, cfg, adam);
  CHECK(std::abs(*on.loss - 2.0 * std::log(2.0)) < 1e-12);
  CHECK(adam.steps() == 1);

  // Distinct episodes give a loss that depends on the parameters.
  SuccessBuffer mixed(32, 0.5);
  for (std::uint64_t s = 0; s < 4; ++s) mixed.offer(oracle_episode(grid::Level::GoToObj, 100 + s));
  std::vector<const grid::Episode*> eps;
  for (const auto& e : mixed.episodes()) eps.push_back(&e);
  const double before = auxiliary_loss_value(eps, params, 1.0);
  CHECK(std::isfinite(before));
  CHECK(before > 0.0);
}

TEST_CASE("rollouts: bookkeeping and determinism") {
  TrainerConfig c = small_config(grid::Level::GoToSeq, 7);
  Trainer a(c), b(c);
  const auto sa = a.collect_rollouts();
  const auto sb = b.collect_rollouts();
  CHECK(a.buffer().size() == c.ppo.num_envs * c.ppo.rollout_length);
  CHECK(sa.frames == a.buffer().size());
  CHECK(a.frames() == sa.frames);
  CHECK(a.buffer().obs_ids == b.buffer().obs_ids);
  CHECK(a.buffer().actions == b.buffer().actions);
  CHECK(a.buffer().log_probs == b.buffer().log_probs);
  CHECK(a.buffer().advantages == b.buffer().advantages);
  CHECK(sa.completed.size() == sb.completed.size());

  // Memory restarts exactly at episode boundaries.
  const auto& buf = a.buffer();
  for (std::size_t e = 0; e < buf.num_envs; ++e) {
    CHECK(buf.memory_mask[buf.index(e, 0)] == 0.0);
    for (std::size_t t = 1; t < buf.length; ++t) {
      CHECK(buf.memory_mask[buf.index(e, t)] == (buf.dones[buf.index(e, t - 1)] ? 0.0 : 1.0));
    }
  }
}

TEST_CASE("PPO loss identities") {
  TrainerConfig c = small_config(grid::Level::GoToSeq, 11);
  Trainer t(c);
  t.collect_rollouts();
  const auto& buf = t.buffer();
  std::vector<std::pair<std::size_t, std::size_t>> starts;
  for (std::size_t e = 0; e < buf.num_envs; ++e) starts.emplace_back(e, 0);

  // The policy that collected the batch: ratio 1, policy loss -mean(adv).
  const auto clipped = ppo_minibatch_loss(buf, t.params(), c.ppo, starts);
  double mean_adv = 0.0;
  for (const auto& [e, t0] : starts) {
    for (std::size_t k = 0; k < c.ppo.recurrence; ++k) mean_adv += buf.advantages[buf.index(e, t0 + k)];
  }
  mean_adv /= static_cast<double>(starts.size() * c.ppo.recurrence);
  CHECK(std::abs(clipped.policy_loss + mean_adv) < 1e-12);

  // After an update the ratio moves; with clipping disabled the clipped and
  // vanilla surrogates agree.
  Rng rng(2);
  Adam adam(c.ppo.learning_rate, 0.9, 0.999, 1e-8);
  enc::AgentParams moved = t.params();
  PpoConfig one = c.ppo;
  one.epochs = 1;
  ppo_update(buf, moved, adam, one, rng);
  PpoConfig wide = one;
  wide.clip_epsilon = 1e300;
  const auto a = ppo_minibatch_loss(buf, moved, wide, starts, SurrogateKind::Clipped);
  const auto b = ppo_minibatch_loss(buf, moved, wide, starts, SurrogateKind::Vanilla);
  CHECK(std::abs(a.loss - b.loss) < 1e-10);
  CHECK(std::abs(a.policy_loss - b.policy_loss) < 1e-10);
  const auto tight = ppo_minibatch_loss(buf, moved, one, starts, SurrogateKind::Clipped);
  CHECK(tight.policy_loss >= b.policy_loss - 1e-12);
}

TEST_CASE("parameters stay finite over 100 random batches") {
  TrainerConfig c = small_config(grid::Level::GoToSeq, 13);
  c.ppo.rollout_length = 8;
  c.ppo.epochs = 1;
  Trainer t(c);
  t.collect_rollouts();
  RolloutBuffer buf = t.buffer();
  enc::AgentParams params = t.params();
  Adam adam(c.ppo.learning_rate, 0.9, 0.999, 1e-8);
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    for (std::size_t j = 0; j < buf.size(); ++j) {
      buf.rewards[j] = rng.uniform() < 0.1 ? rng.uniform() : 0.0;
      buf.values[j] = 3.0 * rng.normal();
      buf.dones[j] = rng.uniform() < 0.1;
      buf.actions[j] = rng.below(grid::kNumActions);
      buf.log_probs[j] = std::log(rng.uniform(0.01, 1.0));
    }
    compute_buffer_advantages(buf, c.ppo.gamma, c.ppo.gae_lambda);
    normalize_advantages(buf.advantages);
    const auto stats = ppo_update(buf, params, adam, c.ppo, rng);
    CHECK(std::isfinite(stats.loss));
    REQUIRE(params.all_finite());
  }
}

TEST_CASE("a random policy finds GoToObj successes within 50k frames") {
  Rng rng(4);
  std::size_t frames = 0, successes = 0;
  for (std::uint64_t s = 0; frames < 50'000; ++s) {
    auto g = grid::generate(grid::Level::GoToObj, s, grid::HoldoutPolicy::Train);
    while (g.world.outcome() == grid::Outcome::Running) {
      g.world.step(static_cast<grid::Action>(rng.below(grid::kNumActions)));
      ++frames;
    }
    successes += g.world.outcome() == grid::Outcome::Success ? 1 : 0;
  }
  CHECK(successes >= 1);
}

TEST_CASE("CAREL with lambda 0 matches the baseline bit-exactly") {
  TrainerConfig base = small_config(grid::Level::GoToObj, 17);
  TrainerConfig off = base;
  off.carel_enabled = true;
  off.carel.lambda_c = 0.0;
  Trainer a(base), b(off);
  bool aux_ran = false;
  for (int i = 0; i < 3; ++i) {
    a.collect_rollouts();
    a.ppo_update();
    CHECK_FALSE(a.auxiliary_update().loss);
    b.collect_rollouts();
    b.ppo_update();
    aux_ran = b.auxiliary_update().loss.has_value() || aux_ran;
  }
  CHECK(a.params() == b.params());
  (void)aux_ran;
}

TEST_CASE("resuming from a checkpoint continues bit-exactly") {
  TrainerConfig c = small_config(grid::Level::GoToSeq, 23);
  c.carel_enabled = true;
  c.tracker.enabled = true;
  c.tracker.forced_probability = 0.5;
  c.tracker.warmup_steps = 1;
  c.tracker.k = 1.2;
  c.tracker.positive_mean_guard = false;
  Trainer a(c);
  auto iterate = [](Trainer& t) {
    const auto s = t.collect_rollouts();
    t.ppo_update();
    t.auxiliary_update();
    return s.mask_events.size();
  };
  std::size_t events = iterate(a) + iterate(a);
  std::stringstream ss;
  ndgrad::write_checkpoint(ss, a.checkpoint());

  for (int i = 0; i < 2; ++i) events += iterate(a);
  Trainer b(c);
  b.restore(ndgrad::read_checkpoint(ss));
  for (int i = 0; i < 2; ++i) iterate(b);

  CHECK(events > 0);
  CHECK(a.frames() == b.frames());
  CHECK(a.episodes() == b.episodes());
  CHECK(a.params() == b.params());
  CHECK(a.buffer().actions == b.buffer().actions);
  CHECK(a.success_buffer().size() == b.success_buffer().size());

  EvalSpec spec;
  spec.episodes = 8;
  spec.num_envs = 4;
  spec.seed = 5;
  const auto ea = evaluate_policy(a.params(), spec);
  const auto eb = evaluate_policy(b.params(), spec);
  CHECK(ea.successes == eb.successes);
  CHECK(ea.frames == eb.frames);

  Trainer other(small_config(grid::Level::GoToObj, 23));
  CHECK_THROWS_AS(other.restore(a.checkpoint()), VersionError);
}

TEST_CASE("evaluation missions are disjoint from training missions") {
  for (std::uint64_t id = 0; id < 1000; ++id) {
    CHECK((training_mission_seed(3, id) >> 63) == 0);
    CHECK((evaluation_mission_seed(3, grid::HoldoutPolicy::Eval, id) >> 63) == 1);
  }
  TrainerConfig c = small_config(grid::Level::GoToObj, 1);
  Trainer t(c);
  EvalSpec spec;
  spec.level = grid::Level::GoToObj;
  spec.level_cfg = grid::default_level_config(grid::Level::GoToObj);
  spec.split = grid::HoldoutPolicy::Eval;
  spec.episodes = 10;
  spec.num_envs = 3;
  const auto r = evaluate_policy(t.params(), spec);
  CHECK(r.episodes == 10);
  CHECK(r.missions.size() == 10);
  CHECK(r.success_rate() >= 0.0);
  CHECK(r.success_rate() <= 1.0);
}
