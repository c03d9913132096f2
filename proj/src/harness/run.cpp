#include "carel/harness/run.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <ostream>
#include <sstream>

#include "carel/encoders/vocabulary.hpp"
#include "carel/errors.hpp"
#include "carel/gridworld/solver.hpp"
#include "carel/ndgrad/ops.hpp"
#include "carel/ndgrad/tape.hpp"
#include "carel/trainer/trainer.hpp"
#include "carel/verify/naive.hpp"
#include "carel/xclip/xclip.hpp"

namespace carel::harness {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using ndgrad::Tensor;

namespace {

constexpr std::uint64_t kEvalSeedSalt = 0x6576616c73656564ULL;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// Config text with the fields a resumed run may change blanked out.
std::string resumable_text(RunConfig c) {
  c.frames = 1;
  c.output_dir = "-";
  c.log_timing = true;
  return c.to_text();
}

train::EvalSpec eval_spec(const RunConfig& cfg, std::uint64_t seed, grid::HoldoutPolicy split, std::uint64_t frame) {
  train::EvalSpec s;
  s.level = *cfg.level;
  s.level_cfg = cfg.level_config();
  s.split = split;
  s.episodes = cfg.eval_episodes;
  s.seed = mix_seed(seed, kEvalSeedSalt);
  s.num_envs = std::min(cfg.num_envs, cfg.eval_episodes);
  s.greedy = cfg.eval_greedy;
  s.tracker = cfg.tracker_config();
  s.frame = frame;
  return s;
}

void write_file_atomically(const fs::path& path, const std::function<void(const fs::path&)>& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

void truncate_metrics(const fs::path& path, std::uint64_t last_frame) {
  if (!fs::exists(path)) return;
  std::vector<MetricsRecord> keep;
  for (const auto& r : read_metrics(path)) {
    if (r.frame <= last_frame) keep.push_back(r);
  }
  std::ofstream out(path, std::ios::trunc);
  out << kMetricsHeader << '\n';
  for (const auto& r : keep) out << format_metrics_row(r) << '\n';
}

void truncate_mask_log(const fs::path& path, std::uint64_t frame) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && nlohmann::json::parse(line).at("frame").get<std::uint64_t>() < frame) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

fs::path seed_directory(const RunConfig& cfg, std::uint64_t seed) {
  return cfg.output_path() / ("seed_" + std::to_string(seed));
}

SeedRun train_seed(const RunConfig& cfg, std::uint64_t seed, const TrainOptions& opts) {
  cfg.validate();
  RunConfig seed_cfg = cfg;
  seed_cfg.seeds = {seed};
  const fs::path dir = seed_directory(cfg, seed);
  const fs::path ckpt_dir = dir / "checkpoints";
  const fs::path latest = ckpt_dir / "latest.ckpt";
  const fs::path metrics_path = dir / "metrics.csv";
  const fs::path mask_path = dir / "mask_events.jsonl";
  fs::create_directories(ckpt_dir);

  train::Trainer trainer(cfg.trainer_config(seed));
  std::uint64_t next_eval = cfg.eval_interval;
  double wall_offset = 0.0;
  if (opts.resume && fs::exists(latest)) {
    const auto ck = ndgrad::load_checkpoint(latest);
    RunConfig saved;
    saved.apply_text(ck.text("run/config"), latest.string());
    if (resumable_text(saved) != resumable_text(seed_cfg)) {
      throw VersionError("checkpoint " + latest.string() + " was written by a different configuration");
    }
    trainer.restore(ck);
    next_eval = std::stoull(ck.text("harness/next_eval"));
    wall_offset = std::stod(ck.text("harness/wall_seconds"));
    truncate_metrics(metrics_path, trainer.frames());
    truncate_mask_log(mask_path, trainer.frames());
  } else {
    fs::remove(metrics_path);
    fs::remove(mask_path);
  }

  MetricsWriter writer(metrics_path);
  std::ofstream masks(mask_path, std::ios::app);
  if (!masks) throw IoError("cannot write " + mask_path.string());

  const auto start = Clock::now();
  double window_seconds = 0.0, rl_sum = 0.0, aux_sum = 0.0;
  std::uint64_t window_frames = 0, rl_n = 0, aux_n = 0, window_masks = 0;
  while (trainer.frames() < cfg.frames) {
    const auto phase_start = Clock::now();
    const std::uint64_t phase_frame = trainer.frames();
    const auto cs = trainer.collect_rollouts();
    const auto ps = trainer.ppo_update();
    const auto as = trainer.auxiliary_update();
    window_seconds += seconds_since(phase_start);
    window_frames += cs.frames;
    rl_sum += ps.loss;
    ++rl_n;
    if (as.loss) {
      aux_sum += *as.loss;
      ++aux_n;
    }
    window_masks += cs.masks_applied;
    for (const auto& ev : cs.mask_events) {
      masks << nlohmann::json{{"frame", phase_frame},       {"episode", ev.episode},
                              {"step", ev.step},            {"subtask", ev.subtask},
                              {"score", ev.score},          {"running_mean", ev.running_mean},
                              {"probability", ev.probability}, {"draw", ev.draw},
                              {"applied", ev.applied}}
                   .dump()
            << '\n';
    }

    if (trainer.frames() < next_eval && trainer.frames() < cfg.frames) continue;
    const std::uint64_t frame = trainer.frames();
    MetricsRecord rec;
    rec.frame = frame;
    rec.episodes = trainer.episodes();
    rec.sr_train = train::evaluate_policy(trainer.params(), eval_spec(cfg, seed, grid::HoldoutPolicy::Train, frame))
                       .success_rate();
    rec.sr_holdout = train::evaluate_policy(trainer.params(), eval_spec(cfg, seed, grid::HoldoutPolicy::Eval, frame))
                         .success_rate();
    rec.rl_loss = rl_sum / static_cast<double>(rl_n);
    if (aux_n) rec.aux_loss = aux_sum / static_cast<double>(aux_n);
    rec.mask_events = window_masks;
    if (cfg.log_timing) {
      rec.fps = static_cast<double>(window_frames) / std::max(window_seconds, 1e-9);
      rec.wall_seconds = wall_offset + seconds_since(start);
    }
    writer.append(rec);
    masks.flush();
    while (next_eval <= frame) next_eval += cfg.eval_interval;

    ndgrad::Checkpoint ck = trainer.checkpoint();
    ck.put_text("run/config", seed_cfg.to_text());
    ck.put_text("harness/frames", std::to_string(frame));
    ck.put_text("harness/next_eval", std::to_string(next_eval));
    ck.put_text("harness/wall_seconds", format_double(wall_offset + seconds_since(start)));
    write_file_atomically(latest, [&](const fs::path& p) { ndgrad::save_checkpoint(p, ck); });

    if (opts.log) {
      *opts.log << "seed " << seed << " frame " << frame << " episodes " << rec.episodes << " sr_train "
                << rec.sr_train << " sr_holdout " << rec.sr_holdout << " rl_loss " << rec.rl_loss;
      if (rec.aux_loss) *opts.log << " aux_loss " << *rec.aux_loss;
      if (rec.fps) *opts.log << " fps " << std::fixed << std::setprecision(0) << *rec.fps << std::defaultfloat;
      *opts.log << std::endl;
    }
    window_seconds = rl_sum = aux_sum = 0.0;
    window_frames = rl_n = aux_n = window_masks = 0;
  }
  if (fs::exists(latest)) fs::copy_file(latest, ckpt_dir / "final.ckpt", fs::copy_options::overwrite_existing);
  return {seed, dir, read_metrics(metrics_path)};
}

std::vector<SeedRun> run_train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const fs::path out = cfg.output_path();
  fs::create_directories(out);
  {
    std::ofstream c(out / "config.txt", std::ios::trunc);
    if (!c) throw IoError("cannot write " + (out / "config.txt").string());
    c << cfg.to_text();
  }
  std::vector<SeedRun> runs;
  for (std::uint64_t s : cfg.seeds) runs.push_back(train_seed(cfg, s, opts));
  return runs;
}

fs::path sweep_directory(const RunConfig& base, const std::string& key, const std::string& value) {
  RunConfig c = base;
  c.output_dir = (fs::path(base.output_dir) / (key + "_" + value)).string();
  return c.output_path();
}

std::vector<fs::path> run_sweep(const RunConfig& base, const std::string& key, const std::vector<std::string>& values,
                                const TrainOptions& opts) {
  if (values.empty()) throw UsageError("sweep: at least one value required");
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig c = base;
    c.set(key, v);
    c.output_dir = (fs::path(base.output_dir) / (key + "_" + v)).string();
    c.validate();
    runs.push_back(c);
  }
  std::vector<fs::path> dirs;
  for (const auto& c : runs) {
    run_train(c, opts);
    dirs.push_back(c.output_path());
  }
  return dirs;
}

// ---------------------------------------------------------------------------

EvalPolicy parse_eval_policy(std::string_view s) {
  if (s == "model") return EvalPolicy::Model;
  if (s == "oracle") return EvalPolicy::Oracle;
  if (s == "random") return EvalPolicy::Random;
  throw UsageError("policy: expected model, oracle or random, got '" + std::string(s) + "'");
}

EvalReport run_eval(const EvalRequest& req) {
  if (req.episodes == 0) throw UsageError("episodes: must be at least 1");
  EvalReport rep;
  std::vector<grid::MissionSpec> missions;
  RunConfig level_src;

  if (req.policy == EvalPolicy::Model) {
    const auto ck = ndgrad::load_checkpoint(req.checkpoint);
    if (!ck.has_text("run/config")) throw VersionError(req.checkpoint.string() + " holds no run configuration");
    RunConfig rc;
    rc.apply_text(ck.text("run/config"), req.checkpoint.string());
    rc.validate();
    level_src = req.config.value_or(rc);
    if (!level_src.level) level_src.level = rc.level;
    level_src.validate();
    train::TrainerConfig tc = rc.trainer_config(rc.seeds.front());
    tc.agent.vocab_size = enc::Vocabulary().size();
    Rng init(0);
    enc::AgentParams params = enc::AgentParams::init(tc.agent, init);
    params.load(ck);
    rep.params_checksum_before = params.checksum();

    train::EvalSpec spec;
    spec.level = *level_src.level;
    spec.level_cfg = level_src.level_config();
    spec.split = req.split;
    spec.episodes = req.episodes;
    spec.seed = req.seed;
    spec.num_envs = std::min<std::size_t>(rc.num_envs, req.episodes);
    spec.greedy = req.greedy;
    spec.tracker = rc.tracker_config();
    spec.frame = ck.has_text("harness/frames") ? std::stoull(ck.text("harness/frames")) : 0;
    const auto r = train::evaluate_policy(params, spec);
    rep.episodes = r.episodes;
    rep.successes = r.successes;
    missions = r.missions;
    rep.params_checksum_after = params.checksum();
  } else {
    if (!req.config || !req.config->level) throw UsageError("level: required for oracle and random evaluation");
    level_src = *req.config;
    level_src.validate();
    const auto lc = level_src.level_config();
    Rng rng(mix_seed(req.seed, 0x72616e646f6d0001ULL));
    for (std::size_t i = 0; i < req.episodes; ++i) {
      auto g = grid::generate(*level_src.level, train::evaluation_mission_seed(req.seed, req.split, i), req.split, lc);
      missions.push_back(g.mission);
      if (req.policy == EvalPolicy::Oracle) {
        const auto plan = grid::solve(g.world);
        if (plan) rep.successes += grid::play(g.world, g.instruction, *plan).success ? 1 : 0;
      } else {
        while (g.world.outcome() == grid::Outcome::Running) {
          g.world.step(static_cast<grid::Action>(rng.below(grid::kNumActions)));
        }
        rep.successes += g.world.outcome() == grid::Outcome::Success ? 1 : 0;
      }
      ++rep.episodes;
    }
  }
  const auto holdout = level_src.level_config().holdout;
  for (const auto& m : missions) {
    rep.split_exclusive = rep.split_exclusive && grid::mission_admissible(m, req.split, holdout);
  }
  rep.success_rate = static_cast<double>(rep.successes) / static_cast<double>(rep.episodes);
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> random_words(Rng& rng, std::size_t m) {
  const auto& words = grid::mission_words();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(words[rng.below(words.size())]);
  return out;
}

grid::Episode random_episode(Rng& rng, std::size_t max_steps, std::size_t max_words) {
  auto g = grid::generate(grid::Level::GoToObj, rng.next_u64(), grid::HoldoutPolicy::Train);
  const std::size_t n = 1 + rng.below(max_steps);
  std::vector<grid::Action> actions;
  // Mostly movement so episodes rarely end before n steps.
  for (std::size_t i = 0; i < n; ++i) actions.push_back(static_cast<grid::Action>(rng.below(6)));
  grid::Episode ep = grid::play(g.world, g.instruction, actions);
  ep.instruction.words = random_words(rng, 1 + rng.below(max_words));
  return ep;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  constexpr double kStep = 1e-5;
  constexpr double kFloor = 1e-5;    // entries below this are checked in absolute terms
  constexpr double kAbsTol = 1e-8;
  constexpr std::size_t kTop = 6, kRandom = 6, kSmall = 2;
  const auto start = Clock::now();
  Rng rng(opts.seed);
  std::vector<GradcheckClass> classes;
  auto cls = [&](std::string_view name) -> GradcheckClass& {
    for (auto& c : classes) {
      if (c.name == name) return c;
    }
    classes.push_back({std::string(name)});
    return classes.back();
  };
  for (const char* name : {"embeddings", "gru", "mlp", "projections", "action_table", "attention"}) cls(name);

  for (std::size_t inst = 0; inst < opts.instances; ++inst) {
    enc::AgentConfig ac;
    ac.vocab_size = enc::Vocabulary().size();
    ac.embed_dim = 8;
    ac.rep_dim = 8;
    ac.instr_hidden = 8;
    ac.obs_hidden = 8;
    ac.memory_hidden = 4;
    ac.head_hidden = 4;
    ac.aggregation = inst % 2 ? enc::Aggregation::Attention : enc::Aggregation::Mean;
    ac.token_source = (inst / 2) % 2 ? enc::TokenSource::GruHidden : enc::TokenSource::Embedding;
    enc::AgentParams params = enc::AgentParams::init(ac, rng);
    std::vector<grid::Episode> eps;
    for (int i = 0; i < 3; ++i) eps.push_back(random_episode(rng, 5, 7));
    std::vector<const grid::Episode*> ptrs;
    for (const auto& e : eps) ptrs.push_back(&e);
    const double tau = 1.0;

    train::AuxGradient g;
    {
      std::optional<ndgrad::ScopedBackwardFault> fault;
      if (opts.fault_op) fault.emplace(*opts.fault_op, opts.fault_factor);
      g = train::auxiliary_gradients(ptrs, params, tau);
    }
    for (std::size_t t = 0; t < params.count(); ++t) {
      const auto klass = enc::AgentParams::parameter_class(params.name(t));
      if (klass == "policy") continue;
      const Tensor& grad = g.grads[t];
      std::vector<std::size_t> large, small;
      for (std::size_t j = 0; j < grad.size(); ++j) (std::abs(grad[j]) > kFloor ? large : small).push_back(j);
      std::sort(large.begin(), large.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(grad[a]) > std::abs(grad[b]) || (std::abs(grad[a]) == std::abs(grad[b]) && a < b);
      });
      std::vector<std::size_t> picks(large.begin(), large.begin() + std::min(kTop, large.size()));
      for (std::size_t r = 0; r < kRandom && large.size() > kTop; ++r) {
        picks.push_back(large[kTop + rng.below(large.size() - kTop)]);
      }
      for (std::size_t r = 0; r < kSmall && !small.empty(); ++r) picks.push_back(small[rng.below(small.size())]);

      GradcheckClass& c = cls(klass);
      for (std::size_t j : picks) {
        double& x = params.tensor(t)[j];
        const double orig = x;
        auto central = [&](double h) {
          x = orig + h;
          const double up = train::auxiliary_loss_value(ptrs, params, tau);
          x = orig - h;
          const double down = train::auxiliary_loss_value(ptrs, params, tau);
          x = orig;
          return (up - down) / (2.0 * h);
        };
        double numeric = central(kStep);
        // A ReLU kink inside [x - h, x + h] makes the difference quotient
        // meaningless; estimates at h and h/10 then disagree. Such entries
        // are re-measured at the smaller step.
        const double finer = central(kStep / 10.0);
        const double scale = std::max({std::abs(numeric), std::abs(finer), kFloor});
        if (std::abs(numeric - finer) / scale > opts.tolerance) {
          numeric = finer;
          ++c.kinks;
        }
        const double mag = std::max(std::abs(grad[j]), std::abs(numeric));
        if (mag > kFloor) {
          c.max_rel_error = std::max(c.max_rel_error, std::abs(grad[j] - numeric) / mag);
        } else {
          c.max_abs_error = std::max(c.max_abs_error, std::abs(grad[j] - numeric));
        }
        ++c.compared;
      }
    }
  }
  GradcheckReport rep;
  for (auto& c : classes) {
    c.pass = c.max_rel_error < opts.tolerance && c.max_abs_error < kAbsTol;
    rep.pass = rep.pass && c.pass;
  }
  rep.classes = std::move(classes);
  rep.instances = opts.instances;
  rep.seconds = seconds_since(start);
  return rep;
}

void print_gradcheck(std::ostream& os, const GradcheckReport& r) {
  os << "class          compared  kinks  max_rel_error  max_abs_error(small)  status\n";
  for (const auto& c : r.classes) {
    os << std::left << std::setw(15) << c.name << std::right << std::setw(8) << c.compared << std::setw(7) << c.kinks << std::setw(15)
       << std::scientific << std::setprecision(3) << c.max_rel_error << std::setw(22) << c.max_abs_error
       << std::defaultfloat << "  " << (c.pass ? "ok" : "FAIL") << '\n';
  }
  os << r.instances << " instances in " << std::fixed << std::setprecision(2) << r.seconds << " s: "
     << (r.pass ? "PASS" : "FAIL") << std::defaultfloat << '\n';
}

OracleCheckReport run_oracle_check(std::uint64_t seed, std::size_t instances, double tolerance) {
  const auto start = Clock::now();
  Rng rng(seed);
  OracleCheckReport rep;
  constexpr std::size_t d = 8;
  auto random_rows = [&](std::size_t rows) {
    verify::Matrix m(rows, verify::Vector(d));
    for (auto& r : m) {
      double norm = 0.0;
      for (double& v : r) {
        v = rng.normal();
        norm += v * v;
      }
      for (double& v : r) v /= std::sqrt(norm);
    }
    return m;
  };
  auto to_tensor = [](const verify::Matrix& m) -> Tensor {
    Tensor t({m.size(), d});
    for (std::size_t i = 0; i < m.size(); ++i) std::copy(m[i].begin(), m[i].end(), t.values().begin() + i * d);
    return t;
  };
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const std::size_t N = 1 + rng.below(5);
    const double tau = inst % 3 == 0 ? 1.0 : rng.uniform(0.05, 2.0);
    std::vector<verify::NaiveEpisode> neps;
    std::vector<verify::NaiveInstruction> ninstr;
    for (std::size_t i = 0; i < N; ++i) {
      neps.push_back({random_rows(1 + rng.below(5)), random_rows(1)[0]});
      ninstr.push_back({random_rows(1 + rng.below(7)), random_rows(1)[0]});
    }
    const auto S_ref = verify::naive_score_matrix(neps, ninstr, tau);
    const double L_ref = verify::naive_contrastive(neps, ninstr, tau);

    ndgrad::Tape tape;
    std::vector<xclip::EpisodeReps> eps;
    std::vector<xclip::InstructionReps> instrs;
    verify::Matrix X_all, xg, V_all, vg;
    std::vector<std::size_t> n_sizes, m_sizes;
    for (std::size_t i = 0; i < N; ++i) {
      eps.push_back({tape.constant(to_tensor(neps[i].X)), tape.constant(to_tensor(verify::Matrix{neps[i].x_global}))});
      instrs.push_back({tape.constant(to_tensor(ninstr[i].V)), tape.constant(to_tensor(verify::Matrix{ninstr[i].v_global}))});
      X_all.insert(X_all.end(), neps[i].X.begin(), neps[i].X.end());
      V_all.insert(V_all.end(), ninstr[i].V.begin(), ninstr[i].V.end());
      xg.push_back(neps[i].x_global);
      vg.push_back(ninstr[i].v_global);
      n_sizes.push_back(neps[i].X.size());
      m_sizes.push_back(ninstr[i].V.size());
    }
    const auto S = xclip::score_matrix(eps, instrs, tau);
    const auto S_fused = xclip::score_matrix_fused(
        tape.constant(to_tensor(X_all)), tape.constant(to_tensor(xg)), xclip::block_offsets(n_sizes),
        tape.constant(to_tensor(V_all)), tape.constant(to_tensor(vg)), xclip::block_offsets(m_sizes), tau);
    const double L = xclip::contrastive_loss(eps, instrs, tau).value().item();
    const double L_fused = xclip::contrastive_loss_from_scores(S_fused, tau).value().item();
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        rep.max_score_error = std::max({rep.max_score_error, std::abs(S.value().at(i, j) - S_ref[i][j]),
                                        std::abs(S_fused.value().at(i, j) - S_ref[i][j])});
      }
    }
    rep.max_loss_error = std::max({rep.max_loss_error, std::abs(L - L_ref), std::abs(L_fused - L_ref)});
  }
  rep.instances = instances;
  rep.pass = rep.max_score_error < tolerance && rep.max_loss_error < tolerance;
  rep.seconds = seconds_since(start);
  return rep;
}

void print_oracle_check(std::ostream& os, const OracleCheckReport& r) {
  os << r.instances << " instances: max score error " << std::scientific << std::setprecision(3) << r.max_score_error
     << ", max loss error " << r.max_loss_error << std::defaultfloat << " (" << std::fixed << std::setprecision(2)
     << r.seconds << " s): " << (r.pass ? "PASS" : "FAIL") << std::defaultfloat << '\n';
}

}  // namespace carel::harness
