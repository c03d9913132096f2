#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <string>

#include "carel/errors.hpp"
#include "carel/harness/config.hpp"
#include "carel/harness/run.hpp"

using namespace carel;
using namespace carel::harness;

namespace {

std::string kebab(std::string s) {
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

bool is_bool_key(const std::string& key) {
  const std::string v = RunConfig().get(key);
  return v == "on" || v == "off";
}

// Every RunConfig field as --kebab-case; booleans also work as bare flags.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "flat key = value config file (flags override it)");
    for (const auto& key : RunConfig::keys()) {
      auto* opt = app->add_option("--" + kebab(key), values[key], std::string(RunConfig::help(key)));
      if (is_bool_key(key)) opt->expected(0, 1)->default_str("on");
      options.emplace_back(key, opt);
    }
  }

  RunConfig build() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg = load_run_config(config_file);
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      const std::string& v = values.at(key);
      cfg.set(key, v.empty() && is_bool_key(key) ? "on" : v);
    }
    return cfg;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"carel: instruction-following agents with a contrastive auxiliary loss"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train one run per seed");
  ConfigFlags train_flags;
  train_flags.attach(train);
  bool resume = false;
  train->add_flag("--resume", resume, "continue each seed from its latest checkpoint");

  auto* sweep = app.add_subcommand("sweep", "one training run per value of a config key");
  ConfigFlags sweep_flags;
  sweep_flags.attach(sweep);
  std::string sweep_param, sweep_values;
  sweep->add_option("--param", sweep_param, "config key to vary")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();

  auto* eval = app.add_subcommand("eval", "success rate of a checkpoint, the oracle or a random policy");
  ConfigFlags eval_flags;
  eval_flags.attach(eval);
  std::string checkpoint, policy = "model", split = "holdout";
  std::size_t episodes = 100;
  std::uint64_t eval_seed = 0;
  bool sample = false;
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (policy model)");
  eval->add_option("--policy", policy, "model, oracle or random")->capture_default_str();
  eval->add_option("--episodes", episodes, "missions to evaluate")->capture_default_str();
  eval->add_option("--split", split, "train or holdout")->capture_default_str();
  eval->add_option("--seed", eval_seed, "evaluation mission seed")->capture_default_str();
  eval->add_flag("--sample", sample, "sample actions instead of argmax");

  auto* gradcheck = app.add_subcommand("gradcheck", "auxiliary-loss gradients against finite differences");
  GradcheckOptions gopts;
  std::string corrupt_op;
  gradcheck->add_option("--seed", gopts.seed, "instance seed")->capture_default_str();
  gradcheck->add_option("--instances", gopts.instances, "random instances")->capture_default_str();
  gradcheck->add_option("--tolerance", gopts.tolerance, "relative error bound")->capture_default_str();
  gradcheck->add_option("--corrupt-op", corrupt_op, "test fixture: scale this op's backward rule");
  gradcheck->add_option("--corrupt-factor", gopts.fault_factor, "scale for --corrupt-op")->capture_default_str();

  auto* oracle = app.add_subcommand("oracle-check", "similarity and loss against the loop oracle");
  std::uint64_t oracle_seed = 0;
  std::size_t oracle_instances = 100;
  oracle->add_option("--seed", oracle_seed, "instance seed")->capture_default_str();
  oracle->add_option("--instances", oracle_instances, "random instances")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = train_flags.build();
      cfg.validate();
      TrainOptions opts;
      opts.resume = resume;
      opts.log = &std::cout;
      for (const auto& run : run_train(cfg, opts)) std::cout << "wrote " << run.dir.string() << "\n";
      return 0;
    }
    if (*sweep) {
      const RunConfig cfg = sweep_flags.build();
      TrainOptions opts;
      opts.log = &std::cout;
      for (const auto& dir : run_sweep(cfg, sweep_param, split_list(sweep_values), opts)) {
        std::cout << "wrote " << dir.string() << "\n";
      }
      return 0;
    }
    if (*eval) {
      EvalRequest req;
      req.policy = parse_eval_policy(policy);
      req.checkpoint = checkpoint;
      req.episodes = episodes;
      req.split = grid::parse_holdout_policy(split);
      req.seed = eval_seed;
      req.greedy = !sample;
      if (req.policy == EvalPolicy::Model && checkpoint.empty()) throw UsageError("checkpoint: required for policy model");
      RunConfig overrides = eval_flags.build();
      if (req.policy != EvalPolicy::Model || overrides.level) req.config = overrides;
      const auto rep = run_eval(req);
      std::cout << "episodes " << rep.episodes << " successes " << rep.successes << " success_rate "
                << rep.success_rate << " split_exclusive " << (rep.split_exclusive ? "yes" : "no") << "\n";
      return rep.split_exclusive ? 0 : 1;
    }
    if (*gradcheck) {
      if (!corrupt_op.empty()) gopts.fault_op = corrupt_op;
      const auto rep = run_gradcheck(gopts);
      print_gradcheck(std::cout, rep);
      return rep.pass ? 0 : 1;
    }
    if (*oracle) {
      const auto rep = run_oracle_check(oracle_seed, oracle_instances);
      print_oracle_check(std::cout, rep);
      return rep.pass ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
