#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "carel/gridworld/levels.hpp"
#include "carel/harness/config.hpp"
#include "carel/harness/metrics.hpp"

namespace carel::harness {

// ---- training ------------------------------------------------------------

struct TrainOptions {
  bool resume = false;         // continue from seed_*/checkpoints/latest.ckpt when present
  std::ostream* log = nullptr;  // progress lines
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::vector<MetricsRecord> records;  // the whole metrics file after the run
};

// Layout under cfg.output_path():
//   config.txt                       the validated config, verbatim
//   seed_<s>/metrics.csv             one row per evaluation window
//   seed_<s>/mask_events.jsonl       every triggered spike (applied or not)
//   seed_<s>/checkpoints/latest.ckpt and final.ckpt
std::vector<SeedRun> run_train(const RunConfig& cfg, const TrainOptions& opts = {});
SeedRun train_seed(const RunConfig& cfg, std::uint64_t seed, const TrainOptions& opts = {});
std::filesystem::path seed_directory(const RunConfig& cfg, std::uint64_t seed);

// One run per value of `key`, each under <output>/<key>_<value>/.
std::vector<std::filesystem::path> run_sweep(const RunConfig& base, const std::string& key,
                                             const std::vector<std::string>& values, const TrainOptions& opts = {});
std::filesystem::path sweep_directory(const RunConfig& base, const std::string& key, const std::string& value);

// ---- evaluation ----------------------------------------------------------

enum class EvalPolicy { Model, Oracle, Random };
EvalPolicy parse_eval_policy(std::string_view s);

struct EvalRequest {
  EvalPolicy policy = EvalPolicy::Model;
  std::filesystem::path checkpoint;  // Model only
  // Level and level parameters; for Model they default to the checkpoint's
  // run config, whose tracking setting always applies.
  std::optional<RunConfig> config;
  std::size_t episodes = 100;
  grid::HoldoutPolicy split = grid::HoldoutPolicy::Eval;
  std::uint64_t seed = 0;
  bool greedy = true;
};

struct EvalReport {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  bool split_exclusive = true;  // every mission admissible under the requested split
  std::uint64_t params_checksum_before = 0;
  std::uint64_t params_checksum_after = 0;
};

// VersionError when the checkpoint does not match its recorded config.
EvalReport run_eval(const EvalRequest& req);

// ---- verification --------------------------------------------------------

struct GradcheckClass {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;  // over sampled entries below the magnitude floor
  std::size_t compared = 0;
  std::size_t kinks = 0;  // entries re-measured at a tenth of the step
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckClass> classes;
  std::size_t instances = 0;
  double seconds = 0.0;
  bool pass = true;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  double tolerance = 1e-4;
  // Test fixture: corrupt the backward rule of this op by `fault_factor`.
  std::optional<std::string> fault_op;
  double fault_factor = 1.5;
};

// Random instances (N = 3 episodes of n <= 5 steps, instructions of m <= 7
// tokens, d = 8) through the full auxiliary loss; analytic gradients against
// central differences for every parameter class the loss touches.
GradcheckReport run_gradcheck(const GradcheckOptions& opts);
void print_gradcheck(std::ostream& os, const GradcheckReport& r);

struct OracleCheckReport {
  std::size_t instances = 0;
  double max_score_error = 0.0;  // composed and fused score matrices vs the loop oracle
  double max_loss_error = 0.0;
  double seconds = 0.0;
  bool pass = true;
};

OracleCheckReport run_oracle_check(std::uint64_t seed, std::size_t instances = 100, double tolerance = 1e-10);
void print_oracle_check(std::ostream& os, const OracleCheckReport& r);

}  // namespace carel::harness
