#include "carel/tracker/tracker.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "carel/errors.hpp"

namespace carel::track {

std::string_view to_string(ScoreSource s) { return s == ScoreSource::EW ? "E-W" : "O-W"; }

ScoreSource parse_score_source(std::string_view s) {
  std::string key;
  for (char c : s) {
    if (c != '-' && c != '_') key.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  if (key == "EW") return ScoreSource::EW;
  if (key == "OW") return ScoreSource::OW;
  throw ParameterError("score source must be E-W or O-W, got '" + std::string(s) + "'");
}

void TrackerConfig::validate() const {
  if (!(k > 1.0)) throw ParameterError("tracker k must be greater than 1");
  if (warmup_steps < 1) throw ParameterError("tracker warmup_steps must be at least 1");
  if (max_frames == 0) throw ParameterError("tracker max_frames must be positive");
  if (forced_probability && !(*forced_probability >= 0.0 && *forced_probability <= 1.0)) {
    throw ParameterError("forced masking probability must lie in [0, 1]");
  }
}

void SubtaskState::record(double score) {
  score_history.push_back(score);
  running_mean += (score - running_mean) / static_cast<double>(score_history.size());
}

namespace {

bool is_conjunction_word(const std::string& w) { return w == "and" || w == "then"; }
bool is_trailing_punctuation(const std::string& w) { return w == "." || w == "!" || w == "?"; }

}  // namespace

std::vector<SubtaskState> split_instruction(const std::vector<std::string>& tokens) {
  std::vector<SubtaskState> out;
  std::size_t clause_begin = 0;
  std::size_t i = 0;
  auto close_clause = [&](std::size_t end) {
    if (end == clause_begin) throw ParseError("empty clause at token " + std::to_string(end));
    SubtaskState s;
    s.span = {clause_begin, end};
    out.push_back(s);
  };
  while (i < tokens.size()) {
    std::size_t len = 0;
    if (is_conjunction_word(tokens[i])) {
      len = 1;
    } else if (tokens[i] == "," && i + 1 < tokens.size() && tokens[i + 1] == "then") {
      len = 2;
    }
    if (len == 0) {
      ++i;
      continue;
    }
    close_clause(i);
    out.back().conjunction = TokenSpan{i, i + len};
    i += len;
    clause_begin = i;
  }
  std::size_t content_end = tokens.size();
  while (content_end > clause_begin && is_trailing_punctuation(tokens[content_end - 1])) --content_end;
  if (content_end == clause_begin) throw ParseError("instruction has no content after its last conjunction");
  close_clause(tokens.size());
  out.front().status = SubtaskStatus::Acceptable;
  return out;
}

double subtask_score(const TokenScores& scores, const SubtaskState& subtask, ScoreSource source) {
  if (subtask.status == SubtaskStatus::Masked) throw ContractError("cannot score a masked subtask");
  const std::vector<double>& row = source == ScoreSource::EW ? scores.s_ew : scores.s_ow_max;
  if (subtask.span.size() == 0 || subtask.span.end > row.size()) {
    throw ContractError("subtask span [" + std::to_string(subtask.span.begin) + ", " +
                        std::to_string(subtask.span.end) + ") outside an instruction of " +
                        std::to_string(row.size()) + " tokens");
  }
  double total = 0.0;
  for (std::size_t j = subtask.span.begin; j < subtask.span.end; ++j) total += row[j];
  return total / static_cast<double>(subtask.span.size());
}

bool spike_check(SubtaskState& state, double new_score, double k, std::size_t warmup, bool guard) {
  const bool warmed = state.score_history.size() >= warmup;
  const double mean = state.running_mean;
  const bool triggered = warmed && (!guard || mean > 0.0) && new_score >= k * mean;
  state.record(new_score);
  return triggered;
}

double masking_probability(std::uint64_t current_frame, std::uint64_t max_frames) {
  if (max_frames == 0) throw ParameterError("max_frames must be positive");
  return std::tanh(static_cast<double>(current_frame) / static_cast<double>(max_frames));
}

void apply_mask(std::vector<std::string>& tokens, std::vector<SubtaskState>& subtasks, std::size_t index) {
  if (index >= subtasks.size()) throw ContractError("subtask index out of range");
  SubtaskState& s = subtasks[index];
  if (s.status == SubtaskStatus::Masked) throw ContractError("subtask " + std::to_string(index) + " is already masked");
  auto mask = [&](TokenSpan span) {
    if (span.end > tokens.size()) throw ContractError("mask span outside the instruction");
    for (std::size_t j = span.begin; j < span.end; ++j) tokens[j] = std::string(kMaskToken);
  };
  mask(s.span);
  if (s.conjunction) mask(*s.conjunction);
  s.status = SubtaskStatus::Masked;
  for (auto& other : subtasks) {
    if (other.status == SubtaskStatus::Acceptable) break;
    if (other.status == SubtaskStatus::Pending) {
      other.status = SubtaskStatus::Acceptable;
      break;
    }
  }
}

PartialEpisodeScorer::PartialEpisodeScorer(std::vector<double> V, std::size_t rows, std::size_t dim, bool normalize)
    : V_(std::move(V)), m_(rows), d_(dim), normalize_(normalize), sum_(dim, 0.0), global_(dim, 0.0),
      ow_max_(rows, std::numeric_limits<double>::lowest()) {
  if (V_.size() != rows * dim) throw DimensionError("token reps do not match rows x dim");
}

PartialEpisodeScorer PartialEpisodeScorer::restore(const Snapshot& s) {
  PartialEpisodeScorer out(s.V, s.m, s.d, s.normalize);
  if (s.sum.size() != s.d || s.global.size() != s.d || s.ow_max.size() != s.m) {
    throw DimensionError("scorer snapshot sizes are inconsistent");
  }
  out.sum_ = s.sum;
  out.global_ = s.global;
  out.ow_max_ = s.ow_max;
  out.steps_ = s.steps;
  return out;
}

void PartialEpisodeScorer::add(std::span<const double> x_t) {
  if (x_t.size() != d_) throw DimensionError("x_t width does not match the token reps");
  ++steps_;
  for (std::size_t k = 0; k < d_; ++k) sum_[k] += x_t[k];
  double norm = 0.0;
  for (std::size_t k = 0; k < d_; ++k) {
    global_[k] = sum_[k] / static_cast<double>(steps_);
    norm += global_[k] * global_[k];
  }
  if (normalize_) {
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& g : global_) g /= norm;
    }
  }
  for (std::size_t j = 0; j < m_; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d_; ++k) s += x_t[k] * V_[j * d_ + k];
    ow_max_[j] = std::max(ow_max_[j], s);
  }
}

void PartialEpisodeScorer::set_global(std::span<const double> x_global) {
  if (x_global.size() != d_) throw DimensionError("x_global width does not match the token reps");
  global_.assign(x_global.begin(), x_global.end());
}

TokenScores PartialEpisodeScorer::scores() const {
  TokenScores out;
  out.s_ew.resize(m_);
  for (std::size_t j = 0; j < m_; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d_; ++k) s += global_[k] * V_[j * d_ + k];
    out.s_ew[j] = s;
  }
  out.s_ow_max = ow_max_;  // lowest() until the first step
  return out;
}

InstructionTracker::InstructionTracker(TrackerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed) {
  cfg_.validate();
}

void InstructionTracker::reset(const std::vector<std::string>& original, std::uint64_t episode_id) {
  original_ = original;
  masked_ = original;
  subtasks_ = cfg_.enabled ? split_instruction(original) : std::vector<SubtaskState>{};
  episode_ = episode_id;
  step_ = 0;
}

void InstructionTracker::restore(const Snapshot& s) {
  rng_.set_state(s.rng);
  original_ = s.original;
  masked_ = s.masked;
  subtasks_ = s.subtasks;
  episode_ = s.episode;
  step_ = s.step;
}

std::optional<std::size_t> InstructionTracker::acceptable() const {
  for (std::size_t i = 0; i < subtasks_.size(); ++i) {
    if (subtasks_[i].status == SubtaskStatus::Acceptable) return i;
  }
  return std::nullopt;
}

std::size_t InstructionTracker::masked_count() const {
  return static_cast<std::size_t>(std::count_if(subtasks_.begin(), subtasks_.end(),
                                                [](const SubtaskState& s) { return s.status == SubtaskStatus::Masked; }));
}

std::optional<MaskEvent> InstructionTracker::step(const TokenScores& scores, std::uint64_t frame) {
  ++step_;
  if (!cfg_.enabled) return std::nullopt;
  const auto current = acceptable();
  if (!current) return std::nullopt;
  SubtaskState& s = subtasks_[*current];
  const double score = subtask_score(scores, s, cfg_.score_source);
  const double mean_before = s.running_mean;
  if (!spike_check(s, score, cfg_.k, cfg_.warmup_steps, cfg_.positive_mean_guard)) return std::nullopt;

  MaskEvent ev;
  ev.episode = episode_;
  ev.step = step_;
  ev.subtask = *current;
  ev.score = score;
  ev.running_mean = mean_before;
  ev.probability = cfg_.forced_probability ? *cfg_.forced_probability : masking_probability(frame, cfg_.max_frames);
  ev.draw = rng_.uniform();
  ev.applied = ev.draw < ev.probability;
  if (ev.applied) apply_mask(masked_, subtasks_, *current);
  return ev;
}

}  // namespace carel::track
