#include "carel/trainer/ppo.hpp"

#include <cmath>

#include "carel/errors.hpp"

namespace carel::train {

void PpoConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ParameterError(std::string(field) + " " + rule);
  };
  require(learning_rate > 0.0, "learning_rate", "must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be positive");
  require(clip_epsilon > 0.0, "clip_epsilon", "must be positive");
  require(gamma > 0.0 && gamma <= 1.0, "gamma", "must lie in (0, 1]");
  require(gae_lambda > 0.0 && gae_lambda <= 1.0, "gae_lambda", "must lie in (0, 1]");
  require(epochs >= 1, "ppo_epochs", "must be at least 1");
  require(entropy_coef >= 0.0, "entropy_coef", "must be non-negative");
  require(value_coef >= 0.0, "value_coef", "must be non-negative");
  require(max_grad_norm > 0.0, "max_grad_norm", "must be positive");
  require(num_envs >= 1, "num_envs", "must be at least 1");
  require(recurrence >= 1, "recurrence", "must be at least 1");
  require(rollout_length >= recurrence && rollout_length % recurrence == 0, "rollout_length",
          "must be a positive multiple of recurrence");
  require(batch_size >= recurrence && batch_size % recurrence == 0, "batch_size",
          "must be a positive multiple of recurrence");
}

void Adam::step(enc::AgentParams& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.count()) throw DimensionError("one gradient per parameter tensor expected");
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.count(); ++i) {
      m_.emplace_back(params.tensor(i).shape());
      v_.emplace_back(params.tensor(i).shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Tensor& p = params.tensor(i);
    const Tensor& g = grads[i];
    if (g.size() != p.size()) throw DimensionError("gradient shape mismatch for " + params.name(i));
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      p[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void Adam::save(ndgrad::Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.put_text(prefix + "steps", std::to_string(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    ckpt.put(prefix + "m/" + std::to_string(i), m_[i]);
    ckpt.put(prefix + "v/" + std::to_string(i), v_[i]);
  }
}

void Adam::load(const ndgrad::Checkpoint& ckpt, const std::string& prefix, const enc::AgentParams& shape_like) {
  t_ = std::stoull(ckpt.text(prefix + "steps"));
  m_.clear();
  v_.clear();
  if (t_ == 0) return;
  for (std::size_t i = 0; i < shape_like.count(); ++i) {
    m_.push_back(ckpt.tensor(prefix + "m/" + std::to_string(i)));
    v_.push_back(ckpt.tensor(prefix + "v/" + std::to_string(i)));
    if (m_.back().shape() != shape_like.tensor(i).shape()) throw VersionError("optimizer state shape mismatch");
  }
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= f;
    }
  }
  return norm;
}

GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                      const std::vector<bool>& dones, double bootstrap, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw DimensionError("rewards, values and dones must align");
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap;
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(adv.size()));
  for (double& a : adv) a = sd > 0.0 ? (a - mean) / (sd + 1e-8) : a - mean;
}

}  // namespace carel::train
