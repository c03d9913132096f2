#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "carel/encoders/agent.hpp"
#include "carel/ndgrad/checkpoint.hpp"

namespace carel::train {

using ndgrad::Tensor;

struct PpoConfig {
  double learning_rate = 7e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 256;  // transitions per minibatch
  double clip_epsilon = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.99;
  std::size_t epochs = 4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  std::size_t rollout_length = 40;
  std::size_t num_envs = 16;
  std::size_t recurrence = 8;  // BPTT length for the policy memory
  bool normalize_advantages = true;

  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // One update of every tensor in params from the matching gradient.
  void step(enc::AgentParams& params, const std::vector<Tensor>& grads);
  std::uint64_t steps() const { return t_; }

  void save(ndgrad::Checkpoint& ckpt, const std::string& prefix) const;
  void load(const ndgrad::Checkpoint& ckpt, const std::string& prefix, const enc::AgentParams& shape_like);

 private:
  double lr_ = 7e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Rescales grads in place so their global L2 norm is at most max_norm;
// returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Generalized advantage estimation over one environment's time-ordered
// sequence. dones[t] marks that the episode ended after step t; bootstrap is
// the value of the state following the last step (ignored when it ended).
// Advantages are raw; batch normalisation happens in the PPO update.
GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                      const std::vector<bool>& dones, double bootstrap, double gamma, double lambda);

// In place: mean 0, standard deviation 1 (left centred when the deviation is 0).
void normalize_advantages(std::vector<double>& adv);

}  // namespace carel::train
