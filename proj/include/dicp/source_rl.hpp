#pragma once

// Actor-critic PPO used as the source algorithm whose learning histories are
// distilled. Mirrors the usual clipped-surrogate recipe: separate tanh MLPs for
// policy and value, GAE, per-minibatch advantage normalization, Adam, global
// gradient-norm clipping.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "dicp/envs.hpp"
#include "dicp/rng.hpp"

namespace dicp {

struct LearningHistory;

struct PPOConfig {
  double learning_rate = 3e-4;
  int n_steps = 20;
  int batch_size = 50;
  int n_epochs = 20;
  double gamma = 0.99;
  double clip_range = 0.2;
  double gae_lambda = 0.95;
  double vf_coef = 0.5;
  double ent_coef = 0.01;
  double max_grad_norm = 0.5;
  double adam_eps = 1e-5;
  std::int64_t total_timesteps = 100'000;
  std::vector<int> policy_hidden{64, 64};
  std::uint64_t seed = 0;

  /// Per-family defaults (learning rate, rollout length, minibatch, epochs).
  static PPOConfig defaults_for(Family family);
  void validate() const;
  /// Stable digest of every field except the seed.
  std::string fingerprint() const;
};

void to_json(nlohmann::json& j, const PPOConfig& c);
void from_json(const nlohmann::json& j, PPOConfig& c);

struct RolloutBuffer {
  std::vector<int> observations;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<double> value_estimates;
  std::vector<double> log_probs;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const noexcept { return observations.size(); }
  void clear();
  void push(int obs, int action, double reward, bool done, double value, double log_prob);
};

/// advantages[t] = delta_t + gamma*lambda*(1-done_t)*advantages[t+1], with
/// delta_t = r_t + gamma*(1-done_t)*V_{t+1} - V_t and V_T = bootstrap_value.
RolloutBuffer compute_gae(RolloutBuffer buffer, double gamma, double gae_lambda,
                          double bootstrap_value);

/// Layout and math of a dense tanh MLP over one-hot observations. The
/// parameters live in caller-owned flat storage (weights column-major, then
/// bias, per layer) so several networks can share one optimizer vector.
class Mlp {
 public:
  using Vector = Eigen::VectorXf;
  using Matrix = Eigen::MatrixXf;

  Mlp() = default;
  Mlp(int n_inputs, std::vector<int> hidden, int n_outputs);

  int n_inputs() const noexcept { return sizes_.front(); }
  int n_outputs() const noexcept { return sizes_.back(); }
  std::size_t num_params() const noexcept { return num_params_; }

  /// Orthogonal weights with `hidden_gain` on hidden layers and
  /// `output_gain` on the output layer; zero biases.
  void initialize(float* params, float hidden_gain, float output_gain, Rng& rng) const;

  struct Cache {
    std::vector<int> inputs;
    std::vector<Matrix> activations;  // post-tanh hidden activations, one column per sample
  };

  /// Outputs, one column per sample.
  Matrix forward(const float* params, std::span<const int> inputs, Cache* cache = nullptr) const;
  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(outputs).
  void backward(const float* params, const Cache& cache, const Matrix& d_outputs,
                float* grad) const;

 private:
  Eigen::Map<const Matrix> weight(const float* params, std::size_t layer) const;
  Eigen::Map<const Vector> bias(const float* params, std::size_t layer) const;

  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  std::size_t num_params_ = 0;
};

class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(Eigen::VectorXf& params, const Eigen::VectorXf& grad);
  std::int64_t steps() const noexcept { return t_; }

 private:
  Eigen::VectorXf m_, v_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
};

/// Separate policy and value MLPs sharing one flat parameter vector and one
/// Adam optimizer.
class ActorCritic {
 public:
  ActorCritic() = default;
  ActorCritic(int n_obs, const PPOConfig& config, Rng& rng);

  const Mlp& policy() const noexcept { return policy_; }
  const Mlp& value() const noexcept { return value_; }
  Eigen::VectorXf& params() noexcept { return params_; }
  const Eigen::VectorXf& params() const noexcept { return params_; }
  const float* policy_params() const noexcept { return params_.data(); }
  const float* value_params() const noexcept {
    return params_.data() + policy_.num_params();
  }
  AdamOptimizer& optimizer() noexcept { return optimizer_; }

  /// Action probabilities for one observation.
  std::array<double, kNumActions> action_probs(int obs) const;
  double value_of(int obs) const;

 private:
  Mlp policy_;
  Mlp value_;
  Eigen::VectorXf params_;
  AdamOptimizer optimizer_;
};

struct PPOUpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
};

/// Clipped surrogate objective for one sample.
double clipped_surrogate(double ratio, double advantage, double clip_range);

struct MinibatchLoss {
  double total = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

/// Clipped-surrogate loss of one minibatch (advantages normalized within it);
/// writes d(total)/d(params) into `grad` when non-null.
MinibatchLoss ppo_minibatch_loss(const ActorCritic& params, const RolloutBuffer& buffer,
                                 std::span<const std::size_t> indices, const PPOConfig& config,
                                 Eigen::VectorXf* grad);

/// n_epochs passes over shuffled minibatches of the buffer. Throws
/// NumericError when a loss or gradient is not finite.
PPOUpdateStats ppo_update(ActorCritic& params, const RolloutBuffer& buffer,
                          const PPOConfig& config, Rng& rng);

/// Optional observer called after every PPO update with the steps taken so
/// far; used by the CLI for progress output.
using SourceProgress = std::function<void(std::int64_t steps, const PPOUpdateStats&)>;

/// Runs PPO on `task` for config.total_timesteps environment steps and records
/// every transition, exploratory ones included.
LearningHistory train_source(const GridTask& task, const PPOConfig& config,
                             const SourceProgress& progress = {});

}  // namespace dicp
