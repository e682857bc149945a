#include "dicp/source_rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/fpenv.hpp"
#include "dicp/histories.hpp"

namespace dicp {

PPOConfig PPOConfig::defaults_for(Family family) {
  PPOConfig c;
  switch (family) {
    case Family::Darkroom:
      c.n_steps = 20;
      c.batch_size = 50;
      c.n_epochs = 20;
      break;
    case Family::DarkKeyToDoor:
      c.n_steps = 50;
      c.batch_size = 100;
      c.n_epochs = 10;
      break;
    case Family::DarkroomPermuted:
      c.n_steps = 50;
      c.batch_size = 50;
      c.n_epochs = 20;
      break;
  }
  return c;
}

void PPOConfig::validate() const {
  if (n_steps < 1 || batch_size < 1 || n_epochs < 1 || total_timesteps < 1) {
    throw ConfigError("PPO n_steps, batch_size, n_epochs and total_timesteps must be positive");
  }
  if (!(learning_rate > 0.0) || !(clip_range > 0.0)) {
    throw ConfigError("PPO learning_rate and clip_range must be positive");
  }
  if (gamma < 0.0 || gamma > 1.0 || gae_lambda < 0.0 || gae_lambda > 1.0) {
    throw ConfigError("PPO gamma and gae_lambda must lie in [0, 1]");
  }
  if (policy_hidden.empty()) throw ConfigError("PPO needs at least one hidden layer");
}

std::string PPOConfig::fingerprint() const {
  nlohmann::json j = *this;
  j.erase("seed");
  std::ostringstream out;
  out << std::hex << fnv1a(j.dump());
  return out.str();
}

void to_json(nlohmann::json& j, const PPOConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"n_steps", c.n_steps},
                     {"batch_size", c.batch_size},       {"n_epochs", c.n_epochs},
                     {"gamma", c.gamma},                 {"clip_range", c.clip_range},
                     {"gae_lambda", c.gae_lambda},       {"vf_coef", c.vf_coef},
                     {"ent_coef", c.ent_coef},           {"max_grad_norm", c.max_grad_norm},
                     {"adam_eps", c.adam_eps},           {"total_timesteps", c.total_timesteps},
                     {"policy_hidden", c.policy_hidden}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PPOConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.n_epochs = j.value("n_epochs", c.n_epochs);
  c.gamma = j.value("gamma", c.gamma);
  c.clip_range = j.value("clip_range", c.clip_range);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.vf_coef = j.value("vf_coef", c.vf_coef);
  c.ent_coef = j.value("ent_coef", c.ent_coef);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.total_timesteps = j.value("total_timesteps", c.total_timesteps);
  c.policy_hidden = j.value("policy_hidden", c.policy_hidden);
  c.seed = j.value("seed", c.seed);
}

void RolloutBuffer::clear() {
  observations.clear();
  actions.clear();
  rewards.clear();
  dones.clear();
  value_estimates.clear();
  log_probs.clear();
  advantages.clear();
  returns.clear();
}

void RolloutBuffer::push(int obs, int action, double reward, bool done, double value,
                         double log_prob) {
  observations.push_back(obs);
  actions.push_back(action);
  rewards.push_back(reward);
  dones.push_back(done ? 1 : 0);
  value_estimates.push_back(value);
  log_probs.push_back(log_prob);
}

RolloutBuffer compute_gae(RolloutBuffer buffer, double gamma, double gae_lambda,
                          double bootstrap_value) {
  const std::size_t n = buffer.rewards.size();
  if (buffer.value_estimates.size() != n || buffer.dones.size() != n) {
    throw DataError("rollout buffer arrays differ in length");
  }
  buffer.advantages.assign(n, 0.0);
  buffer.returns.assign(n, 0.0);
  double next_advantage = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t i = n; i-- > 0;) {
    const double not_done = buffer.dones[i] ? 0.0 : 1.0;
    const double delta =
        buffer.rewards[i] + gamma * not_done * next_value - buffer.value_estimates[i];
    next_advantage = delta + gamma * gae_lambda * not_done * next_advantage;
    buffer.advantages[i] = next_advantage;
    next_value = buffer.value_estimates[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    buffer.returns[i] = buffer.advantages[i] + buffer.value_estimates[i];
  }
  return buffer;
}

// ---------------------------------------------------------------------------
// Mlp

namespace {

Eigen::MatrixXf orthogonal(int rows, int cols, float gain, Rng& rng) {
  const int n = std::max(rows, cols);
  const int m = std::min(rows, cols);
  Eigen::MatrixXd g(n, m);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < n; ++i) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, m);
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(m, m);
  for (int j = 0; j < m; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Eigen::MatrixXd w = rows >= cols ? q : Eigen::MatrixXd(q.transpose());
  return (w * gain).cast<float>();
}

}  // namespace

Mlp::Mlp(int n_inputs, std::vector<int> hidden, int n_outputs) {
  sizes_.push_back(n_inputs);
  sizes_.insert(sizes_.end(), hidden.begin(), hidden.end());
  sizes_.push_back(n_outputs);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(num_params_);
    num_params_ +=
        static_cast<std::size_t>(sizes_[l + 1]) * static_cast<std::size_t>(sizes_[l] + 1);
  }
}

void Mlp::initialize(float* params, float hidden_gain, float output_gain, Rng& rng) const {
  Eigen::Map<Vector>(params, static_cast<Eigen::Index>(num_params_)).setZero();
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const bool last = l + 2 == sizes_.size();
    const int rows = sizes_[l + 1];
    const int cols = sizes_[l];
    Eigen::Map<Matrix>(params + offsets_[l], rows, cols) =
        orthogonal(rows, cols, last ? output_gain : hidden_gain, rng);
  }
}

Eigen::Map<const Mlp::Matrix> Mlp::weight(const float* params, std::size_t layer) const {
  return {params + offsets_[layer], sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<const Mlp::Vector> Mlp::bias(const float* params, std::size_t layer) const {
  const std::size_t off = offsets_[layer] + static_cast<std::size_t>(sizes_[layer + 1]) *
                                                static_cast<std::size_t>(sizes_[layer]);
  return {params + off, sizes_[layer + 1]};
}

Mlp::Matrix Mlp::forward(const float* params, std::span<const int> inputs, Cache* cache) const {
  const auto batch = static_cast<Eigen::Index>(inputs.size());
  const std::size_t n_layers = offsets_.size();
  // First layer on one-hot inputs is a column gather.
  Matrix h(sizes_[1], batch);
  {
    const auto w = weight(params, 0);
    const auto b = bias(params, 0);
    for (Eigen::Index i = 0; i < batch; ++i) {
      const int obs = inputs[static_cast<std::size_t>(i)];
      if (obs < 0 || obs >= sizes_[0]) throw DataError("observation outside the MLP input range");
      h.col(i) = w.col(obs) + b;
    }
  }
  if (cache != nullptr) {
    cache->inputs.assign(inputs.begin(), inputs.end());
    cache->activations.resize(n_layers - 1);
  }
  for (std::size_t l = 1; l < n_layers; ++l) {
    h = h.array().tanh().matrix();
    if (cache != nullptr) cache->activations[l - 1] = h;
    Matrix next(sizes_[l + 1], batch);
    next.noalias() = weight(params, l) * h;
    next.colwise() += bias(params, l);
    h.swap(next);
  }
  return h;
}

void Mlp::backward(const float* params, const Cache& cache, const Matrix& d_outputs,
                   float* grad) const {
  const std::size_t n_layers = offsets_.size();
  Matrix delta = d_outputs;
  Matrix back;
  for (std::size_t l = n_layers; l-- > 1;) {
    const Matrix& a = cache.activations[l - 1];
    const int rows = sizes_[l + 1];
    const int cols = sizes_[l];
    Eigen::Map<Matrix>(grad + offsets_[l], rows, cols).noalias() += delta * a.transpose();
    Eigen::Map<Vector>(grad + offsets_[l] + static_cast<std::size_t>(rows) * cols, rows) +=
        delta.rowwise().sum();
    back.noalias() = weight(params, l).transpose() * delta;
    delta = back.array() * (1.0f - a.array().square());
  }
  const int rows = sizes_[1];
  Eigen::Map<Matrix> gw(grad + offsets_[0], rows, sizes_[0]);
  Eigen::Map<Vector> gb(grad + offsets_[0] + static_cast<std::size_t>(rows) * sizes_[0], rows);
  for (Eigen::Index i = 0; i < delta.cols(); ++i) {
    gw.col(cache.inputs[static_cast<std::size_t>(i)]) += delta.col(i);
    gb += delta.col(i);
  }
}

AdamOptimizer::AdamOptimizer(std::size_t n, double lr, double beta1, double beta2, double eps)
    : m_(Eigen::VectorXf::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXf::Zero(static_cast<Eigen::Index>(n))),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void AdamOptimizer::step(Eigen::VectorXf& params, const Eigen::VectorXf& grad) {
  ++t_;
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto step_size = static_cast<float>(lr_ / c1);
  const auto eps = static_cast<float>(eps_);
  const auto inv_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  m_.array() = b1 * m_.array() + (1.0f - b1) * grad.array();
  v_.array() = b2 * v_.array() + (1.0f - b2) * grad.array().square();
  params.array() -= step_size * m_.array() / (v_.array().sqrt() * inv_c2 + eps);
}

// ---------------------------------------------------------------------------
// ActorCritic / PPO

ActorCritic::ActorCritic(int n_obs, const PPOConfig& config, Rng& rng)
    : policy_(n_obs, config.policy_hidden, kNumActions),
      value_(n_obs, config.policy_hidden, 1),
      params_(Eigen::VectorXf::Zero(
          static_cast<Eigen::Index>(policy_.num_params() + value_.num_params()))),
      optimizer_(policy_.num_params() + value_.num_params(), config.learning_rate, 0.9, 0.999,
                 config.adam_eps) {
  policy_.initialize(params_.data(), std::sqrt(2.0f), 0.01f, rng);
  value_.initialize(params_.data() + policy_.num_params(), std::sqrt(2.0f), 1.0f, rng);
}

namespace {

std::array<double, kNumActions> softmax5(const float* logits) {
  std::array<double, kNumActions> p{};
  double mx = logits[0];
  for (int i = 1; i < kNumActions; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double total = 0.0;
  for (int i = 0; i < kNumActions; ++i) {
    p[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[i]) - mx);
    total += p[static_cast<std::size_t>(i)];
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

std::array<double, kNumActions> ActorCritic::action_probs(int obs) const {
  const int in[1] = {obs};
  const Mlp::Matrix logits = policy_.forward(policy_params(), in);
  return softmax5(logits.data());
}

double ActorCritic::value_of(int obs) const {
  const int in[1] = {obs};
  return static_cast<double>(value_.forward(value_params(), in)(0, 0));
}

double clipped_surrogate(double ratio, double advantage, double clip_range) {
  return std::min(ratio * advantage,
                  std::clamp(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantage);
}

MinibatchLoss ppo_minibatch_loss(const ActorCritic& params, const RolloutBuffer& buffer,
                                 std::span<const std::size_t> indices, const PPOConfig& config,
                                 Eigen::VectorXf* grad) {
  const auto b = static_cast<Eigen::Index>(indices.size());
  if (b == 0) throw DataError("empty minibatch");
  std::vector<int> obs;
  obs.reserve(indices.size());
  for (std::size_t idx : indices) obs.push_back(buffer.observations[idx]);

  // Advantage normalization within the minibatch.
  double mean = 0.0;
  for (std::size_t idx : indices) mean += buffer.advantages[idx];
  mean /= static_cast<double>(b);
  double var = 0.0;
  for (std::size_t idx : indices) {
    const double d = buffer.advantages[idx] - mean;
    var += d * d;
  }
  // Unbiased std, as torch.Tensor.std() computes it.
  const double std_dev = b > 1 ? std::sqrt(var / static_cast<double>(b - 1)) : 1.0;

  Mlp::Cache pc, vc;
  const Mlp::Matrix logits = params.policy().forward(params.policy_params(), obs, &pc);
  const Mlp::Matrix values = params.value().forward(params.value_params(), obs, &vc);
  Mlp::Matrix d_logits(kNumActions, b);
  Mlp::Matrix d_values(1, b);
  MinibatchLoss out;
  double kl = 0.0, clipped = 0.0;
  const double inv_b = 1.0 / static_cast<double>(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const std::size_t idx = indices[static_cast<std::size_t>(i)];
    const double adv =
        b > 1 ? (buffer.advantages[idx] - mean) / (std_dev + 1e-8) : buffer.advantages[idx];
    const auto p = softmax5(logits.col(i).data());
    const int a = buffer.actions[idx];
    const double logp = std::log(std::max(p[static_cast<std::size_t>(a)], 1e-300));
    const double log_ratio = logp - buffer.log_probs[idx];
    const double ratio = std::exp(log_ratio);
    out.policy_loss -= clipped_surrogate(ratio, adv, config.clip_range);
    // d(-min(r*A, clip(r)*A))/dr is -A when the unclipped branch is active.
    const bool clip_active = (adv >= 0.0 && ratio > 1.0 + config.clip_range) ||
                             (adv < 0.0 && ratio < 1.0 - config.clip_range);
    if (clip_active) clipped += 1.0;
    const double d_ratio = clip_active ? 0.0 : -adv;
    double h = 0.0;
    for (double pj : p) h -= pj > 0.0 ? pj * std::log(pj) : 0.0;
    out.entropy += h;
    kl += (ratio - 1.0) - log_ratio;
    for (int j = 0; j < kNumActions; ++j) {
      const double pj = p[static_cast<std::size_t>(j)];
      const double onehot = j == a ? 1.0 : 0.0;
      const double g_policy = d_ratio * ratio * (onehot - pj);
      const double logpj = pj > 0.0 ? std::log(pj) : 0.0;
      // loss += ent_coef * (-H); d(-H)/dz_j = p_j (log p_j + H)
      const double g_entropy = config.ent_coef * pj * (logpj + h);
      d_logits(j, i) = static_cast<float>((g_policy + g_entropy) * inv_b);
    }
    const double diff = values(0, i) - buffer.returns[idx];
    out.value_loss += diff * diff;
    d_values(0, i) = static_cast<float>(config.vf_coef * 2.0 * diff * inv_b);
  }
  out.policy_loss *= inv_b;
  out.value_loss *= inv_b;
  out.entropy *= inv_b;
  out.approx_kl = kl * inv_b;
  out.clip_fraction = clipped * inv_b;
  out.total = out.policy_loss - config.ent_coef * out.entropy + config.vf_coef * out.value_loss;
  if (!std::isfinite(out.total)) {
    throw NumericError("PPO loss is not finite (policy " + std::to_string(out.policy_loss) +
                       ", value " + std::to_string(out.value_loss) + ", entropy " +
                       std::to_string(out.entropy) + ")");
  }
  if (grad != nullptr) {
    grad->setZero(params.params().size());
    params.policy().backward(params.policy_params(), pc, d_logits, grad->data());
    params.value().backward(params.value_params(), vc, d_values,
                            grad->data() + params.policy().num_params());
  }
  return out;
}

PPOUpdateStats ppo_update(ActorCritic& params, const RolloutBuffer& buffer,
                          const PPOConfig& config, Rng& rng) {
  const std::size_t n = buffer.size();
  if (n == 0) throw DataError("empty rollout buffer");
  if (buffer.advantages.size() != n || buffer.returns.size() != n ||
      buffer.log_probs.size() != n || buffer.actions.size() != n) {
    throw DataError("rollout buffer is missing advantages/returns");
  }
  Eigen::VectorXf grad(params.params().size());
  std::vector<std::size_t> order(n);
  const std::size_t mb = std::min(n, static_cast<std::size_t>(config.batch_size));
  PPOUpdateStats stats;
  for (int epoch = 0; epoch < config.n_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < n; begin += mb) {
      const std::size_t end = std::min(n, begin + mb);
      const MinibatchLoss l = ppo_minibatch_loss(
          params, buffer, std::span<const std::size_t>(order).subspan(begin, end - begin), config,
          &grad);
      const double norm = std::sqrt(static_cast<double>(grad.squaredNorm()));
      if (!std::isfinite(norm)) throw NumericError("PPO gradient is not finite");
      if (norm > config.max_grad_norm) {
        grad *= static_cast<float>(config.max_grad_norm / (norm + 1e-6));
      }
      params.optimizer().step(params.params(), grad);

      stats.policy_loss += l.policy_loss;
      stats.value_loss += l.value_loss;
      stats.entropy += l.entropy;
      stats.approx_kl += l.approx_kl;
      stats.clip_fraction += l.clip_fraction;
      ++stats.minibatches;
    }
  }
  const double m = static_cast<double>(stats.minibatches);
  stats.policy_loss /= m;
  stats.value_loss /= m;
  stats.entropy /= m;
  stats.approx_kl /= m;
  stats.clip_fraction /= m;
  return stats;
}

LearningHistory train_source(const GridTask& task, const PPOConfig& config,
                             const SourceProgress& progress) {
  config.validate();
  validate(task);
  const FlushDenormals ftz;
  Rng init_rng(derive_seed(config.seed, "ppo_init"));
  Rng act_rng(derive_seed(config.seed, "ppo_actions"));
  Rng batch_rng(derive_seed(config.seed, "ppo_minibatches"));
  ActorCritic ac(task.num_cells(), config, init_rng);

  LearningHistory history;
  history.task = task;
  history.config_fingerprint = config.fingerprint();
  history.seed = config.seed;
  history.records.reserve(static_cast<std::size_t>(config.total_timesteps));

  auto [state, pos] = reset(task);
  int obs = task.cell_index(pos);
  bool last_done = false;
  RolloutBuffer buffer;
  std::int64_t steps = 0;
  while (steps < config.total_timesteps) {
    buffer.clear();
    for (int s = 0; s < config.n_steps && steps < config.total_timesteps; ++s, ++steps) {
      const auto p = ac.action_probs(obs);
      const auto a = static_cast<int>(act_rng.categorical(std::span<const double>(p)));
      const double v = ac.value_of(obs);
      const StepResult r = step(task, state, static_cast<GridAction>(a));
      history.records.push_back({obs, a, r.reward, r.done});
      double reward = r.reward;
      // Episodes only end by time limit, so bootstrap from the final state.
      if (r.done) reward += config.gamma * ac.value_of(task.cell_index(r.observation));
      buffer.push(obs, a, reward, r.done, v, std::log(p[static_cast<std::size_t>(a)]));
      last_done = r.done;
      if (r.done) {
        auto fresh = reset(task);
        state = fresh.state;
        obs = task.cell_index(fresh.observation);
      } else {
        state = r.state;
        obs = task.cell_index(r.observation);
      }
    }
    const double bootstrap = last_done ? 0.0 : ac.value_of(obs);
    buffer = compute_gae(std::move(buffer), config.gamma, config.gae_lambda, bootstrap);
    const PPOUpdateStats stats = ppo_update(ac, buffer, config, batch_rng);
    if (progress) progress(steps, stats);
  }
  return history;
}

}  // namespace dicp
