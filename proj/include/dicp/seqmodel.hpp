#pragma once

// Causal decoder over interleaved (observation, action) tokens with four
// categorical heads: action at observation tokens; reward, next observation
// and return-to-go at action tokens.
//
// Token layout per transition t:
//   x_t = E_obs[o_t] + E_prev_reward[r_{t-1}, or "none" for the first
//         transition of a window] + E_step[episode step]
//   y_t = E_action[a_t] + E_step[episode step]
// Blocks are pre-norm (RMSNorm), rotary attention and a SwiGLU MLP.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/aligned.hpp"
#include "dicp/envs.hpp"
#include "dicp/histories.hpp"
#include "dicp/rng.hpp"

namespace dicp {

enum class TrainMode { AD, DPT };

std::string_view mode_name(TrainMode m);
TrainMode parse_mode(std::string_view s);

struct ModelConfig {
  int n_layer = 4;
  int n_head = 4;
  int n_embed = 32;
  int intermediate_size = 128;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  int context_transitions = 80;
  int obs_vocab = 81;
  int action_vocab = kNumActions;
  int reward_vocab = 2;
  int rtg_vocab = 21;
  int horizon = 20;  // size of the episode-step embedding
  double lambda = 1.0;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  /// Vocabularies, horizon and k = 4 * horizon for tasks shaped like `task`.
  static ModelConfig for_task(const GridTask& task);
  void validate() const;
  int max_tokens() const noexcept { return 2 * context_transitions; }
  int head_dim() const noexcept { return n_embed / n_head; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 1;
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
};

/// Named row-major tensors packed into one flat parameter vector.
class ParamLayout {
 public:
  struct Block {
    std::size_t norm1, qkv, proj, norm2, gate, up, down;
  };
  struct Head {
    std::size_t weight, bias;
    int size;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& config);

  std::size_t size() const noexcept { return size_; }
  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  const TensorInfo& find(std::string_view name) const;
  /// Tensor containing flat index `i`.
  const TensorInfo& tensor_at(std::size_t i) const;
  bool is_norm_gain(const TensorInfo& t) const;

  std::size_t emb_obs = 0, emb_prev_reward = 0, emb_action = 0, emb_step = 0;
  std::vector<Block> blocks;
  std::size_t norm_final = 0;
  Head head_action{}, head_reward{}, head_next_obs{}, head_rtg{};

 private:
  std::size_t add(std::string name, int rows, int cols);
  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
};

inline constexpr int kMasked = -1;

/// Model input for one window. Per transition; `action[n-1]` may be kMasked
/// for an inference query that ends on an observation token.
struct TokenizedSegment {
  std::vector<int> obs, prev_reward, action, episode_step;
  std::vector<int> target_action, target_reward, target_next_obs, target_rtg;

  std::size_t num_transitions() const noexcept { return obs.size(); }
  std::size_t num_tokens() const noexcept {
    if (obs.empty()) return 0;
    return 2 * obs.size() - (action.back() == kMasked ? 1 : 0);
  }
};

/// Token inputs plus targets for a sampled segment. DPT mode takes action
/// targets from the segment's optimal-action labels.
TokenizedSegment tokenize(const SegmentSample& segment, const ModelConfig& config,
                          TrainMode mode = TrainMode::AD);

/// Checks every id against the vocabularies; throws DataError.
void validate_tokens(const TokenizedSegment& tokens, const ModelConfig& config);

struct LossBreakdown {
  double total = 0.0;
  double imitation = 0.0;
  double reward = 0.0;
  double next_obs = 0.0;
  double rtg = 0.0;
  std::size_t action_targets = 0, reward_targets = 0, next_obs_targets = 0, rtg_targets = 0;
};

/// Loss L = L_im + lambda * (L_reward + L_next_obs + L_rtg) / 3, each term a
/// mean over unmasked targets in the batch. When `grad` is non-null it
/// receives dL/dparams (overwritten). A non-null `dropout_seed` enables
/// dropout with masks derived from it; null means inference mode. Throws
/// DataError on an empty target mask, NumericError on non-finite values.
template <class Real>
LossBreakdown loss_and_gradient(const ModelConfig& config, const ParamLayout& layout,
                                const Real* params, std::span<const TokenizedSegment> batch,
                                Real* grad, const std::uint64_t* dropout_seed = nullptr);

/// Per-transition head logits in inference mode. Rows of `action` follow
/// observation tokens; rows of the dynamics heads follow action tokens (one
/// fewer when the window ends on an observation).
struct HeadLogits {
  std::vector<std::vector<float>> action, reward, next_obs, rtg;
};

template <class Real>
HeadLogits forward_logits(const ModelConfig& config, const ParamLayout& layout,
                          const Real* params, const TokenizedSegment& tokens);

/// Row vector of probabilities from logits.
std::vector<double> softmax(std::span<const float> logits);

/// One real transition kept in an inference context.
struct ContextStep {
  int obs = 0;
  int action = 0;
  int reward = 0;
  int episode_step = 0;

  bool operator==(const ContextStep&) const = default;
};

/// The most recent past transitions plus the current observation. Only the
/// last k-1 past transitions are used.
struct ContextQuery {
  std::span<const ContextStep> past;
  int obs = 0;
  int episode_step = 0;
};

TokenizedSegment tokenize_query(const ContextQuery& query, const ModelConfig& config);

struct DynamicsPrediction {
  std::vector<double> reward, next_obs, rtg;
};

class SequenceModel;

/// Result of running a query window once; action distribution at the final
/// observation token plus per-layer keys/values for branching.
class PrefixState {
 public:
  const std::array<double, kNumActions>& action_probs() const noexcept { return action_probs_; }
  std::size_t num_tokens() const noexcept { return n_tokens_; }

 private:
  friend class SequenceModel;
  std::array<double, kNumActions> action_probs_{};
  std::size_t n_tokens_ = 0;
  int episode_step_ = 0;
  std::vector<FloatBuffer> keys_, values_;  // per layer, n_tokens x n_embed
};

class SequenceModel {
 public:
  SequenceModel() = default;
  /// Truncated-normal initialization (std init_std, cut at two std),
  /// zero biases and unit norm gains.
  SequenceModel(ModelConfig config, std::uint64_t seed);
  SequenceModel(ModelConfig config, FloatBuffer params);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  FloatBuffer& params() noexcept { return params_; }
  const FloatBuffer& params() const noexcept { return params_; }
  std::size_t num_params() const noexcept { return params_.size(); }

  HeadLogits forward(const TokenizedSegment& tokens) const;
  LossBreakdown loss(std::span<const TokenizedSegment> batch) const;

  PrefixState prefix(const ContextQuery& query) const;
  /// Several queries in one batched forward pass.
  std::vector<PrefixState> prefixes(std::span<const ContextQuery> queries) const;
  std::array<double, kNumActions> predict_action(const ContextQuery& query) const;
  /// Dynamics heads after appending each candidate action to the prefix;
  /// candidates are independent branches evaluated together.
  std::vector<DynamicsPrediction> predict_dynamics(const PrefixState& prefix,
                                                   std::span<const int> actions) const;
  std::vector<DynamicsPrediction> predict_dynamics(const ContextQuery& query,
                                                   std::span<const int> actions) const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  FloatBuffer params_;
};

/// Optimizer state stored alongside weights for exact resumption.
struct OptimizerState {
  std::int64_t step = 0;
  FloatBuffer m, v;
};

struct Checkpoint {
  ModelConfig config;
  FloatBuffer params;
  std::optional<OptimizerState> optimizer;
  std::string metadata = "{}";  // JSON object text, free-form
};

/// Header line (JSON: config, tensor index, sizes, metadata) then float32
/// little-endian payload: params, then Adam m and v when present.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t coordinates = 0;
};

/// Compares analytic gradients with central differences in double precision
/// on a random subsample of coordinates (at least `min_coordinates` and at
/// least `fraction` of all). Throws GradientCheckError when the worst
/// relative error exceeds `tolerance`.
GradCheckResult check_gradients(const ModelConfig& config, std::span<const TokenizedSegment> batch,
                                std::uint64_t seed, bool with_dropout = true,
                                double fraction = 0.01, std::size_t min_coordinates = 200,
                                double step = 1e-5, double tolerance = 1e-3);

}  // namespace dicp
