#pragma once

// Meta-training over learning histories: AdamW with cosine decay, held-out
// task evaluation, best/final checkpoints and exact resumption, plus the
// per-context-position dynamics loss.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/histories.hpp"
#include "dicp/seqmodel.hpp"

namespace dicp {

struct TrainConfig {
  int batch_size = 64;
  std::int64_t total_steps = 50000;
  std::int64_t eval_every = 500;
  TrainMode mode = TrainMode::AD;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  int context_transitions = 80;

  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; <= 0 disables

  double heldout_fraction = 0.05;
  int heldout_segments = 64;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// lr(step) = lr0 * (1 + cos(pi * step / total)) / 2, so lr(total) = 0.
double cosine_lr(const TrainConfig& config, std::int64_t step);

/// One CSV row. Train losses are means over the steps since the previous
/// row (the row at step 0 holds the first batch before any update).
struct MetricsRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0, loss_im = 0.0, loss_r = 0.0, loss_obs = 0.0, loss_rtg = 0.0;
  double heldout_loss = 0.0;  // NaN when no task is held out

  bool operator==(const MetricsRow&) const = default;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

/// Held-out task indices: a seeded subset of max(1, round(fraction * n))
/// tasks, or none when the dataset has a single task or fraction is 0.
std::vector<std::size_t> heldout_task_indices(std::size_t n_tasks, const TrainConfig& config);

struct TrainOptions {
  /// Receives best.ckpt, final.ckpt, last.ckpt and metrics.csv. Empty means
  /// nothing is written.
  std::filesystem::path out_dir;
  /// Continue from a checkpoint written by an earlier run (normally
  /// out_dir/last.ckpt).
  std::optional<std::filesystem::path> resume_from;
  /// Stop early after this many completed steps (for interrupted runs).
  std::optional<std::int64_t> stop_at;
  std::function<void(const MetricsRow&)> on_metrics;
  /// Called before every optimizer step with the current weights.
  std::function<void(std::int64_t step, SequenceModel& model)> before_step;
};

struct TrainResult {
  SequenceModel model;  // weights after the last completed step
  std::vector<MetricsRow> metrics;
  std::int64_t steps_done = 0;
  std::int64_t best_step = -1;
  double best_heldout_loss = 0.0;
  std::vector<std::string> train_task_ids, heldout_task_ids;
};

/// Runs optimizer steps [resume step, total_steps). Batches and dropout
/// masks derive from (seed, step), so an interrupted and resumed run matches
/// an uninterrupted one bit for bit. A non-finite loss or gradient aborts
/// with NumericError and leaves the last written checkpoints untouched.
TrainResult train_meta(const Dataset& dataset, const ModelConfig& model_config,
                       const TrainConfig& train_config, const TrainOptions& options = {});

struct PositionBucket {
  int first_position = 0, last_position = 0;  // transition indices, inclusive
  double next_obs_loss = 0.0, reward_loss = 0.0;
  double next_obs_error = 0.0, reward_error = 0.0;  // argmax error rates
  std::size_t next_obs_count = 0, reward_count = 0;

  double dynamics_loss() const noexcept { return next_obs_loss + reward_loss; }
  double next_obs_accuracy() const noexcept { return 1.0 - next_obs_error; }
  double reward_accuracy() const noexcept { return 1.0 - reward_error; }
};

struct ContextPositionReport {
  std::vector<PositionBucket> buckets;
  double spearman = 0.0;  // bucket index vs dynamics loss
  std::size_t windows = 0;
};

/// Forwards evenly spaced episode-aligned k-windows of every history and
/// averages next-observation and reward cross-entropy per bucket of
/// `bucket` transition positions.
ContextPositionReport loss_by_context_position(const SequenceModel& model, const Dataset& histories,
                                               int bucket = 10,
                                               std::size_t windows_per_history = 32);

}  // namespace dicp
