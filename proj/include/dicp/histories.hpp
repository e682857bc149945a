#pragma once

// Learning histories, their on-disk format, return-to-go labels and
// k-transition segment sampling.
//
// File layout: <root>/<family>/<task_id>.hist plus <root>/manifest.json. A
// .hist file is one JSON header line followed by 5-byte little-endian
// records: u16 obs, u8 action, u8 reward, u8 done.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/envs.hpp"
#include "dicp/rng.hpp"

namespace dicp {

struct PPOConfig;

inline constexpr int kHistoryFormatVersion = 1;

struct HistoryRecord {
  int obs = 0;  // cell index of o_t
  int action = 0;
  int reward = 0;
  bool done = false;

  bool operator==(const HistoryRecord&) const = default;
};

struct LearningHistory {
  GridTask task;
  std::vector<HistoryRecord> records;
  std::string config_fingerprint;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return records.size(); }
  /// Checks obs/action/reward ranges and that episodes end exactly every
  /// `horizon` steps. Throws DataError.
  void validate() const;

  bool operator==(const LearningHistory&) const = default;
};

void save_history(const LearningHistory& history, const std::filesystem::path& path);
LearningHistory load_history(const std::filesystem::path& path);

/// Replays the recorded actions through the environment and reports whether
/// every observation and reward matches.
bool replays_exactly(const LearningHistory& history);

/// Per-episode undiscounted returns in chronological order.
std::vector<int> episode_returns(const LearningHistory& history);

/// Return-to-go for records [begin, end): suffix sums of reward that restart
/// at every episode boundary. Sums run to the true end of each episode even
/// when it lies beyond `end`.
std::vector<int> compute_returns_to_go(const LearningHistory& history, std::size_t begin,
                                       std::size_t end);

struct DatasetManifest {
  Family family = Family::Darkroom;
  std::vector<GridTask> tasks;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> record_counts;
  std::string ppo_fingerprint;
  int format_version = kHistoryFormatVersion;

  bool operator==(const DatasetManifest&) const = default;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<LearningHistory> histories);

  const std::vector<LearningHistory>& histories() const noexcept { return histories_; }
  std::size_t size() const noexcept { return histories_.size(); }
  bool empty() const noexcept { return histories_.empty(); }
  const LearningHistory& operator[](std::size_t i) const { return histories_.at(i); }
  std::size_t total_records() const;
  int horizon() const;
  DatasetManifest manifest() const;

  /// Writes one .hist per task plus manifest.json under `root`.
  void save(const std::filesystem::path& root) const;
  static Dataset load(const std::filesystem::path& root);

  bool operator==(const Dataset&) const = default;

 private:
  std::vector<LearningHistory> histories_;
};

using BuildProgress = std::function<void(std::size_t done, std::size_t total)>;

/// One source run per task of `tasks` (seed derived from ppo.seed and the
/// task id), run in parallel on `threads` workers, and persisted under
/// `root` when it is non-empty.
Dataset build_dataset(const std::vector<GridTask>& tasks, const PPOConfig& ppo,
                      const std::filesystem::path& root = {}, int threads = 0,
                      const BuildProgress& progress = {});

struct SegmentTransition {
  int obs = 0;
  int action = 0;
  int reward = 0;
  bool done = false;
  int episode_step = 0;
  int next_obs = -1;  // -1 when unknown (episode end or end of history)
};

struct SegmentSample {
  std::vector<SegmentTransition> transitions;
  std::vector<int> rtg_labels;
  std::optional<std::vector<int>> optimal_actions;
  std::string task_id;
  std::size_t history_index = 0;
  std::size_t start = 0;
};

/// Segment [start, start + k) of one history, with labels.
SegmentSample extract_segment(const LearningHistory& history, std::size_t start, std::size_t k,
                              bool with_optimal_actions);

/// Uniform task, then uniform episode-aligned start.
SegmentSample sample_segment(const Dataset& dataset, std::size_t k, Rng& rng,
                             bool with_optimal_actions = false);
/// Same, with the task drawn uniformly from `pool` (dataset indices).
SegmentSample sample_segment(const Dataset& dataset, std::span<const std::size_t> pool,
                             std::size_t k, Rng& rng, bool with_optimal_actions = false);
/// Uniform episode-aligned start within history `index`.
SegmentSample sample_segment(const Dataset& dataset, std::size_t index, std::size_t k, Rng& rng,
                             bool with_optimal_actions = false);

}  // namespace dicp
