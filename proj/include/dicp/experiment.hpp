#pragma once

// Config-driven pipeline: generate source histories, meta-train one model
// per train/test split, meta-test, and run the ablations. Each stage is
// skipped when its recorded fingerprint still matches.
//
// Results layout under <root>/<run_id>/:
//   config.json, environment.json, manifest.json
//   data/                      learning histories for every task in any split
//   split_<s>/train/           checkpoints and metrics.csv
//   split_<s>/eval/            curve.csv, episodes.csv
//   split_<s>/ablate/          beam.csv, context.csv
//   eval/curves.{csv,svg}      per-split curves plus the aggregate
//   ablate/beam.{csv,svg}      aggregate curve per beam size

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/envs.hpp"
#include "dicp/harness.hpp"
#include "dicp/planner.hpp"
#include "dicp/seqmodel.hpp"
#include "dicp/source_rl.hpp"
#include "dicp/trainer.hpp"

namespace dicp {

struct EnvSection {
  Family family = Family::Darkroom;
  int grid_size = kDefaultGridSize;
  int horizon = 0;        // 0 = family default
  int test_percent = -1;  // -1 = family default ratio
  int train_tasks = 0;    // cap on train tasks per split, 0 = all
  int test_tasks = 0;     // cap on test tasks per split, 0 = all
  std::uint64_t split_seed = 0;

  int resolved_horizon() const { return horizon > 0 ? horizon : default_horizon(family); }
  bool operator==(const EnvSection&) const = default;
};

void to_json(nlohmann::json& j, const EnvSection& e);
void from_json(const nlohmann::json& j, EnvSection& e);

struct ExperimentConfig {
  EnvSection env;
  PPOConfig ppo;
  ModelConfig model;
  TrainConfig train;
  PlannerConfig plan;
  EvalConfig eval;

  // Also read from the "eval" section.
  std::vector<std::string> stages{"generate", "train", "eval"};
  std::vector<int> ablate_beam_sizes{0, 1, 5, 10, 20};
  int context_bucket = 10;
  std::string checkpoint = "final";  // which checkpoint eval uses: final or best

  /// Defaults for a family, then the sections present in `j` on top. Model
  /// vocabularies and k = 4H follow the task shape unless set explicitly.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Deterministic train/test splits: split s shuffles all tasks with a seed
/// derived from (split_seed, s), then applies the caps.
std::vector<TaskSplit> make_splits(const ExperimentConfig& config);

/// Every task that appears in any split, in canonical order.
std::vector<GridTask> tasks_in_splits(const std::vector<TaskSplit>& splits, const EnvSection& env);

/// Hex digest of a JSON value's canonical dump.
std::string fingerprint(const nlohmann::json& value);

/// Compiler, build and host facts recorded with each run.
nlohmann::json environment_fingerprint();

struct RunOptions {
  std::filesystem::path results_root = "results";
  std::string run_id = "run";
  bool allow_stale = false;  // reuse outputs whose fingerprint no longer matches
  int threads = 0;
  std::function<void(const std::string&)> log;
};

struct StageOutcome {
  std::string name;
  enum class Action { Ran, Skipped, ReusedStale } action = Action::Ran;
};

struct RunSummary {
  std::filesystem::path dir;
  std::vector<StageOutcome> stages;
  std::vector<MetaTestResult> eval;  // per split, when evaluated in this call
  LearningCurve aggregate;

  std::size_t count(StageOutcome::Action a) const;
};

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options);

/// Loads the checkpoint `which` ("final" or "best") from a train directory.
SequenceModel load_model(const std::filesystem::path& train_dir, const std::string& which = "final");

/// Raw per-episode returns: task_id,seed,episode,return.
std::string episodes_csv(const std::vector<TaskEvalLog>& logs);
std::vector<TaskEvalLog> parse_episodes_csv(const std::string& text);

}  // namespace dicp
