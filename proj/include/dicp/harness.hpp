#pragma once

// Meta-test rollouts of a frozen sequence model, learning-curve aggregation
// with confidence intervals, the beam-size and context ablations, and
// SVG/CSV curve output.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/envs.hpp"
#include "dicp/planner.hpp"
#include "dicp/seqmodel.hpp"
#include "dicp/trainer.hpp"

namespace dicp {

struct EvalConfig {
  std::int64_t total_env_steps = 2000;  // T per test task
  int num_splits = 5;
  PlannerConfig planner;
  std::vector<std::uint64_t> seeds{0};
  int threads = 0;  // 0 = hardware concurrency
  int final_episodes = 10;  // window for "final return"

  /// 2000 steps for Darkroom, 5000 for the 50-step families.
  static EvalConfig defaults_for(Family family);
  /// Throws ConfigError unless T is a positive multiple of `horizon`.
  void validate(int horizon) const;
  bool operator==(const EvalConfig&) const = default;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

struct LearningCurve {
  std::string label;
  std::vector<std::int64_t> env_steps;  // env steps consumed at the end of each episode
  std::vector<double> mean;             // mean episode return across tasks
  std::vector<double> ci95;             // 1.96 * s / sqrt(n), n = number of tasks
  std::optional<std::int64_t> planning_start;  // first env step acted by the planner

  std::size_t size() const noexcept { return mean.size(); }
  /// Throws UsageError when the lengths disagree or a half-width is negative.
  void validate() const;
  bool operator==(const LearningCurve&) const = default;
};

/// Mean of the last `episodes` points.
double final_return(const LearningCurve& curve, int episodes = 10);
/// Mean of the first `episodes` points.
double initial_return(const LearningCurve& curve, int episodes = 10);
/// Env step of the first point whose mean reaches `value`.
std::optional<std::int64_t> first_step_reaching(const LearningCurve& curve, double value);

struct TaskEvalLog {
  std::string task_id;
  std::uint64_t seed = 0;
  std::vector<int> episode_returns;
  std::optional<std::int64_t> planning_start;
  std::size_t max_window = 0;  // largest real context handed to the planner
};

struct MetaTestResult {
  LearningCurve curve;
  std::vector<TaskEvalLog> logs;  // task-major, then seed
};

/// Throws ConfigError when the model's vocabularies or horizon do not fit
/// `task`.
void check_model_fits(const ModelConfig& model, const GridTask& task);

/// Runs every test task for T steps with a fresh context that persists
/// across episode boundaries: at each step the planner sees the most recent
/// min(t, k-1) real transitions plus the current observation. Each task's
/// random stream derives from (seed, task id), so results do not depend on
/// task order or thread count. Seeds are averaged per task before the
/// across-task mean and CI.
MetaTestResult meta_test(const PlanningModel& model, const std::vector<GridTask>& tasks,
                         const EvalConfig& config, std::string label = "eval");
MetaTestResult meta_test(const SequenceModel& model, const std::vector<GridTask>& tasks,
                         const EvalConfig& config, std::string label = "eval");

/// Curve from raw logs (used by meta_test and for recomputation).
LearningCurve curve_from_logs(const std::vector<TaskEvalLog>& logs, int horizon, std::string label);

/// Aggregate over splits: the mean is the mean of the per-split curves; the
/// CI is pooled over every task of every split.
LearningCurve aggregate(const std::vector<MetaTestResult>& splits, int horizon,
                        std::string label = "aggregate");

/// One curve per beam size; K = 0 means planning off.
std::vector<MetaTestResult> ablate_beam(const SequenceModel& model, const std::vector<GridTask>& tasks,
                                        const std::vector<int>& sizes, const EvalConfig& config);

/// In-context dynamics quality over context position on the given histories.
ContextPositionReport ablate_context(const SequenceModel& model, const Dataset& histories,
                                     int bucket = 10, std::size_t windows_per_history = 32);

std::string context_report_csv(const ContextPositionReport& report);

/// label,env_step,mean,ci95,planning_start with full precision.
std::string curves_csv(const std::vector<LearningCurve>& curves);
std::vector<LearningCurve> parse_curves_csv(const std::string& text);

/// Self-contained SVG: step axis, mean lines, shaded CI bands, legend and a
/// dashed line at the planning start when one is set.
std::string curves_svg(const std::vector<LearningCurve>& curves, const std::string& title = "");

/// Writes `out` (SVG) and the same path with a .csv extension holding the
/// plotted numbers. Throws UsageError for an empty curve list.
void plot_curves(const std::vector<LearningCurve>& curves, const std::filesystem::path& out,
                 const std::string& title = "");

}  // namespace dicp
