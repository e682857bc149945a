#pragma once

// Action selection by model-predictive beam search over the sequence model's
// own dynamics predictions: sample candidate actions from the action head,
// roll each path forward with predicted (reward, next observation), keep the
// top K paths and commit to the first action of the best one.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dicp/envs.hpp"
#include "dicp/rng.hpp"
#include "dicp/seqmodel.hpp"

namespace dicp {

enum class PlannerMode { Off, Greedy, Beam };
enum class PlanScore { RewardPlusRtg, RewardOnly };

std::string_view planner_mode_name(PlannerMode m);
PlannerMode parse_planner_mode(std::string_view s);
std::string_view plan_score_name(PlanScore s);
PlanScore parse_plan_score(std::string_view s);

struct PlannerConfig {
  int beam_size = 10;        // K
  int sample_size = 5;       // L
  int planning_horizon = 8;
  PlannerMode mode = PlannerMode::Beam;
  PlanScore score = PlanScore::RewardPlusRtg;
  bool dedup = true;                 // top-L distinct actions instead of i.i.d. draws
  bool sample_when_off = true;       // model-free actions are sampled, not argmax
  bool wait_for_full_context = true; // act model-free until the window holds k transitions

  /// Horizon 8 for Darkroom, 16 for the other families; K 10, L 5.
  static PlannerConfig defaults_for(Family family);
  void validate() const;
  bool operator==(const PlannerConfig&) const = default;
};

void to_json(nlohmann::json& j, const PlannerConfig& c);
void from_json(const nlohmann::json& j, PlannerConfig& c);

struct Candidate {
  int action = 0;
  int rank = 0;  // position in generation order
};

/// dedup: the L most probable actions in probability order (ties by lower
/// action index). Otherwise L i.i.d. draws. Throws ConfigError when dedup
/// and L exceeds the action count.
std::vector<Candidate> sample_candidates(std::span<const double> dist, int count, Rng& rng,
                                         bool dedup);

/// What the planner needs from a model. Implementations must be
/// deterministic given their inputs.
class PlanningModel {
 public:
  struct Expansion {
    std::array<double, kNumActions> action_probs{};
    std::vector<int> actions;
    std::vector<DynamicsPrediction> dynamics;  // one per action
  };
  /// Picks the candidate actions for query `index` from its action distribution.
  using Chooser = std::function<std::vector<int>(std::size_t index,
                                                 const std::array<double, kNumActions>& probs)>;

  virtual ~PlanningModel() = default;
  virtual int context_transitions() const = 0;
  virtual int horizon() const = 0;
  virtual std::array<double, kNumActions> action_probs(const ContextQuery& query) const = 0;
  virtual std::vector<Expansion> expand(std::span<const ContextQuery> queries,
                                        const Chooser& choose) const = 0;
};

/// Adapter over a trained sequence model; beams of one depth share a batched
/// forward pass.
class SequencePlanningModel final : public PlanningModel {
 public:
  explicit SequencePlanningModel(const SequenceModel& model) : model_(&model) {}
  int context_transitions() const override { return model_->config().context_transitions; }
  int horizon() const override { return model_->config().horizon; }
  std::array<double, kNumActions> action_probs(const ContextQuery& query) const override;
  std::vector<Expansion> expand(std::span<const ContextQuery> queries,
                                const Chooser& choose) const override;

 private:
  const SequenceModel* model_;
};

struct PlanBeam {
  std::vector<ContextStep> extension;  // simulated (obs, action, predicted reward, step)
  int next_obs = 0;                    // predicted observation after the extension
  double cumulative_reward = 0.0;      // sum of predicted rewards along the extension
  double last_reward = 0.0;
  double rtg = 0.0;                    // predicted return-to-go at the last step
  double score = 0.0;
  int first_action = 0;
  int preference_rank = 0;
};

/// reward_plus_rtg: rewards before the last step plus the last step's
/// return-to-go (which already includes its reward). reward_only: all
/// predicted rewards.
double beam_score(const PlanBeam& beam, PlanScore score);

/// Sorts by score descending, ties by preference rank, and keeps the first K.
void prune(std::vector<PlanBeam>& beams, int beam_size);

/// Extends every beam by L candidates drawn at its simulated context
/// (predicted transitions appended to the real window, oldest dropped), then
/// prunes to K. Children are ranked parent-major in generation order.
std::vector<PlanBeam> expand_and_prune(const std::vector<PlanBeam>& beams, const ContextQuery& real,
                                       const PlanningModel& model, const PlannerConfig& config,
                                       Rng& rng);

struct PlanResult {
  int action = 0;
  bool planned = false;             // false when acting model-free
  std::vector<PlanBeam> beams;      // final beams, best first
  std::array<double, kNumActions> action_probs{};
};

/// Planned action for the current observation. The real context is only
/// read. Depth is min(planning_horizon, steps left in the episode).
PlanResult plan(const ContextQuery& context, const PlanningModel& model, const PlannerConfig& config,
                Rng& rng);

GridAction select_action(const ContextQuery& context, const PlanningModel& model,
                         const PlannerConfig& config, Rng& rng);

}  // namespace dicp
