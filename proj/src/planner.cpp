#include "dicp/planner.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"

namespace dicp {

std::string_view planner_mode_name(PlannerMode m) {
  switch (m) {
    case PlannerMode::Off:
      return "off";
    case PlannerMode::Greedy:
      return "greedy";
    case PlannerMode::Beam:
      return "beam";
  }
  return "?";
}

PlannerMode parse_planner_mode(std::string_view s) {
  if (s == "off") return PlannerMode::Off;
  if (s == "greedy") return PlannerMode::Greedy;
  if (s == "beam") return PlannerMode::Beam;
  throw ConfigError("unknown planner mode '" + std::string(s) + "' (expected off, greedy or beam)");
}

std::string_view plan_score_name(PlanScore s) {
  return s == PlanScore::RewardPlusRtg ? "reward_plus_rtg" : "reward_only";
}

PlanScore parse_plan_score(std::string_view s) {
  if (s == "reward_plus_rtg") return PlanScore::RewardPlusRtg;
  if (s == "reward_only") return PlanScore::RewardOnly;
  throw ConfigError("unknown planning score '" + std::string(s) + "'");
}

PlannerConfig PlannerConfig::defaults_for(Family family) {
  PlannerConfig c;
  c.planning_horizon = family == Family::Darkroom ? 8 : 16;
  return c;
}

void PlannerConfig::validate() const {
  if (beam_size < 1) throw ConfigError("planner beam size K must be at least 1");
  if (sample_size < 1) throw ConfigError("planner sample size L must be at least 1");
  if (planning_horizon < 1) throw ConfigError("planning horizon must be at least 1");
  if (dedup && sample_size > kNumActions) {
    throw ConfigError("deduplicated sampling needs L <= " + std::to_string(kNumActions));
  }
}

void to_json(nlohmann::json& j, const PlannerConfig& c) {
  j = nlohmann::json{{"beam_size", c.beam_size},
                     {"sample_size", c.sample_size},
                     {"planning_horizon", c.planning_horizon},
                     {"mode", planner_mode_name(c.mode)},
                     {"score", plan_score_name(c.score)},
                     {"dedup", c.dedup},
                     {"sample_when_off", c.sample_when_off},
                     {"wait_for_full_context", c.wait_for_full_context}};
}

void from_json(const nlohmann::json& j, PlannerConfig& c) {
  c.beam_size = j.value("beam_size", c.beam_size);
  c.sample_size = j.value("sample_size", c.sample_size);
  c.planning_horizon = j.value("planning_horizon", c.planning_horizon);
  if (j.contains("mode")) c.mode = parse_planner_mode(j.at("mode").get<std::string>());
  if (j.contains("score")) c.score = parse_plan_score(j.at("score").get<std::string>());
  c.dedup = j.value("dedup", c.dedup);
  c.sample_when_off = j.value("sample_when_off", c.sample_when_off);
  c.wait_for_full_context = j.value("wait_for_full_context", c.wait_for_full_context);
}

std::vector<Candidate> sample_candidates(std::span<const double> dist, int count, Rng& rng,
                                         bool dedup) {
  std::vector<Candidate> out;
  if (dedup) {
    if (count > static_cast<int>(dist.size())) {
      throw ConfigError("cannot draw " + std::to_string(count) + " distinct actions from " +
                        std::to_string(dist.size()));
    }
    std::vector<int> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)];
    });
    for (int i = 0; i < count; ++i) out.push_back({order[static_cast<std::size_t>(i)], i});
  } else {
    for (int i = 0; i < count; ++i) out.push_back({static_cast<int>(rng.categorical(dist)), i});
  }
  return out;
}

std::array<double, kNumActions> SequencePlanningModel::action_probs(const ContextQuery& query) const {
  return model_->predict_action(query);
}

std::vector<PlanningModel::Expansion> SequencePlanningModel::expand(
    std::span<const ContextQuery> queries, const Chooser& choose) const {
  const std::vector<PrefixState> prefixes = model_->prefixes(queries);
  std::vector<Expansion> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    out[i].action_probs = prefixes[i].action_probs();
    out[i].actions = choose(i, out[i].action_probs);
    out[i].dynamics = model_->predict_dynamics(prefixes[i], out[i].actions);
  }
  return out;
}

namespace {

int argmax(std::span<const double> xs) {
  return static_cast<int>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

PlanBeam child_of(const PlanBeam* parent, const ContextQuery& at, int action,
                  const DynamicsPrediction& d, int rank, PlanScore score) {
  PlanBeam b;
  if (parent) {
    b.extension = parent->extension;
    b.cumulative_reward = parent->cumulative_reward;
    b.first_action = parent->first_action;
  } else {
    b.first_action = action;
  }
  const int r = argmax(d.reward);
  b.extension.push_back({at.obs, action, r, at.episode_step});
  b.next_obs = argmax(d.next_obs);
  b.last_reward = r;
  b.cumulative_reward += r;
  b.rtg = argmax(d.rtg);
  b.preference_rank = rank;
  b.score = beam_score(b, score);
  return b;
}

PlanningModel::Chooser chooser(const PlannerConfig& config, Rng& rng) {
  return [&config, &rng](std::size_t, const std::array<double, kNumActions>& probs) {
    std::vector<int> actions;
    for (const Candidate& c : sample_candidates(probs, config.sample_size, rng, config.dedup)) {
      actions.push_back(c.action);
    }
    return actions;
  };
}

}  // namespace

double beam_score(const PlanBeam& beam, PlanScore score) {
  if (score == PlanScore::RewardOnly) return beam.cumulative_reward;
  return beam.cumulative_reward - beam.last_reward + beam.rtg;
}

void prune(std::vector<PlanBeam>& beams, int beam_size) {
  std::stable_sort(beams.begin(), beams.end(), [](const PlanBeam& a, const PlanBeam& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.preference_rank < b.preference_rank;
  });
  if (beams.size() > static_cast<std::size_t>(beam_size)) beams.resize(static_cast<std::size_t>(beam_size));
}

std::vector<PlanBeam> expand_and_prune(const std::vector<PlanBeam>& beams, const ContextQuery& real,
                                       const PlanningModel& model, const PlannerConfig& config,
                                       Rng& rng) {
  const auto keep = static_cast<std::size_t>(std::max(model.context_transitions() - 1, 0));
  std::vector<std::vector<ContextStep>> windows(beams.size());
  std::vector<ContextQuery> queries(beams.size());
  for (std::size_t i = 0; i < beams.size(); ++i) {
    const PlanBeam& b = beams[i];
    std::vector<ContextStep>& w = windows[i];
    w.reserve(real.past.size() + b.extension.size());
    w.assign(real.past.begin(), real.past.end());
    w.insert(w.end(), b.extension.begin(), b.extension.end());
    if (w.size() > keep) w.erase(w.begin(), w.end() - static_cast<std::ptrdiff_t>(keep));
    queries[i] = ContextQuery{w, b.next_obs, real.episode_step + static_cast<int>(b.extension.size())};
  }
  const auto expansions = model.expand(queries, chooser(config, rng));
  std::vector<PlanBeam> children;
  for (std::size_t i = 0; i < beams.size(); ++i) {
    const auto& e = expansions[i];
    for (std::size_t j = 0; j < e.actions.size(); ++j) {
      const int rank = static_cast<int>(i * e.actions.size() + j);
      children.push_back(child_of(&beams[i], queries[i], e.actions[j], e.dynamics[j], rank, config.score));
    }
  }
  prune(children, config.beam_size);
  return children;
}

PlanResult plan(const ContextQuery& context, const PlanningModel& model, const PlannerConfig& config,
                Rng& rng) {
  config.validate();
  PlanResult result;
  const int k = model.context_transitions();
  const bool filling = config.wait_for_full_context && context.past.size() + 1 < static_cast<std::size_t>(k);
  if (config.mode == PlannerMode::Off || filling) {
    result.action_probs = model.action_probs(context);
    result.action = config.sample_when_off
                        ? static_cast<int>(rng.categorical(std::span<const double>(result.action_probs)))
                        : argmax(result.action_probs);
    return result;
  }

  const int remaining = model.horizon() - context.episode_step;
  const int depth = std::max(1, std::min(config.planning_horizon, remaining));
  const auto root = model.expand(std::span<const ContextQuery>(&context, 1), chooser(config, rng)).front();
  result.action_probs = root.action_probs;
  std::vector<PlanBeam> beams;
  for (std::size_t j = 0; j < root.actions.size(); ++j) {
    beams.push_back(child_of(nullptr, context, root.actions[j], root.dynamics[j], static_cast<int>(j), config.score));
  }
  if (config.mode == PlannerMode::Greedy) {
    prune(beams, static_cast<int>(beams.size()));
  } else {
    prune(beams, config.beam_size);
    while (static_cast<int>(beams.front().extension.size()) < depth) {
      beams = expand_and_prune(beams, context, model, config, rng);
    }
  }
  result.planned = true;
  result.action = beams.front().first_action;
  result.beams = std::move(beams);
  return result;
}

GridAction select_action(const ContextQuery& context, const PlanningModel& model,
                         const PlannerConfig& config, Rng& rng) {
  return action_from_index(plan(context, model, config, rng).action);
}

}  // namespace dicp
