#include "dicp/envs.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/rng.hpp"

namespace dicp {

namespace {

constexpr std::array<std::string_view, 3> kFamilyNames = {"darkroom", "dark_key_to_door",
                                                          "darkroom_permuted"};
constexpr std::array<std::string_view, kNumActions> kActionNames = {"up", "down", "left",
                                                                    "right", "stay"};

GridPos clamp_to_grid(GridPos p, int grid_size) {
  return {std::clamp(p.x, 0, grid_size - 1), std::clamp(p.y, 0, grid_size - 1)};
}

GridPos apply_move(GridPos p, GridAction move, int grid_size) {
  switch (move) {
    case GridAction::Up: --p.y; break;
    case GridAction::Down: ++p.y; break;
    case GridAction::Left: --p.x; break;
    case GridAction::Right: ++p.x; break;
    case GridAction::Stay: break;
  }
  return clamp_to_grid(p, grid_size);
}

bool in_grid(GridPos p, int grid_size) {
  return p.x >= 0 && p.y >= 0 && p.x < grid_size && p.y < grid_size;
}

GridPos current_target(const GridTask& task, const EnvState& state) {
  if (task.family == Family::DarkKeyToDoor && !state.has_key) return *task.key;
  return task.goal;
}

}  // namespace

std::string_view family_name(Family family) {
  return kFamilyNames.at(static_cast<std::size_t>(family));
}

Family parse_family(std::string_view name) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i) {
    if (kFamilyNames[i] == name) return static_cast<Family>(i);
  }
  if (name == "key_to_door" || name == "darkkeytodoor") return Family::DarkKeyToDoor;
  if (name == "permuted") return Family::DarkroomPermuted;
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

std::string_view action_name(GridAction action) {
  return kActionNames.at(static_cast<std::size_t>(action));
}

GridAction action_from_index(int index) {
  if (index < 0 || index >= kNumActions) {
    throw DataError("action index out of range: " + std::to_string(index));
  }
  return static_cast<GridAction>(index);
}

int manhattan(GridPos a, GridPos b) noexcept { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

std::string GridTask::id() const {
  auto pos = [](GridPos p) { return std::to_string(p.x) + "_" + std::to_string(p.y); };
  std::string out{family_name(family)};
  if (grid_size != kDefaultGridSize) out += "_n" + std::to_string(grid_size);
  switch (family) {
    case Family::Darkroom:
      out += "_g" + pos(goal);
      break;
    case Family::DarkKeyToDoor:
      out += "_k" + (key ? pos(*key) : std::string("none")) + "_g" + pos(goal);
      break;
    case Family::DarkroomPermuted:
      out += "_p";
      if (permutation) {
        for (GridAction a : *permutation) out += std::to_string(to_index(a));
      }
      break;
  }
  return out;
}

int default_horizon(Family family) { return family == Family::Darkroom ? 20 : 50; }

void validate(const GridTask& task) {
  if (task.grid_size < 2) throw ConfigError("grid_size must be at least 2");
  if (task.horizon < 1) throw ConfigError("horizon must be positive");
  if (!in_grid(task.goal, task.grid_size)) throw ConfigError("goal outside the grid");
  switch (task.family) {
    case Family::Darkroom:
      if (task.key || task.permutation) throw ConfigError("Darkroom task carries key/permutation");
      break;
    case Family::DarkKeyToDoor:
      if (!task.key) throw ConfigError("DarkKeyToDoor task is missing its key");
      if (!in_grid(*task.key, task.grid_size)) throw ConfigError("key outside the grid");
      if (task.permutation) throw ConfigError("DarkKeyToDoor task carries a permutation");
      break;
    case Family::DarkroomPermuted: {
      if (!task.permutation) throw ConfigError("DarkroomPermuted task is missing its permutation");
      if (task.key) throw ConfigError("DarkroomPermuted task carries a key");
      std::array<bool, kNumActions> seen{};
      for (GridAction a : *task.permutation) {
        const int i = to_index(a);
        if (i < 0 || i >= kNumActions || seen[i]) {
          throw ConfigError("action permutation is not a bijection");
        }
        seen[i] = true;
      }
      const GridPos corner{task.grid_size - 1, task.grid_size - 1};
      if (task.goal != corner) throw ConfigError("DarkroomPermuted goal must be the far corner");
      break;
    }
  }
}

GridPos start_position(const GridTask& task) {
  if (task.family == Family::DarkroomPermuted) return {0, 0};
  return {task.grid_size / 2, task.grid_size / 2};
}

ResetResult reset(const GridTask& task, std::uint64_t /*rng_seed*/) {
  validate(task);
  EnvState state;
  state.pos = start_position(task);
  return {state, state.pos};
}

GridAction effective_move(const GridTask& task, GridAction action) {
  if (task.family == Family::DarkroomPermuted) {
    return (*task.permutation)[static_cast<std::size_t>(to_index(action))];
  }
  return action;
}

StepResult step(const GridTask& task, const EnvState& state, GridAction action) {
  if (state.t >= task.horizon) {
    throw UsageError("step called after the episode ended (t=" + std::to_string(state.t) + ")");
  }
  if (to_index(action) < 0 || to_index(action) >= kNumActions) {
    throw UsageError("invalid action");
  }
  StepResult out;
  out.state = state;
  out.state.pos = apply_move(state.pos, effective_move(task, action), task.grid_size);
  out.state.t = state.t + 1;

  if (task.family == Family::DarkKeyToDoor) {
    // The goal pays out only when the key was already held before this step,
    // so a single step never earns more than 1.
    if (state.has_key && !state.goal_reward_claimed && out.state.pos == task.goal) {
      out.state.goal_reward_claimed = true;
      out.reward = 1;
    } else if (!state.has_key && out.state.pos == *task.key) {
      out.state.has_key = true;
      out.reward = 1;
    }
  } else {
    out.reward = out.state.pos == task.goal ? 1 : 0;
  }
  out.observation = out.state.pos;
  out.done = out.state.t == task.horizon;
  return out;
}

GridAction optimal_action(const GridTask& task, const EnvState& state) {
  const GridPos target = current_target(task, state);
  GridAction move = GridAction::Stay;
  if (!(task.family == Family::DarkKeyToDoor && state.goal_reward_claimed)) {
    if (target.x > state.pos.x) {
      move = GridAction::Right;
    } else if (target.x < state.pos.x) {
      move = GridAction::Left;
    } else if (target.y > state.pos.y) {
      move = GridAction::Down;
    } else if (target.y < state.pos.y) {
      move = GridAction::Up;
    }
  }
  if (task.family != Family::DarkroomPermuted) return move;
  const auto& perm = *task.permutation;
  for (int a = 0; a < kNumActions; ++a) {
    if (perm[static_cast<std::size_t>(a)] == move) return static_cast<GridAction>(a);
  }
  throw ConfigError("action permutation is not a bijection");
}

int optimal_episode_return(const GridTask& task) {
  auto [state, obs] = reset(task);
  int total = 0;
  for (int t = 0; t < task.horizon; ++t) {
    const StepResult r = step(task, state, optimal_action(task, state));
    total += r.reward;
    state = r.state;
  }
  return total;
}

SplitRatio default_ratio(Family family) {
  return family == Family::DarkKeyToDoor ? SplitRatio{95, 5} : SplitRatio{90, 10};
}

std::vector<GridTask> enumerate_tasks(Family family, int grid_size, std::optional<int> horizon) {
  const int h = horizon.value_or(default_horizon(family));
  std::vector<GridTask> tasks;
  auto base = [&] {
    GridTask t;
    t.family = family;
    t.horizon = h;
    t.grid_size = grid_size;
    return t;
  };
  switch (family) {
    case Family::Darkroom:
      for (int y = 0; y < grid_size; ++y) {
        for (int x = 0; x < grid_size; ++x) {
          GridTask t = base();
          t.goal = {x, y};
          tasks.push_back(t);
        }
      }
      break;
    case Family::DarkKeyToDoor:
      for (int k = 0; k < grid_size * grid_size; ++k) {
        for (int g = 0; g < grid_size * grid_size; ++g) {
          GridTask t = base();
          t.key = GridPos{k % grid_size, k / grid_size};
          t.goal = {g % grid_size, g / grid_size};
          tasks.push_back(t);
        }
      }
      break;
    case Family::DarkroomPermuted: {
      ActionPermutation perm{GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right,
                             GridAction::Stay};
      do {
        GridTask t = base();
        t.goal = {grid_size - 1, grid_size - 1};
        t.permutation = perm;
        tasks.push_back(t);
      } while (std::next_permutation(perm.begin(), perm.end()));
      break;
    }
  }
  return tasks;
}

TaskSplit split_tasks(std::vector<GridTask> tasks, std::uint64_t seed, SplitRatio ratio) {
  if (ratio.train < 0 || ratio.test < 0 || ratio.train + ratio.test != 100) {
    throw ConfigError("split ratio must be two non-negative parts summing to 100");
  }
  Rng rng(derive_seed(seed, "task_split"));
  rng.shuffle(std::span<GridTask>(tasks));
  const std::size_t n_test = tasks.size() * static_cast<std::size_t>(ratio.test) / 100;
  TaskSplit split;
  split.seed = seed;
  split.test.assign(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train.assign(tasks.begin() + static_cast<std::ptrdiff_t>(n_test), tasks.end());
  return split;
}

TaskSplit enumerate_and_split(Family family, std::uint64_t seed, std::optional<SplitRatio> ratio,
                              int grid_size, std::optional<int> horizon) {
  return split_tasks(enumerate_tasks(family, grid_size, horizon), seed,
                     ratio.value_or(default_ratio(family)));
}

void to_json(nlohmann::json& j, const GridPos& p) { j = nlohmann::json::array({p.x, p.y}); }

void from_json(const nlohmann::json& j, GridPos& p) {
  if (!j.is_array() || j.size() != 2) throw DataError("grid position must be [x, y]");
  p.x = j.at(0).get<int>();
  p.y = j.at(1).get<int>();
}

void to_json(nlohmann::json& j, const GridTask& task) {
  j = nlohmann::json{{"family", family_name(task.family)},
                     {"goal", task.goal},
                     {"horizon", task.horizon}};
  if (task.key) j["key"] = *task.key;
  if (task.permutation) {
    auto perm = nlohmann::json::array();
    for (GridAction a : *task.permutation) perm.push_back(to_index(a));
    j["permutation"] = perm;
  }
  if (task.grid_size != kDefaultGridSize) j["grid_size"] = task.grid_size;
}

void from_json(const nlohmann::json& j, GridTask& task) {
  try {
    task.family = parse_family(j.at("family").get<std::string>());
    task.goal = j.at("goal").get<GridPos>();
    task.horizon = j.contains("horizon") ? j.at("horizon").get<int>()
                                         : default_horizon(task.family);
    task.grid_size = j.value("grid_size", kDefaultGridSize);
    task.key.reset();
    task.permutation.reset();
    if (j.contains("key")) task.key = j.at("key").get<GridPos>();
    if (j.contains("permutation")) {
      const auto& perm = j.at("permutation");
      if (!perm.is_array() || perm.size() != kNumActions) {
        throw ConfigError("permutation must list 5 action codes");
      }
      ActionPermutation p{};
      for (std::size_t i = 0; i < p.size(); ++i) {
        const int code = perm.at(i).get<int>();
        if (code < 0 || code >= kNumActions) throw ConfigError("permutation code out of range");
        p[i] = static_cast<GridAction>(code);
      }
      task.permutation = p;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed task json: ") + e.what());
  }
}

}  // namespace dicp
