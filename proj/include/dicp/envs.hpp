#pragma once

// Darkroom-family gridworld POMDPs.
//
// Coordinates: x is the column, y the row, origin top-left; Up moves to
// (x, y-1). Moves that would leave the grid are clamped. The agent observes
// only its own cell.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dicp {

enum class Family : std::uint8_t { Darkroom, DarkKeyToDoor, DarkroomPermuted };

enum class GridAction : std::uint8_t { Up = 0, Down = 1, Left = 2, Right = 3, Stay = 4 };

inline constexpr int kNumActions = 5;
inline constexpr int kDefaultGridSize = 9;

using ActionPermutation = std::array<GridAction, kNumActions>;

std::string_view family_name(Family family);
Family parse_family(std::string_view name);
std::string_view action_name(GridAction action);
GridAction action_from_index(int index);
constexpr int to_index(GridAction a) noexcept { return static_cast<int>(a); }

struct GridPos {
  int x = 0;
  int y = 0;
  auto operator<=>(const GridPos&) const = default;
};

int manhattan(GridPos a, GridPos b) noexcept;

struct GridTask {
  Family family = Family::Darkroom;
  GridPos goal{};
  std::optional<GridPos> key;                     // DarkKeyToDoor only
  std::optional<ActionPermutation> permutation;  // DarkroomPermuted only
  int horizon = 20;
  int grid_size = kDefaultGridSize;

  int num_cells() const noexcept { return grid_size * grid_size; }
  int cell_index(GridPos p) const noexcept { return p.y * grid_size + p.x; }
  GridPos cell_pos(int index) const noexcept { return {index % grid_size, index / grid_size}; }
  /// Stable human-readable identifier, also used as the history file stem.
  std::string id() const;

  bool operator==(const GridTask&) const = default;
};

/// Default horizon for a family: 20 for Darkroom, 50 for the other two.
int default_horizon(Family family);

/// Throws ConfigError when the task violates the family's invariants.
void validate(const GridTask& task);

struct EnvState {
  GridPos pos{};
  bool has_key = false;
  bool goal_reward_claimed = false;
  int t = 0;

  bool operator==(const EnvState&) const = default;
};

struct ResetResult {
  EnvState state;
  GridPos observation;
};

struct StepResult {
  EnvState state;
  GridPos observation;
  int reward = 0;
  bool done = false;
};

GridPos start_position(const GridTask& task);

/// The environments are deterministic; the seed is accepted for interface
/// uniformity and does not affect the result.
ResetResult reset(const GridTask& task, std::uint64_t rng_seed = 0);

/// Pure transition function. Throws UsageError when state.t >= horizon.
StepResult step(const GridTask& task, const EnvState& state, GridAction action);

/// The direction actually taken when `action` is issued in `task`.
GridAction effective_move(const GridTask& task, GridAction action);

/// Greedy shortest-path action toward the current target (the key while it
/// is uncollected, otherwise the goal). Prefers the x-axis move when both
/// axes reduce the distance; Stay when on target.
GridAction optimal_action(const GridTask& task, const EnvState& state);

/// Best achievable undiscounted return for one episode from reset.
int optimal_episode_return(const GridTask& task);

struct TaskSplit {
  std::vector<GridTask> train;
  std::vector<GridTask> test;
  std::uint64_t seed = 0;
};

struct SplitRatio {
  int train = 90;
  int test = 10;
};

SplitRatio default_ratio(Family family);

/// All tasks of a family in canonical order (goal-major for Darkroom,
/// key-major for DarkKeyToDoor, lexicographic permutations for
/// DarkroomPermuted).
std::vector<GridTask> enumerate_tasks(Family family, int grid_size = kDefaultGridSize,
                                      std::optional<int> horizon = std::nullopt);

/// Seeded shuffle followed by a cut: |test| = floor(N * test / 100).
TaskSplit split_tasks(std::vector<GridTask> tasks, std::uint64_t seed, SplitRatio ratio);

TaskSplit enumerate_and_split(Family family, std::uint64_t seed,
                              std::optional<SplitRatio> ratio = std::nullopt,
                              int grid_size = kDefaultGridSize,
                              std::optional<int> horizon = std::nullopt);

void to_json(nlohmann::json& j, const GridPos& p);
void from_json(const nlohmann::json& j, GridPos& p);
void to_json(nlohmann::json& j, const GridTask& task);
void from_json(const nlohmann::json& j, GridTask& task);

}  // namespace dicp
