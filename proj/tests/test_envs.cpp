#include <algorithm>
#include <deque>
#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dicp/envs.hpp"
#include "dicp/errors.hpp"
#include "dicp/rng.hpp"
#include "oracles.hpp"

using namespace dicp;

namespace {

GridTask darkroom(GridPos goal) {
  GridTask t;
  t.goal = goal;
  return t;
}

}  // namespace

TEST_CASE("reset places the agent per family") {
  auto r = reset(darkroom({0, 0}));
  CHECK(r.state.pos == GridPos{4, 4});
  CHECK(r.observation == GridPos{4, 4});
  CHECK(r.state.t == 0);

  for (const GridTask& t : enumerate_tasks(Family::DarkroomPermuted)) {
    auto p = reset(t);
    CHECK(p.state.pos == GridPos{0, 0});
    CHECK(t.goal == GridPos{8, 8});
    CHECK(t.horizon == 50);
  }

  GridTask kd;
  kd.family = Family::DarkKeyToDoor;
  kd.key = GridPos{1, 1};
  kd.goal = {7, 7};
  kd.horizon = 50;
  auto k = reset(kd);
  CHECK_FALSE(k.state.has_key);
  CHECK_FALSE(k.state.goal_reward_claimed);
}

TEST_CASE("malformed tasks are configuration errors") {
  GridTask kd;
  kd.family = Family::DarkKeyToDoor;
  kd.goal = {7, 7};
  CHECK_THROWS_AS(reset(kd), ConfigError);

  GridTask perm;
  perm.family = Family::DarkroomPermuted;
  perm.goal = {8, 8};
  perm.permutation = ActionPermutation{GridAction::Up, GridAction::Up, GridAction::Left,
                                       GridAction::Right, GridAction::Stay};
  CHECK_THROWS_AS(reset(perm), ConfigError);

  CHECK_THROWS_AS(reset(darkroom({9, 0})), ConfigError);
}

TEST_CASE("step moves, clamps and rewards") {
  const GridTask t = darkroom({4, 3});
  EnvState s = reset(t).state;
  auto r = step(t, s, GridAction::Up);
  CHECK(r.state.pos == GridPos{4, 3});
  CHECK(r.reward == 1);
  CHECK_FALSE(r.done);
  // Staying on the goal keeps paying.
  CHECK(step(t, r.state, GridAction::Stay).reward == 1);

  EnvState edge;
  edge.pos = {0, 5};
  auto c = step(t, edge, GridAction::Left);
  CHECK(c.state.pos == GridPos{0, 5});
  CHECK(c.reward == 0);
}

TEST_CASE("episodes end at the horizon and stepping afterwards is a usage error") {
  const GridTask t = darkroom({0, 0});
  EnvState s = reset(t).state;
  for (int i = 0; i < t.horizon; ++i) {
    auto r = step(t, s, GridAction::Stay);
    CHECK(r.done == (i + 1 == t.horizon));
    s = r.state;
  }
  CHECK_THROWS_AS(step(t, s, GridAction::Stay), UsageError);
}

TEST_CASE("key-to-door pays the key once and the goal once") {
  GridTask t;
  t.family = Family::DarkKeyToDoor;
  t.key = GridPos{4, 3};
  t.goal = {4, 2};
  t.horizon = 50;
  EnvState s = reset(t).state;
  auto to_goal_without_key = step(t, s, GridAction::Stay);
  CHECK(to_goal_without_key.reward == 0);
  auto got_key = step(t, s, GridAction::Up);
  CHECK(got_key.reward == 1);
  CHECK(got_key.state.has_key);
  auto goal = step(t, got_key.state, GridAction::Up);
  CHECK(goal.reward == 1);
  CHECK(goal.state.goal_reward_claimed);
  auto away = step(t, goal.state, GridAction::Down);
  auto back = step(t, away.state, GridAction::Up);
  CHECK(away.reward == 0);
  CHECK(back.reward == 0);

  EnvState claimed;
  claimed.pos = {4, 3};
  claimed.has_key = true;
  claimed.goal_reward_claimed = true;
  CHECK(step(t, claimed, GridAction::Up).reward == 0);
}

TEST_CASE("key on the goal cell still yields at most one reward per step") {
  GridTask t;
  t.family = Family::DarkKeyToDoor;
  t.key = GridPos{5, 4};
  t.goal = {5, 4};
  t.horizon = 50;
  EnvState s = reset(t).state;
  auto a = step(t, s, GridAction::Right);
  CHECK(a.reward == 1);
  auto b = step(t, a.state, GridAction::Stay);
  CHECK(b.reward == 1);
  auto c = step(t, b.state, GridAction::Stay);
  CHECK(c.reward == 0);
  CHECK(optimal_episode_return(t) == 2);
}

TEST_CASE("optimal action examples") {
  EnvState s;
  s.pos = {4, 4};
  CHECK(optimal_action(darkroom({6, 4}), s) == GridAction::Right);
  CHECK(optimal_action(darkroom({4, 4}), s) == GridAction::Stay);
  // x-axis preferred on ties.
  CHECK(optimal_action(darkroom({6, 6}), s) == GridAction::Right);
  CHECK(optimal_action(darkroom({4, 1}), s) == GridAction::Up);

  GridTask perm;
  perm.family = Family::DarkroomPermuted;
  perm.goal = {8, 8};
  perm.horizon = 50;
  perm.permutation = ActionPermutation{GridAction::Up, GridAction::Down, GridAction::Left,
                                       GridAction::Stay, GridAction::Right};
  EnvState p;
  p.pos = {3, 8};
  const GridAction a = optimal_action(perm, p);
  CHECK(a == GridAction::Stay);
  CHECK(effective_move(perm, a) == GridAction::Right);
}

TEST_CASE("optimal action reaches every target in Manhattan-distance steps (BFS oracle)") {
  for (int goal = 0; goal < 81; ++goal) {
    const GridTask t = darkroom({goal % 9, goal / 9});
    const auto dist = test_oracles::bfs_distances(t.goal, t.grid_size);
    for (int start = 0; start < 81; ++start) {
      EnvState s;
      s.pos = {start % 9, start / 9};
      const int d = dist[static_cast<std::size_t>(start)];
      REQUIRE(d == manhattan(s.pos, t.goal));
      int steps = 0;
      while (s.pos != t.goal) {
        s = step(t, s, optimal_action(t, s)).state;
        ++steps;
        REQUIRE(steps <= d);
      }
      CHECK(steps == d);
    }
  }
}

TEST_CASE("per-episode return bounds") {
  for (const GridTask& t : enumerate_tasks(Family::Darkroom)) {
    const int best = test_oracles::bfs_optimal_return(t);
    CHECK(optimal_episode_return(t) == best);
    const int d = manhattan(start_position(t), t.goal);
    CHECK(best == t.horizon - std::max(d - 1, 0));
  }
  Rng rng(7);
  const auto keyed = enumerate_tasks(Family::DarkKeyToDoor);
  for (int trial = 0; trial < 300; ++trial) {
    const GridTask& t = keyed[rng.uniform_int(keyed.size())];
    EnvState s = reset(t).state;
    int total = 0;
    for (int i = 0; i < t.horizon; ++i) {
      auto r = step(t, s, static_cast<GridAction>(rng.uniform_int(kNumActions)));
      total += r.reward;
      CHECK(r.reward <= 1);
      CHECK((!r.state.goal_reward_claimed || r.state.has_key));
      s = r.state;
    }
    CHECK(total <= 2);
    CHECK(optimal_episode_return(t) == 2);
  }
}

TEST_CASE("positions stay on the grid under random action sequences") {
  Rng rng(3);
  for (const int n : {5, 9}) {
    GridTask t;
    t.grid_size = n;
    t.goal = {0, 0};
    t.horizon = 200;
    EnvState s = reset(t).state;
    for (int i = 0; i < t.horizon; ++i) {
      s = step(t, s, static_cast<GridAction>(rng.uniform_int(kNumActions))).state;
      REQUIRE(s.pos.x >= 0);
      REQUIRE(s.pos.y >= 0);
      REQUIRE(s.pos.x < n);
      REQUIRE(s.pos.y < n);
    }
  }
}

TEST_CASE("identity-permuted darkroom behaves like darkroom from the corner") {
  GridTask perm;
  perm.family = Family::DarkroomPermuted;
  perm.goal = {8, 8};
  perm.horizon = 50;
  perm.permutation = ActionPermutation{GridAction::Up, GridAction::Down, GridAction::Left,
                                       GridAction::Right, GridAction::Stay};
  GridTask plain = darkroom({8, 8});
  plain.horizon = 50;
  Rng rng(11);
  EnvState a = reset(perm).state;
  EnvState b;
  b.pos = {0, 0};
  for (int i = 0; i < perm.horizon; ++i) {
    const auto act = static_cast<GridAction>(rng.uniform_int(kNumActions));
    auto ra = step(perm, a, act);
    auto rb = step(plain, b, act);
    CHECK(ra.observation == rb.observation);
    CHECK(ra.reward == rb.reward);
    CHECK(ra.done == rb.done);
    a = ra.state;
    b = rb.state;
  }
}

TEST_CASE("step is pure: replaying a trajectory reproduces it") {
  const auto tasks = enumerate_tasks(Family::DarkroomPermuted);
  const GridTask& t = tasks[37];
  Rng rng(5);
  std::vector<GridAction> actions;
  std::vector<StepResult> first;
  EnvState s = reset(t).state;
  for (int i = 0; i < t.horizon; ++i) {
    actions.push_back(static_cast<GridAction>(rng.uniform_int(kNumActions)));
    first.push_back(step(t, s, actions.back()));
    s = first.back().state;
  }
  s = reset(t).state;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const StepResult r = step(t, s, actions[i]);
    CHECK(r.state == first[i].state);
    CHECK(r.reward == first[i].reward);
    s = r.state;
  }
}

TEST_CASE("task enumeration and split sizes") {
  struct Case {
    Family family;
    std::size_t train, test;
  };
  for (const Case c : {Case{Family::Darkroom, 73, 8}, Case{Family::DarkKeyToDoor, 6233, 328},
                       Case{Family::DarkroomPermuted, 108, 12}}) {
    const TaskSplit s = enumerate_and_split(c.family, 42);
    CHECK(s.train.size() == c.train);
    CHECK(s.test.size() == c.test);
    std::set<std::string> ids;
    for (const auto& t : s.train) ids.insert(t.id());
    for (const auto& t : s.test) CHECK(ids.insert(t.id()).second);
    CHECK(ids.size() == c.train + c.test);
  }
  CHECK(enumerate_tasks(Family::DarkroomPermuted).size() == 120);

  const TaskSplit a = enumerate_and_split(Family::Darkroom, 9);
  const TaskSplit b = enumerate_and_split(Family::Darkroom, 9);
  const TaskSplit c = enumerate_and_split(Family::Darkroom, 10);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK_FALSE(a.test == c.test);
}

TEST_CASE("task json round trip") {
  for (Family f : {Family::Darkroom, Family::DarkKeyToDoor, Family::DarkroomPermuted}) {
    const auto tasks = enumerate_tasks(f);
    const GridTask& t = tasks[tasks.size() / 3];
    const nlohmann::json j = t;
    CHECK(j.at("family") == std::string(family_name(f)));
    CHECK(j.at("goal").is_array());
    CHECK(j.contains("key") == (f == Family::DarkKeyToDoor));
    CHECK(j.contains("permutation") == (f == Family::DarkroomPermuted));
    CHECK(j.at("horizon") == t.horizon);
    CHECK(j.get<GridTask>() == t);
  }
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"goal":[1,1]})").get<GridTask>(), ConfigError);
}
