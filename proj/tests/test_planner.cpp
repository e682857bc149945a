#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dicp/errors.hpp"
#include "dicp/planner.hpp"
#include "mock_planning_model.hpp"
#include "test_helpers.hpp"

using namespace dicp;
using test_oracles::TreeModel;

namespace {

PlannerConfig beam(int K, int L, int h) {
  PlannerConfig c;
  c.beam_size = K;
  c.sample_size = L;
  c.planning_horizon = h;
  return c;
}

std::vector<ContextStep> filler(int n) {
  std::vector<ContextStep> past;
  for (int i = 0; i < n; ++i) past.push_back({1000 + i, i % kNumActions, i % 2, i});
  return past;
}

// Score of a concrete action path from `root`, recomputed from the model.
double path_score(const TreeModel& m, int root, const std::vector<ContextStep>& ext, bool reward_only) {
  double s = 0;
  int obs = root;
  for (std::size_t i = 0; i < ext.size(); ++i) {
    const int a = ext[i].action;
    s += (reward_only || i + 1 < ext.size()) ? m.reward(obs, a) : m.rtg(obs, a);
    obs = TreeModel::child(obs, a);
  }
  return s;
}

}  // namespace

TEST_CASE("deduplicated candidates come in probability order") {
  Rng rng(1);
  const std::vector<double> p{0.1, 0.3, 0.05, 0.3, 0.25};
  const auto c = sample_candidates(p, 4, rng, true);
  REQUIRE(c.size() == 4);
  CHECK(c[0].action == 1);
  CHECK(c[1].action == 3);  // tie broken by lower index
  CHECK(c[2].action == 4);
  CHECK(c[3].action == 0);
  for (int i = 0; i < 4; ++i) CHECK(c[static_cast<std::size_t>(i)].rank == i);

  const std::vector<double> point{0, 0, 1, 0, 0};
  CHECK(sample_candidates(point, 1, rng, true)[0].action == 2);
  CHECK(sample_candidates(point, 3, rng, false)[2].action == 2);
  CHECK_THROWS_AS(sample_candidates(p, 6, rng, true), ConfigError);
}

TEST_CASE("i.i.d. candidates follow the action distribution") {
  Rng rng(2);
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4, 0.0};
  const int n = 10000;
  std::vector<int> counts(5, 0);
  for (const auto& c : sample_candidates(p, n, rng, false)) ++counts[static_cast<std::size_t>(c.action)];
  CHECK(counts[4] == 0);
  for (std::size_t a = 0; a < 4; ++a) {
    const double sd = std::sqrt(n * p[a] * (1 - p[a]));
    CHECK(std::abs(counts[a] - n * p[a]) < 3 * sd);
  }
}

TEST_CASE("prune keeps the top K with earliest-first ties") {
  auto mk = [](double score, int rank) {
    PlanBeam b;
    b.score = score;
    b.preference_rank = rank;
    return b;
  };
  std::vector<PlanBeam> beams{mk(3, 0), mk(1, 1), mk(2, 2)};
  prune(beams, 2);
  REQUIRE(beams.size() == 2);
  CHECK(beams[0].score == 3);
  CHECK(beams[1].score == 2);

  std::vector<PlanBeam> tied{mk(1, 2), mk(1, 0), mk(1, 1), mk(0.5, 3)};
  prune(tied, 2);
  CHECK(tied[0].preference_rank == 0);
  CHECK(tied[1].preference_rank == 1);

  std::vector<PlanBeam> few{mk(1, 0)};
  prune(few, 10);
  CHECK(few.size() == 1);
}

TEST_CASE("beam score adds rewards before the last step and the last return-to-go") {
  PlanBeam b;
  b.cumulative_reward = 3;
  b.last_reward = 1;
  b.rtg = 4;
  CHECK(beam_score(b, PlanScore::RewardPlusRtg) == 6);
  CHECK(beam_score(b, PlanScore::RewardOnly) == 3);

  const TreeModel m(7, 4);
  const auto past = filler(7);
  const ContextQuery q{past, 0, 0};
  Rng rng(3);
  const auto r = plan(q, m, beam(25, 5, 3), rng);
  REQUIRE(r.planned);
  for (const PlanBeam& pb : r.beams) {
    REQUIRE(pb.extension.size() == 3);
    CHECK(pb.score == path_score(m, 0, pb.extension, false));
    double cum = 0;
    for (const auto& s : pb.extension) cum += s.reward;
    CHECK(pb.cumulative_reward == cum);
    CHECK(pb.first_action == pb.extension.front().action);
  }
}

TEST_CASE("exhaustive beam search finds the brute-force optimum") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const TreeModel m(seed, 4);
    const auto past = filler(7);
    for (int h = 1; h <= 3; ++h) {
      for (PlanScore s : {PlanScore::RewardPlusRtg, PlanScore::RewardOnly}) {
        int K = 1;
        for (int i = 1; i < h; ++i) K *= kNumActions;
        PlannerConfig c = beam(K, 5, h);
        c.score = s;
        Rng rng(seed);
        const auto r = plan({past, 0, 0}, m, c, rng);
        const bool ro = s == PlanScore::RewardOnly;
        CAPTURE(seed);
        CAPTURE(h);
        CHECK(r.beams.front().score == test_oracles::exhaustive_best(m, 0, h, ro));
        CHECK(path_score(m, 0, r.beams.front().extension, ro) == r.beams.front().score);
      }
    }
  }
}

TEST_CASE("exhaustive K is never beaten by a narrower beam") {
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    const TreeModel m(seed, 4);
    const auto past = filler(7);
    const double best = test_oracles::exhaustive_best(m, 0, 3, false);
    for (int K : {1, 2, 3, 5, 10, 25}) {
      Rng rng(seed);
      const auto r = plan({past, 0, 0}, m, beam(K, 5, 3), rng);
      CHECK(r.beams.front().score <= best);
      CHECK(r.beams.size() <= static_cast<std::size_t>(K));
    }
  }
}

TEST_CASE("one-step beam search equals greedy selection") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const TreeModel m(seed, 2);
    const auto past = filler(7);
    PlannerConfig g = beam(10, 5, 1);
    g.mode = PlannerMode::Greedy;
    Rng r1(seed), r2(seed);
    const auto a = plan({past, 0, 0}, m, beam(10, 5, 1), r1);
    const auto b = plan({past, 0, 0}, m, g, r2);
    CHECK(a.action == b.action);
    CHECK(a.beams.front().score == b.beams.front().score);
  }
}

TEST_CASE("planning off samples from the action head with the same stream") {
  const TreeModel m(4, 2);
  const auto past = filler(7);
  PlannerConfig c;
  c.mode = PlannerMode::Off;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed);
    const ContextQuery q{past, 3, 2};
    const auto r = plan(q, m, c, a);
    const auto probs = m.action_probs(q);
    CHECK_FALSE(r.planned);
    CHECK(r.action == static_cast<int>(b.categorical(std::span<const double>(probs))));
  }
  c.sample_when_off = false;
  Rng rng(0);
  const ContextQuery q{past, 3, 2};
  const auto probs = m.action_probs(q);
  CHECK(plan(q, m, c, rng).action == std::max_element(probs.begin(), probs.end()) - probs.begin());
}

TEST_CASE("invalid beam settings are rejected") {
  const TreeModel m(1, 2);
  Rng rng(0);
  CHECK_THROWS_AS(plan({{}, 0, 0}, m, beam(0, 5, 3), rng), ConfigError);
  CHECK_THROWS_AS(plan({{}, 0, 0}, m, beam(5, 0, 3), rng), ConfigError);
  CHECK_THROWS_AS(plan({{}, 0, 0}, m, beam(5, 5, 0), rng), ConfigError);
  CHECK_THROWS_AS(beam(5, 6, 3).validate(), ConfigError);
  PlannerConfig iid = beam(5, 6, 3);
  iid.dedup = false;
  CHECK_NOTHROW(iid.validate());
}

TEST_CASE("planning leaves the real context untouched") {
  const TreeModel m(5, 4);
  const auto past = filler(7);
  const auto copy = past;
  Rng rng(1);
  const ContextQuery q{past, 0, 0};
  (void)plan(q, m, beam(10, 5, 4), rng);
  CHECK(past == copy);
  CHECK(q.obs == 0);
  CHECK(q.episode_step == 0);
}

TEST_CASE("simulated windows stay within k-1 and end with the extension") {
  TreeModel m(6, 4, 20, 5);
  const auto past = filler(4);
  Rng rng(2);
  (void)plan({past, 0, 0}, m, beam(4, 3, 4), rng);
  REQUIRE(m.seen.size() > 1);
  for (const auto& s : m.seen) {
    CHECK(s.past.size() <= 4);
    CHECK(s.past.size() == 4);  // the real window was already full
  }
  // At simulated step 3 the window is the newest real step plus three simulated ones.
  bool deep = false;
  for (const auto& s : m.seen) {
    if (s.episode_step == 3) {
      deep = true;
      CHECK(s.past[0] == past[3]);
      CHECK(s.past[1].episode_step == 0);
      CHECK(s.past[3].episode_step == 2);
      CHECK(s.obs == TreeModel::child(s.past[3].obs, s.past[3].action));
    }
  }
  CHECK(deep);
}

TEST_CASE("planning depth is cut at the episode boundary") {
  const TreeModel m(8, 4, 20);
  const auto past = filler(7);
  Rng rng(3);
  const auto r = plan({past, 0, 18}, m, beam(10, 5, 8), rng);
  REQUIRE(r.planned);
  for (const auto& b : r.beams) {
    REQUIRE(b.extension.size() == 2);
    CHECK(b.extension[0].episode_step == 18);
    CHECK(b.extension[1].episode_step == 19);
  }
  const auto last = plan({past, 0, 19}, m, beam(10, 5, 8), rng);
  CHECK(last.beams.front().extension.size() == 1);
}

TEST_CASE("planning waits until the context window is full") {
  const TreeModel m(9, 3, 20, 8);
  PlannerConfig c = beam(5, 5, 2);
  Rng rng(4);
  CHECK_FALSE(plan({filler(6), 0, 0}, m, c, rng).planned);
  CHECK(plan({filler(7), 0, 0}, m, c, rng).planned);
  c.wait_for_full_context = false;
  CHECK(plan({{}, 0, 0}, m, c, rng).planned);
}

TEST_CASE("planner config round trips through JSON") {
  PlannerConfig c = PlannerConfig::defaults_for(Family::DarkKeyToDoor);
  CHECK(c.planning_horizon == 16);
  CHECK(PlannerConfig::defaults_for(Family::Darkroom).planning_horizon == 8);
  c.mode = PlannerMode::Greedy;
  c.score = PlanScore::RewardOnly;
  c.beam_size = 3;
  const nlohmann::json j = c;
  CHECK(j.at("mode") == "greedy");
  CHECK(j.get<PlannerConfig>() == c);
  CHECK_THROWS_AS(nlohmann::json({{"mode", "astar"}}).get<PlannerConfig>(), ConfigError);
}

TEST_CASE("sequence model adapter: batched prefixes match single queries") {
  GridTask task;
  task.goal = {2, 5};
  ModelConfig mc = ModelConfig::for_task(task);
  mc.context_transitions = 6;
  mc.n_layer = 2;
  const SequenceModel model(mc, 5);
  const auto h = test_helpers::random_history(task, 60, 6);
  std::vector<std::vector<ContextStep>> pasts(3);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t i = 0; i < 2 + 2 * q; ++i) {
      const auto& r = h.records[i + q];
      pasts[q].push_back({r.obs, r.action, r.reward, static_cast<int>(i)});
    }
  }
  const std::vector<ContextQuery> queries{{pasts[0], 3, 2}, {pasts[1], 9, 4}, {pasts[2], 40, 6}};
  const auto batched = model.prefixes(queries);
  REQUIRE(batched.size() == 3);
  const std::vector<int> cand{0, 4, 2};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto single = model.prefix(queries[i]);
    CHECK(single.num_tokens() == batched[i].num_tokens());
    for (int a = 0; a < kNumActions; ++a) {
      CHECK(batched[i].action_probs()[a] == doctest::Approx(single.action_probs()[a]).epsilon(1e-5));
    }
    const auto d1 = model.predict_dynamics(batched[i], cand);
    const auto d2 = model.predict_dynamics(queries[i], cand);
    for (std::size_t c = 0; c < cand.size(); ++c) {
      for (std::size_t j = 0; j < d1[c].next_obs.size(); ++j) {
        CHECK(d1[c].next_obs[j] == doctest::Approx(d2[c].next_obs[j]).epsilon(1e-6).scale(1e-9));
      }
    }
  }

  const SequencePlanningModel adapter(model);
  CHECK(adapter.context_transitions() == 6);
  const auto past = pasts[2];
  Rng rng(7);
  const auto r = plan({past, 40, 6}, adapter, beam(3, 2, 3), rng);
  CHECK(r.planned);
  CHECK(r.action >= 0);
  CHECK(r.action < kNumActions);
  CHECK(r.beams.size() == 3);
  CHECK(r.beams.front().extension.size() == 3);
}
