#include <chrono>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dicp/envs.hpp"
#include "dicp/errors.hpp"
#include "dicp/histories.hpp"
#include "dicp/source_rl.hpp"

using namespace dicp;

namespace {

// Direct double-loop evaluation of the GAE sum, independent of the
// backward recursion used by compute_gae.
std::vector<double> gae_brute_force(const RolloutBuffer& b, double gamma, double lambda,
                                    double bootstrap) {
  const std::size_t n = b.rewards.size();
  auto value_after = [&](std::size_t t) {
    return t + 1 < n ? b.value_estimates[t + 1] : bootstrap;
  };
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double total = 0.0;
    double weight = 1.0;
    for (std::size_t l = t; l < n; ++l) {
      const double not_done = b.dones[l] ? 0.0 : 1.0;
      const double delta = b.rewards[l] + gamma * not_done * value_after(l) - b.value_estimates[l];
      total += weight * delta;
      if (b.dones[l]) break;
      weight *= gamma * lambda;
    }
    adv[t] = total;
  }
  return adv;
}

}  // namespace

TEST_CASE("gae single terminal step") {
  RolloutBuffer b;
  b.push(0, 0, 1.0, true, 0.0, 0.0);
  const RolloutBuffer out = compute_gae(b, 0.99, 0.95, 0.0);
  CHECK(out.advantages[0] == doctest::Approx(1.0));
  CHECK(out.returns[0] == doctest::Approx(1.0));
}

TEST_CASE("gae without discount is r - V") {
  RolloutBuffer b;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) b.push(0, 0, rng.uniform(), i == 4, rng.normal(), 0.0);
  const RolloutBuffer out = compute_gae(b, 0.0, 0.95, 3.0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(out.advantages[i] == doctest::Approx(b.rewards[i] - b.value_estimates[i]));
  }
}

TEST_CASE("gae matches the brute-force sum on random buffers") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    RolloutBuffer b;
    for (int i = 0; i < 20; ++i) {
      b.push(0, 0, rng.bernoulli(0.3) ? 1.0 : 0.0, rng.bernoulli(0.15), rng.normal(), 0.0);
    }
    const double bootstrap = rng.normal();
    const RolloutBuffer out = compute_gae(b, 0.99, 0.95, bootstrap);
    const auto expected = gae_brute_force(b, 0.99, 0.95, bootstrap);
    for (std::size_t i = 0; i < b.size(); ++i) {
      CHECK(out.advantages[i] == doctest::Approx(expected[i]).epsilon(1e-12));
      CHECK(out.returns[i] == doctest::Approx(out.advantages[i] + b.value_estimates[i]));
      CHECK(std::isfinite(out.advantages[i]));
    }
  }
}

TEST_CASE("clipped surrogate") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(clipped_surrogate(1.0, -0.7, 0.2) == doctest::Approx(-0.7));
  CHECK(clipped_surrogate(1.0, 2.5, 0.2) == doctest::Approx(2.5));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
}

TEST_CASE("ppo update raises the probability of the rewarding action every time") {
  PPOConfig cfg = PPOConfig::defaults_for(Family::Darkroom);
  cfg.n_epochs = 4;
  cfg.batch_size = 10;
  Rng init(3), shuffle(4);
  ActorCritic ac(2, cfg, init);
  double previous = ac.action_probs(0)[0];
  for (int update = 0; update < 50; ++update) {
    // Both states, every action once: rewards without sampling noise.
    RolloutBuffer b;
    for (int obs = 0; obs < 2; ++obs) {
      const auto p = ac.action_probs(obs);
      for (int a = 0; a < kNumActions; ++a) {
        b.push(obs, a, a == 0 ? 1.0 : 0.0, true, ac.value_of(obs),
               std::log(p[static_cast<std::size_t>(a)]));
      }
    }
    b = compute_gae(std::move(b), cfg.gamma, cfg.gae_lambda, 0.0);
    ppo_update(ac, b, cfg, shuffle);
    const double now = ac.action_probs(0)[0];
    CHECK(now > previous);
    previous = now;
  }
  CHECK(previous > 0.9);
}

TEST_CASE("minibatch loss gradient matches finite differences") {
  PPOConfig cfg;
  Rng init(7), data(8);
  ActorCritic ac(9, cfg, init);
  // Nudge the policy away from uniform so ratios differ from one.
  for (Eigen::Index i = 0; i < ac.params().size(); ++i) {
    ac.params()[i] += 0.05f * static_cast<float>(data.normal());
  }
  RolloutBuffer b;
  for (int i = 0; i < 12; ++i) {
    b.push(static_cast<int>(data.uniform_int(9)), static_cast<int>(data.uniform_int(5)),
           data.bernoulli(0.3) ? 1.0 : 0.0, i % 4 == 3, 0.2 * data.normal(),
           std::log(0.2) + 0.3 * data.normal());
  }
  b = compute_gae(std::move(b), cfg.gamma, cfg.gae_lambda, 0.1);
  std::vector<std::size_t> idx(12);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Eigen::VectorXf grad;
  ppo_minibatch_loss(ac, b, idx, cfg, &grad);
  const float h = 1e-2f;
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const auto i = static_cast<Eigen::Index>(data.uniform_int(static_cast<std::uint64_t>(grad.size())));
    const float saved = ac.params()[i];
    ac.params()[i] = saved + h;
    const double up = ppo_minibatch_loss(ac, b, idx, cfg, nullptr).total;
    ac.params()[i] = saved - h;
    const double down = ppo_minibatch_loss(ac, b, idx, cfg, nullptr).total;
    ac.params()[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    // Float precision: compare with an absolute floor.
    CHECK(std::abs(numeric - grad[i]) <= 2e-2 * std::abs(numeric) + 2e-4);
    ++checked;
  }
  CHECK(checked == 60);
}

TEST_CASE("ppo update rejects non-finite losses") {
  PPOConfig cfg;
  Rng init(3), shuffle(4);
  ActorCritic ac(4, cfg, init);
  RolloutBuffer b;
  b.push(0, 1, std::nan(""), true, 0.0, -1.6);
  b.push(1, 2, 0.0, true, 0.0, -1.6);
  b = compute_gae(std::move(b), 0.99, 0.95, 0.0);
  CHECK_THROWS_AS(ppo_update(ac, b, cfg, shuffle), NumericError);
}

TEST_CASE("train_source records every step and replays") {
  GridTask t;
  t.goal = {6, 2};
  PPOConfig cfg = PPOConfig::defaults_for(Family::Darkroom);
  cfg.total_timesteps = 4000;
  cfg.seed = 17;
  const LearningHistory h = train_source(t, cfg);
  CHECK(h.size() == 4000);
  CHECK(episode_returns(h).size() == 200);
  CHECK_NOTHROW(h.validate());
  CHECK(replays_exactly(h));
  CHECK(h.config_fingerprint == cfg.fingerprint());

  const LearningHistory again = train_source(t, cfg);
  CHECK(again == h);
  cfg.seed = 18;
  CHECK_FALSE(train_source(t, cfg).records == h.records);
}

TEST_CASE("train_source full-length darkroom run learns") {
  GridTask t;
  t.goal = {2, 7};
  PPOConfig cfg = PPOConfig::defaults_for(Family::Darkroom);
  cfg.seed = 5;
  const auto started = std::chrono::steady_clock::now();
  const LearningHistory h = train_source(t, cfg);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  MESSAGE("100K-step PPO run took " << secs << " s");
  CHECK(h.size() == 100'000);
  const auto returns = episode_returns(h);
  REQUIRE(returns.size() == 5000);
  const double first = std::accumulate(returns.begin(), returns.begin() + 10, 0.0) / 10.0;
  const double last = std::accumulate(returns.end() - 10, returns.end(), 0.0) / 10.0;
  const int d = manhattan(start_position(t), t.goal);
  CHECK(first < last);
  CHECK(last >= 0.9 * (t.horizon - d));
}
