#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/source_rl.hpp"
#include "dicp/stats.hpp"
#include "dicp/trainer.hpp"
#include "test_helpers.hpp"

using namespace dicp;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dicp_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Random-policy histories on small Darkroom tasks (5x5, horizon 10).
Dataset small_dataset(std::size_t n_tasks, std::size_t records, std::uint64_t seed) {
  auto tasks = enumerate_tasks(Family::Darkroom, 5, 10);
  std::vector<LearningHistory> hs;
  for (std::size_t i = 0; i < n_tasks; ++i) {
    hs.push_back(test_helpers::random_history(tasks[(i * 7) % tasks.size()], records, seed + i));
  }
  return Dataset(std::move(hs));
}

ModelConfig tiny_model(const Dataset& d) {
  ModelConfig c = ModelConfig::for_task(d[0].task);
  c.n_layer = 1;
  c.n_head = 2;
  c.n_embed = 16;
  c.intermediate_size = 32;
  return c;
}

TrainConfig tiny_train(const ModelConfig& m) {
  TrainConfig t;
  t.batch_size = 4;
  t.total_steps = 40;
  t.eval_every = 10;
  t.seed = 11;
  t.context_transitions = m.context_transitions;
  t.heldout_fraction = 0.2;
  t.heldout_segments = 4;
  return t;
}

}  // namespace

TEST_CASE("cosine schedule starts at the base rate and decays monotonically to zero") {
  TrainConfig c;
  c.total_steps = 1000;
  CHECK(cosine_lr(c, 0) == doctest::Approx(1e-2).epsilon(1e-15));
  CHECK(cosine_lr(c, 500) == doctest::Approx(5e-3).epsilon(1e-12));
  CHECK(cosine_lr(c, c.total_steps) <= 1e-5);
  for (std::int64_t s = 1; s <= c.total_steps; ++s) CHECK(cosine_lr(c, s) <= cosine_lr(c, s - 1));
}

TEST_CASE("train config json round trip and validation") {
  TrainConfig c;
  c.mode = TrainMode::DPT;
  c.total_steps = 77;
  c.lambda = 0.25;
  nlohmann::json j = c;
  CHECK(j.at("mode") == "dpt");
  CHECK(j.get<TrainConfig>() == c);

  TrainConfig bad;
  bad.total_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.heldout_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("held-out tasks are a seeded five percent subset") {
  TrainConfig c;
  c.seed = 3;
  const auto h = heldout_task_indices(73, c);
  CHECK(h.size() == 4);  // round(0.05 * 73)
  CHECK(std::is_sorted(h.begin(), h.end()));
  CHECK(heldout_task_indices(73, c) == h);
  c.seed = 4;
  CHECK(heldout_task_indices(73, c) != h);
  CHECK(heldout_task_indices(8, c).size() == 1);
  CHECK(heldout_task_indices(1, c).empty());
  c.heldout_fraction = 0.0;
  CHECK(heldout_task_indices(73, c).empty());
}

TEST_CASE("metrics csv has the documented header and fixed formatting") {
  MetricsRow r{10, 0.005, 1.5, 1.25, 0.5, 0.25, 0.125, std::nan("")};
  const std::string csv = metrics_csv({r});
  CHECK(csv == "step,lr,loss_total,loss_im,loss_r,loss_obs,loss_rtg,heldout_loss\n"
               "10,0.005,1.5,1.25,0.5,0.25,0.125,nan\n");
}

TEST_CASE("training rejects mismatched context or vocabularies") {
  const Dataset d = small_dataset(3, 200, 1);
  ModelConfig m = tiny_model(d);
  TrainConfig t = tiny_train(m);
  t.context_transitions = 20;
  CHECK_THROWS_AS(train_meta(d, m, t), ConfigError);
  t = tiny_train(m);
  m.obs_vocab = 81;
  CHECK_THROWS_AS(train_meta(d, m, t), ConfigError);
}

TEST_CASE("split hygiene: held-out tasks never feed training batches") {
  const Dataset d = small_dataset(10, 200, 2);
  const ModelConfig m = tiny_model(d);
  TrainConfig t = tiny_train(m);
  t.total_steps = 2;
  const TrainResult r = train_meta(d, m, t);
  REQUIRE(r.heldout_task_ids.size() == 2);
  CHECK(r.train_task_ids.size() + r.heldout_task_ids.size() == d.size());
  for (const auto& id : r.heldout_task_ids) {
    CHECK(std::find(r.train_task_ids.begin(), r.train_task_ids.end(), id) == r.train_task_ids.end());
  }
}

TEST_CASE("first metrics row equals an independently assembled step-0 loss") {
  const Dataset d = small_dataset(6, 300, 3);
  const ModelConfig m = tiny_model(d);
  for (TrainMode mode : {TrainMode::AD, TrainMode::DPT}) {
    TrainConfig t = tiny_train(m);
    t.mode = mode;
    t.total_steps = 1;
    const TrainResult r = train_meta(d, m, t);
    REQUIRE(!r.metrics.empty());

    // Same streams as documented for the trainer: init, batch(step), dropout(step).
    const auto held = heldout_task_indices(d.size(), t);
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (std::find(held.begin(), held.end(), i) == held.end()) pool.push_back(i);
    }
    Rng rng(derive_seed(t.seed, "batch", 0));
    std::vector<TokenizedSegment> batch;
    for (int i = 0; i < t.batch_size; ++i) {
      const SegmentSample s = sample_segment(d, pool, 40, rng, mode == TrainMode::DPT);
      if (mode == TrainMode::DPT) {
        // Imitation targets must be the analytic optimal actions.
        const TokenizedSegment tok = tokenize(s, m, mode);
        for (std::size_t j = 0; j < s.transitions.size(); ++j) {
          CHECK(tok.target_action[j] == (*s.optimal_actions)[j]);
        }
      }
      batch.push_back(tokenize(s, m, mode));
    }
    const SequenceModel init(m, derive_seed(t.seed, "init"));
    const std::uint64_t drop = derive_seed(t.seed, "dropout", 0);
    std::vector<float> g(init.num_params());
    const LossBreakdown want =
        loss_and_gradient<float>(m, init.layout(), init.params().data(), batch, g.data(), &drop);
    CHECK(r.metrics[0].step == 0);
    CHECK(r.metrics[0].loss_total == want.total);
    CHECK(r.metrics[0].loss_im == want.imitation);
  }
}

TEST_CASE("identical seeds give identical weights and metrics; resume matches an uninterrupted run") {
  const Dataset d = small_dataset(6, 300, 4);
  const ModelConfig m = tiny_model(d);
  const TrainConfig t = tiny_train(m);

  const auto dir_a = scratch_dir("a"), dir_b = scratch_dir("b"), dir_c = scratch_dir("c");
  TrainOptions oa;
  oa.out_dir = dir_a;
  const TrainResult a = train_meta(d, m, t, oa);
  TrainOptions ob;
  ob.out_dir = dir_b;
  const TrainResult b = train_meta(d, m, t, ob);
  CHECK(a.model.params() == b.model.params());
  CHECK(slurp(dir_a / "metrics.csv") == slurp(dir_b / "metrics.csv"));
  CHECK(slurp(dir_a / "final.ckpt") == slurp(dir_b / "final.ckpt"));
  CHECK(a.metrics.size() == 5);  // steps 0, 10, 20, 30, 40

  TrainOptions oc;
  oc.out_dir = dir_c;
  oc.stop_at = 20;
  const TrainResult partial = train_meta(d, m, t, oc);
  CHECK(partial.steps_done == 20);
  CHECK_FALSE(std::filesystem::exists(dir_c / "final.ckpt"));
  oc.stop_at.reset();
  oc.resume_from = dir_c / "last.ckpt";
  const TrainResult resumed = train_meta(d, m, t, oc);
  CHECK(resumed.model.params() == a.model.params());
  CHECK(resumed.metrics == a.metrics);
  CHECK(slurp(dir_c / "metrics.csv") == slurp(dir_a / "metrics.csv"));
  CHECK(slurp(dir_c / "final.ckpt") == slurp(dir_a / "final.ckpt"));

  const Checkpoint best = load_checkpoint(dir_a / "best.ckpt");
  const auto meta = nlohmann::json::parse(best.metadata);
  CHECK(meta.at("step").get<std::int64_t>() == a.best_step);
  double best_seen = 1e300;
  for (const auto& row : a.metrics) {
    if (row.step > 0) best_seen = std::min(best_seen, row.heldout_loss);
  }
  CHECK(a.best_heldout_loss == best_seen);

  TrainConfig other = t;
  other.learning_rate = 1e-3;
  CHECK_THROWS_AS(train_meta(d, m, other, oc), ConfigError);
  for (const auto& p : {dir_a, dir_b, dir_c}) std::filesystem::remove_all(p);
}

TEST_CASE("divergence aborts and keeps the last good checkpoint") {
  const Dataset d = small_dataset(4, 300, 5);
  const ModelConfig m = tiny_model(d);
  TrainConfig t = tiny_train(m);
  t.eval_every = 1;
  t.total_steps = 10;
  const auto dir = scratch_dir("nan");
  TrainOptions o;
  o.out_dir = dir;
  o.before_step = [](std::int64_t step, SequenceModel& model) {
    if (step == 3) model.params()[0] = std::nanf("");
  };
  CHECK_THROWS_AS(train_meta(d, m, t, o), NumericError);
  const Checkpoint last = load_checkpoint(dir / "last.ckpt");
  CHECK(nlohmann::json::parse(last.metadata).at("step") == 3);
  for (float p : last.params) REQUIRE(std::isfinite(p));
  CHECK_FALSE(std::filesystem::exists(dir / "final.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("smoke training lowers the loss within 500 steps") {
  // PPO histories on 5x5 Darkroom, 2-layer model.
  auto tasks = enumerate_tasks(Family::Darkroom, 5, 10);
  std::vector<GridTask> chosen{tasks[0], tasks[6], tasks[18], tasks[24]};
  PPOConfig ppo = PPOConfig::defaults_for(Family::Darkroom);
  ppo.total_timesteps = 2000;
  const Dataset d = build_dataset(chosen, ppo, {}, 1);
  ModelConfig m = ModelConfig::for_task(chosen[0]);
  m.n_layer = 2;
  m.n_embed = 32;
  TrainConfig t;
  t.batch_size = 8;
  t.total_steps = 500;
  t.eval_every = 100;
  t.context_transitions = m.context_transitions;
  t.heldout_fraction = 0.0;
  const TrainResult r = train_meta(d, m, t);
  REQUIRE(r.metrics.size() == 6);
  MESSAGE("loss at step 0 " << r.metrics.front().loss_total << ", final window "
                            << r.metrics.back().loss_total);
  CHECK(r.metrics.back().loss_total < r.metrics.front().loss_total);
}

TEST_CASE("context-position buckets") {
  const Dataset train = small_dataset(4, 600, 6);
  const Dataset test = small_dataset(2, 400, 60);

  SUBCASE("bucket count follows k / bucket and means match per-position losses") {
    ModelConfig c = ModelConfig::for_task(enumerate_tasks(Family::Darkroom)[0]);
    c.n_layer = 1;
    const SequenceModel model(c, 1);
    CHECK(loss_by_context_position(model, Dataset{}, 10).buckets.size() == 8);

    const ModelConfig small = tiny_model(train);
    const SequenceModel sm(small, 2);
    const LearningHistory& h = test[0];
    Dataset one({h});
    const ContextPositionReport rep = loss_by_context_position(sm, one, 10, 1);
    REQUIRE(rep.buckets.size() == 4);
    CHECK(rep.windows == 1);
    const TokenizedSegment tok = tokenize(extract_segment(h, 0, 40, false), small);
    const HeadLogits lg = sm.forward(tok);
    for (int b = 0; b < 4; ++b) {
      double sum = 0;
      int n = 0;
      for (int t = b * 10; t < b * 10 + 10; ++t) {
        const auto p = softmax(lg.reward[static_cast<std::size_t>(t)]);
        sum += -std::log(p[static_cast<std::size_t>(tok.target_reward[static_cast<std::size_t>(t)])]);
        ++n;
      }
      CHECK(rep.buckets[static_cast<std::size_t>(b)].reward_loss == doctest::Approx(sum / n).epsilon(1e-6));
      CHECK(rep.buckets[static_cast<std::size_t>(b)].reward_count == static_cast<std::size_t>(n));
    }
  }

  SUBCASE("an untrained model shows no position trend") {
    // A single 8-bucket rank correlation has null spread ~0.38, so the trend
    // is averaged over several initializations.
    double total = 0.0;
    const int seeds = 6;
    for (int seed = 1; seed <= seeds; ++seed) {
      ModelConfig c = ModelConfig::for_task(enumerate_tasks(Family::Darkroom)[0]);
      c.n_layer = 2;
      const SequenceModel model(c, static_cast<std::uint64_t>(seed));
      std::vector<LearningHistory> hs;
      for (int i = 0; i < 3; ++i) {
        hs.push_back(test_helpers::random_history(
            enumerate_tasks(Family::Darkroom)[static_cast<std::size_t>(i * 20)], 2000,
            static_cast<std::uint64_t>(70 + i + 10 * seed)));
      }
      const ContextPositionReport rep = loss_by_context_position(model, Dataset(std::move(hs)), 10, 8);
      CHECK(rep.buckets.size() == 8);
      total += rep.spearman;
    }
    MESSAGE("untrained mean spearman " << total / seeds);
    CHECK(std::abs(total / seeds) < 0.5);
  }
}

TEST_CASE("spearman and confidence intervals") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{5, 6, 7, 8, 7}) == doctest::Approx(0.82078268).epsilon(1e-7));
  CHECK(spearman(x, std::vector<double>{10, 8, 6, 4, 2}) == doctest::Approx(-1.0));
  CHECK(std::isnan(spearman(x, std::vector<double>{1, 1, 1, 1, 1})));
  CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  CHECK(sample_stddev(v) == doctest::Approx(2.138089935));
  CHECK(ci95_half_width(v) == doctest::Approx(1.96 * 2.138089935 / std::sqrt(8.0)));
  CHECK(ci95_half_width(std::vector<double>{3.0}) == 0.0);
}
