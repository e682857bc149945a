#pragma once

#include <vector>

#include "dicp/envs.hpp"
#include "dicp/histories.hpp"
#include "dicp/rng.hpp"
#include "dicp/seqmodel.hpp"

namespace test_helpers {

// A history produced by a uniform random policy; cheap and exercises every
// code path that a PPO history would.
inline dicp::LearningHistory random_history(const dicp::GridTask& task, std::size_t n,
                                            std::uint64_t seed) {
  using namespace dicp;
  LearningHistory h;
  h.task = task;
  h.seed = seed;
  h.config_fingerprint = "test";
  Rng rng(seed);
  auto [state, pos] = reset(task);
  int obs = task.cell_index(pos);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng.uniform_int(kNumActions));
    const StepResult r = step(task, state, action_from_index(a));
    h.records.push_back({obs, a, r.reward, r.done});
    const auto next = r.done ? reset(task) : ResetResult{r.state, r.observation};
    state = next.state;
    obs = task.cell_index(next.observation);
  }
  return h;
}

// Tokenized segments of config.context_transitions steps from random-policy
// histories on `task`, at random (unaligned) offsets.
inline std::vector<dicp::TokenizedSegment> random_batch(const dicp::ModelConfig& config,
                                                        const dicp::GridTask& task,
                                                        std::size_t count, std::uint64_t seed,
                                                        dicp::TrainMode mode = dicp::TrainMode::AD) {
  using namespace dicp;
  const auto k = static_cast<std::size_t>(config.context_transitions);
  const LearningHistory h = random_history(task, k + 10 * task.horizon, seed);
  Rng rng(seed + 1);
  std::vector<TokenizedSegment> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = rng.uniform_int(h.size() - k + 1);
    out.push_back(tokenize(extract_segment(h, start, k, mode == TrainMode::DPT), config, mode));
  }
  return out;
}

}  // namespace test_helpers
