#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the code path it is used to check.

#include <cmath>
#include <deque>
#include <vector>

#include "dicp/envs.hpp"

namespace test_oracles {

/// Shortest-path distances to `target` over the 4-connected grid.
inline std::vector<int> bfs_distances(dicp::GridPos target, int n) {
  std::vector<int> dist(static_cast<std::size_t>(n * n), -1);
  std::deque<dicp::GridPos> queue{target};
  dist[static_cast<std::size_t>(target.y * n + target.x)] = 0;
  while (!queue.empty()) {
    const dicp::GridPos p = queue.front();
    queue.pop_front();
    const int d = dist[static_cast<std::size_t>(p.y * n + p.x)];
    const dicp::GridPos nbrs[4] = {{p.x + 1, p.y}, {p.x - 1, p.y}, {p.x, p.y + 1}, {p.x, p.y - 1}};
    for (const auto q : nbrs) {
      if (q.x < 0 || q.y < 0 || q.x >= n || q.y >= n) continue;
      auto& slot = dist[static_cast<std::size_t>(q.y * n + q.x)];
      if (slot < 0) {
        slot = d + 1;
        queue.push_back(q);
      }
    }
  }
  return dist;
}

/// Best one-episode Darkroom return: reward is paid on arrival, so the agent
/// collects one reward per step from the step it reaches the goal onwards.
inline int bfs_optimal_return(const dicp::GridTask& task) {
  const auto dist = bfs_distances(task.goal, task.grid_size);
  const dicp::GridPos s = dicp::start_position(task);
  const int d = dist[static_cast<std::size_t>(s.y * task.grid_size + s.x)];
  const int arrival_step = d == 0 ? 1 : d;
  return task.horizon - arrival_step + 1;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (v[j] < v[i]) ++less;
        if (v[j] == v[i]) ++equal;
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return (da == 0 || db == 0) ? 0.0 : num / std::sqrt(da * db);
}

}  // namespace test_oracles
