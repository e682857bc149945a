#include "dicp/histories.hpp"

#include <atomic>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/parallel.hpp"
#include "dicp/source_rl.hpp"

namespace dicp {

namespace fs = std::filesystem;

void LearningHistory::validate() const {
  dicp::validate(task);
  const int n_cells = task.num_cells();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const HistoryRecord& r = records[i];
    const bool boundary = (i + 1) % static_cast<std::size_t>(task.horizon) == 0;
    if (r.obs < 0 || r.obs >= n_cells || r.action < 0 || r.action >= kNumActions ||
        r.reward < 0 || r.reward > 1 || r.done != boundary) {
      throw DataError("history for " + task.id() + " has an invalid record at index " +
                      std::to_string(i));
    }
  }
}

void save_history(const LearningHistory& history, const fs::path& path) {
  nlohmann::json header{{"format_version", kHistoryFormatVersion},
                        {"task", history.task},
                        {"config_fingerprint", history.config_fingerprint},
                        {"seed", history.seed},
                        {"num_records", history.records.size()}};
  std::string bytes;
  bytes.reserve(history.records.size() * 5);
  for (const HistoryRecord& r : history.records) {
    const auto obs = static_cast<std::uint16_t>(r.obs);
    bytes.push_back(static_cast<char>(obs & 0xff));
    bytes.push_back(static_cast<char>(obs >> 8));
    bytes.push_back(static_cast<char>(r.action));
    bytes.push_back(static_cast<char>(r.reward));
    bytes.push_back(static_cast<char>(r.done ? 1 : 0));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing (task " + history.task.id() + ")");
  out << header.dump() << '\n';
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string() + " (task " + history.task.id() + ")");
}

LearningHistory load_history(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("missing header in " + path.string());
  LearningHistory h;
  std::size_t n = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format_version").get<int>() != kHistoryFormatVersion) {
      throw DataError("unsupported history format version in " + path.string());
    }
    h.task = header.at("task").get<GridTask>();
    h.config_fingerprint = header.at("config_fingerprint").get<std::string>();
    h.seed = header.at("seed").get<std::uint64_t>();
    n = header.at("num_records").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header in " + path.string() + ": " + e.what());
  }
  std::string bytes(n * 5, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw DataError("truncated history file " + path.string());
  }
  h.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + i * 5);
    h.records[i] = {b[0] | (b[1] << 8), b[2], b[3], b[4] != 0};
  }
  return h;
}

bool replays_exactly(const LearningHistory& history) {
  const GridTask& task = history.task;
  auto [state, pos] = reset(task);
  for (const HistoryRecord& r : history.records) {
    if (task.cell_index(state.pos) != r.obs) return false;
    const StepResult s = step(task, state, action_from_index(r.action));
    if (s.reward != r.reward || s.done != r.done) return false;
    state = s.done ? reset(task).state : s.state;
  }
  return true;
}

std::vector<int> episode_returns(const LearningHistory& history) {
  std::vector<int> out;
  int acc = 0;
  for (const HistoryRecord& r : history.records) {
    acc += r.reward;
    if (r.done) {
      out.push_back(acc);
      acc = 0;
    }
  }
  return out;
}

std::vector<int> compute_returns_to_go(const LearningHistory& history, std::size_t begin,
                                       std::size_t end) {
  if (begin > end || end > history.records.size()) {
    throw DataError("return-to-go range outside the history");
  }
  if (begin == end) return {};
  // Extend to the end of the episode containing end-1.
  std::size_t stop = end;
  while (stop < history.records.size() && !history.records[stop - 1].done) ++stop;
  std::vector<int> rtg(stop - begin, 0);
  int acc = 0;
  for (std::size_t i = stop; i-- > begin;) {
    if (history.records[i].done) acc = 0;
    acc += history.records[i].reward;
    rtg[i - begin] = acc;
  }
  rtg.resize(end - begin);
  return rtg;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  auto tasks = nlohmann::json::array();
  for (std::size_t i = 0; i < m.tasks.size(); ++i) {
    tasks.push_back({{"task_id", m.tasks[i].id()},
                     {"task", m.tasks[i]},
                     {"seed", m.seeds.at(i)},
                     {"records", m.record_counts.at(i)}});
  }
  std::size_t total = 0;
  for (std::size_t c : m.record_counts) total += c;
  j = nlohmann::json{{"format_version", m.format_version},
                     {"family", family_name(m.family)},
                     {"ppo_fingerprint", m.ppo_fingerprint},
                     {"total_records", total},
                     {"tasks", tasks}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.format_version = j.at("format_version").get<int>();
  m.family = parse_family(j.at("family").get<std::string>());
  m.ppo_fingerprint = j.at("ppo_fingerprint").get<std::string>();
  m.tasks.clear();
  m.seeds.clear();
  m.record_counts.clear();
  for (const auto& t : j.at("tasks")) {
    m.tasks.push_back(t.at("task").get<GridTask>());
    m.seeds.push_back(t.at("seed").get<std::uint64_t>());
    m.record_counts.push_back(t.at("records").get<std::size_t>());
  }
}

Dataset::Dataset(std::vector<LearningHistory> histories) : histories_(std::move(histories)) {}

std::size_t Dataset::total_records() const {
  std::size_t n = 0;
  for (const auto& h : histories_) n += h.size();
  return n;
}

int Dataset::horizon() const {
  if (histories_.empty()) throw DataError("empty dataset");
  return histories_.front().task.horizon;
}

DatasetManifest Dataset::manifest() const {
  DatasetManifest m;
  if (!histories_.empty()) {
    m.family = histories_.front().task.family;
    m.ppo_fingerprint = histories_.front().config_fingerprint;
  }
  for (const auto& h : histories_) {
    m.tasks.push_back(h.task);
    m.seeds.push_back(h.seed);
    m.record_counts.push_back(h.size());
  }
  return m;
}

void Dataset::save(const fs::path& root) const {
  const DatasetManifest m = manifest();
  const fs::path dir = root / std::string(family_name(m.family));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& h : histories_) save_history(h, dir / (h.task.id() + ".hist"));
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest under " + root.string());
  out << nlohmann::json(m).dump(2) << '\n';
}

Dataset Dataset::load(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("no manifest.json under " + root.string());
  DatasetManifest m;
  try {
    m = nlohmann::json::parse(in).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest under " + root.string() + ": " + e.what());
  }
  if (m.format_version != kHistoryFormatVersion) throw DataError("unsupported dataset format");
  std::vector<LearningHistory> histories;
  const fs::path dir = root / std::string(family_name(m.family));
  for (std::size_t i = 0; i < m.tasks.size(); ++i) {
    LearningHistory h = load_history(dir / (m.tasks[i].id() + ".hist"));
    if (h.size() != m.record_counts[i] || !(h.task == m.tasks[i])) {
      throw DataError("history for " + m.tasks[i].id() + " disagrees with the manifest");
    }
    histories.push_back(std::move(h));
  }
  return Dataset(std::move(histories));
}

Dataset build_dataset(const std::vector<GridTask>& tasks, const PPOConfig& ppo,
                      const fs::path& root, int threads, const BuildProgress& progress) {
  std::vector<LearningHistory> histories(tasks.size());
  std::atomic<std::size_t> finished{0};
  std::mutex progress_mutex;
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    PPOConfig cfg = ppo;
    // Seeded by task identity so a task's history does not depend on the split.
    cfg.seed = derive_seed(ppo.seed, tasks[i].id());
    histories[i] = train_source(tasks[i], cfg);
    const std::size_t done = ++finished;
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(done, tasks.size());
    }
  });
  Dataset dataset(std::move(histories));
  if (!root.empty()) dataset.save(root);
  return dataset;
}

SegmentSample extract_segment(const LearningHistory& history, std::size_t start, std::size_t k,
                              bool with_optimal_actions) {
  if (k == 0 || start + k > history.size()) throw DataError("segment outside the history");
  const GridTask& task = history.task;
  const auto horizon = static_cast<std::size_t>(task.horizon);
  SegmentSample s;
  s.task_id = task.id();
  s.start = start;
  s.rtg_labels = compute_returns_to_go(history, start, start + k);
  s.transitions.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    const HistoryRecord& r = history.records[start + i];
    SegmentTransition& t = s.transitions[i];
    t.obs = r.obs;
    t.action = r.action;
    t.reward = r.reward;
    t.done = r.done;
    t.episode_step = static_cast<int>((start + i) % horizon);
    if (!r.done && start + i + 1 < history.size()) t.next_obs = history.records[start + i + 1].obs;
  }
  if (with_optimal_actions) {
    // Replay from the start of the first episode to recover the hidden state.
    const std::size_t episode_begin = start - start % horizon;
    EnvState state = reset(task).state;
    std::vector<int> labels;
    labels.reserve(k);
    for (std::size_t i = episode_begin; i < start + k; ++i) {
      if (i >= start) labels.push_back(to_index(optimal_action(task, state)));
      const StepResult r = step(task, state, action_from_index(history.records[i].action));
      state = r.done ? reset(task).state : r.state;
    }
    s.optimal_actions = std::move(labels);
  }
  return s;
}

SegmentSample sample_segment(const Dataset& dataset, std::size_t k, Rng& rng,
                             bool with_optimal_actions) {
  if (dataset.empty()) throw DataError("cannot sample from an empty dataset");
  return sample_segment(dataset, rng.uniform_int(dataset.size()), k, rng, with_optimal_actions);
}

SegmentSample sample_segment(const Dataset& dataset, std::span<const std::size_t> pool,
                             std::size_t k, Rng& rng, bool with_optimal_actions) {
  if (pool.empty()) throw DataError("cannot sample from an empty task pool");
  return sample_segment(dataset, pool[rng.uniform_int(pool.size())], k, rng, with_optimal_actions);
}

SegmentSample sample_segment(const Dataset& dataset, std::size_t index, std::size_t k, Rng& rng,
                             bool with_optimal_actions) {
  const LearningHistory& h = dataset[index];
  if (k > h.size()) throw DataError("segment length exceeds history length for " + h.task.id());
  const auto horizon = static_cast<std::size_t>(h.task.horizon);
  const std::size_t n_starts = (h.size() - k) / horizon + 1;
  const std::size_t start = rng.uniform_int(n_starts) * horizon;
  SegmentSample s = extract_segment(h, start, k, with_optimal_actions);
  s.history_index = index;
  return s;
}

}  // namespace dicp
