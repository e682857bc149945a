#include "dicp/experiment.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/histories.hpp"
#include "dicp/io.hpp"

namespace fs = std::filesystem;

namespace dicp {

void to_json(nlohmann::json& j, const EnvSection& e) {
  j = nlohmann::json{{"family", family_name(e.family)},     {"grid_size", e.grid_size},
                     {"horizon", e.resolved_horizon()},     {"test_percent", e.test_percent},
                     {"train_tasks", e.train_tasks},        {"test_tasks", e.test_tasks},
                     {"split_seed", e.split_seed}};
}

void from_json(const nlohmann::json& j, EnvSection& e) {
  if (j.contains("family")) e.family = parse_family(j.at("family").get<std::string>());
  e.grid_size = j.value("grid_size", e.grid_size);
  e.horizon = j.value("horizon", e.horizon);
  e.test_percent = j.value("test_percent", e.test_percent);
  e.train_tasks = j.value("train_tasks", e.train_tasks);
  e.test_tasks = j.value("test_tasks", e.test_tasks);
  e.split_seed = j.value("split_seed", e.split_seed);
}

namespace {

const std::vector<std::string> kStages{"generate", "train", "eval", "ablate"};

const nlohmann::json& section(const nlohmann::json& j, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(name)) return empty;
  const auto& s = j.at(name);
  if (!s.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
  return s;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    static const std::set<std::string> known{"env", "ppo", "model", "train", "plan", "eval"};
    if (!known.contains(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  ExperimentConfig c;
  try {
    section(j, "env").get_to(c.env);
    const auto tasks = enumerate_tasks(c.env.family, c.env.grid_size, c.env.resolved_horizon());
    if (tasks.empty()) throw ConfigError("the environment section yields no tasks");

    c.ppo = PPOConfig::defaults_for(c.env.family);
    section(j, "ppo").get_to(c.ppo);

    c.model = ModelConfig::for_task(tasks.front());
    const auto& model = section(j, "model");
    model.get_to(c.model);

    const auto& train = section(j, "train");
    c.train.context_transitions = c.model.context_transitions;
    c.train.lambda = c.model.lambda;
    train.get_to(c.train);
    if (train.contains("context_transitions") && !model.contains("context_transitions")) {
      c.model.context_transitions = c.train.context_transitions;
    }
    c.model.lambda = c.train.lambda;

    c.plan = PlannerConfig::defaults_for(c.env.family);
    section(j, "plan").get_to(c.plan);

    const auto& eval = section(j, "eval");
    c.eval = EvalConfig::defaults_for(c.env.family);
    eval.get_to(c.eval);
    c.eval.planner = c.plan;
    if (eval.contains("stages")) c.stages = eval.at("stages").get<std::vector<std::string>>();
    if (eval.contains("ablate_beam_sizes")) c.ablate_beam_sizes = eval.at("ablate_beam_sizes").get<std::vector<int>>();
    c.context_bucket = eval.value("context_bucket", c.context_bucket);
    c.checkpoint = eval.value("checkpoint", c.checkpoint);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json eval_j = eval;
  eval_j["stages"] = stages;
  eval_j["ablate_beam_sizes"] = ablate_beam_sizes;
  eval_j["context_bucket"] = context_bucket;
  eval_j["checkpoint"] = checkpoint;
  return nlohmann::json{{"env", env}, {"ppo", ppo}, {"model", model}, {"train", train}, {"plan", plan}, {"eval", eval_j}};
}

void ExperimentConfig::validate() const {
  if (env.grid_size < 2) throw ConfigError("env.grid_size must be at least 2");
  if (env.test_percent > 100) throw ConfigError("env.test_percent must be at most 100");
  if (env.train_tasks < 0 || env.test_tasks < 0) throw ConfigError("task caps must be non-negative");
  ppo.validate();
  model.validate();
  train.validate();
  plan.validate();
  eval.validate(env.resolved_horizon());
  if (model.context_transitions != train.context_transitions) {
    throw ConfigError("model.context_transitions and train.context_transitions disagree");
  }
  for (const auto& s : stages) {
    if (std::find(kStages.begin(), kStages.end(), s) == kStages.end()) {
      throw ConfigError("unknown stage '" + s + "' (expected generate, train, eval or ablate)");
    }
  }
  for (int k : ablate_beam_sizes) {
    if (k < 0) throw ConfigError("ablate_beam_sizes entries must be non-negative");
  }
  if (context_bucket < 1) throw ConfigError("context_bucket must be positive");
  if (checkpoint != "final" && checkpoint != "best") throw ConfigError("eval.checkpoint must be 'final' or 'best'");
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  const std::string text = read_text(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

std::vector<TaskSplit> make_splits(const ExperimentConfig& config) {
  const EnvSection& env = config.env;
  const auto all = enumerate_tasks(env.family, env.grid_size, env.resolved_horizon());
  SplitRatio ratio = default_ratio(env.family);
  if (env.test_percent >= 0) ratio = {100 - env.test_percent, env.test_percent};
  std::vector<TaskSplit> splits;
  for (int s = 0; s < config.eval.num_splits; ++s) {
    TaskSplit split = split_tasks(all, derive_seed(env.split_seed, "split", static_cast<std::uint64_t>(s)), ratio);
    if (env.train_tasks > 0 && split.train.size() > static_cast<std::size_t>(env.train_tasks)) {
      split.train.resize(static_cast<std::size_t>(env.train_tasks));
    }
    if (env.test_tasks > 0 && split.test.size() > static_cast<std::size_t>(env.test_tasks)) {
      split.test.resize(static_cast<std::size_t>(env.test_tasks));
    }
    if (split.train.empty() || split.test.empty()) {
      throw ConfigError("split " + std::to_string(s) + " has an empty train or test set");
    }
    splits.push_back(std::move(split));
  }
  return splits;
}

std::vector<GridTask> tasks_in_splits(const std::vector<TaskSplit>& splits, const EnvSection& env) {
  std::set<std::string> ids;
  for (const auto& s : splits) {
    for (const auto& t : s.train) ids.insert(t.id());
    for (const auto& t : s.test) ids.insert(t.id());
  }
  std::vector<GridTask> out;
  for (auto& t : enumerate_tasks(env.family, env.grid_size, env.resolved_horizon())) {
    if (ids.contains(t.id())) out.push_back(std::move(t));
  }
  return out;
}

std::string fingerprint(const nlohmann::json& value) {
  std::ostringstream s;
  s << std::hex << fnv1a(value.dump());
  return s.str();
}

nlohmann::json environment_fingerprint() {
  nlohmann::json simd = nlohmann::json::array();
#ifdef __AVX512F__
  simd.push_back("avx512f");
#endif
#ifdef __AVX2__
  simd.push_back("avx2");
#endif
#ifdef __FMA__
  simd.push_back("fma");
#endif
  return nlohmann::json{{"dicp_version", "0.1.0"},
                        {"compiler", __VERSION__},
                        {"cplusplus", __cplusplus},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                      "." + std::to_string(EIGEN_MINOR_VERSION)},
                        {"simd", simd},
                        {"hardware_threads", std::thread::hardware_concurrency()}};
}

std::size_t RunSummary::count(StageOutcome::Action a) const {
  return static_cast<std::size_t>(std::count_if(stages.begin(), stages.end(), [a](const StageOutcome& s) { return s.action == a; }));
}

SequenceModel load_model(const fs::path& train_dir, const std::string& which) {
  const fs::path path = train_dir / (which + ".ckpt");
  if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string());
  Checkpoint ck = load_checkpoint(path);
  return SequenceModel(ck.config, std::move(ck.params));
}

std::string episodes_csv(const std::vector<TaskEvalLog>& logs) {
  std::string out = "task_id,seed,episode,return,planning_start\n";
  for (const auto& l : logs) {
    const std::string start = l.planning_start ? std::to_string(*l.planning_start) : "";
    for (std::size_t e = 0; e < l.episode_returns.size(); ++e) {
      out += l.task_id + ',' + std::to_string(l.seed) + ',' + std::to_string(e) + ',' +
             std::to_string(l.episode_returns[e]) + ',' + start + '\n';
    }
  }
  return out;
}

std::vector<TaskEvalLog> parse_episodes_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "task_id,seed,episode,return,planning_start") {
    throw DataError("not an episodes CSV (bad header)");
  }
  std::vector<TaskEvalLog> logs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() == 4) f.emplace_back();
    if (f.size() != 5) throw DataError("malformed episodes CSV line: " + line);
    try {
      const std::uint64_t seed = std::stoull(f[1]);
      if (logs.empty() || logs.back().task_id != f[0] || logs.back().seed != seed) {
        logs.emplace_back();
        logs.back().task_id = f[0];
        logs.back().seed = seed;
        if (!f[4].empty()) logs.back().planning_start = std::stoll(f[4]);
      }
      if (std::stoull(f[2]) != logs.back().episode_returns.size()) throw DataError("episodes out of order: " + line);
      logs.back().episode_returns.push_back(std::stoi(f[3]));
    } catch (const std::logic_error&) {
      throw DataError("malformed episodes CSV line: " + line);
    }
  }
  return logs;
}

namespace {

class Runner {
 public:
  Runner(const ExperimentConfig& config, const RunOptions& options)
      : config_(config), options_(options), dir_(options.results_root / options.run_id) {}

  RunSummary run() {
    fs::create_directories(dir_);
    if (fs::exists(dir_ / "manifest.json")) manifest_ = nlohmann::json::parse(read_text(dir_ / "manifest.json"));
    if (!manifest_.contains("stages")) manifest_["stages"] = nlohmann::json::object();
    write_text_atomic(dir_ / "config.json", config_.to_json().dump(2) + "\n");
    write_text_atomic(dir_ / "environment.json", environment_fingerprint().dump(2) + "\n");

    summary_.dir = dir_;
    splits_ = make_splits(config_);
    const bool need_models = wants("train") || wants("eval") || wants("ablate");
    const std::string data_token = generate();
    if (need_models) {
      std::vector<std::string> train_tokens;
      for (std::size_t s = 0; s < splits_.size(); ++s) train_tokens.push_back(train(s, data_token));
      if (wants("eval")) evaluate(train_tokens);
      if (wants("ablate")) ablate(train_tokens);
    }
    return std::move(summary_);
  }

 private:
  bool wants(const std::string& stage) const {
    return std::find(config_.stages.begin(), config_.stages.end(), stage) != config_.stages.end();
  }
  void log(const std::string& msg) const {
    if (options_.log) options_.log(msg);
  }

  void save_manifest() { write_text_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

  fs::path split_dir(std::size_t s) const { return dir_ / ("split_" + std::to_string(s)); }

  // Runs `body` unless the recorded fingerprint matches and every output is
  // present. Returns the token downstream stages fold into their
  // fingerprints; it changes whenever this stage reruns.
  template <typename Body>
  std::string stage(const std::string& name, const std::string& base, const nlohmann::json& inputs,
                    const std::vector<fs::path>& outputs, Body&& body) {
    const std::string fp = fingerprint(inputs);
    nlohmann::json& stages = manifest_["stages"];
    const bool recorded = stages.contains(name) && stages[name].value("status", "") == "done";
    const bool present = std::all_of(outputs.begin(), outputs.end(), [](const fs::path& p) { return fs::exists(p); });
    auto token = [&] { return stages[name]["fingerprint"].get<std::string>() + ":" + std::to_string(stages[name]["epoch"].get<int>()); };

    if (recorded && present && stages[name]["fingerprint"] == fp) {
      summary_.stages.push_back({name, StageOutcome::Action::Skipped});
      log(name + ": up to date");
      return token();
    }
    if (!wants(base)) {
      if (recorded && present) {
        summary_.stages.push_back({name, StageOutcome::Action::ReusedStale});
        log(name + ": not selected, reusing existing outputs");
        return token();
      }
      throw ConfigError("stage '" + name + "' is needed but not selected and has no outputs");
    }
    if (recorded && present && options_.allow_stale) {
      summary_.stages.push_back({name, StageOutcome::Action::ReusedStale});
      log(name + ": fingerprint changed, reusing stale outputs (--allow-stale)");
      return token();
    }
    const int epoch = stages.contains(name) ? stages[name].value("epoch", 0) + 1 : 1;
    const bool resumable = stages.contains(name) && stages[name].value("status", "") == "running" &&
                           stages[name]["fingerprint"] == fp;
    stages[name] = {{"fingerprint", fp}, {"epoch", epoch}, {"status", "running"}};
    save_manifest();
    log(name + ": running");
    body(resumable);
    stages[name]["status"] = "done";
    save_manifest();
    summary_.stages.push_back({name, StageOutcome::Action::Ran});
    return token();
  }

  std::string generate() {
    const auto tasks = tasks_in_splits(splits_, config_.env);
    nlohmann::json ids = nlohmann::json::array();
    std::vector<fs::path> outputs{dir_ / "data" / "manifest.json"};
    for (const auto& t : tasks) {
      ids.push_back(t.id());
      outputs.push_back(dir_ / "data" / std::string(family_name(t.family)) / (t.id() + ".hist"));
    }
    const nlohmann::json inputs{{"env", config_.env}, {"ppo", config_.ppo}, {"tasks", ids}};
    return stage("generate", "generate", inputs, outputs, [&](bool) {
      std::error_code ec;
      fs::remove_all(dir_ / "data", ec);
      build_dataset(tasks, config_.ppo, dir_ / "data", options_.threads);
    });
  }

  const Dataset& dataset() {
    if (!dataset_) dataset_ = Dataset::load(dir_ / "data");
    return *dataset_;
  }

  Dataset subset(const std::vector<GridTask>& tasks) {
    std::vector<LearningHistory> picked;
    for (const auto& t : tasks) {
      const auto& all = dataset().histories();
      const auto it = std::find_if(all.begin(), all.end(), [&](const LearningHistory& h) { return h.task == t; });
      if (it == all.end()) throw DataError("no history for task " + t.id());
      picked.push_back(*it);
    }
    return Dataset(std::move(picked));
  }

  static nlohmann::json ids(const std::vector<GridTask>& tasks) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& t : tasks) out.push_back(t.id());
    return out;
  }

  std::string train(std::size_t s, const std::string& data_token) {
    const fs::path out = split_dir(s) / "train";
    const nlohmann::json inputs{{"data", data_token}, {"model", config_.model}, {"train", config_.train},
                                {"tasks", ids(splits_[s].train)}};
    return stage("train_" + std::to_string(s), "train", inputs, {out / "final.ckpt", out / "metrics.csv"},
                 [&](bool resumable) {
                   TrainOptions opt;
                   opt.out_dir = out;
                   if (resumable && fs::exists(out / "last.ckpt")) {
                     opt.resume_from = out / "last.ckpt";
                     log("train_" + std::to_string(s) + ": resuming from last.ckpt");
                   } else {
                     std::error_code ec;
                     fs::remove_all(out, ec);
                   }
                   fs::create_directories(out);
                   train_meta(subset(splits_[s].train), config_.model, config_.train, opt);
                 });
  }

  nlohmann::json eval_inputs(const std::string& train_token, std::size_t s) const {
    return nlohmann::json{{"train", train_token},        {"eval", config_.eval}, {"plan", config_.plan},
                          {"checkpoint", config_.checkpoint}, {"tasks", ids(splits_[s].test)}};
  }

  void evaluate(const std::vector<std::string>& train_tokens) {
    const int horizon = config_.env.resolved_horizon();
    std::vector<MetaTestResult> results(splits_.size());
    std::vector<LearningCurve> curves;
    for (std::size_t s = 0; s < splits_.size(); ++s) {
      const fs::path out = split_dir(s) / "eval";
      const std::string label = "split " + std::to_string(s);
      stage("eval_" + std::to_string(s), "eval", eval_inputs(train_tokens[s], s),
            {out / "curve.csv", out / "episodes.csv"}, [&](bool) {
              const SequenceModel model = load_model(split_dir(s) / "train", config_.checkpoint);
              EvalConfig ec = config_.eval;
              if (options_.threads > 0) ec.threads = options_.threads;
              const MetaTestResult r = meta_test(model, splits_[s].test, ec, label);
              write_text_atomic(out / "episodes.csv", episodes_csv(r.logs));
              write_text_atomic(out / "curve.csv", curves_csv({r.curve}));
            });
      results[s].logs = parse_episodes_csv(read_text(out / "episodes.csv"));
      results[s].curve = curve_from_logs(results[s].logs, horizon, label);
      curves.push_back(results[s].curve);
    }
    summary_.aggregate = aggregate(results, horizon, "mean over splits");
    curves.push_back(summary_.aggregate);
    fs::create_directories(dir_ / "eval");
    plot_curves(curves, dir_ / "eval" / "curves.svg",
                std::string(family_name(config_.env.family)) + " meta-test, planner " +
                    std::string(planner_mode_name(config_.plan.mode)));
    summary_.eval = std::move(results);
  }

  void ablate(const std::vector<std::string>& train_tokens) {
    const int horizon = config_.env.resolved_horizon();
    const auto& sizes = config_.ablate_beam_sizes;
    std::vector<std::vector<MetaTestResult>> per_k(sizes.size());
    for (std::size_t s = 0; s < splits_.size(); ++s) {
      const fs::path out = split_dir(s) / "ablate";
      std::vector<fs::path> outputs{out / "context.csv", out / "beam.csv"};
      for (int k : sizes) outputs.push_back(out / ("episodes_K" + std::to_string(k) + ".csv"));
      nlohmann::json inputs = eval_inputs(train_tokens[s], s);
      inputs["sizes"] = sizes;
      inputs["bucket"] = config_.context_bucket;
      stage("ablate_" + std::to_string(s), "ablate", inputs, outputs, [&](bool) {
        const SequenceModel model = load_model(split_dir(s) / "train", config_.checkpoint);
        EvalConfig ec = config_.eval;
        if (options_.threads > 0) ec.threads = options_.threads;
        const auto runs = ablate_beam(model, splits_[s].test, sizes, ec);
        std::vector<LearningCurve> curves;
        for (std::size_t i = 0; i < runs.size(); ++i) {
          write_text_atomic(out / ("episodes_K" + std::to_string(sizes[i]) + ".csv"), episodes_csv(runs[i].logs));
          curves.push_back(runs[i].curve);
        }
        write_text_atomic(out / "beam.csv", curves_csv(curves));
        const auto report = ablate_context(model, subset(splits_[s].test), config_.context_bucket);
        write_text_atomic(out / "context.csv", context_report_csv(report));
      });
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        MetaTestResult r;
        r.logs = parse_episodes_csv(read_text(out / ("episodes_K" + std::to_string(sizes[i]) + ".csv")));
        r.curve = curve_from_logs(r.logs, horizon, "K=" + std::to_string(sizes[i]));
        per_k[i].push_back(std::move(r));
      }
    }
    std::vector<LearningCurve> curves;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      curves.push_back(aggregate(per_k[i], horizon, "K=" + std::to_string(sizes[i])));
    }
    fs::create_directories(dir_ / "ablate");
    plot_curves(curves, dir_ / "ablate" / "beam.svg", "beam size ablation");
  }

  const ExperimentConfig& config_;
  const RunOptions& options_;
  fs::path dir_;
  nlohmann::json manifest_ = nlohmann::json::object();
  std::vector<TaskSplit> splits_;
  std::optional<Dataset> dataset_;
  RunSummary summary_;
};

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  return Runner(config, options).run();
}

}  // namespace dicp
