// Python bindings. Configs cross the boundary as JSON text; the Python
// package converts dicts on its side.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/experiment.hpp"
#include "dicp/harness.hpp"
#include "dicp/histories.hpp"
#include "dicp/planner.hpp"
#include "dicp/rng.hpp"
#include "dicp/seqmodel.hpp"
#include "dicp/source_rl.hpp"
#include "dicp/trainer.hpp"

namespace py = pybind11;
using namespace dicp;
using json = nlohmann::json;

namespace {

template <class T>
T from_text(const std::string& text) {
  try {
    return json::parse(text).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

template <class T>
std::string to_text(const T& value) {
  return json(value).dump();
}

std::vector<ContextStep> to_steps(const std::vector<std::tuple<int, int, int, int>>& past) {
  std::vector<ContextStep> out;
  out.reserve(past.size());
  for (const auto& [o, a, r, t] : past) out.push_back({o, a, r, t});
  return out;
}

py::dict curve_dict(const LearningCurve& c) {
  py::dict d;
  d["label"] = c.label;
  d["env_steps"] = c.env_steps;
  d["mean"] = c.mean;
  d["ci95"] = c.ci95;
  d["planning_start"] = c.planning_start;
  return d;
}

py::dict meta_test_dict(const MetaTestResult& r) {
  py::dict d;
  d["curve"] = curve_dict(r.curve);
  py::list logs;
  for (const auto& l : r.logs) {
    py::dict e;
    e["task_id"] = l.task_id;
    e["seed"] = l.seed;
    e["episode_returns"] = l.episode_returns;
    e["planning_start"] = l.planning_start;
    logs.append(e);
  }
  d["logs"] = logs;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Compiled core: environments, PPO source runs, sequence model, planner, evaluation.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<GridTask>(m, "Task")
      .def_property_readonly("id", &GridTask::id)
      .def_property_readonly("family", [](const GridTask& t) { return std::string(family_name(t.family)); })
      .def_property_readonly("goal", [](const GridTask& t) { return std::make_pair(t.goal.x, t.goal.y); })
      .def_property_readonly("horizon", [](const GridTask& t) { return t.horizon; })
      .def_property_readonly("grid_size", [](const GridTask& t) { return t.grid_size; })
      .def_property_readonly("num_cells", &GridTask::num_cells)
      .def("to_json", [](const GridTask& t) { return to_text(t); })
      .def_static("from_json", [](const std::string& s) {
        auto t = from_text<GridTask>(s);
        validate(t);
        return t;
      })
      .def("optimal_return", [](const GridTask& t) { return optimal_episode_return(t); })
      .def("__eq__", [](const GridTask& a, const GridTask& b) { return a == b; })
      .def("__repr__", [](const GridTask& t) { return "Task(" + t.id() + ")"; });

  py::class_<EnvState>(m, "EnvState")
      .def_property_readonly("pos", [](const EnvState& s) { return std::make_pair(s.pos.x, s.pos.y); })
      .def_readonly("has_key", &EnvState::has_key)
      .def_readonly("t", &EnvState::t);

  m.def("enumerate_tasks", [](const std::string& family, int grid_size, std::optional<int> horizon) {
    return enumerate_tasks(parse_family(family), grid_size, horizon);
  }, py::arg("family"), py::arg("grid_size") = kDefaultGridSize, py::arg("horizon") = py::none());

  m.def("reset", [](const GridTask& task) {
    const auto r = reset(task);
    return std::make_pair(r.state, task.cell_index(r.observation));
  }, "Returns (state, observation cell index).");

  m.def("step", [](const GridTask& task, const EnvState& state, int action) {
    const auto r = step(task, state, action_from_index(action));
    return std::make_tuple(r.state, task.cell_index(r.observation), r.reward, r.done);
  }, "Returns (state, observation, reward, done).");

  py::class_<LearningHistory>(m, "History")
      .def_readonly("task", &LearningHistory::task)
      .def_readonly("seed", &LearningHistory::seed)
      .def("__len__", &LearningHistory::size)
      .def_property_readonly("obs", [](const LearningHistory& h) {
        std::vector<int> v;
        for (const auto& r : h.records) v.push_back(r.obs);
        return v;
      })
      .def_property_readonly("actions", [](const LearningHistory& h) {
        std::vector<int> v;
        for (const auto& r : h.records) v.push_back(r.action);
        return v;
      })
      .def_property_readonly("rewards", [](const LearningHistory& h) {
        std::vector<int> v;
        for (const auto& r : h.records) v.push_back(r.reward);
        return v;
      })
      .def("episode_returns", [](const LearningHistory& h) { return episode_returns(h); })
      .def("replays_exactly", [](const LearningHistory& h) { return replays_exactly(h); })
      .def("save", [](const LearningHistory& h, const std::filesystem::path& p) { save_history(h, p); });

  m.def("load_history", &load_history);

  m.def("train_source", [](const GridTask& task, const std::string& ppo_json) {
    const auto cfg = from_text<PPOConfig>(ppo_json);
    cfg.validate();
    py::gil_scoped_release release;
    return train_source(task, cfg);
  }, py::arg("task"), py::arg("ppo_json"), "One PPO run on `task`, every transition recorded.");

  m.def("ppo_defaults", [](const std::string& family) { return to_text(PPOConfig::defaults_for(parse_family(family))); });

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<std::vector<LearningHistory>>())
      .def_static("load", &Dataset::load)
      .def("save", &Dataset::save)
      .def("__len__", &Dataset::size)
      .def("__getitem__", [](const Dataset& d, std::size_t i) { return d[i]; })
      .def_property_readonly("histories", &Dataset::histories);

  m.def("build_dataset", [](const std::vector<GridTask>& tasks, const std::string& ppo_json,
                            const std::filesystem::path& root, int threads) {
    const auto cfg = from_text<PPOConfig>(ppo_json);
    py::gil_scoped_release release;
    return build_dataset(tasks, cfg, root, threads);
  }, py::arg("tasks"), py::arg("ppo_json"), py::arg("root") = std::filesystem::path(), py::arg("threads") = 0);

  m.def("model_config_for", [](const GridTask& t) { return to_text(ModelConfig::for_task(t)); });

  py::class_<SequenceModel>(m, "SequenceModel")
      .def(py::init([](const std::string& config_json, std::uint64_t seed) {
        auto cfg = from_text<ModelConfig>(config_json);
        cfg.validate();
        return SequenceModel(cfg, seed);
      }), py::arg("config_json"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) {
        Checkpoint c = load_checkpoint(p);
        return SequenceModel(c.config, std::move(c.params));
      })
      .def_property_readonly("config_json", [](const SequenceModel& s) { return to_text(s.config()); })
      .def_property_readonly("num_params", &SequenceModel::num_params)
      .def("predict_action", [](const SequenceModel& s, const std::vector<std::tuple<int, int, int, int>>& past,
                                int obs, int episode_step) {
        const auto steps = to_steps(past);
        return s.predict_action(ContextQuery{steps, obs, episode_step});
      }, py::arg("past"), py::arg("obs"), py::arg("episode_step"),
         "Action distribution given past (obs, action, reward, episode_step) tuples.");

  m.def("plan", [](const SequenceModel& s, const std::vector<std::tuple<int, int, int, int>>& past, int obs,
                   int episode_step, const std::string& planner_json, std::uint64_t seed) {
    const auto cfg = from_text<PlannerConfig>(planner_json);
    cfg.validate();
    const auto steps = to_steps(past);
    const SequencePlanningModel pm(s);
    Rng rng(seed);
    const PlanResult r = plan(ContextQuery{steps, obs, episode_step}, pm, cfg, rng);
    std::vector<int> first;
    std::vector<double> scores;
    for (const auto& b : r.beams) {
      first.push_back(b.first_action);
      scores.push_back(b.score);
    }
    py::dict d;
    d["action"] = r.action;
    d["planned"] = r.planned;
    d["beam_first_actions"] = first;
    d["beam_scores"] = scores;
    d["action_probs"] = r.action_probs;
    return d;
  }, py::arg("model"), py::arg("past"), py::arg("obs"), py::arg("episode_step"), py::arg("planner_json"),
     py::arg("seed") = 0);

  m.def("planner_defaults", [](const std::string& family) {
    return to_text(PlannerConfig::defaults_for(parse_family(family)));
  });

  m.def("train_meta", [](const Dataset& data, const std::string& model_json, const std::string& train_json,
                         const std::filesystem::path& out_dir) {
    const auto mc = from_text<ModelConfig>(model_json);
    const auto tc = from_text<TrainConfig>(train_json);
    TrainOptions opt;
    opt.out_dir = out_dir;
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    TrainResult r = [&] {
      py::gil_scoped_release release;
      return train_meta(data, mc, tc, opt);
    }();
    return std::make_pair(std::move(r.model), metrics_csv(r.metrics));
  }, py::arg("dataset"), py::arg("model_json"), py::arg("train_json"), py::arg("out_dir") = std::filesystem::path(),
     "Returns (model, metrics CSV text).");

  m.def("meta_test", [](const SequenceModel& s, const std::vector<GridTask>& tasks, const std::string& eval_json,
                        const std::string& planner_json, const std::string& label) {
    EvalConfig ec = from_text<EvalConfig>(eval_json);
    ec.planner = from_text<PlannerConfig>(planner_json);
    MetaTestResult r = [&] {
      py::gil_scoped_release release;
      return meta_test(s, tasks, ec, label);
    }();
    return meta_test_dict(r);
  }, py::arg("model"), py::arg("tasks"), py::arg("eval_json"), py::arg("planner_json"), py::arg("label") = "");

  m.def("context_report", [](const SequenceModel& s, const Dataset& data, int bucket) {
    const auto r = loss_by_context_position(s, data, bucket);
    py::list buckets;
    for (const auto& b : r.buckets) {
      py::dict d;
      d["first_position"] = b.first_position;
      d["last_position"] = b.last_position;
      d["dynamics_loss"] = b.dynamics_loss();
      d["next_obs_accuracy"] = b.next_obs_accuracy();
      d["reward_accuracy"] = b.reward_accuracy();
      buckets.append(d);
    }
    py::dict d;
    d["buckets"] = buckets;
    d["spearman"] = r.spearman;
    return d;
  }, py::arg("model"), py::arg("dataset"), py::arg("bucket") = 10);

  m.def("experiment_config", [](const std::string& text) { return ExperimentConfig::from_json(json::parse(text)).to_json().dump(); },
        "Fills every default into a partial experiment config.");

  m.def("make_splits", [](const std::string& config_json) {
    const auto c = ExperimentConfig::from_json(json::parse(config_json));
    std::vector<std::pair<std::vector<GridTask>, std::vector<GridTask>>> out;
    for (auto& s : make_splits(c)) out.emplace_back(std::move(s.train), std::move(s.test));
    return out;
  });

  m.def("run_experiment", [](const std::string& config_json, const std::filesystem::path& results_root,
                             const std::string& run_id, int threads, bool allow_stale) {
    const auto c = ExperimentConfig::from_json(json::parse(config_json));
    RunOptions opt;
    opt.results_root = results_root;
    opt.run_id = run_id;
    opt.threads = threads;
    opt.allow_stale = allow_stale;
    RunSummary s = [&] {
      py::gil_scoped_release release;
      return run_experiment(c, opt);
    }();
    py::dict d;
    d["dir"] = s.dir.string();
    py::dict stages;
    for (const auto& st : s.stages) {
      stages[py::str(st.name)] = st.action == StageOutcome::Action::Ran       ? "ran"
                                 : st.action == StageOutcome::Action::Skipped ? "skipped"
                                                                              : "reused";
    }
    d["stages"] = stages;
    if (!s.eval.empty()) d["aggregate"] = curve_dict(s.aggregate);
    return d;
  }, py::arg("config_json"), py::arg("results_root"), py::arg("run_id") = "run", py::arg("threads") = 0,
     py::arg("allow_stale") = false);
}
