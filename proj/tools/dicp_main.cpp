// dicp: generate source histories, meta-train, meta-test, ablate, plot, or
// run a whole experiment from a config file.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/experiment.hpp"
#include "dicp/harness.hpp"
#include "dicp/histories.hpp"
#include "dicp/io.hpp"
#include "dicp/trainer.hpp"

namespace fs = std::filesystem;
using namespace dicp;

namespace {

void say(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

ExperimentConfig config_or_defaults(const std::string& path, const std::string& family) {
  if (!path.empty()) return load_experiment_config(path);
  nlohmann::json j = nlohmann::json::object();
  if (!family.empty()) j["env"] = {{"family", family}};
  return ExperimentConfig::from_json(j);
}

const TaskSplit& pick_split(const std::vector<TaskSplit>& splits, int s) {
  if (s < 0 || s >= static_cast<int>(splits.size())) {
    throw ConfigError("split " + std::to_string(s) + " out of range (config has " + std::to_string(splits.size()) + ")");
  }
  return splits[static_cast<std::size_t>(s)];
}

Dataset subset(const Dataset& data, const std::vector<GridTask>& tasks) {
  std::vector<LearningHistory> out;
  for (const auto& t : tasks) {
    bool found = false;
    for (const auto& h : data.histories()) {
      if (h.task == t) {
        out.push_back(h);
        found = true;
        break;
      }
    }
    if (!found) throw DataError("dataset has no history for task " + t.id());
  }
  return Dataset(std::move(out));
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context RL with a learned dynamics model and beam-search planning"};
  app.require_subcommand(1);

  std::string config_path, family, out, data_dir, checkpoint;
  int threads = 0, split = 0;

  auto* gen = app.add_subcommand("generate", "Run the source RL algorithm on every task and save the learning histories");
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  bool all_tasks = false;
  gen->add_option("--family", family, "darkroom, dark_key_to_door or darkroom_permuted");
  gen->add_option("--seed", seed, "PPO seed");
  gen->add_option("--config", config_path, "Experiment config (env and ppo sections)");
  gen->add_option("--steps", steps, "Override ppo.total_timesteps");
  gen->add_flag("--all-tasks", all_tasks, "Every task of the family, not only those in the configured splits");
  gen->add_option("--out", out, "Dataset directory")->required();
  gen->add_option("--threads", threads);

  auto* train = app.add_subcommand("train", "Meta-train a sequence model on one split's training histories");
  std::string mode;
  std::string resume;
  train->add_option("--mode", mode, "ad or dpt")->check(CLI::IsMember({"ad", "dpt"}));
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir, "Dataset directory from generate")->required();
  train->add_option("--split", split);
  train->add_option("--out", out, "Output directory for checkpoints and metrics.csv")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from (usually OUT/last.ckpt)");

  auto* eval = app.add_subcommand("eval", "Meta-test a checkpoint on one split's test tasks");
  std::string planner;
  int K = -1, L = -1, horizon = -1;
  std::int64_t total_steps = 0;
  eval->add_option("--planner", planner, "off, greedy or beam")->check(CLI::IsMember({"off", "greedy", "beam"}));
  eval->add_option("--K", K, "Beam size");
  eval->add_option("--L", L, "Candidate actions per expansion");
  eval->add_option("--horizon", horizon, "Planning horizon");
  eval->add_option("--steps", total_steps, "Env steps per task (multiple of the episode horizon)");
  eval->add_option("--config", config_path)->required();
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--split", split);
  eval->add_option("--out", out, "Output directory")->required();
  eval->add_option("--threads", threads);

  auto* ablate = app.add_subcommand("ablate", "Beam-size or context-position ablation");
  std::string kind, sizes = "0,1,5,10,20";
  int bucket = 10;
  ablate->add_option("kind", kind, "beam or context")->required()->check(CLI::IsMember({"beam", "context"}));
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--checkpoint", checkpoint)->required();
  ablate->add_option("--split", split);
  ablate->add_option("--sizes", sizes, "Comma-separated beam sizes; 0 = planning off");
  ablate->add_option("--data", data_dir, "Dataset directory (context ablation)");
  ablate->add_option("--bucket", bucket, "Context positions per bucket");
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--threads", threads);

  auto* plot = app.add_subcommand("plot", "Render learning-curve CSVs as one SVG");
  std::vector<std::string> inputs;
  std::string title;
  plot->add_option("inputs", inputs, "Curve CSV files")->required();
  plot->add_option("--out", out, "SVG path (a twin CSV is written next to it)")->required();
  plot->add_option("--title", title);

  auto* run = app.add_subcommand("run", "Run the stages named in a config, skipping up-to-date ones");
  std::string results = "results", run_id;
  bool allow_stale = false;
  run->add_option("--config", config_path)->required();
  run->add_option("--results", results, "Results root");
  run->add_option("--run-id", run_id, "Defaults to the config file stem");
  run->add_flag("--allow-stale", allow_stale, "Reuse outputs whose fingerprints no longer match");
  run->add_option("--threads", threads);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ExperimentConfig c = config_or_defaults(config_path, family);
      if (!family.empty()) c.env.family = parse_family(family);
      if (gen->count("--seed")) c.ppo.seed = seed;
      if (steps > 0) c.ppo.total_timesteps = steps;
      const auto tasks = all_tasks ? enumerate_tasks(c.env.family, c.env.grid_size, c.env.resolved_horizon())
                                   : tasks_in_splits(make_splits(c), c.env);
      say("generating " + std::to_string(tasks.size()) + " histories of " +
          std::to_string(c.ppo.total_timesteps) + " steps");
      build_dataset(tasks, c.ppo, out, threads, [](std::size_t done, std::size_t total) {
        std::fprintf(stderr, "\r%zu/%zu", done, total);
      });
      std::fprintf(stderr, "\n");
    } else if (*train) {
      ExperimentConfig c = load_experiment_config(config_path);
      if (!mode.empty()) c.train.mode = parse_mode(mode);
      const auto splits = make_splits(c);
      const Dataset data = subset(Dataset::load(data_dir), pick_split(splits, split).train);
      TrainOptions opt;
      opt.out_dir = out;
      fs::create_directories(out);
      if (!resume.empty()) opt.resume_from = resume;
      opt.on_metrics = [](const MetricsRow& r) {
        std::fprintf(stderr, "step %lld  loss %.4f  heldout %.4f\n", static_cast<long long>(r.step), r.loss_total,
                     r.heldout_loss);
      };
      const TrainResult r = train_meta(data, c.model, c.train, opt);
      say("done: " + std::to_string(r.steps_done) + " steps, best held-out step " + std::to_string(r.best_step));
    } else if (*eval) {
      ExperimentConfig c = load_experiment_config(config_path);
      EvalConfig ec = c.eval;
      if (!planner.empty()) ec.planner.mode = parse_planner_mode(planner);
      if (K > 0) ec.planner.beam_size = K;
      if (L > 0) ec.planner.sample_size = L;
      if (horizon > 0) ec.planner.planning_horizon = horizon;
      if (total_steps > 0) ec.total_env_steps = total_steps;
      if (threads > 0) ec.threads = threads;
      const auto splits = make_splits(c);
      Checkpoint ck = load_checkpoint(checkpoint);
      const SequenceModel model(ck.config, std::move(ck.params));
      const MetaTestResult r = meta_test(model, pick_split(splits, split).test, ec,
                                         std::string(planner_mode_name(ec.planner.mode)));
      write_text_atomic(fs::path(out) / "episodes.csv", episodes_csv(r.logs));
      plot_curves({r.curve}, fs::path(out) / "curve.svg");
      std::printf("initial %.3f  final %.3f\n", initial_return(r.curve, ec.final_episodes),
                  final_return(r.curve, ec.final_episodes));
    } else if (*ablate) {
      ExperimentConfig c = load_experiment_config(config_path);
      EvalConfig ec = c.eval;
      if (threads > 0) ec.threads = threads;
      const auto splits = make_splits(c);
      Checkpoint ck = load_checkpoint(checkpoint);
      const SequenceModel model(ck.config, std::move(ck.params));
      if (kind == "beam") {
        const auto runs = ablate_beam(model, pick_split(splits, split).test, parse_int_list(sizes), ec);
        std::vector<LearningCurve> curves;
        for (const auto& r : runs) {
          curves.push_back(r.curve);
          std::printf("%s  final %.3f\n", r.curve.label.c_str(), final_return(r.curve, ec.final_episodes));
        }
        plot_curves(curves, fs::path(out) / "beam.svg", "beam size ablation");
      } else {
        if (data_dir.empty()) throw ConfigError("the context ablation needs --data");
        const Dataset data = subset(Dataset::load(data_dir), pick_split(splits, split).test);
        const auto report = ablate_context(model, data, bucket);
        write_text_atomic(fs::path(out) / "context.csv", context_report_csv(report));
        std::printf("spearman(bucket, dynamics loss) = %.4f\n", report.spearman);
      }
    } else if (*plot) {
      std::vector<LearningCurve> curves;
      for (const auto& in : inputs) {
        for (auto& cv : parse_curves_csv(read_text(in))) curves.push_back(std::move(cv));
      }
      plot_curves(curves, out, title);
    } else if (*run) {
      const ExperimentConfig c = load_experiment_config(config_path);
      RunOptions opt;
      opt.results_root = results;
      opt.run_id = run_id.empty() ? fs::path(config_path).stem().string() : run_id;
      opt.allow_stale = allow_stale;
      opt.threads = threads;
      opt.log = say;
      const RunSummary s = run_experiment(c, opt);
      std::printf("%s: %zu ran, %zu skipped, %zu reused\n", s.dir.string().c_str(),
                  s.count(StageOutcome::Action::Ran), s.count(StageOutcome::Action::Skipped),
                  s.count(StageOutcome::Action::ReusedStale));
      if (!s.eval.empty()) {
        std::printf("aggregate: initial %.3f  final %.3f\n", initial_return(s.aggregate, c.eval.final_episodes),
                    final_return(s.aggregate, c.eval.final_episodes));
      }
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
