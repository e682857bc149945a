#include "dicp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/io.hpp"
#include "dicp/parallel.hpp"
#include "dicp/runtime.hpp"
#include "dicp/stats.hpp"

namespace dicp {

EvalConfig EvalConfig::defaults_for(Family family) {
  EvalConfig c;
  c.total_env_steps = family == Family::Darkroom ? 2000 : 5000;
  c.planner = PlannerConfig::defaults_for(family);
  return c;
}

void EvalConfig::validate(int horizon) const {
  if (horizon < 1) throw ConfigError("horizon must be positive");
  if (total_env_steps < horizon || total_env_steps % horizon != 0) {
    throw ConfigError("eval total_env_steps (" + std::to_string(total_env_steps) +
                      ") must be a positive multiple of the horizon (" + std::to_string(horizon) + ")");
  }
  if (num_splits < 1) throw ConfigError("eval num_splits must be at least 1");
  if (seeds.empty()) throw ConfigError("eval needs at least one seed");
  if (final_episodes < 1) throw ConfigError("eval final_episodes must be at least 1");
  planner.validate();
}

// The planner lives in the experiment's "plan" section, so it is not part of
// this object's JSON.
void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"total_env_steps", c.total_env_steps},
                     {"num_splits", c.num_splits},
                     {"seeds", c.seeds},
                     {"threads", c.threads},
                     {"final_episodes", c.final_episodes}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.total_env_steps = j.value("total_env_steps", c.total_env_steps);
  c.num_splits = j.value("num_splits", c.num_splits);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.threads = j.value("threads", c.threads);
  c.final_episodes = j.value("final_episodes", c.final_episodes);
}

void LearningCurve::validate() const {
  if (env_steps.size() != mean.size() || ci95.size() != mean.size()) {
    throw UsageError("learning curve '" + label + "' has mismatched lengths");
  }
  for (double c : ci95) {
    if (!(c >= 0.0)) throw UsageError("learning curve '" + label + "' has a negative CI");
  }
}

namespace {

double mean_of_range(const std::vector<double>& xs, std::size_t begin, std::size_t end) {
  if (begin >= end) return std::numeric_limits<double>::quiet_NaN();
  return mean(std::span<const double>(xs).subspan(begin, end - begin));
}

// Per task (consecutive logs with the same id), the seed-averaged return of
// every episode.
std::vector<std::vector<double>> per_task_returns(const std::vector<TaskEvalLog>& logs) {
  std::vector<std::vector<double>> out;
  std::size_t i = 0;
  while (i < logs.size()) {
    std::size_t j = i;
    while (j < logs.size() && logs[j].task_id == logs[i].task_id) ++j;
    const std::size_t episodes = logs[i].episode_returns.size();
    std::vector<double> avg(episodes, 0.0);
    for (std::size_t s = i; s < j; ++s) {
      if (logs[s].episode_returns.size() != episodes) throw UsageError("episode counts differ between seeds");
      for (std::size_t e = 0; e < episodes; ++e) avg[e] += logs[s].episode_returns[e];
    }
    for (double& v : avg) v /= static_cast<double>(j - i);
    out.push_back(std::move(avg));
    i = j;
  }
  return out;
}

std::optional<std::int64_t> earliest_planning(const std::vector<TaskEvalLog>& logs) {
  std::optional<std::int64_t> start;
  for (const auto& l : logs) {
    if (l.planning_start && (!start || *l.planning_start < *start)) start = l.planning_start;
  }
  return start;
}

LearningCurve curve_from_task_values(const std::vector<std::vector<double>>& tasks,
                                     const std::vector<double>& means, int horizon, std::string label) {
  LearningCurve c;
  c.label = std::move(label);
  const std::size_t episodes = means.size();
  std::vector<double> column(tasks.size());
  for (std::size_t e = 0; e < episodes; ++e) {
    for (std::size_t t = 0; t < tasks.size(); ++t) column[t] = tasks[t][e];
    c.env_steps.push_back(static_cast<std::int64_t>(e + 1) * horizon);
    c.mean.push_back(means[e]);
    c.ci95.push_back(ci95_half_width(column));
  }
  return c;
}

TaskEvalLog run_task(const PlanningModel& model, const GridTask& task, std::uint64_t seed,
                     const EvalConfig& config) {
  TaskEvalLog log;
  log.task_id = task.id();
  log.seed = seed;
  Rng rng(derive_seed(seed, task.id()));
  const auto keep = static_cast<std::size_t>(std::max(model.context_transitions() - 1, 0));
  std::vector<ContextStep> history;
  history.reserve(static_cast<std::size_t>(config.total_env_steps));
  ResetResult r = reset(task);
  EnvState state = r.state;
  int obs = task.cell_index(r.observation);
  int episode_return = 0;
  for (std::int64_t t = 0; t < config.total_env_steps; ++t) {
    const std::size_t n = std::min(history.size(), keep);
    const ContextQuery query{std::span<const ContextStep>(history).last(n), obs, state.t};
    log.max_window = std::max(log.max_window, n);
    const PlanResult choice = plan(query, model, config.planner, rng);
    if (choice.planned && !log.planning_start) log.planning_start = t;
    const StepResult s = step(task, state, action_from_index(choice.action));
    history.push_back({obs, choice.action, s.reward, state.t});
    episode_return += s.reward;
    if (s.done) {
      log.episode_returns.push_back(episode_return);
      episode_return = 0;
      r = reset(task);
      state = r.state;
      obs = task.cell_index(r.observation);
    } else {
      state = s.state;
      obs = task.cell_index(s.observation);
    }
  }
  return log;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double final_return(const LearningCurve& curve, int episodes) {
  const std::size_t n = std::min<std::size_t>(curve.size(), static_cast<std::size_t>(std::max(episodes, 1)));
  return mean_of_range(curve.mean, curve.size() - n, curve.size());
}

double initial_return(const LearningCurve& curve, int episodes) {
  const std::size_t n = std::min<std::size_t>(curve.size(), static_cast<std::size_t>(std::max(episodes, 1)));
  return mean_of_range(curve.mean, 0, n);
}

std::optional<std::int64_t> first_step_reaching(const LearningCurve& curve, double value) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve.mean[i] >= value) return curve.env_steps[i];
  }
  return std::nullopt;
}

void check_model_fits(const ModelConfig& model, const GridTask& task) {
  const ModelConfig want = ModelConfig::for_task(task);
  auto mismatch = [&](const char* what, int have, int need) {
    throw ConfigError(std::string("checkpoint ") + what + " is " + std::to_string(have) + " but task " +
                      task.id() + " needs " + std::to_string(need));
  };
  if (model.obs_vocab != want.obs_vocab) mismatch("observation vocabulary", model.obs_vocab, want.obs_vocab);
  if (model.action_vocab != want.action_vocab) mismatch("action vocabulary", model.action_vocab, want.action_vocab);
  if (model.reward_vocab != want.reward_vocab) mismatch("reward vocabulary", model.reward_vocab, want.reward_vocab);
  if (model.rtg_vocab != want.rtg_vocab) mismatch("return-to-go vocabulary", model.rtg_vocab, want.rtg_vocab);
  if (model.horizon != want.horizon) mismatch("horizon", model.horizon, want.horizon);
}

LearningCurve curve_from_logs(const std::vector<TaskEvalLog>& logs, int horizon, std::string label) {
  const auto tasks = per_task_returns(logs);
  std::vector<double> means;
  if (!tasks.empty()) {
    const std::size_t episodes = tasks.front().size();
    std::vector<double> column(tasks.size());
    for (std::size_t e = 0; e < episodes; ++e) {
      for (std::size_t t = 0; t < tasks.size(); ++t) column[t] = tasks[t].at(e);
      means.push_back(mean(column));
    }
  }
  LearningCurve c = curve_from_task_values(tasks, means, horizon, std::move(label));
  c.planning_start = earliest_planning(logs);
  return c;
}

MetaTestResult meta_test(const PlanningModel& model, const std::vector<GridTask>& tasks,
                         const EvalConfig& config, std::string label) {
  if (tasks.empty()) throw UsageError("meta_test needs at least one task");
  retain_heap_memory();
  const int horizon = tasks.front().horizon;
  for (const auto& t : tasks) {
    if (t.horizon != horizon) throw ConfigError("meta-test tasks must share one horizon");
    if (t.horizon != model.horizon()) {
      throw ConfigError("model horizon " + std::to_string(model.horizon()) + " does not match task " + t.id());
    }
  }
  config.validate(horizon);
  const std::size_t n_seeds = config.seeds.size();
  std::vector<TaskEvalLog> logs(tasks.size() * n_seeds);
  parallel_for(logs.size(), config.threads, [&](std::size_t i) {
    logs[i] = run_task(model, tasks[i / n_seeds], config.seeds[i % n_seeds], config);
  });
  MetaTestResult result;
  result.curve = curve_from_logs(logs, horizon, std::move(label));
  result.logs = std::move(logs);
  return result;
}

MetaTestResult meta_test(const SequenceModel& model, const std::vector<GridTask>& tasks,
                         const EvalConfig& config, std::string label) {
  for (const auto& t : tasks) check_model_fits(model.config(), t);
  const SequencePlanningModel adapter(model);
  return meta_test(adapter, tasks, config, std::move(label));
}

LearningCurve aggregate(const std::vector<MetaTestResult>& splits, int horizon, std::string label) {
  if (splits.empty()) throw UsageError("nothing to aggregate");
  const std::size_t episodes = splits.front().curve.size();
  std::vector<double> means(episodes, 0.0);
  std::vector<std::vector<double>> pooled;
  std::vector<TaskEvalLog> all_logs;
  for (const auto& s : splits) {
    if (s.curve.size() != episodes) throw UsageError("split curves differ in length");
    for (std::size_t e = 0; e < episodes; ++e) means[e] += s.curve.mean[e];
    for (auto& t : per_task_returns(s.logs)) pooled.push_back(std::move(t));
    all_logs.insert(all_logs.end(), s.logs.begin(), s.logs.end());
  }
  for (double& m : means) m /= static_cast<double>(splits.size());
  LearningCurve c = curve_from_task_values(pooled, means, horizon, std::move(label));
  c.planning_start = earliest_planning(all_logs);
  return c;
}

std::vector<MetaTestResult> ablate_beam(const SequenceModel& model, const std::vector<GridTask>& tasks,
                                        const std::vector<int>& sizes, const EvalConfig& config) {
  std::vector<MetaTestResult> out;
  for (int k : sizes) {
    if (k < 0) throw ConfigError("beam sizes must be non-negative");
    EvalConfig c = config;
    if (k == 0) {
      c.planner.mode = PlannerMode::Off;
    } else {
      c.planner.mode = PlannerMode::Beam;
      c.planner.beam_size = k;
    }
    out.push_back(meta_test(model, tasks, c, "K=" + std::to_string(k)));
  }
  return out;
}

ContextPositionReport ablate_context(const SequenceModel& model, const Dataset& histories, int bucket,
                                     std::size_t windows_per_history) {
  for (const auto& h : histories.histories()) check_model_fits(model.config(), h.task);
  return loss_by_context_position(model, histories, bucket, windows_per_history);
}

std::string context_report_csv(const ContextPositionReport& report) {
  std::string out =
      "first_position,last_position,next_obs_loss,reward_loss,dynamics_loss,next_obs_accuracy,"
      "reward_accuracy,next_obs_count,reward_count\n";
  for (const auto& b : report.buckets) {
    out += std::to_string(b.first_position) + ',' + std::to_string(b.last_position);
    for (double v : {b.next_obs_loss, b.reward_loss, b.dynamics_loss(), b.next_obs_accuracy(), b.reward_accuracy()}) {
      out += ',' + format_number(v);
    }
    out += ',' + std::to_string(b.next_obs_count) + ',' + std::to_string(b.reward_count) + '\n';
  }
  return out;
}

std::string curves_csv(const std::vector<LearningCurve>& curves) {
  std::string out = "label,env_step,mean,ci95,planning_start\n";
  for (const auto& c : curves) {
    c.validate();
    if (c.label.find_first_of(",\n\"") != std::string::npos) {
      throw UsageError("curve label '" + c.label + "' may not contain commas, quotes or newlines");
    }
    const std::string start = c.planning_start ? std::to_string(*c.planning_start) : "";
    for (std::size_t i = 0; i < c.size(); ++i) {
      out += c.label + ',' + std::to_string(c.env_steps[i]) + ',' + format_number(c.mean[i]) + ',' +
             format_number(c.ci95[i]) + ',' + start + '\n';
    }
  }
  return out;
}

std::vector<LearningCurve> parse_curves_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "label,env_step,mean,ci95,planning_start") {
    throw DataError("not a learning-curve CSV (bad header)");
  }
  std::vector<LearningCurve> curves;
  std::map<std::string, std::size_t> index;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (f.size() != 5) throw DataError("curve CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
    auto [it, fresh] = index.try_emplace(f[0], curves.size());
    if (fresh) {
      curves.emplace_back();
      curves.back().label = f[0];
      if (!f[4].empty()) curves.back().planning_start = std::stoll(f[4]);
    }
    LearningCurve& c = curves[it->second];
    try {
      c.env_steps.push_back(std::stoll(f[1]));
      c.mean.push_back(std::stod(f[2]));
      c.ci95.push_back(std::stod(f[3]));
    } catch (const std::exception&) {
      throw DataError("curve CSV line " + std::to_string(line_no) + " has a malformed number");
    }
  }
  return curves;
}

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Round step for about `n` ticks over `span`.
double nice_step(double span, int n) {
  const double raw = span / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10 * mag;
}

}  // namespace

std::string curves_svg(const std::vector<LearningCurve>& curves, const std::string& title) {
  if (curves.empty()) throw UsageError("plot needs at least one curve");
  constexpr double W = 720, H = 440, left = 64, right = 170, top = 40, bottom = 56;
  const double pw = W - left - right, ph = H - top - bottom;

  double x_max = 1, y_lo = std::numeric_limits<double>::infinity(), y_hi = -y_lo;
  for (const auto& c : curves) {
    c.validate();
    for (std::size_t i = 0; i < c.size(); ++i) {
      x_max = std::max(x_max, static_cast<double>(c.env_steps[i]));
      y_lo = std::min(y_lo, c.mean[i] - c.ci95[i]);
      y_hi = std::max(y_hi, c.mean[i] + c.ci95[i]);
    }
  }
  if (!std::isfinite(y_lo)) y_lo = 0, y_hi = 1;
  y_lo = std::min(y_lo, 0.0);
  if (y_hi - y_lo < 1e-9) y_hi = y_lo + 1;
  const double y_step = nice_step(y_hi - y_lo, 5);
  y_lo = std::floor(y_lo / y_step) * y_step;
  y_hi = std::ceil(y_hi / y_step) * y_step;
  const double x_step = nice_step(x_max, 6);
  x_max = std::ceil(x_max / x_step) * x_step;

  auto X = [&](double x) { return left + pw * x / x_max; };
  auto Y = [&](double y) { return top + ph * (1 - (y - y_lo) / (y_hi - y_lo)); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) {
    s << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << escape_xml(title) << "</text>\n";
  }
  for (double y = y_lo; y <= y_hi + y_step * 1e-6; y += y_step) {
    s << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(Y(y)) << "\" x2=\"" << fmt(left + pw) << "\" y2=\""
      << fmt(Y(y)) << "\" stroke=\"#e5e5e5\"/>\n";
    s << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(Y(y) + 4) << "\" text-anchor=\"end\">" << tick_label(y)
      << "</text>\n";
  }
  for (double x = 0; x <= x_max + x_step * 1e-6; x += x_step) {
    s << "<line x1=\"" << fmt(X(x)) << "\" y1=\"" << fmt(top + ph) << "\" x2=\"" << fmt(X(x)) << "\" y2=\""
      << fmt(top + ph + 5) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << fmt(X(x)) << "\" y=\"" << fmt(top + ph + 19) << "\" text-anchor=\"middle\">"
      << tick_label(x) << "</text>\n";
  }
  s << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << fmt(H - 14)
    << "\" text-anchor=\"middle\">environment steps</text>\n";
  s << "<text transform=\"translate(18," << fmt(top + ph / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">episode return</text>\n";

  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k];
    const char* color = kPalette[k % std::size(kPalette)];
    s << "<g class=\"curve\" data-label=\"" << escape_xml(c.label) << "\">\n";
    if (c.size() > 0) {
      s << "<polygon class=\"band\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < c.size(); ++i) {
        s << fmt(X(static_cast<double>(c.env_steps[i]))) << ',' << fmt(Y(c.mean[i] + c.ci95[i])) << ' ';
      }
      for (std::size_t i = c.size(); i-- > 0;) {
        s << fmt(X(static_cast<double>(c.env_steps[i]))) << ',' << fmt(Y(c.mean[i] - c.ci95[i])) << ' ';
      }
      s << "\"/>\n<polyline class=\"mean\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < c.size(); ++i) {
        s << fmt(X(static_cast<double>(c.env_steps[i]))) << ',' << fmt(Y(c.mean[i])) << ' ';
      }
      s << "\"/>\n";
    }
    if (c.planning_start) {
      const double x = X(static_cast<double>(*c.planning_start));
      s << "<line class=\"planning-start\" x1=\"" << fmt(x) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(x)
        << "\" y2=\"" << fmt(top + ph) << "\" stroke=\"" << color << "\" stroke-dasharray=\"6,4\"/>\n";
    }
    s << "</g>\n";
    const double ly = top + 12 + 20 * static_cast<double>(k);
    s << "<g class=\"legend-entry\"><rect x=\"" << fmt(left + pw + 14) << "\" y=\"" << fmt(ly - 9)
      << "\" width=\"14\" height=\"10\" fill=\"" << color << "\"/><text x=\"" << fmt(left + pw + 34) << "\" y=\""
      << fmt(ly) << "\">" << escape_xml(c.label) << "</text></g>\n";
  }
  s << "</svg>\n";
  return s.str();
}

void plot_curves(const std::vector<LearningCurve>& curves, const std::filesystem::path& out,
                 const std::string& title) {
  if (curves.empty()) throw UsageError("plot needs at least one curve");
  std::filesystem::path csv = out;
  csv.replace_extension(".csv");
  write_text_atomic(csv, curves_csv(curves));
  write_text_atomic(out, curves_svg(curves, title));
}

}  // namespace dicp
