#include "dicp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"
#include "dicp/io.hpp"
#include "dicp/runtime.hpp"
#include "dicp/stats.hpp"

namespace dicp {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (total_steps < 1) throw ConfigError("train.total_steps must be positive");
  if (eval_every < 1) throw ConfigError("train.eval_every must be positive");
  if (context_transitions < 1) throw ConfigError("train.context_transitions must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be non-negative");
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) {
    throw ConfigError("train.heldout_fraction must lie in [0, 1)");
  }
  if (heldout_segments < 1) throw ConfigError("train.heldout_segments must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"total_steps", c.total_steps},
                     {"eval_every", c.eval_every},
                     {"mode", mode_name(c.mode)},
                     {"lambda", c.lambda},
                     {"seed", c.seed},
                     {"context_transitions", c.context_transitions},
                     {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"weight_decay", c.weight_decay},
                     {"adam_eps", c.adam_eps},
                     {"grad_clip", c.grad_clip},
                     {"heldout_fraction", c.heldout_fraction},
                     {"heldout_segments", c.heldout_segments}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  c.context_transitions = j.value("context_transitions", c.context_transitions);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
  c.heldout_segments = j.value("heldout_segments", c.heldout_segments);
}

double cosine_lr(const TrainConfig& c, std::int64_t step) {
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(c.total_steps), 0.0, 1.0);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

nlohmann::json row_to_json(const MetricsRow& r) {
  return nlohmann::json::array({r.step, number_or_null(r.lr), number_or_null(r.loss_total),
                                number_or_null(r.loss_im), number_or_null(r.loss_r),
                                number_or_null(r.loss_obs), number_or_null(r.loss_rtg),
                                number_or_null(r.heldout_loss)});
}

MetricsRow row_from_json(const nlohmann::json& j) {
  MetricsRow r;
  r.step = j.at(0).get<std::int64_t>();
  r.lr = number_from(j.at(1));
  r.loss_total = number_from(j.at(2));
  r.loss_im = number_from(j.at(3));
  r.loss_r = number_from(j.at(4));
  r.loss_obs = number_from(j.at(5));
  r.loss_rtg = number_from(j.at(6));
  r.heldout_loss = number_from(j.at(7));
  return r;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,lr,loss_total,loss_im,loss_r,loss_obs,loss_rtg,heldout_loss\n";
  for (const MetricsRow& r : rows) {
    out += std::to_string(r.step);
    for (double v : {r.lr, r.loss_total, r.loss_im, r.loss_r, r.loss_obs, r.loss_rtg, r.heldout_loss}) {
      out += ',';
      out += format_number(v);
    }
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  write_text_atomic(path, metrics_csv(rows));
}

std::vector<std::size_t> heldout_task_indices(std::size_t n_tasks, const TrainConfig& c) {
  if (n_tasks < 2 || c.heldout_fraction <= 0.0) return {};
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(c.heldout_fraction * static_cast<double>(n_tasks))), 1,
      n_tasks - 1);
  std::vector<std::size_t> order(n_tasks);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(c.seed, "heldout_tasks"));
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(want);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

void check_compatible(const Dataset& dataset, const ModelConfig& model, const TrainConfig& train) {
  if (dataset.empty()) throw DataError("training dataset is empty");
  const GridTask& first = dataset[0].task;
  for (const LearningHistory& h : dataset.histories()) {
    if (h.task.family != first.family || h.task.horizon != first.horizon ||
        h.task.grid_size != first.grid_size) {
      throw DataError("training dataset mixes task shapes (" + first.id() + ", " + h.task.id() + ")");
    }
    if (h.size() < static_cast<std::size_t>(train.context_transitions)) {
      throw DataError("history " + h.task.id() + " is shorter than the context window");
    }
  }
  if (train.context_transitions != 4 * first.horizon) {
    throw ConfigError("train.context_transitions must be 4 x horizon (" +
                      std::to_string(4 * first.horizon) + ")");
  }
  if (model.context_transitions != train.context_transitions) {
    throw ConfigError("model and train context_transitions disagree");
  }
  const ModelConfig want = ModelConfig::for_task(first);
  if (model.obs_vocab != want.obs_vocab || model.rtg_vocab != want.rtg_vocab ||
      model.horizon != want.horizon || model.reward_vocab != want.reward_vocab ||
      model.action_vocab != want.action_vocab) {
    throw ConfigError("model vocabularies do not match the dataset's tasks");
  }
}

std::vector<float> decay_mask(const ParamLayout& layout) {
  std::vector<float> mask(layout.size(), 0.0f);
  for (const TensorInfo& t : layout.tensors()) {
    if (layout.is_norm_gain(t) || t.name.ends_with(".bias")) continue;
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
              mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()), 1.0f);
  }
  return mask;
}

struct WindowMeans {
  double total = 0, im = 0, r = 0, obs = 0, rtg = 0;
  std::int64_t n = 0;

  void add(const LossBreakdown& l) {
    total += l.total;
    im += l.imitation;
    r += l.reward;
    obs += l.next_obs;
    rtg += l.rtg;
    ++n;
  }
  void fill(MetricsRow& row) const {
    const double k = static_cast<double>(n);
    row.loss_total = total / k;
    row.loss_im = im / k;
    row.loss_r = r / k;
    row.loss_obs = obs / k;
    row.loss_rtg = rtg / k;
  }
};

std::vector<std::string> task_ids(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(d[i].task.id());
  return out;
}

}  // namespace

TrainResult train_meta(const Dataset& dataset, const ModelConfig& model_config,
                       const TrainConfig& tc, const TrainOptions& options) {
  tc.validate();
  retain_heap_memory();
  ModelConfig mc = model_config;
  mc.lambda = tc.lambda;
  mc.validate();
  check_compatible(dataset, mc, tc);

  const std::vector<std::size_t> heldout = heldout_task_indices(dataset.size(), tc);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!std::binary_search(heldout.begin(), heldout.end(), i)) pool.push_back(i);
  }
  for (std::size_t i : heldout) {
    if (std::find(pool.begin(), pool.end(), i) != pool.end()) {
      throw UsageError("held-out task " + dataset[i].task.id() + " leaked into the training pool");
    }
  }

  const auto k = static_cast<std::size_t>(tc.context_transitions);
  const bool dpt = tc.mode == TrainMode::DPT;
  std::vector<TokenizedSegment> heldout_batch;
  if (!heldout.empty()) {
    Rng rng(derive_seed(tc.seed, "heldout_segments"));
    for (int i = 0; i < tc.heldout_segments; ++i) {
      heldout_batch.push_back(tokenize(sample_segment(dataset, heldout, k, rng, dpt), mc, tc.mode));
    }
  }

  TrainResult result;
  result.train_task_ids = task_ids(dataset, pool);
  result.heldout_task_ids = task_ids(dataset, heldout);
  result.best_heldout_loss = std::numeric_limits<double>::infinity();

  SequenceModel model(mc, derive_seed(tc.seed, "init"));
  const ParamLayout& layout = model.layout();
  const auto n = static_cast<Eigen::Index>(model.num_params());
  OptimizerState opt{0, FloatBuffer(model.num_params(), 0.0f), FloatBuffer(model.num_params(), 0.0f)};

  nlohmann::json train_json = tc;
  if (options.resume_from) {
    Checkpoint ck = load_checkpoint(*options.resume_from);
    const auto meta = nlohmann::json::parse(ck.metadata);
    if (!(ck.config == mc)) throw ConfigError("resume checkpoint has a different model config");
    if (!meta.contains("train_config") || meta.at("train_config") != train_json) {
      throw ConfigError("resume checkpoint was written with a different train config");
    }
    if (!ck.optimizer) throw DataError("resume checkpoint carries no optimizer state");
    model.params() = std::move(ck.params);
    opt = std::move(*ck.optimizer);
    for (const auto& r : meta.at("metrics")) result.metrics.push_back(row_from_json(r));
    result.best_step = meta.value("best_step", std::int64_t{-1});
    result.best_heldout_loss = number_from(meta.at("best_loss"));
    if (std::isnan(result.best_heldout_loss)) {
      result.best_heldout_loss = std::numeric_limits<double>::infinity();
    }
  }

  const std::vector<float> decay = decay_mask(layout);
  FloatBuffer grad(model.num_params());
  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);

  auto heldout_loss = [&](std::int64_t at) {
    if (heldout_batch.empty()) return std::numeric_limits<double>::quiet_NaN();
    double loss = 0.0;
    try {
      loss = model.loss(heldout_batch).total;
    } catch (const NumericError& e) {
      throw NumericError("training diverged before step " + std::to_string(at) + ": " + e.what());
    }
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged before step " + std::to_string(at) + ": held-out loss");
    }
    return loss;
  };
  auto save = [&](const std::string& name, std::int64_t step) {
    if (!write) return;
    nlohmann::json meta{{"step", step},
                        {"train_config", train_json},
                        {"best_step", result.best_step},
                        {"best_loss", number_or_null(result.best_heldout_loss)},
                        {"train_tasks", result.train_task_ids},
                        {"heldout_tasks", result.heldout_task_ids},
                        {"metrics", nlohmann::json::array()}};
    for (const MetricsRow& r : result.metrics) meta["metrics"].push_back(row_to_json(r));
    save_checkpoint(Checkpoint{mc, model.params(), opt, meta.dump()}, options.out_dir / name);
  };
  auto record = [&](MetricsRow row, std::int64_t step) {
    result.metrics.push_back(row);
    const double selection = std::isnan(row.heldout_loss) ? row.loss_total : row.heldout_loss;
    if (step > 0 && selection < result.best_heldout_loss) {
      result.best_heldout_loss = selection;
      result.best_step = step;
      save("best.ckpt", step);
    }
    if (write) write_metrics_csv(result.metrics, options.out_dir / "metrics.csv");
    if (options.on_metrics) options.on_metrics(row);
  };

  WindowMeans window;
  std::int64_t step = opt.step;
  const std::int64_t stop = std::min(tc.total_steps, options.stop_at.value_or(tc.total_steps));
  std::vector<TokenizedSegment> batch(static_cast<std::size_t>(tc.batch_size));
  for (; step < stop; ++step) {
    if (options.before_step) options.before_step(step, model);
    Rng rng(derive_seed(tc.seed, "batch", static_cast<std::uint64_t>(step)));
    for (auto& seg : batch) seg = tokenize(sample_segment(dataset, pool, k, rng, dpt), mc, tc.mode);
    const std::uint64_t drop_seed = derive_seed(tc.seed, "dropout", static_cast<std::uint64_t>(step));

    LossBreakdown loss;
    try {
      loss = loss_and_gradient<float>(mc, layout, model.params().data(), batch, grad.data(), &drop_seed);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    Eigen::Map<Eigen::ArrayXf> g(grad.data(), n);
    const double norm = std::sqrt(g.cast<double>().square().sum());
    if (!std::isfinite(loss.total) || !std::isfinite(norm)) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": non-finite " +
                         (std::isfinite(loss.total) ? "gradient" : "loss"));
    }
    if (step == 0) {
      MetricsRow row;
      row.lr = cosine_lr(tc, 0);
      WindowMeans first;
      first.add(loss);
      first.fill(row);
      row.heldout_loss = heldout_loss(0);
      record(row, 0);
    }
    window.add(loss);

    if (tc.grad_clip > 0.0 && norm > tc.grad_clip) g *= static_cast<float>(tc.grad_clip / norm);
    const double lr = cosine_lr(tc, step);
    const auto t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(tc.beta1, t);
    const double c2 = 1.0 - std::pow(tc.beta2, t);
    Eigen::Map<Eigen::ArrayXf> p(model.params().data(), n), m(opt.m.data(), n), v(opt.v.data(), n);
    const Eigen::Map<const Eigen::ArrayXf> wd(decay.data(), n);
    const auto b1 = static_cast<float>(tc.beta1), b2 = static_cast<float>(tc.beta2);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    p -= static_cast<float>(lr * tc.weight_decay) * wd * p;
    p -= static_cast<float>(lr / c1) * m / ((v / static_cast<float>(c2)).sqrt() + static_cast<float>(tc.adam_eps));
    opt.step = step + 1;

    const std::int64_t done = step + 1;
    if (done % tc.eval_every == 0 || done == tc.total_steps) {
      MetricsRow row;
      row.step = done;
      row.lr = cosine_lr(tc, done);
      window.fill(row);
      row.heldout_loss = heldout_loss(done);
      window = WindowMeans{};
      record(row, done);
      save("last.ckpt", done);
    }
  }

  result.steps_done = step;
  if (step == tc.total_steps) save("final.ckpt", step);
  result.model = std::move(model);
  return result;
}

namespace {

// Cross-entropy (nats) and argmax hit for one logit row.
std::pair<double, bool> score_row(const std::vector<float>& logits, int target) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float l : logits) z += std::exp(static_cast<double>(l - mx));
  const double ce = std::log(z) - static_cast<double>(logits[static_cast<std::size_t>(target)] - mx);
  const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
  return {ce, best == target};
}

}  // namespace

ContextPositionReport loss_by_context_position(const SequenceModel& model, const Dataset& histories,
                                               int bucket, std::size_t windows_per_history) {
  if (bucket < 1) throw ConfigError("bucket size must be positive");
  const ModelConfig& c = model.config();
  const auto k = static_cast<std::size_t>(c.context_transitions);
  const auto n_buckets = (k + static_cast<std::size_t>(bucket) - 1) / static_cast<std::size_t>(bucket);

  ContextPositionReport report;
  report.buckets.resize(n_buckets);
  std::vector<double> obs_err(n_buckets, 0.0), rew_err(n_buckets, 0.0);
  for (std::size_t b = 0; b < n_buckets; ++b) {
    report.buckets[b].first_position = static_cast<int>(b) * bucket;
    report.buckets[b].last_position = static_cast<int>(std::min(k, (b + 1) * static_cast<std::size_t>(bucket)) - 1);
  }

  for (const LearningHistory& h : histories.histories()) {
    if (h.size() < k) continue;
    const auto horizon = static_cast<std::size_t>(h.task.horizon);
    const std::size_t n_starts = (h.size() - k) / horizon + 1;
    const std::size_t w = std::min(windows_per_history, n_starts);
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t start = horizon * (w == 1 ? 0 : i * (n_starts - 1) / (w - 1));
      const TokenizedSegment tokens = tokenize(extract_segment(h, start, k, false), c);
      const HeadLogits logits = model.forward(tokens);
      ++report.windows;
      for (std::size_t t = 0; t < logits.reward.size(); ++t) {
        PositionBucket& pb = report.buckets[t / static_cast<std::size_t>(bucket)];
        const std::size_t b = t / static_cast<std::size_t>(bucket);
        if (tokens.target_reward[t] != kMasked) {
          const auto [ce, hit] = score_row(logits.reward[t], tokens.target_reward[t]);
          pb.reward_loss += ce;
          rew_err[b] += hit ? 0.0 : 1.0;
          ++pb.reward_count;
        }
        if (tokens.target_next_obs[t] != kMasked) {
          const auto [ce, hit] = score_row(logits.next_obs[t], tokens.target_next_obs[t]);
          pb.next_obs_loss += ce;
          obs_err[b] += hit ? 0.0 : 1.0;
          ++pb.next_obs_count;
        }
      }
    }
  }

  std::vector<double> index, loss;
  for (std::size_t b = 0; b < n_buckets; ++b) {
    PositionBucket& pb = report.buckets[b];
    if (pb.reward_count) {
      pb.reward_loss /= static_cast<double>(pb.reward_count);
      pb.reward_error = rew_err[b] / static_cast<double>(pb.reward_count);
    }
    if (pb.next_obs_count) {
      pb.next_obs_loss /= static_cast<double>(pb.next_obs_count);
      pb.next_obs_error = obs_err[b] / static_cast<double>(pb.next_obs_count);
    }
    index.push_back(static_cast<double>(b));
    loss.push_back(pb.dynamics_loss());
  }
  report.spearman = n_buckets > 1 ? spearman(index, loss) : 0.0;
  return report;
}

}  // namespace dicp
