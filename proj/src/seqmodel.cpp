#include "dicp/seqmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dicp/errors.hpp"

namespace dicp {

std::string_view mode_name(TrainMode m) { return m == TrainMode::AD ? "ad" : "dpt"; }

TrainMode parse_mode(std::string_view s) {
  if (s == "ad" || s == "AD") return TrainMode::AD;
  if (s == "dpt" || s == "DPT") return TrainMode::DPT;
  throw ConfigError("unknown training mode '" + std::string(s) + "' (expected ad or dpt)");
}

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::for_task(const GridTask& task) {
  ModelConfig c;
  c.obs_vocab = task.num_cells();
  c.horizon = task.horizon;
  c.context_transitions = 4 * task.horizon;
  c.rtg_vocab = task.family == Family::DarkKeyToDoor ? 3 : task.horizon + 1;
  return c;
}

void ModelConfig::validate() const {
  if (n_layer < 1 || n_head < 1 || n_embed < 1 || intermediate_size < 1) {
    throw ConfigError("model sizes must be positive");
  }
  if (n_embed % n_head != 0) throw ConfigError("n_embed must be divisible by n_head");
  if (head_dim() % 2 != 0) throw ConfigError("rotary embedding needs an even head dimension");
  if (context_transitions < 1) throw ConfigError("context_transitions must be positive");
  if (obs_vocab < 1 || action_vocab < 1 || reward_vocab < 1 || rtg_vocab < 1 || horizon < 1) {
    throw ConfigError("vocabulary sizes and horizon must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 || attention_dropout >= 1.0) {
    throw ConfigError("dropout rates must lie in [0, 1)");
  }
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layer", c.n_layer},
                     {"n_head", c.n_head},
                     {"n_embed", c.n_embed},
                     {"intermediate_size", c.intermediate_size},
                     {"dropout", c.dropout},
                     {"attention_dropout", c.attention_dropout},
                     {"context_transitions", c.context_transitions},
                     {"obs_vocab", c.obs_vocab},
                     {"action_vocab", c.action_vocab},
                     {"reward_vocab", c.reward_vocab},
                     {"rtg_vocab", c.rtg_vocab},
                     {"horizon", c.horizon},
                     {"lambda", c.lambda},
                     {"rope_base", c.rope_base},
                     {"norm_eps", c.norm_eps},
                     {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layer = j.value("n_layer", c.n_layer);
  c.n_head = j.value("n_head", c.n_head);
  c.n_embed = j.value("n_embed", c.n_embed);
  c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
  c.dropout = j.value("dropout", c.dropout);
  c.attention_dropout = j.value("attention_dropout", c.attention_dropout);
  c.context_transitions = j.value("context_transitions", c.context_transitions);
  c.obs_vocab = j.value("obs_vocab", c.obs_vocab);
  c.action_vocab = j.value("action_vocab", c.action_vocab);
  c.reward_vocab = j.value("reward_vocab", c.reward_vocab);
  c.rtg_vocab = j.value("rtg_vocab", c.rtg_vocab);
  c.horizon = j.value("horizon", c.horizon);
  c.lambda = j.value("lambda", c.lambda);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.init_std = j.value("init_std", c.init_std);
}

// ---------------------------------------------------------------------------
// Parameter layout

std::size_t ParamLayout::add(std::string name, int rows, int cols) {
  TensorInfo t{std::move(name), size_, rows, cols};
  size_ += t.size();
  tensors_.push_back(std::move(t));
  return tensors_.back().offset;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int C = c.n_embed;
  emb_obs = add("embed.obs", c.obs_vocab, C);
  // One extra row for the "no previous reward" symbol.
  emb_prev_reward = add("embed.prev_reward", c.reward_vocab + 1, C);
  emb_action = add("embed.action", c.action_vocab, C);
  emb_step = add("embed.episode_step", c.horizon, C);
  for (int l = 0; l < c.n_layer; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b{};
    b.norm1 = add(p + "attn_norm", 1, C);
    b.qkv = add(p + "attn.qkv", 3 * C, C);
    b.proj = add(p + "attn.proj", C, C);
    b.norm2 = add(p + "mlp_norm", 1, C);
    b.gate = add(p + "mlp.gate", c.intermediate_size, C);
    b.up = add(p + "mlp.up", c.intermediate_size, C);
    b.down = add(p + "mlp.down", C, c.intermediate_size);
    blocks.push_back(b);
  }
  norm_final = add("final_norm", 1, C);
  auto head = [&](const std::string& name, int size) {
    Head h{};
    h.weight = add("head." + name + ".weight", size, C);
    h.bias = add("head." + name + ".bias", 1, size);
    h.size = size;
    return h;
  };
  head_action = head("action", c.action_vocab);
  head_reward = head("reward", c.reward_vocab);
  head_next_obs = head("next_obs", c.obs_vocab);
  head_rtg = head("rtg", c.rtg_vocab);
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw UsageError("no tensor named '" + std::string(name) + "'");
}

const TensorInfo& ParamLayout::tensor_at(std::size_t i) const {
  for (const auto& t : tensors_) {
    if (i >= t.offset && i < t.offset + t.size()) return t;
  }
  throw UsageError("parameter index out of range");
}

bool ParamLayout::is_norm_gain(const TensorInfo& t) const {
  return t.name.ends_with("_norm");
}

// ---------------------------------------------------------------------------
// Tokenization

void validate_tokens(const TokenizedSegment& s, const ModelConfig& c) {
  const std::size_t n = s.obs.size();
  if (n == 0) throw DataError("empty token sequence");
  for (const auto* v : {&s.prev_reward, &s.action, &s.episode_step, &s.target_action,
                        &s.target_reward, &s.target_next_obs, &s.target_rtg}) {
    if (v->size() != n) throw DataError("token arrays differ in length");
  }
  if (static_cast<int>(s.num_tokens()) > c.max_tokens()) {
    throw DataError("token sequence longer than the context window");
  }
  auto check = [](int v, int vocab, bool maskable, const char* what) {
    if ((maskable && v == kMasked)) return;
    if (v < 0 || v >= vocab) {
      throw DataError(std::string(what) + " id " + std::to_string(v) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
  };
  for (std::size_t t = 0; t < n; ++t) {
    check(s.obs[t], c.obs_vocab, false, "observation");
    check(s.prev_reward[t], c.reward_vocab + 1, false, "previous reward");
    check(s.action[t], c.action_vocab, t + 1 == n, "action");
    check(s.episode_step[t], c.horizon, false, "episode step");
    check(s.target_action[t], c.action_vocab, true, "action target");
    check(s.target_reward[t], c.reward_vocab, true, "reward target");
    check(s.target_next_obs[t], c.obs_vocab, true, "next-observation target");
    check(s.target_rtg[t], c.rtg_vocab, true, "return-to-go target");
  }
  if (s.action.back() == kMasked &&
      (s.target_reward.back() != kMasked || s.target_next_obs.back() != kMasked ||
       s.target_rtg.back() != kMasked)) {
    throw DataError("dynamics targets need an action token");
  }
}

TokenizedSegment tokenize(const SegmentSample& segment, const ModelConfig& c, TrainMode mode) {
  const std::size_t n = segment.transitions.size();
  if (static_cast<int>(n) != c.context_transitions) {
    throw DataError("segment has " + std::to_string(n) + " transitions, model expects " +
                    std::to_string(c.context_transitions));
  }
  if (mode == TrainMode::DPT && !segment.optimal_actions) {
    throw DataError("DPT mode needs optimal-action labels on the segment");
  }
  if (segment.rtg_labels.size() != n) throw DataError("segment is missing return-to-go labels");
  TokenizedSegment s;
  for (auto* v : {&s.obs, &s.prev_reward, &s.action, &s.episode_step, &s.target_action,
                  &s.target_reward, &s.target_next_obs, &s.target_rtg}) {
    v->resize(n);
  }
  for (std::size_t t = 0; t < n; ++t) {
    const SegmentTransition& tr = segment.transitions[t];
    s.obs[t] = tr.obs;
    s.prev_reward[t] = t == 0 ? c.reward_vocab : segment.transitions[t - 1].reward;
    s.action[t] = tr.action;
    s.episode_step[t] = tr.episode_step;
    s.target_action[t] = mode == TrainMode::DPT ? (*segment.optimal_actions)[t] : tr.action;
    s.target_reward[t] = tr.reward;
    s.target_next_obs[t] = tr.next_obs < 0 ? kMasked : tr.next_obs;
    s.target_rtg[t] = segment.rtg_labels[t];
  }
  validate_tokens(s, c);
  return s;
}

TokenizedSegment tokenize_query(const ContextQuery& q, const ModelConfig& c) {
  const std::size_t keep =
      std::min(q.past.size(), static_cast<std::size_t>(c.context_transitions - 1));
  const auto past = q.past.subspan(q.past.size() - keep);
  const std::size_t n = keep + 1;
  TokenizedSegment s;
  for (auto* v : {&s.obs, &s.prev_reward, &s.action, &s.episode_step}) v->resize(n);
  for (auto* v : {&s.target_action, &s.target_reward, &s.target_next_obs, &s.target_rtg}) {
    v->assign(n, kMasked);
  }
  for (std::size_t t = 0; t < keep; ++t) {
    s.obs[t] = past[t].obs;
    s.prev_reward[t] = t == 0 ? c.reward_vocab : past[t - 1].reward;
    s.action[t] = past[t].action;
    s.episode_step[t] = past[t].episode_step;
  }
  s.obs[keep] = q.obs;
  s.prev_reward[keep] = keep == 0 ? c.reward_vocab : past[keep - 1].reward;
  s.action[keep] = kMasked;
  s.episode_step[keep] = q.episode_step;
  validate_tokens(s, c);
  return s;
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <class Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
template <class Real>
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
template <class Real>
using CMap = Eigen::Map<const Mat<Real>>;
template <class Real>
using MMap = Eigen::Map<Mat<Real>>;

// Counter-based keep/drop decisions, two per 64-bit hash.
class DropoutStream {
 public:
  DropoutStream(std::uint64_t seed, double p)
      : key_(seed), threshold_(static_cast<std::uint64_t>(p * 4294967296.0)) {}

  bool keep() {
    if (spare_) {
      spare_ = false;
      return (bits_ >> 32) >= threshold_;
    }
    bits_ = mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_);
    spare_ = true;
    return (bits_ & 0xffffffffULL) >= threshold_;
  }

 private:
  std::uint64_t key_;
  std::uint64_t threshold_;
  std::uint64_t counter_ = 0;
  std::uint64_t bits_ = 0;
  bool spare_ = false;
};

template <class Real>
void fill_mask(Mat<Real>& mask, Eigen::Index rows, Eigen::Index cols, double p,
               DropoutStream& stream) {
  mask.resize(rows, cols);
  const Real scale = static_cast<Real>(1.0 / (1.0 - p));
  Real* d = mask.data();
  for (Eigen::Index i = 0; i < rows * cols; ++i) d[i] = stream.keep() ? scale : Real(0);
}

// Lower-triangular n x n mask; entries above the diagonal are zero.
template <class Real>
void fill_causal_mask(Mat<Real>& mask, Eigen::Index n, double p, DropoutStream& stream) {
  mask.setZero(n, n);
  const Real scale = static_cast<Real>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < n; ++i) {
    Real* d = mask.row(i).data();
    for (Eigen::Index j = 0; j <= i; ++j) d[j] = stream.keep() ? scale : Real(0);
  }
}

struct RowIndex {
  std::vector<std::size_t> seq_begin;  // row offset of each sequence, plus total
  std::vector<int> seq, transition, position;
  std::vector<char> is_action;
  std::vector<std::size_t> x_rows, y_rows;  // rows feeding each head group
};

RowIndex index_rows(std::span<const TokenizedSegment> batch) {
  RowIndex r;
  r.seq_begin.push_back(0);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t n_tok = batch[s].num_tokens();
    for (std::size_t p = 0; p < n_tok; ++p) {
      const std::size_t row = r.seq.size();
      r.seq.push_back(static_cast<int>(s));
      r.transition.push_back(static_cast<int>(p / 2));
      r.position.push_back(static_cast<int>(p));
      r.is_action.push_back(static_cast<char>(p % 2));
      (p % 2 == 0 ? r.x_rows : r.y_rows).push_back(row);
    }
    r.seq_begin.push_back(r.seq.size());
  }
  return r;
}

template <class Real>
struct RopeTable {
  Mat<Real> cos, sin;  // positions x (head_dim / 2)
  RopeTable(int positions, int head_dim, double base) : cos(positions, head_dim / 2),
                                                         sin(positions, head_dim / 2) {
    const int half = head_dim / 2;
    for (int p = 0; p < positions; ++p) {
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * i / head_dim);
        cos(p, i) = static_cast<Real>(std::cos(p * freq));
        sin(p, i) = static_cast<Real>(std::sin(p * freq));
      }
    }
  }
};

// Rotate-half rotary embedding on every head of `m` (rows x C), in place.
// inverse = true applies the transpose rotation (for gradients).
template <class Real>
void apply_rope(Real* row, int n_head, int head_dim, const RopeTable<Real>& rope, int pos,
                bool inverse) {
  const int half = head_dim / 2;
  for (int h = 0; h < n_head; ++h) {
    Real* v = row + h * head_dim;
    for (int i = 0; i < half; ++i) {
      const Real c = rope.cos(pos, i);
      const Real s = inverse ? -rope.sin(pos, i) : rope.sin(pos, i);
      const Real a = v[i];
      const Real b = v[i + half];
      v[i] = a * c - b * s;
      v[i + half] = b * c + a * s;
    }
  }
}

template <class Real>
void rms_norm(const Mat<Real>& x, const Real* gain, double eps, Mat<Real>& y, Vec<Real>& inv_rms) {
  const auto C = x.cols();
  inv_rms.resize(x.rows());
  y.resize(x.rows(), C);
  const Eigen::Map<const RowVec<Real>> g(gain, C);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real ms = x.row(r).squaredNorm() / static_cast<Real>(C);
    inv_rms(r) = Real(1) / std::sqrt(ms + static_cast<Real>(eps));
    y.row(r) = (x.row(r) * inv_rms(r)).cwiseProduct(g);
  }
}

// Adds the input gradient of y = x * r * g into dx; accumulates dgain.
template <class Real>
void rms_norm_backward(const Mat<Real>& dy, const Mat<Real>& x, const Vec<Real>& inv_rms,
                       const Real* gain, Mat<Real>& dx, Real* dgain) {
  const auto C = x.cols();
  const Eigen::Map<const RowVec<Real>> g(gain, C);
  Eigen::Map<RowVec<Real>> dg(dgain, C);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real ir = inv_rms(r);
    dg += dy.row(r).cwiseProduct(x.row(r)) * ir;
    const RowVec<Real> t = dy.row(r).cwiseProduct(g);
    const Real dot = t.dot(x.row(r));
    dx.row(r) += t * ir - x.row(r) * (ir * ir * ir * dot / static_cast<Real>(C));
  }
}

template <class Real>
Real sigmoid(Real v) {
  return Real(1) / (Real(1) + std::exp(-v));
}

template <class Real>
struct LayerCache {
  Mat<Real> x_in, a1, q, k, v, attn, proj_mask, x_mid, a2, g, u, m, mlp_mask;
  Vec<Real> inv_rms1, inv_rms2;
  std::vector<Mat<Real>> probs, att_masks;  // per (sequence, head)
};

template <class Real>
struct ForwardCache {
  Mat<Real> emb_mask, x_final, f;
  Vec<Real> inv_rms_f;
  std::vector<LayerCache<Real>> layers;
  Mat<Real> logits_action, logits_reward, logits_next_obs, logits_rtg;
};

template <class Real>
CMap<Real> weight(const Real* params, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  return CMap<Real>(params + offset, rows, cols);
}

struct DropoutPlan {
  bool active = false;
  std::uint64_t seed = 0;
};

template <class Real>
void forward_pass(const ModelConfig& c, const ParamLayout& L, const Real* params,
                  std::span<const TokenizedSegment> batch, const RowIndex& rows,
                  const DropoutPlan& drop, ForwardCache<Real>& cache) {
  const Eigen::Index R = static_cast<Eigen::Index>(rows.seq.size());
  const int C = c.n_embed;
  const int I = c.intermediate_size;
  const int H = c.n_head;
  const int D = c.head_dim();
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(D)));
  int max_pos = 1;
  for (int p : rows.position) max_pos = std::max(max_pos, p + 1);
  const RopeTable<Real> rope(max_pos, D, c.rope_base);

  // Embeddings.
  Mat<Real> h(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    const TokenizedSegment& s = batch[static_cast<std::size_t>(rows.seq[r])];
    const auto t = static_cast<std::size_t>(rows.transition[r]);
    const auto row = [&](std::size_t table, int id) {
      return Eigen::Map<const RowVec<Real>>(params + table + static_cast<std::size_t>(id) * C, C);
    };
    if (rows.is_action[r]) {
      h.row(r) = row(L.emb_action, s.action[t]);
    } else {
      h.row(r) = row(L.emb_obs, s.obs[t]) + row(L.emb_prev_reward, s.prev_reward[t]);
    }
    h.row(r) += row(L.emb_step, s.episode_step[t]);
  }
  const bool resid_drop = drop.active && c.dropout > 0.0;
  const bool att_drop = drop.active && c.attention_dropout > 0.0;
  DropoutStream stream(drop.seed, c.dropout);
  DropoutStream att_stream(mix64(drop.seed ^ 0x5bd1e995ULL), c.attention_dropout);
  if (resid_drop) {
    fill_mask(cache.emb_mask, R, C, c.dropout, stream);
    h = h.cwiseProduct(cache.emb_mask);
  }

  cache.layers.resize(static_cast<std::size_t>(c.n_layer));
  const std::size_t n_seq = rows.seq_begin.size() - 1;
  for (int l = 0; l < c.n_layer; ++l) {
    const auto& B = L.blocks[static_cast<std::size_t>(l)];
    LayerCache<Real>& lc = cache.layers[static_cast<std::size_t>(l)];
    lc.x_in = h;
    rms_norm(lc.x_in, params + B.norm1, c.norm_eps, lc.a1, lc.inv_rms1);
    Mat<Real> qkv(R, 3 * C);
    qkv.noalias() = lc.a1 * weight(params, B.qkv, 3 * C, C).transpose();
    lc.q = qkv.leftCols(C);
    lc.k = qkv.middleCols(C, C);
    lc.v = qkv.rightCols(C);
    for (Eigen::Index r = 0; r < R; ++r) {
      apply_rope(lc.q.row(r).data(), H, D, rope, rows.position[r], false);
      apply_rope(lc.k.row(r).data(), H, D, rope, rows.position[r], false);
    }
    lc.attn.setZero(R, C);
    lc.probs.assign(n_seq * H, Mat<Real>());
    lc.att_masks.assign(att_drop ? n_seq * H : 0, Mat<Real>());
    for (std::size_t s = 0; s < n_seq; ++s) {
      const auto b = static_cast<Eigen::Index>(rows.seq_begin[s]);
      const auto n = static_cast<Eigen::Index>(rows.seq_begin[s + 1] - rows.seq_begin[s]);
      for (int hd = 0; hd < H; ++hd) {
        Mat<Real>& P = lc.probs[s * H + hd];
        P.noalias() = (lc.q.block(b, hd * D, n, D) * lc.k.block(b, hd * D, n, D).transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          auto row = P.row(i).head(i + 1).array();
          row = (row - row.maxCoeff()).exp();
          row /= row.sum();
          P.row(i).tail(n - i - 1).setZero();
        }
        if (att_drop) {
          Mat<Real>& M = lc.att_masks[s * H + hd];
          fill_causal_mask(M, n, c.attention_dropout, att_stream);
          lc.attn.block(b, hd * D, n, D).noalias() = P.cwiseProduct(M) * lc.v.block(b, hd * D, n, D);
        } else {
          lc.attn.block(b, hd * D, n, D).noalias() = P * lc.v.block(b, hd * D, n, D);
        }
      }
    }
    Mat<Real> o(R, C);
    o.noalias() = lc.attn * weight(params, B.proj, C, C).transpose();
    if (resid_drop) {
      fill_mask(lc.proj_mask, R, C, c.dropout, stream);
      o = o.cwiseProduct(lc.proj_mask);
    }
    lc.x_mid = lc.x_in + o;
    rms_norm(lc.x_mid, params + B.norm2, c.norm_eps, lc.a2, lc.inv_rms2);
    lc.g.noalias() = lc.a2 * weight(params, B.gate, I, C).transpose();
    lc.u.noalias() = lc.a2 * weight(params, B.up, I, C).transpose();
    lc.m.resize(R, I);
    lc.m.array() = lc.g.array() / ((-lc.g.array()).exp() + Real(1)) * lc.u.array();
    Mat<Real> d(R, C);
    d.noalias() = lc.m * weight(params, B.down, C, I).transpose();
    if (resid_drop) {
      fill_mask(lc.mlp_mask, R, C, c.dropout, stream);
      d = d.cwiseProduct(lc.mlp_mask);
    }
    h = lc.x_mid + d;
    if (!h.allFinite()) {
      throw NumericError("non-finite activations after layer " + std::to_string(l));
    }
  }
  cache.x_final = h;
  rms_norm(cache.x_final, params + L.norm_final, c.norm_eps, cache.f, cache.inv_rms_f);

  auto head = [&](const ParamLayout::Head& hd, const std::vector<std::size_t>& which,
                   Mat<Real>& out) {
    const auto n = static_cast<Eigen::Index>(which.size());
    Mat<Real> feats(n, C);
    for (Eigen::Index i = 0; i < n; ++i) feats.row(i) = cache.f.row(static_cast<Eigen::Index>(which[i]));
    out.noalias() = feats * weight(params, hd.weight, hd.size, C).transpose();
    out.rowwise() += Eigen::Map<const RowVec<Real>>(params + hd.bias, hd.size);
  };
  head(L.head_action, rows.x_rows, cache.logits_action);
  head(L.head_reward, rows.y_rows, cache.logits_reward);
  head(L.head_next_obs, rows.y_rows, cache.logits_next_obs);
  head(L.head_rtg, rows.y_rows, cache.logits_rtg);
}

// Mean cross-entropy over rows whose target is not masked; fills dlogits
// scaled by `weight` / count (zero rows for masked targets).
template <class Real>
double cross_entropy(const Mat<Real>& logits, const std::vector<int>& targets, double weight,
                     Mat<Real>* dlogits, std::size_t& count) {
  count = 0;
  for (int t : targets) count += t != kMasked ? 1 : 0;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  if (count == 0) return 0.0;
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t == kMasked) continue;
    const double mx = static_cast<double>(logits.row(r).maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(static_cast<double>(logits(r, j)) - mx);
    const double lse = mx + std::log(z);
    total += lse - static_cast<double>(logits(r, t));
    if (dlogits && weight != 0.0) {
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const double p = std::exp(static_cast<double>(logits(r, j)) - lse);
        (*dlogits)(r, j) = static_cast<Real>((p - (j == t ? 1.0 : 0.0)) * inv * weight);
      }
    }
  }
  return total * inv;
}

template <class Real>
void backward_pass(const ModelConfig& c, const ParamLayout& L, const Real* params,
                   std::span<const TokenizedSegment> batch, const RowIndex& rows,
                   const ForwardCache<Real>& cache, const Mat<Real>& d_action,
                   const Mat<Real>& d_reward, const Mat<Real>& d_next_obs, const Mat<Real>& d_rtg,
                   Real* grad) {
  const Eigen::Index R = static_cast<Eigen::Index>(rows.seq.size());
  const int C = c.n_embed;
  const int I = c.intermediate_size;
  const int H = c.n_head;
  const int D = c.head_dim();
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(D)));
  int max_pos = 1;
  for (int p : rows.position) max_pos = std::max(max_pos, p + 1);
  const RopeTable<Real> rope(max_pos, D, c.rope_base);

  Mat<Real> df = Mat<Real>::Zero(R, C);
  auto head_back = [&](const ParamLayout::Head& hd, const std::vector<std::size_t>& which,
                       const Mat<Real>& dlog) {
    const auto n = static_cast<Eigen::Index>(which.size());
    if (n == 0) return;
    Mat<Real> feats(n, C);
    for (Eigen::Index i = 0; i < n; ++i) feats.row(i) = cache.f.row(static_cast<Eigen::Index>(which[i]));
    MMap<Real>(grad + hd.weight, hd.size, C).noalias() += dlog.transpose() * feats;
    Eigen::Map<RowVec<Real>>(grad + hd.bias, hd.size) += dlog.colwise().sum();
    const Mat<Real> dfeat = dlog * weight(params, hd.weight, hd.size, C);
    for (Eigen::Index i = 0; i < n; ++i) df.row(static_cast<Eigen::Index>(which[i])) += dfeat.row(i);
  };
  head_back(L.head_action, rows.x_rows, d_action);
  head_back(L.head_reward, rows.y_rows, d_reward);
  head_back(L.head_next_obs, rows.y_rows, d_next_obs);
  head_back(L.head_rtg, rows.y_rows, d_rtg);

  Mat<Real> dh = Mat<Real>::Zero(R, C);
  rms_norm_backward(df, cache.x_final, cache.inv_rms_f, params + L.norm_final, dh,
                    grad + L.norm_final);

  const std::size_t n_seq = rows.seq_begin.size() - 1;
  for (int l = c.n_layer - 1; l >= 0; --l) {
    const auto& B = L.blocks[static_cast<std::size_t>(l)];
    const LayerCache<Real>& lc = cache.layers[static_cast<std::size_t>(l)];
    // MLP branch.
    const Mat<Real> dd = lc.mlp_mask.size() ? Mat<Real>(dh.cwiseProduct(lc.mlp_mask)) : dh;
    MMap<Real>(grad + B.down, C, I).noalias() += dd.transpose() * lc.m;
    Mat<Real> dm(R, I);
    dm.noalias() = dd * weight(params, B.down, C, I);
    Mat<Real> dg(R, I), du(R, I);
    {
      const auto gv = lc.g.array();
      const Mat<Real> sg = (Real(1) / ((-gv).exp() + Real(1))).matrix();
      du.array() = dm.array() * gv * sg.array();
      dg.array() = dm.array() * lc.u.array() * sg.array() * (gv * (Real(1) - sg.array()) + Real(1));
    }
    MMap<Real>(grad + B.gate, I, C).noalias() += dg.transpose() * lc.a2;
    MMap<Real>(grad + B.up, I, C).noalias() += du.transpose() * lc.a2;
    Mat<Real> da2(R, C);
    da2.noalias() = dg * weight(params, B.gate, I, C);
    da2.noalias() += du * weight(params, B.up, I, C);
    Mat<Real> dx_mid = dh;
    rms_norm_backward(da2, lc.x_mid, lc.inv_rms2, params + B.norm2, dx_mid, grad + B.norm2);

    // Attention branch.
    const Mat<Real> dout =
        lc.proj_mask.size() ? Mat<Real>(dx_mid.cwiseProduct(lc.proj_mask)) : dx_mid;
    MMap<Real>(grad + B.proj, C, C).noalias() += dout.transpose() * lc.attn;
    Mat<Real> dattn(R, C);
    dattn.noalias() = dout * weight(params, B.proj, C, C);
    Mat<Real> dq = Mat<Real>::Zero(R, C), dk = Mat<Real>::Zero(R, C), dv = Mat<Real>::Zero(R, C);
    for (std::size_t s = 0; s < n_seq; ++s) {
      const auto b = static_cast<Eigen::Index>(rows.seq_begin[s]);
      const auto n = static_cast<Eigen::Index>(rows.seq_begin[s + 1] - rows.seq_begin[s]);
      for (int hd = 0; hd < H; ++hd) {
        const Mat<Real>& P = lc.probs[s * H + hd];
        const auto dO = dattn.block(b, hd * D, n, D);
        Mat<Real> dP(n, n);
        dP.noalias() = dO * lc.v.block(b, hd * D, n, D).transpose();
        if (!lc.att_masks.empty()) {
          const Mat<Real>& M = lc.att_masks[s * H + hd];
          dv.block(b, hd * D, n, D).noalias() += P.cwiseProduct(M).transpose() * dO;
          dP = dP.cwiseProduct(M);
        } else {
          dv.block(b, hd * D, n, D).noalias() += P.transpose() * dO;
        }
        // Softmax backward, row by row over the causal prefix.
        Mat<Real> dS(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const Real dot = dP.row(i).head(i + 1).dot(P.row(i).head(i + 1));
          dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * scale;
          dS.row(i).tail(n - i - 1).setZero();
        }
        dq.block(b, hd * D, n, D).noalias() += dS * lc.k.block(b, hd * D, n, D);
        dk.block(b, hd * D, n, D).noalias() += dS.transpose() * lc.q.block(b, hd * D, n, D);
      }
    }
    for (Eigen::Index r = 0; r < R; ++r) {
      apply_rope(dq.row(r).data(), H, D, rope, rows.position[r], true);
      apply_rope(dk.row(r).data(), H, D, rope, rows.position[r], true);
    }
    Mat<Real> dqkv(R, 3 * C);
    dqkv << dq, dk, dv;
    MMap<Real>(grad + B.qkv, 3 * C, C).noalias() += dqkv.transpose() * lc.a1;
    Mat<Real> da1(R, C);
    da1.noalias() = dqkv * weight(params, B.qkv, 3 * C, C);
    dh = dx_mid;
    rms_norm_backward(da1, lc.x_in, lc.inv_rms1, params + B.norm1, dh, grad + B.norm1);
  }

  if (cache.emb_mask.size()) dh = dh.cwiseProduct(cache.emb_mask);
  for (Eigen::Index r = 0; r < R; ++r) {
    const TokenizedSegment& s = batch[static_cast<std::size_t>(rows.seq[r])];
    const auto t = static_cast<std::size_t>(rows.transition[r]);
    const auto row = [&](std::size_t table, int id) {
      return Eigen::Map<RowVec<Real>>(grad + table + static_cast<std::size_t>(id) * C, C);
    };
    if (rows.is_action[r]) {
      row(L.emb_action, s.action[t]) += dh.row(r);
    } else {
      row(L.emb_obs, s.obs[t]) += dh.row(r);
      row(L.emb_prev_reward, s.prev_reward[t]) += dh.row(r);
    }
    row(L.emb_step, s.episode_step[t]) += dh.row(r);
  }
}

std::vector<int> gather_targets(std::span<const TokenizedSegment> batch, const RowIndex& rows,
                                const std::vector<std::size_t>& which,
                                std::vector<int> TokenizedSegment::*field) {
  std::vector<int> out;
  out.reserve(which.size());
  for (std::size_t r : which) {
    const TokenizedSegment& s = batch[static_cast<std::size_t>(rows.seq[r])];
    out.push_back((s.*field)[static_cast<std::size_t>(rows.transition[r])]);
  }
  return out;
}

}  // namespace

template <class Real>
LossBreakdown loss_and_gradient(const ModelConfig& c, const ParamLayout& L, const Real* params,
                                std::span<const TokenizedSegment> batch, Real* grad,
                                const std::uint64_t* dropout_seed) {
  if (batch.empty()) throw DataError("empty batch");
  for (const auto& s : batch) validate_tokens(s, c);
  const RowIndex rows = index_rows(batch);
  ForwardCache<Real> cache;
  DropoutPlan drop;
  if (dropout_seed != nullptr) {
    drop.active = true;
    drop.seed = *dropout_seed;
  }
  forward_pass(c, L, params, batch, rows, drop, cache);

  const double dyn_weight = c.lambda / 3.0;
  LossBreakdown out;
  Mat<Real> d_action, d_reward, d_next_obs, d_rtg;
  const bool want = grad != nullptr;
  out.imitation = cross_entropy(cache.logits_action,
                                gather_targets(batch, rows, rows.x_rows, &TokenizedSegment::target_action),
                                1.0, want ? &d_action : nullptr, out.action_targets);
  out.reward = cross_entropy(cache.logits_reward,
                             gather_targets(batch, rows, rows.y_rows, &TokenizedSegment::target_reward),
                             dyn_weight, want ? &d_reward : nullptr, out.reward_targets);
  out.next_obs = cross_entropy(
      cache.logits_next_obs,
      gather_targets(batch, rows, rows.y_rows, &TokenizedSegment::target_next_obs), dyn_weight,
      want ? &d_next_obs : nullptr, out.next_obs_targets);
  out.rtg = cross_entropy(cache.logits_rtg,
                          gather_targets(batch, rows, rows.y_rows, &TokenizedSegment::target_rtg),
                          dyn_weight, want ? &d_rtg : nullptr, out.rtg_targets);
  if (out.action_targets == 0) throw DataError("no action targets in batch");
  if (c.lambda != 0.0 &&
      (out.reward_targets == 0 || out.next_obs_targets == 0 || out.rtg_targets == 0)) {
    throw DataError("a dynamics head has no targets in batch");
  }
  out.total = out.imitation + c.lambda * (out.reward + out.next_obs + out.rtg) / 3.0;
  if (!std::isfinite(out.total)) throw NumericError("loss is not finite");
  if (want) {
    std::fill(grad, grad + L.size(), Real(0));
    backward_pass(c, L, params, batch, rows, cache, d_action, d_reward, d_next_obs, d_rtg, grad);
  }
  return out;
}

template LossBreakdown loss_and_gradient<float>(const ModelConfig&, const ParamLayout&,
                                                const float*, std::span<const TokenizedSegment>,
                                                float*, const std::uint64_t*);
template LossBreakdown loss_and_gradient<double>(const ModelConfig&, const ParamLayout&,
                                                 const double*, std::span<const TokenizedSegment>,
                                                 double*, const std::uint64_t*);

template <class Real>
HeadLogits forward_logits(const ModelConfig& c, const ParamLayout& L, const Real* params,
                          const TokenizedSegment& tokens) {
  validate_tokens(tokens, c);
  const std::span<const TokenizedSegment> batch(&tokens, 1);
  const RowIndex rows = index_rows(batch);
  ForwardCache<Real> cache;
  forward_pass(c, L, params, batch, rows, DropoutPlan{}, cache);
  auto to_rows = [](const Mat<Real>& m) {
    std::vector<std::vector<float>> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(r)].push_back(static_cast<float>(m(r, j)));
    }
    return out;
  };
  return {to_rows(cache.logits_action), to_rows(cache.logits_reward),
          to_rows(cache.logits_next_obs), to_rows(cache.logits_rtg)};
}

template HeadLogits forward_logits<float>(const ModelConfig&, const ParamLayout&, const float*,
                                          const TokenizedSegment&);
template HeadLogits forward_logits<double>(const ModelConfig&, const ParamLayout&, const double*,
                                           const TokenizedSegment&);

// ---------------------------------------------------------------------------
// SequenceModel

SequenceModel::SequenceModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), layout_(config_), params_(layout_.size(), 0.0f) {
  Rng rng(derive_seed(seed, "model_init"));
  for (const TensorInfo& t : layout_.tensors()) {
    float* p = params_.data() + t.offset;
    if (layout_.is_norm_gain(t)) {
      std::fill(p, p + t.size(), 1.0f);
    } else if (t.name.ends_with(".bias")) {
      std::fill(p, p + t.size(), 0.0f);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) {
        double z;
        do {
          z = rng.normal();
        } while (std::abs(z) > 2.0);
        p[i] = static_cast<float>(z * config_.init_std);
      }
    }
  }
}

SequenceModel::SequenceModel(ModelConfig config, FloatBuffer params)
    : config_(std::move(config)), layout_(config_), params_(std::move(params)) {
  if (params_.size() != layout_.size()) {
    throw ConfigError("parameter vector has " + std::to_string(params_.size()) +
                      " entries, config needs " + std::to_string(layout_.size()));
  }
}

HeadLogits SequenceModel::forward(const TokenizedSegment& tokens) const {
  return forward_logits(config_, layout_, params_.data(), tokens);
}

LossBreakdown SequenceModel::loss(std::span<const TokenizedSegment> batch) const {
  return loss_and_gradient<float>(config_, layout_, params_.data(), batch, nullptr, nullptr);
}

PrefixState SequenceModel::prefix(const ContextQuery& query) const {
  return std::move(prefixes(std::span<const ContextQuery>(&query, 1)).front());
}

std::vector<PrefixState> SequenceModel::prefixes(std::span<const ContextQuery> queries) const {
  if (queries.empty()) return {};
  std::vector<TokenizedSegment> batch;
  batch.reserve(queries.size());
  for (const ContextQuery& q : queries) batch.push_back(tokenize_query(q, config_));
  const RowIndex rows = index_rows(batch);
  ForwardCache<float> cache;
  forward_pass(config_, layout_, params_.data(), std::span<const TokenizedSegment>(batch), rows,
               DropoutPlan{}, cache);
  const auto C = static_cast<Eigen::Index>(config_.n_embed);
  std::vector<PrefixState> out(queries.size());
  for (std::size_t s = 0; s < queries.size(); ++s) {
    PrefixState& ps = out[s];
    const auto b = static_cast<Eigen::Index>(rows.seq_begin[s]);
    const auto n = static_cast<Eigen::Index>(rows.seq_begin[s + 1]) - b;
    ps.n_tokens_ = static_cast<std::size_t>(n);
    ps.episode_step_ = queries[s].episode_step;
    // Observation rows are every other token; this query's last one is its
    // final token.
    const Eigen::Index x_row = static_cast<Eigen::Index>(std::lower_bound(rows.x_rows.begin(), rows.x_rows.end(),
                                                                          rows.seq_begin[s + 1] - 1) -
                                                         rows.x_rows.begin());
    const auto last = cache.logits_action.row(x_row);
    const auto p = softmax(std::span<const float>(last.data(), static_cast<std::size_t>(last.size())));
    for (std::size_t i = 0; i < ps.action_probs_.size(); ++i) ps.action_probs_[i] = p[i];
    for (const auto& lc : cache.layers) {
      const Mat<float> k = lc.k.middleRows(b, n), v = lc.v.middleRows(b, n);
      ps.keys_.emplace_back(k.data(), k.data() + n * C);
      ps.values_.emplace_back(v.data(), v.data() + n * C);
    }
  }
  return out;
}

std::array<double, kNumActions> SequenceModel::predict_action(const ContextQuery& query) const {
  return prefix(query).action_probs();
}

std::vector<DynamicsPrediction> SequenceModel::predict_dynamics(const PrefixState& prefix,
                                                                std::span<const int> actions) const {
  const ModelConfig& c = config_;
  const ParamLayout& L = layout_;
  const float* params = params_.data();
  const int C = c.n_embed, I = c.intermediate_size, H = c.n_head, D = c.head_dim();
  const auto n = static_cast<Eigen::Index>(prefix.n_tokens_);
  const auto nb = static_cast<Eigen::Index>(actions.size());
  if (nb == 0) return {};
  if (n + 1 > c.max_tokens()) throw UsageError("prefix leaves no room for an action token");
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(D)));
  const int pos = static_cast<int>(n);
  const RopeTable<float> rope(pos + 1, D, c.rope_base);

  Mat<float> h(nb, C);
  const Eigen::Map<const RowVec<float>> step_emb(
      params + L.emb_step + static_cast<std::size_t>(prefix.episode_step_) * C, C);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const int a = actions[static_cast<std::size_t>(b)];
    if (a < 0 || a >= c.action_vocab) throw DataError("candidate action outside vocabulary");
    h.row(b) = Eigen::Map<const RowVec<float>>(params + L.emb_action + static_cast<std::size_t>(a) * C, C) +
               step_emb;
  }
  for (int l = 0; l < c.n_layer; ++l) {
    const auto& B = L.blocks[static_cast<std::size_t>(l)];
    const CMap<float> K(prefix.keys_[static_cast<std::size_t>(l)].data(), n, C);
    const CMap<float> V(prefix.values_[static_cast<std::size_t>(l)].data(), n, C);
    Mat<float> a1;
    Vec<float> ir;
    rms_norm(h, params + B.norm1, c.norm_eps, a1, ir);
    Mat<float> qkv(nb, 3 * C);
    qkv.noalias() = a1 * weight(params, B.qkv, 3 * C, C).transpose();
    Mat<float> q = qkv.leftCols(C), k = qkv.middleCols(C, C), v = qkv.rightCols(C);
    for (Eigen::Index b = 0; b < nb; ++b) {
      apply_rope(q.row(b).data(), H, D, rope, pos, false);
      apply_rope(k.row(b).data(), H, D, rope, pos, false);
    }
    Mat<float> attn(nb, C);
    for (int hd = 0; hd < H; ++hd) {
      // Scores against the shared prefix plus each branch's own key.
      Mat<float> S(nb, n + 1);
      S.leftCols(n).noalias() = (q.middleCols(hd * D, D) * K.middleCols(hd * D, D).transpose()) * scale;
      for (Eigen::Index b = 0; b < nb; ++b) {
        S(b, n) = q.row(b).segment(hd * D, D).dot(k.row(b).segment(hd * D, D)) * scale;
        const float mx = S.row(b).maxCoeff();
        S.row(b) = (S.row(b).array() - mx).exp().matrix();
        S.row(b) /= S.row(b).sum();
      }
      attn.middleCols(hd * D, D).noalias() = S.leftCols(n) * V.middleCols(hd * D, D);
      for (Eigen::Index b = 0; b < nb; ++b) {
        attn.row(b).segment(hd * D, D) += S(b, n) * v.row(b).segment(hd * D, D);
      }
    }
    Mat<float> x_mid = h;
    x_mid.noalias() += attn * weight(params, B.proj, C, C).transpose();
    Mat<float> a2;
    rms_norm(x_mid, params + B.norm2, c.norm_eps, a2, ir);
    Mat<float> g(nb, I), u(nb, I);
    g.noalias() = a2 * weight(params, B.gate, I, C).transpose();
    u.noalias() = a2 * weight(params, B.up, I, C).transpose();
    Mat<float> m(nb, I);
    for (Eigen::Index i = 0; i < nb * I; ++i) m.data()[i] = g.data()[i] * sigmoid(g.data()[i]) * u.data()[i];
    h = x_mid;
    h.noalias() += m * weight(params, B.down, C, I).transpose();
  }
  Mat<float> f;
  Vec<float> ir;
  rms_norm(h, params + L.norm_final, c.norm_eps, f, ir);
  auto head = [&](const ParamLayout::Head& hd) {
    Mat<float> out(nb, hd.size);
    out.noalias() = f * weight(params, hd.weight, hd.size, C).transpose();
    out.rowwise() += Eigen::Map<const RowVec<float>>(params + hd.bias, hd.size);
    return out;
  };
  const Mat<float> lr = head(L.head_reward), lo = head(L.head_next_obs), lt = head(L.head_rtg);
  std::vector<DynamicsPrediction> out(static_cast<std::size_t>(nb));
  auto row_softmax = [](const Mat<float>& m, Eigen::Index r) {
    return softmax(std::span<const float>(m.row(r).data(), static_cast<std::size_t>(m.cols())));
  };
  for (Eigen::Index b = 0; b < nb; ++b) {
    auto& d = out[static_cast<std::size_t>(b)];
    d.reward = row_softmax(lr, b);
    d.next_obs = row_softmax(lo, b);
    d.rtg = row_softmax(lt, b);
  }
  return out;
}

std::vector<DynamicsPrediction> SequenceModel::predict_dynamics(const ContextQuery& query,
                                                                std::span<const int> actions) const {
  return predict_dynamics(prefix(query), actions);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointMagic = "dicp-checkpoint";
constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order and assume little-endian");

void write_floats(std::ofstream& out, const FloatBuffer& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
}

FloatBuffer read_floats(std::ifstream& in, std::size_t n, const std::string& where) {
  FloatBuffer v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float)) {
    throw DataError("truncated checkpoint " + where);
  }
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const ParamLayout layout(ck.config);
  if (ck.params.size() != layout.size()) throw UsageError("checkpoint parameters do not fit config");
  auto tensors = nlohmann::json::array();
  for (const auto& t : layout.tensors()) {
    tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"shape", {t.rows, t.cols}}});
  }
  nlohmann::json header{{"format", kCheckpointMagic},
                        {"version", kCheckpointVersion},
                        {"config", ck.config},
                        {"num_params", ck.params.size()},
                        {"tensors", tensors},
                        {"metadata", nlohmann::json::parse(ck.metadata)}};
  if (ck.optimizer) {
    if (ck.optimizer->m.size() != ck.params.size() || ck.optimizer->v.size() != ck.params.size()) {
      throw UsageError("optimizer state does not match parameter count");
    }
    header["optimizer"] = {{"step", ck.optimizer->step}};
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << header.dump() << '\n';
    write_floats(out, ck.params);
    if (ck.optimizer) {
      write_floats(out, ck.optimizer->m);
      write_floats(out, ck.optimizer->v);
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty checkpoint " + path.string());
  Checkpoint ck;
  std::size_t n = 0;
  bool has_opt = false;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != kCheckpointMagic || header.at("version") != kCheckpointVersion) {
      throw DataError("unsupported checkpoint format in " + path.string());
    }
    ck.config = header.at("config").get<ModelConfig>();
    n = header.at("num_params").get<std::size_t>();
    ck.metadata = header.value("metadata", nlohmann::json::object()).dump();
    if (header.contains("optimizer")) {
      has_opt = true;
      ck.optimizer = OptimizerState{};
      ck.optimizer->step = header.at("optimizer").at("step").get<std::int64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  if (ParamLayout(ck.config).size() != n) {
    throw DataError("checkpoint " + path.string() + " parameter count disagrees with its config");
  }
  ck.params = read_floats(in, n, path.string());
  if (has_opt) {
    ck.optimizer->m = read_floats(in, n, path.string());
    ck.optimizer->v = read_floats(in, n, path.string());
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult check_gradients(const ModelConfig& config, std::span<const TokenizedSegment> batch,
                                std::uint64_t seed, bool with_dropout, double fraction,
                                std::size_t min_coordinates, double step, double tolerance) {
  const ParamLayout layout(config);
  const SequenceModel init(config, seed);
  std::vector<double> params(init.params().begin(), init.params().end());
  // Perturb away from the symmetric initialization so every tensor carries
  // signal (norm gains at exactly one, biases at exactly zero).
  Rng rng(derive_seed(seed, "gradcheck"));
  for (double& p : params) p += 0.05 * rng.normal();
  const std::uint64_t drop_seed = derive_seed(seed, "gradcheck_dropout");
  const std::uint64_t* drop = with_dropout ? &drop_seed : nullptr;

  std::vector<double> grad(layout.size());
  loss_and_gradient<double>(config, layout, params.data(), batch, grad.data(), drop);

  const std::size_t want = std::max(
      min_coordinates, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(params.size()))));
  std::vector<std::size_t> order(params.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(std::min(want, order.size()));

  GradCheckResult result;
  for (std::size_t i : order) {
    const double saved = params[i];
    params[i] = saved + step;
    const double up = loss_and_gradient<double>(config, layout, params.data(), batch, nullptr, drop).total;
    params[i] = saved - step;
    const double down = loss_and_gradient<double>(config, layout, params.data(), batch, nullptr, drop).total;
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = grad[i];
    // Relative error with a floor so coordinates whose true gradient is ~0
    // are judged on absolute error instead of noise ratios.
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    const double rel = std::abs(numeric - analytic) / denom;
    ++result.coordinates;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_tensor = layout.tensor_at(i).name;
    }
  }
  if (result.max_relative_error > tolerance) {
    throw GradientCheckError(result.worst_tensor, result.max_relative_error);
  }
  return result;
}

}  // namespace dicp
