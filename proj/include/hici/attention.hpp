#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hici/autograd.hpp"
#include "hici/config.hpp"
#include "hici/flops.hpp"
#include "hici/tensor.hpp"

namespace hici {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LocalParams {
  Tensor slots;                  // M×d
  Tensor w_q, w_k, w_v;          // d×d_b
  Tensor w_o;                    // d_b×d
};

struct GlobalParams {
  Tensor w_c;                    // d×d_s
  Tensor ln_c_gain, ln_c_bias;   // d_s
  Tensor w_b;                    // d_s×d_b
  Tensor ln_b_gain, ln_b_bias;   // d_b
  Tensor queries;                // K×d_b
  Tensor w_q, w_k, w_v, w_o;     // d_b×d_b
  Tensor w_exp;                  // d_b×d
  Tensor beta;                   // 1, gate alpha = softplus(beta)
};

struct BroadcastParams {
  Tensor w_q, w_k, w_v;          // d×d
};

using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

struct HiCIParams {
  static Tensor absent() { return Tensor(Shape{0}); }

  LocalParams local;
  GlobalParams global;
  BroadcastParams broadcast;

  // Slots and global queries ~ N(0, 0.02), projections Xavier-uniform,
  // LayerNorm affine at identity, beta = 0. A stage with no slots (M = 0) or
  // no global queries (K = 0) is never evaluated and holds empty tensors.
  static HiCIParams init(const HiCIConfig& c, Rng& rng) {
    HiCIParams p;
    if (c.M > 0) {
      p.local.slots = randn({c.M, c.d}, rng, 0.02);
      p.local.w_q = xavier_uniform(c.d, c.d_b, rng);
      p.local.w_k = xavier_uniform(c.d, c.d_b, rng);
      p.local.w_v = xavier_uniform(c.d, c.d_b, rng);
      p.local.w_o = xavier_uniform(c.d_b, c.d, rng);
    } else {
      p.local = {absent(), absent(), absent(), absent(), absent()};
    }

    if (c.K > 0) {
      p.global.w_c = xavier_uniform(c.d, c.d_s, rng);
      p.global.ln_c_gain = Tensor({c.d_s}, 1.0);
      p.global.ln_c_bias = Tensor({c.d_s}, 0.0);
      p.global.w_b = xavier_uniform(c.d_s, c.d_b, rng);
      p.global.ln_b_gain = Tensor({c.d_b}, 1.0);
      p.global.ln_b_bias = Tensor({c.d_b}, 0.0);
      p.global.queries = randn({c.K, c.d_b}, rng, 0.02);
      p.global.w_q = xavier_uniform(c.d_b, c.d_b, rng);
      p.global.w_k = xavier_uniform(c.d_b, c.d_b, rng);
      p.global.w_v = xavier_uniform(c.d_b, c.d_b, rng);
      p.global.w_o = xavier_uniform(c.d_b, c.d_b, rng);
      p.global.w_exp = xavier_uniform(c.d_b, c.d, rng);
      p.global.beta = Tensor({1}, 0.0);
    } else {
      p.global = {absent(), absent(), absent(), absent(), absent(), absent(), absent(),
                  absent(), absent(), absent(), absent(), absent(), absent()};
    }

    p.broadcast.w_q = xavier_uniform(c.d, c.d, rng);
    p.broadcast.w_k = xavier_uniform(c.d, c.d, rng);
    p.broadcast.w_v = xavier_uniform(c.d, c.d, rng);
    return p;
  }

  NamedTensors named() {
    return {{"local.slots", &local.slots},         {"local.w_q", &local.w_q},
            {"local.w_k", &local.w_k},             {"local.w_v", &local.w_v},
            {"local.w_o", &local.w_o},             {"global.w_c", &global.w_c},
            {"global.ln_c_gain", &global.ln_c_gain}, {"global.ln_c_bias", &global.ln_c_bias},
            {"global.w_b", &global.w_b},           {"global.ln_b_gain", &global.ln_b_gain},
            {"global.ln_b_bias", &global.ln_b_bias}, {"global.queries", &global.queries},
            {"global.w_q", &global.w_q},           {"global.w_k", &global.w_k},
            {"global.w_v", &global.w_v},           {"global.w_o", &global.w_o},
            {"global.w_exp", &global.w_exp},       {"global.beta", &global.beta},
            {"broadcast.w_q", &broadcast.w_q},     {"broadcast.w_k", &broadcast.w_k},
            {"broadcast.w_v", &broadcast.w_v}};
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t->size();
    return n;
  }
};

struct AttnMassRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  double frac_global = 0.0;
  double frac_local = 0.0;
  double frac_segment = 0.0;
};

enum class AttentionSite { local, global, broadcast };

// Receives the probability matrix of every head at every attention site.
using AttentionObserver =
    std::function<void(AttentionSite site, std::size_t segment, std::size_t head, const Tensor& probs)>;

// Intermediate representations of one forward pass.
struct HiCITrace {
  std::vector<Tensor> locals;   // L_i per segment, M×d
  std::vector<Tensor> globals;  // G seen by each segment, K×d
};

struct ForwardOptions {
  bool uniform_probe = false;  // broadcast logits forced to zero
  AttentionObserver observer;
  HiCITrace* trace = nullptr;
};

// ---------------------------------------------------------------------------
// Graph-level building blocks
// ---------------------------------------------------------------------------

namespace layer {

struct LocalVars {
  Var slots, w_q, w_k, w_v, w_o;
};
struct GlobalVars {
  Var w_c, ln_c_gain, ln_c_bias, w_b, ln_b_gain, ln_b_bias, queries, w_q, w_k, w_v, w_o, w_exp, beta;
};
struct BroadcastVars {
  Var w_q, w_k, w_v;
};
struct HiCIVars {
  LocalVars local;
  GlobalVars global;
  BroadcastVars broadcast;
};

inline LocalVars bind(Graph& g, const LocalParams& p) {
  return {g.param(p.slots), g.param(p.w_q), g.param(p.w_k), g.param(p.w_v), g.param(p.w_o)};
}

inline GlobalVars bind(Graph& g, const GlobalParams& p) {
  return {g.param(p.w_c),     g.param(p.ln_c_gain), g.param(p.ln_c_bias), g.param(p.w_b), g.param(p.ln_b_gain),
          g.param(p.ln_b_bias), g.param(p.queries), g.param(p.w_q),       g.param(p.w_k), g.param(p.w_v),
          g.param(p.w_o),     g.param(p.w_exp),     g.param(p.beta)};
}

inline BroadcastVars bind(Graph& g, const BroadcastParams& p) {
  return {g.param(p.w_q), g.param(p.w_k), g.param(p.w_v)};
}

inline HiCIVars bind(Graph& g, const HiCIParams& p) { return {bind(g, p.local), bind(g, p.global), bind(g, p.broadcast)}; }

using Mask = std::shared_ptr<const std::vector<bool>>;

struct HeadOptions {
  Mask visible;
  bool uniform_logits = false;
  AttentionSite site = AttentionSite::local;
  std::size_t segment = 0;
  const AttentionObserver* observer = nullptr;
  FlopBucket score_bucket = FlopBucket::other;
};

// Multi-head scaled dot-product attention. Heads partition the width of q/k/v
// contiguously; each head uses scale 1/sqrt(width/H). Returns concatenated heads.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const HeadOptions& opt = {}) {
  const std::size_t width = q.cols();
  if (k.cols() != width || v.cols() != width || k.rows() != v.rows())
    throw dimension_error("multi_head_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                          ", v " + shape_str(v.shape()));
  if (heads == 0 || width % heads)
    throw dimension_error("multi_head_attention: width " + std::to_string(width) + " not divisible by " +
                          std::to_string(heads) + " heads");
  const std::size_t hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  FlopScope scope(opt.score_bucket);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ag::slice_cols(q, h * hd, (h + 1) * hd);
    Var kh = heads == 1 ? k : ag::slice_cols(k, h * hd, (h + 1) * hd);
    Var vh = heads == 1 ? v : ag::slice_cols(v, h * hd, (h + 1) * hd);
    Var logits = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
    if (opt.uniform_logits) logits = q.graph->constant(Tensor(logits.shape()));
    Var probs = ag::softmax_rows(logits, opt.visible);
    if (opt.observer && *opt.observer) (*opt.observer)(opt.site, opt.segment, h, probs.value());
    outs.push_back(ag::matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : ag::concat_cols(outs);
}

// Visibility for the broadcast: `context` leading positions always visible;
// segment position s visible to query t iff s <= t when causal.
inline Mask broadcast_mask(std::size_t context, std::size_t seg_len, bool causal) {
  if (!causal) return nullptr;
  auto m = std::make_shared<std::vector<bool>>(seg_len * (context + seg_len), false);
  const std::size_t n = context + seg_len;
  for (std::size_t t = 0; t < seg_len; ++t)
    for (std::size_t j = 0; j < n; ++j) (*m)[t * n + j] = j < context || j - context <= t;
  return m;
}

inline void check_width(Var x, std::size_t d, const char* what) {
  if (x.value().rank() != 2 || x.cols() != d)
    throw dimension_error(std::string(what) + ": expected width " + std::to_string(d) + ", got " +
                          shape_str(x.shape()));
}

// Slot queries L_slot·W_Q (M×d_b); shared by every segment.
inline Var slot_queries(const LocalVars& p) {
  FlopScope scope(FlopBucket::local_global);
  return ag::matmul(p.slots, p.w_q);
}

// Bottleneck cross-attention of M slots over one segment; returns M×d.
inline Var local_construct(Var x, Var q_slots, const LocalVars& p, const HiCIConfig& c, std::size_t segment = 0,
                           const AttentionObserver* observer = nullptr) {
  check_width(x, c.d, "local_construct");
  FlopScope scope(FlopBucket::local_global);
  Var k = ag::matmul(x, p.w_k);
  Var v = ag::matmul(x, p.w_v);
  HeadOptions opt;
  opt.site = AttentionSite::local;
  opt.segment = segment;
  opt.observer = observer;
  opt.score_bucket = FlopBucket::local_global;
  Var heads = multi_head_attention(q_slots, k, v, c.H, opt);
  return ag::matmul(heads, p.w_o);
}

// Rows mean, max, min, population std and l2-normalized mean over all rows
// of the stacked local representations: 5×d.
inline Var statistics_matrix(std::span<const Var> locals) {
  Var stacked = locals.size() == 1 ? locals.front() : ag::concat_rows(locals);
  if (stacked.rows() == 0) throw dimension_error("integrate_global: local representations have no rows");
  auto st = ag::reduce_stats(stacked);
  Var direction = ag::l2_normalize(st.mean);
  const std::vector<Var> views = {st.mean, st.max, st.min, st.std, direction};
  return ag::concat_rows(views);
}

// Pools local representations into the K×d global context.
inline Var integrate_global(std::span<const Var> locals, const GlobalVars& p, const HiCIConfig& c,
                            const AttentionObserver* observer = nullptr) {
  if (locals.empty()) throw dimension_error("integrate_global: need at least one local representation");
  for (const Var& l : locals) check_width(l, c.d, "integrate_global");
  FlopScope scope(FlopBucket::local_global);
  Var z = statistics_matrix(locals);

  Var zc = ag::layer_norm(ag::matmul(z, p.w_c), p.ln_c_gain, p.ln_c_bias, c.ln_eps);
  Var zb = ag::layer_norm(ag::matmul(zc, p.w_b), p.ln_b_gain, p.ln_b_bias, c.ln_eps);

  Var q = ag::matmul(p.queries, p.w_q);
  Var k = ag::matmul(zb, p.w_k);
  Var v = ag::matmul(zb, p.w_v);
  HeadOptions opt;
  opt.site = AttentionSite::global;
  opt.observer = observer;
  opt.score_bucket = FlopBucket::local_global;
  Var selected = ag::matmul(multi_head_attention(q, k, v, c.H, opt), p.w_o);
  Var expanded = ag::matmul(selected, p.w_exp);
  return ag::scale_by(expanded, ag::softplus(p.beta));
}

// Segment attention over [G; L; X] with queries from X only. `global` and
// `local` may be absent (K = 0 or M = 0).
inline Var broadcast(Var x, std::optional<Var> global, std::optional<Var> local, const BroadcastVars& p,
                     const HiCIConfig& c, std::size_t segment = 0, const ForwardOptions& fopt = {}) {
  check_width(x, c.d, "broadcast");
  std::vector<Var> aug;
  if (global) {
    check_width(*global, c.d, "broadcast (global context)");
    aug.push_back(*global);
  }
  if (local) {
    check_width(*local, c.d, "broadcast (local context)");
    aug.push_back(*local);
  }
  const std::size_t context = (global ? global->rows() : 0) + (local ? local->rows() : 0);
  aug.push_back(x);
  Var q, k, v;
  {
    FlopScope scope(FlopBucket::broadcast_projection);
    Var augmented = aug.size() == 1 ? x : ag::concat_rows(aug);
    q = ag::matmul(x, p.w_q);
    k = ag::matmul(augmented, p.w_k);
    v = ag::matmul(augmented, p.w_v);
  }
  HeadOptions opt;
  opt.visible = broadcast_mask(context, x.rows(), c.causal_segment_mask);
  opt.uniform_logits = fopt.uniform_probe;
  opt.site = AttentionSite::broadcast;
  opt.segment = segment;
  opt.observer = fopt.observer ? &fopt.observer : nullptr;
  opt.score_bucket = FlopBucket::broadcast_attention;
  return multi_head_attention(q, k, v, c.H, opt);
}

// Full pipeline on one sequence: partition, local construction per segment,
// global integration, broadcast per segment, concatenation.
//
// With global_scope = preceding_segments, segment i sees G built from segments
// 0..i-1 and the local representation of segment i-1; segment 0 sees zeros.
inline Var hici_forward(Var x, const HiCIVars& p, const HiCIConfig& c, const ForwardOptions& fopt = {}) {
  check_width(x, c.d, "hici_forward");
  const std::size_t T = x.rows();
  if (T % c.S)
    throw dimension_error("hici_forward: sequence length T=" + std::to_string(T) + " not divisible by S=" +
                          std::to_string(c.S));
  const std::size_t N = T / c.S;
  Graph& g = *x.graph;
  const AttentionObserver* obs = fopt.observer ? &fopt.observer : nullptr;

  std::vector<Var> segments;
  segments.reserve(N);
  for (std::size_t i = 0; i < N; ++i) segments.push_back(N == 1 ? x : ag::slice_rows(x, i * c.S, (i + 1) * c.S));

  std::vector<Var> locals;
  if (c.M > 0) {
    Var q_slots = slot_queries(p.local);
    for (std::size_t i = 0; i < N; ++i) locals.push_back(local_construct(segments[i], q_slots, p.local, c, i, obs));
  }

  const bool preceding = c.global_scope == GlobalScope::preceding_segments;
  std::optional<Var> shared_global;
  if (c.K > 0 && !preceding) shared_global = integrate_global(locals, p.global, c, obs);

  std::vector<Var> outs;
  outs.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::optional<Var> gi, li;
    if (c.K > 0) {
      if (!preceding)
        gi = shared_global;
      else if (i == 0)
        gi = g.constant(Tensor::zeros(c.K, c.d));
      else
        gi = integrate_global(std::span<const Var>(locals).first(i), p.global, c, obs);
    }
    if (c.M > 0) {
      if (!preceding)
        li = locals[i];
      else
        li = i == 0 ? g.constant(Tensor::zeros(c.M, c.d)) : locals[i - 1];
    }
    if (fopt.trace) {
      if (c.M > 0) fopt.trace->locals.push_back(locals[i].value());
      if (gi) fopt.trace->globals.push_back(gi->value());
    }
    outs.push_back(broadcast(segments[i], gi, li, p.broadcast, c, i, fopt));
  }
  return N == 1 ? outs.front() : ag::concat_rows(outs);
}

}  // namespace layer

// ---------------------------------------------------------------------------
// Tensor-level API
// ---------------------------------------------------------------------------

inline std::vector<Tensor> partition(const Tensor& x, std::size_t S) {
  require_matrix(x, "partition");
  if (S == 0 || x.rows() % S)
    throw dimension_error("partition: T=" + std::to_string(x.rows()) + " not divisible by S=" + std::to_string(S));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < x.rows() / S; ++i) out.push_back(slice_rows(x, i * S, (i + 1) * S));
  return out;
}

inline Tensor local_construct(const Tensor& segment, const LocalParams& p, const HiCIConfig& c,
                              const AttentionObserver& observer = {}) {
  Graph g;
  auto lv = layer::bind(g, p);
  return layer::local_construct(g.constant(segment), layer::slot_queries(lv), lv, c, 0,
                                observer ? &observer : nullptr)
      .value();
}

inline Tensor statistics_matrix(std::span<const Tensor> locals) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& l : locals) vars.push_back(g.constant(l));
  return layer::statistics_matrix(vars).value();
}

inline Tensor integrate_global(std::span<const Tensor> locals, const GlobalParams& p, const HiCIConfig& c) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& l : locals) vars.push_back(g.constant(l));
  return layer::integrate_global(vars, layer::bind(g, p), c).value();
}

// `global` / `local` with zero rows are treated as absent.
inline Tensor broadcast(const Tensor& segment, const Tensor& local, const Tensor& global, const BroadcastParams& p,
                        const HiCIConfig& c, const ForwardOptions& fopt = {}) {
  Graph g;
  std::optional<Var> gv, lv;
  if (global.size()) gv = g.constant(global);
  if (local.size()) lv = g.constant(local);
  return layer::broadcast(g.constant(segment), gv, lv, layer::bind(g, p), c, 0, fopt).value();
}

inline Tensor hici_forward(const Tensor& x, const HiCIParams& p, const HiCIConfig& c, const ForwardOptions& fopt = {}) {
  c.validate();
  Graph g;
  return layer::hici_forward(g.constant(x), layer::bind(g, p), c, fopt).value();
}

// Accumulates broadcast attention mass per head into global / local / segment
// fractions, averaged over every query of every segment.
class AttnMassAccumulator {
 public:
  AttnMassAccumulator(std::size_t heads, std::size_t K, std::size_t M) : K_(K), M_(M), sums_(heads) {}

  AttentionObserver observer() {
    return [this](AttentionSite site, std::size_t, std::size_t head, const Tensor& probs) {
      if (site == AttentionSite::broadcast) add(head, probs);
    };
  }

  void add(std::size_t head, const Tensor& probs) {
    auto& s = sums_.at(head);
    for (std::size_t t = 0; t < probs.rows(); ++t) {
      double g = 0.0, l = 0.0, x = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) {
        const double p = probs(t, j);
        if (j < K_) g += p;
        else if (j < K_ + M_) l += p;
        else x += p;
      }
      s.global += g, s.local += l, s.segment += x;
    }
  }

  std::vector<AttnMassRecord> records(std::size_t layer) const {
    std::vector<AttnMassRecord> out;
    for (std::size_t h = 0; h < sums_.size(); ++h) {
      const auto& s = sums_[h];
      // every query row carries unit mass, so dividing by the summed mass is the per-query mean
      const double total = s.global + s.local + s.segment;
      if (total == 0.0) {
        out.push_back({layer, h, 0.0, 0.0, 0.0});
        continue;
      }
      out.push_back({layer, h, s.global / total, s.local / total, s.segment / total});
    }
    return out;
  }

 private:
  struct Sums {
    double global = 0.0, local = 0.0, segment = 0.0;
  };
  std::size_t K_, M_;
  std::vector<Sums> sums_;
};

inline std::vector<AttnMassRecord> collect_attn_mass(const Tensor& x, const HiCIParams& p, const HiCIConfig& c,
                                                     bool uniform_probe = false) {
  AttnMassAccumulator acc(c.H, c.K, c.M);
  ForwardOptions fopt;
  fopt.uniform_probe = uniform_probe;
  fopt.observer = acc.observer();
  hici_forward(x, p, c, fopt);
  return acc.records(0);
}

}  // namespace hici
