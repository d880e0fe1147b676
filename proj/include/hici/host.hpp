#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hici/attention.hpp"
#include "hici/autograd.hpp"
#include "hici/config.hpp"
#include "hici/serialize.hpp"

// Toy character-level transformer LM with a HiCI attention block.
namespace hici::host {

struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kByteVocab = 256;
inline constexpr int kBos = 256;
inline constexpr int kPad = 257;
inline constexpr std::size_t kDefaultVocab = 258;

enum class AttentionMode { hici, full };

struct HostConfig {
  std::size_t vocab_size = kDefaultVocab;
  std::size_t n_layers = 1;
  std::size_t ffn_width = 64;
  HiCIConfig cfg;  // d comes from here
  std::size_t max_T = 16;
  std::uint64_t seed = 1234;
  std::size_t batch_size = 3;
  // two parameter groups; the HiCI group runs at ten times the backbone rate
  double lr_backbone = 1e-3;
  double lr_hici = 1e-2;
  std::size_t warmup_steps = 20;
  double hici_grad_clip = 0.3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double adam_eps = 1e-8;

  std::size_t d() const { return cfg.d; }

  void validate() const {
    cfg.validate();
    if (vocab_size < 2) throw config_error("vocab_size must be at least 2");
    if (max_T == 0 || max_T % cfg.S)
      throw config_error("max_T=" + std::to_string(max_T) + " not divisible by S=" + std::to_string(cfg.S));
    if (n_layers == 0) throw config_error("n_layers must be positive");
    if (ffn_width == 0) throw config_error("ffn_width must be positive");
    if (batch_size == 0) throw config_error("batch_size must be positive");
  }

  friend bool operator==(const HostConfig&, const HostConfig&) = default;
};

inline nlohmann::json to_json(const HostConfig& h) {
  return {{"vocab_size", h.vocab_size},   {"n_layers", h.n_layers},       {"ffn_width", h.ffn_width},
          {"hici", to_text(h.cfg)},       {"max_T", h.max_T},             {"seed", h.seed},
          {"batch_size", h.batch_size},   {"lr_backbone", h.lr_backbone}, {"lr_hici", h.lr_hici},
          {"warmup_steps", h.warmup_steps}, {"hici_grad_clip", h.hici_grad_clip}, {"beta1", h.beta1},
          {"beta2", h.beta2},             {"weight_decay", h.weight_decay}, {"adam_eps", h.adam_eps}};
}

inline HostConfig host_config_from_json(const nlohmann::json& j) {
  HostConfig h;
  h.vocab_size = j.at("vocab_size");
  h.n_layers = j.at("n_layers");
  h.ffn_width = j.at("ffn_width");
  h.cfg = parse_config_text(j.at("hici").get<std::string>());
  h.max_T = j.at("max_T");
  h.seed = j.at("seed");
  h.batch_size = j.at("batch_size");
  h.lr_backbone = j.at("lr_backbone");
  h.lr_hici = j.at("lr_hici");
  h.warmup_steps = j.at("warmup_steps");
  h.hici_grad_clip = j.at("hici_grad_clip");
  h.beta1 = j.at("beta1");
  h.beta2 = j.at("beta2");
  h.weight_decay = j.at("weight_decay");
  h.adam_eps = j.at("adam_eps");
  return h;
}

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  HiCIParams hici;
  Tensor out_proj;  // d×d, the block-level projection after the HiCI output
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

enum class ParamGroup { backbone, hici };

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
};

struct HostParams {
  Tensor tok_embed;  // V×d
  Tensor pos_embed;  // max_T×d, segment tokens only
  std::vector<BlockParams> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor head;       // d×V

  static HostParams init(const HostConfig& h) {
    Rng rng(h.seed);
    const std::size_t d = h.d();
    HostParams p;
    p.tok_embed = randn({h.vocab_size, d}, rng, 0.02);
    p.pos_embed = randn({h.max_T, d}, rng, 0.02);
    for (std::size_t l = 0; l < h.n_layers; ++l) {
      BlockParams b;
      b.ln1_gain = Tensor({d}, 1.0);
      b.ln1_bias = Tensor({d}, 0.0);
      b.hici = HiCIParams::init(h.cfg, rng);
      b.out_proj = xavier_uniform(d, d, rng);
      b.ln2_gain = Tensor({d}, 1.0);
      b.ln2_bias = Tensor({d}, 0.0);
      b.ffn_w1 = xavier_uniform(d, h.ffn_width, rng);
      b.ffn_b1 = Tensor({h.ffn_width}, 0.0);
      b.ffn_w2 = xavier_uniform(h.ffn_width, d, rng);
      b.ffn_b2 = Tensor({d}, 0.0);
      p.blocks.push_back(std::move(b));
    }
    p.lnf_gain = Tensor({d}, 1.0);
    p.lnf_bias = Tensor({d}, 0.0);
    p.head = randn({d, h.vocab_size}, rng, 0.02);
    return p;
  }

  // Local and global stages form the HiCI group; the broadcast Q/K/V play the
  // role of the host attention projections and train with the backbone.
  std::vector<NamedParam> named() {
    std::vector<NamedParam> out = {{"tok_embed", &tok_embed, ParamGroup::backbone},
                                   {"pos_embed", &pos_embed, ParamGroup::backbone}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      BlockParams& b = blocks[l];
      const std::string pre = "block" + std::to_string(l) + ".";
      out.push_back({pre + "ln1_gain", &b.ln1_gain, ParamGroup::backbone});
      out.push_back({pre + "ln1_bias", &b.ln1_bias, ParamGroup::backbone});
      for (auto& [name, t] : b.hici.named())
        out.push_back({pre + "hici." + name, t,
                       name.starts_with("broadcast.") ? ParamGroup::backbone : ParamGroup::hici});
      out.push_back({pre + "out_proj", &b.out_proj, ParamGroup::backbone});
      out.push_back({pre + "ln2_gain", &b.ln2_gain, ParamGroup::backbone});
      out.push_back({pre + "ln2_bias", &b.ln2_bias, ParamGroup::backbone});
      out.push_back({pre + "ffn_w1", &b.ffn_w1, ParamGroup::backbone});
      out.push_back({pre + "ffn_b1", &b.ffn_b1, ParamGroup::backbone});
      out.push_back({pre + "ffn_w2", &b.ffn_w2, ParamGroup::backbone});
      out.push_back({pre + "ffn_b2", &b.ffn_b2, ParamGroup::backbone});
    }
    out.push_back({"lnf_gain", &lnf_gain, ParamGroup::backbone});
    out.push_back({"lnf_bias", &lnf_bias, ParamGroup::backbone});
    out.push_back({"head", &head, ParamGroup::backbone});
    return out;
  }
};

struct BlockVars {
  Var ln1_gain, ln1_bias;
  layer::HiCIVars hici;
  Var out_proj, ln2_gain, ln2_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

inline BlockVars bind(Graph& g, const BlockParams& b) {
  return {g.param(b.ln1_gain), g.param(b.ln1_bias), layer::bind(g, b.hici), g.param(b.out_proj),
          g.param(b.ln2_gain), g.param(b.ln2_bias), g.param(b.ffn_w1),       g.param(b.ffn_b1),
          g.param(b.ffn_w2),   g.param(b.ffn_b2)};
}

struct RunOptions {
  AttentionMode mode = AttentionMode::hici;
  bool uniform_probe = false;
  // one observer per layer, may be empty
  std::vector<AttentionObserver> observers;
};

// Standard causal multi-head attention over the whole window with the block's
// broadcast projections: the full-attention evaluation path.
inline Var full_attention(Var x, const layer::BroadcastVars& p, const HiCIConfig& c, const ForwardOptions& fopt) {
  HiCIConfig whole = c;
  whole.S = x.rows();
  whole.causal_segment_mask = true;
  return layer::broadcast(x, std::nullopt, std::nullopt, p, whole, 0, fopt);
}

// Pre-norm residual block: x + OutProj(HiCI(LN(x))), then + FFN(LN(x)).
inline Var block_forward(Var x, const BlockVars& b, const HiCIConfig& c, AttentionMode mode = AttentionMode::hici,
                         const ForwardOptions& fopt = {}) {
  const double eps = c.ln_eps;
  Var h = ag::layer_norm(x, b.ln1_gain, b.ln1_bias, eps);
  Var attn = mode == AttentionMode::hici ? layer::hici_forward(h, b.hici, c, fopt)
                                         : full_attention(h, b.hici.broadcast, c, fopt);
  x = ag::add(x, ag::matmul(attn, b.out_proj));
  Var f = ag::layer_norm(x, b.ln2_gain, b.ln2_bias, eps);
  f = ag::gelu(ag::add_row(ag::matmul(f, b.ffn_w1), b.ffn_b1));
  f = ag::add_row(ag::matmul(f, b.ffn_w2), b.ffn_b2);
  return ag::add(x, f);
}

inline void check_tokens(const HostConfig& h, std::span<const int> ids) {
  if (ids.empty() || ids.size() % h.cfg.S)
    throw dimension_error("lm_forward: length T=" + std::to_string(ids.size()) + " not divisible by S=" +
                          std::to_string(h.cfg.S));
  if (ids.size() > h.max_T)
    throw dimension_error("lm_forward: length " + std::to_string(ids.size()) + " exceeds max_T=" +
                          std::to_string(h.max_T));
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= h.vocab_size)
      throw dimension_error("lm_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(h.vocab_size));
}

// Embeddings, blocks, final norm, untied head. Returns T×vocab logits.
inline Var lm_forward(Graph& g, const HostParams& p, const HostConfig& h, std::span<const int> ids,
                      const RunOptions& run = {}) {
  check_tokens(h, ids);
  Var x = ag::gather_rows(g.param(p.tok_embed), ids);
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
  x = ag::add(x, ag::gather_rows(g.param(p.pos_embed), positions));
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    ForwardOptions fopt;
    fopt.uniform_probe = run.uniform_probe;
    if (l < run.observers.size()) fopt.observer = run.observers[l];
    x = block_forward(x, bind(g, p.blocks[l]), h.cfg, run.mode, fopt);
  }
  x = ag::layer_norm(x, g.param(p.lnf_gain), g.param(p.lnf_bias), h.cfg.ln_eps);
  return ag::matmul(x, g.param(p.head));
}

inline Tensor lm_logits(const HostParams& p, const HostConfig& h, std::span<const int> ids, const RunOptions& run = {}) {
  Graph g;
  return lm_forward(g, p, h, ids, run).value();
}

inline std::vector<int> bytes_to_ids(std::string_view text) {
  std::vector<int> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

// ---------------------------------------------------------------------------
// Optimizer and training
// ---------------------------------------------------------------------------

struct TrainState {
  HostConfig config;
  HostParams params;
  std::map<std::string, Tensor> adam_m, adam_v;
  std::size_t step = 0;

  static TrainState fresh(const HostConfig& h) {
    h.validate();
    TrainState s{h, HostParams::init(h), {}, {}, 0};
    for (auto& np : s.params.named()) {
      s.adam_m.emplace(np.name, Tensor(np.tensor->shape()));
      s.adam_v.emplace(np.name, Tensor(np.tensor->shape()));
    }
    return s;
  }
};

struct LossRecord {
  std::size_t step;
  double loss;
  double lr;  // backbone rate after warmup scaling
};

inline double warmup_factor(const HostConfig& h, std::size_t step) {
  if (h.warmup_steps == 0) return 1.0;
  return std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(h.warmup_steps));
}

// Window start offsets for one step: a pure function of (seed, step), so a
// resumed run draws the same batches as an uninterrupted one.
inline std::vector<std::size_t> batch_offsets(const HostConfig& h, std::size_t step, std::size_t corpus_len) {
  std::seed_seq seq{static_cast<std::uint32_t>(h.seed), static_cast<std::uint32_t>(h.seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  Rng rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, corpus_len - h.max_T - 1);
  std::vector<std::size_t> out(h.batch_size);
  for (auto& o : out) o = pick(rng);
  return out;
}

// Mean next-token cross-entropy over a batch of windows; gradients of the mean.
struct StepResult {
  double loss;
  Gradients grads;
};

inline StepResult loss_and_grads(const HostParams& p, const HostConfig& h, std::span<const int> corpus,
                                 const std::vector<std::size_t>& offsets) {
  Graph g;
  std::vector<Var> losses;
  for (std::size_t off : offsets) {
    const std::span<const int> ids = corpus.subspan(off, h.max_T);
    const std::span<const int> targets = corpus.subspan(off + 1, h.max_T);
    losses.push_back(ag::cross_entropy_sum(lm_forward(g, p, h, ids), targets));
  }
  Var total = losses.size() == 1 ? losses.front() : ag::sum(ag::concat_rows(losses));
  Var mean = ag::scale(total, 1.0 / static_cast<double>(offsets.size() * h.max_T));
  const double value = mean.value()[0];
  return {value, g.backward(mean)};
}

inline void adamw_update(TrainState& s, const Gradients& grads) {
  const HostConfig& h = s.config;
  auto params = s.params.named();
  // global-norm clip on the HiCI group only
  double sq = 0.0;
  for (auto& np : params)
    if (np.group == ParamGroup::hici) {
      const Tensor g = grads.of(*np.tensor);
      for (double v : g.data()) sq += v * v;
    }
  const double norm = std::sqrt(sq);
  const double clip = norm > h.hici_grad_clip && h.hici_grad_clip > 0.0 ? h.hici_grad_clip / norm : 1.0;

  const double t = static_cast<double>(s.step + 1);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const double warm = warmup_factor(h, s.step);
  for (auto& np : params) {
    Tensor grad = grads.of(*np.tensor);
    const double scale = np.group == ParamGroup::hici ? clip : 1.0;
    const double lr = warm * (np.group == ParamGroup::hici ? h.lr_hici : h.lr_backbone);
    Tensor& m = s.adam_m.at(np.name);
    Tensor& v = s.adam_v.at(np.name);
    Tensor& w = *np.tensor;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = grad[i] * scale;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + h.adam_eps) + h.weight_decay * w[i]);
    }
  }
  ++s.step;
}

// Runs `steps` more optimizer steps on the corpus, appending to the trace.
inline std::vector<LossRecord> train_steps(TrainState& s, std::span<const int> corpus, std::size_t steps) {
  const HostConfig& h = s.config;
  if (corpus.size() < h.max_T + 1)
    throw data_error("corpus of " + std::to_string(corpus.size()) + " tokens is smaller than max_T+1=" +
                     std::to_string(h.max_T + 1));
  std::vector<LossRecord> trace;
  for (std::size_t i = 0; i < steps; ++i) {
    const auto offsets = batch_offsets(h, s.step, corpus.size());
    StepResult r = loss_and_grads(s.params, h, corpus, offsets);
    trace.push_back({s.step, r.loss, warmup_factor(h, s.step) * h.lr_backbone});
    adamw_update(s, r.grads);
  }
  return trace;
}

struct TrainResult {
  TrainState state;
  std::vector<LossRecord> trace;
};

inline TrainResult train(std::span<const int> corpus, const HostConfig& h, std::size_t steps) {
  TrainResult r{TrainState::fresh(h), {}};
  r.trace = train_steps(r.state, corpus, steps);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir, TrainState& s) {
  io::TensorRefs refs;
  for (auto& np : s.params.named()) refs.emplace_back("param/" + np.name, np.tensor);
  for (auto& [name, t] : s.adam_m) refs.emplace_back("adam_m/" + name, &t);
  for (auto& [name, t] : s.adam_v) refs.emplace_back("adam_v/" + name, &t);
  io::save(dir, refs, {{"host_config", to_json(s.config)}, {"step", s.step}});
}

inline TrainState load_checkpoint(const std::filesystem::path& dir) {
  const io::Archive a = io::load(dir);
  if (!a.meta.contains("host_config")) throw io::format_error("checkpoint manifest lacks host_config");
  TrainState s = TrainState::fresh(host_config_from_json(a.meta.at("host_config")));
  s.step = a.meta.at("step");
  for (auto& np : s.params.named()) {
    const Tensor& t = a.at("param/" + np.name);
    if (t.shape() != np.tensor->shape())
      throw io::format_error("checkpoint tensor " + np.name + " has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(np.tensor->shape()));
    *np.tensor = t;
    s.adam_m.at(np.name) = a.at("adam_m/" + np.name);
    s.adam_v.at(np.name) = a.at("adam_v/" + np.name);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct PerplexityResult {
  double perplexity;
  double nll_sum;
  std::size_t scored_tokens;
  std::size_t windows;
};

struct Window {
  std::size_t begin;  // first input token
  std::size_t score_from;  // first scored position within the window
};

// Windows of eval_T inputs every `stride` tokens. The first window scores all
// of its positions; each later window scores only its last `stride`.
inline std::vector<Window> sliding_windows(std::size_t n_tokens, std::size_t eval_T, std::size_t stride) {
  std::vector<Window> out;
  for (std::size_t b = 0; b + eval_T + 1 <= n_tokens; b += stride) out.push_back({b, b == 0 ? 0 : eval_T - stride});
  return out;
}

inline PerplexityResult eval_ppl(const HostParams& p, const HostConfig& h, std::span<const int> tokens,
                                 std::size_t eval_T, std::size_t stride, AttentionMode mode = AttentionMode::hici,
                                 std::size_t window_batch = 1) {
  if (eval_T == 0 || eval_T % h.cfg.S)
    throw config_error("eval length " + std::to_string(eval_T) + " not divisible by S=" + std::to_string(h.cfg.S));
  if (stride == 0 || stride > eval_T)
    throw config_error("stride " + std::to_string(stride) + " must be in [1, eval length]");
  if (tokens.size() < eval_T + 1)
    throw data_error("text of " + std::to_string(tokens.size()) + " tokens is shorter than eval length " +
                     std::to_string(eval_T) + " + 1");
  const auto windows = sliding_windows(tokens.size(), eval_T, stride);
  std::vector<double> nll(windows.size());
  RunOptions run;
  run.mode = mode;
  // windows are independent; batches only group evaluation, accumulation below is in window order
  for (std::size_t first = 0; first < windows.size(); first += std::max<std::size_t>(window_batch, 1)) {
    const std::size_t last = std::min(windows.size(), first + std::max<std::size_t>(window_batch, 1));
    Graph g;
    for (std::size_t w = first; w < last; ++w) {
      const Window& win = windows[w];
      std::vector<int> targets(tokens.begin() + static_cast<std::ptrdiff_t>(win.begin + 1),
                               tokens.begin() + static_cast<std::ptrdiff_t>(win.begin + eval_T + 1));
      for (std::size_t i = 0; i < win.score_from; ++i) targets[i] = -1;
      nll[w] = ag::cross_entropy_sum(lm_forward(g, p, h, tokens.subspan(win.begin, eval_T), run), targets).value()[0];
    }
  }
  PerplexityResult r{0.0, 0.0, 0, windows.size()};
  for (std::size_t w = 0; w < windows.size(); ++w) {
    r.nll_sum += nll[w];
    r.scored_tokens += eval_T - windows[w].score_from;
  }
  r.perplexity = std::exp(r.nll_sum / static_cast<double>(r.scored_tokens));
  return r;
}

// Broadcast attention mass per (layer, head) over one token window.
inline std::vector<AttnMassRecord> collect_attn_mass(const HostParams& p, const HostConfig& h, std::span<const int> ids,
                                                     bool uniform_probe = false) {
  std::vector<AttnMassAccumulator> accs;
  for (std::size_t l = 0; l < p.blocks.size(); ++l) accs.emplace_back(h.cfg.H, h.cfg.K, h.cfg.M);
  RunOptions run;
  run.uniform_probe = uniform_probe;
  for (auto& a : accs) run.observers.push_back(a.observer());
  lm_logits(p, h, ids, run);
  std::vector<AttnMassRecord> out;
  for (std::size_t l = 0; l < accs.size(); ++l)
    for (const auto& r : accs[l].records(l)) out.push_back(r);
  return out;
}

}  // namespace hici::host
