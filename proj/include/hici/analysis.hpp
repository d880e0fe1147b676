#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hici/attention.hpp"
#include "hici/config.hpp"
#include "hici/flops.hpp"

namespace hici::analysis {

// ---------------------------------------------------------------------------
// Model presets
// ---------------------------------------------------------------------------

struct ModelDims {
  std::string name;
  std::size_t n_layers = 0;
  std::size_t d = 0;
  std::size_t ffn = 0;
  std::size_t vocab = 0;
  std::uint64_t base_params = 0;
};

struct Preset {
  ModelDims dims;
  HiCIConfig cfg;
};

inline Preset llama2_7b() {
  return {{"LLaMA-2-7B", 32, 4096, 11008, 32000, 6'738'415'616ull}, HiCIConfig::llama2_7b()};
}

inline Preset llama2_13b() {
  return {{"LLaMA-2-13B", 40, 5120, 13824, 32000, 13'015'864'320ull}, HiCIConfig::llama2_13b()};
}

inline Preset preset(std::string_view name) {
  if (name == "llama2-7b") return llama2_7b();
  if (name == "llama2-13b") return llama2_13b();
  throw config_error("unknown preset '" + std::string(name) + "' (expected llama2-7b or llama2-13b)");
}

// 8K, 16K, 32K, 64K and 100K tokens.
inline std::vector<std::size_t> reference_contexts() { return {8192, 16384, 32768, 65536, 102400}; }

inline std::string context_label(std::size_t T) {
  return T % 1024 == 0 ? std::to_string(T / 1024) + "K" : std::to_string(T);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamBreakdown {
  // per layer
  std::uint64_t slots = 0;
  std::uint64_t local_attention = 0;
  std::uint64_t compression = 0;
  std::uint64_t queries = 0;
  std::uint64_t lightweight_attention = 0;
  std::uint64_t expansion = 0;
  // Broadcast Q/K/V are the backbone's own projections and are not overhead.
  std::uint64_t broadcast_projection = 0;

  std::size_t n_layers = 0;
  std::uint64_t base_params = 0;

  std::uint64_t local_subtotal() const { return slots + local_attention; }
  std::uint64_t global_subtotal() const { return compression + queries + lightweight_attention + expansion; }
  std::uint64_t per_layer() const { return local_subtotal() + global_subtotal(); }
  std::uint64_t total() const { return per_layer() * n_layers; }
  std::uint64_t per_layer_with_broadcast() const { return per_layer() + broadcast_projection; }
  double overhead() const {
    const double t = static_cast<double>(total());
    return t == 0.0 ? 0.0 : t / (static_cast<double>(base_params) + t);
  }
};

// A stage whose cardinality is zero (M = 0 or K = 0) contributes nothing.
inline ParamBreakdown count_params(const HiCIConfig& c, std::size_t n_layers, std::uint64_t base_params) {
  using u = std::uint64_t;
  const u d = c.d, db = c.d_b, ds = c.d_s, M = c.M, K = c.K;
  ParamBreakdown p;
  p.n_layers = n_layers;
  p.base_params = base_params;
  if (M > 0) {
    p.slots = M * d;
    p.local_attention = 3 * d * db + db * d;
  }
  if (K > 0) {
    p.compression = d * ds + 2 * ds + ds * db + 2 * db;
    p.queries = K * db;
    p.lightweight_attention = 4 * db * db;
    p.expansion = db * d + 1;
  }
  p.broadcast_projection = 3 * d * d;
  return p;
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

enum class Method { full, segmented, hici };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::segmented: return "segmented";
    case Method::hici: return "hici";
  }
  return "?";
}

struct CostItem {
  std::string name;
  std::uint64_t flops;
};

struct CostBreakdown {
  Method method = Method::full;
  std::size_t T = 0;
  std::uint64_t attn = 0, proj = 0, ffn = 0, others = 0, lcgi = 0;
  std::vector<CostItem> lcgi_items;  // all layers

  std::uint64_t total() const { return attn + proj + ffn + others + lcgi; }
};

// Per-layer cost of the HiCI stages outside the segment attention kernel,
// one entry per group of matrix products in the implementation.
inline std::vector<CostItem> hici_stage_items(std::size_t T, const HiCIConfig& c) {
  using u = std::uint64_t;
  const u t = T, d = c.d, db = c.d_b, ds = c.d_s, M = c.M, K = c.K, N = T / c.S;
  const u global_runs = K == 0 ? 0 : (c.global_scope == GlobalScope::preceding_segments ? N - 1 : 1);
  std::vector<CostItem> items;
  if (M > 0) {
    items.push_back({"local K/V projection", 4 * t * d * db});
    items.push_back({"slot queries", 2 * M * d * db});
    items.push_back({"local attention", 4 * M * t * db});
    items.push_back({"local output", 2 * N * M * db * d});
  }
  if (K > 0) {
    items.push_back({"shared compression", global_runs * (10 * d * ds + 10 * ds * db)});
    items.push_back({"global Q/K/V/O", global_runs * (4 * K * db * db + 20 * db * db)});
    items.push_back({"global attention", global_runs * 20 * K * db});
    items.push_back({"expansion", global_runs * 2 * K * db * d});
  }
  return items;
}

// Backbone K/V projections of the K + M context rows prepended to each segment.
inline std::uint64_t context_projection_flops(std::size_t T, const HiCIConfig& c) {
  return 4 * std::uint64_t{T / c.S} * (c.K + c.M) * c.d * c.d;
}

inline void require_segments(std::size_t T, const HiCIConfig& c, const char* what) {
  if (c.S == 0 || T % c.S)
    throw dimension_error(std::string(what) + ": T=" + std::to_string(T) + " not divisible by S=" +
                          std::to_string(c.S));
}

// 2 FLOPs per multiply-add, forward pass, batch 1, all layers.
inline CostBreakdown count_flops(Method method, std::size_t T, const ModelDims& m, const HiCIConfig& c) {
  using u = std::uint64_t;
  if (method != Method::full) require_segments(T, c, "count_flops");
  const u L = m.n_layers, t = T, d = m.d;
  CostBreakdown b;
  b.method = method;
  b.T = T;
  switch (method) {
    case Method::full: b.attn = L * 4 * t * t * d; break;
    case Method::segmented: b.attn = L * 4 * t * c.S * d; break;
    case Method::hici: b.attn = L * 4 * t * (c.S + c.K + c.M) * d; break;
  }
  b.proj = L * 8 * t * d * d;
  if (method == Method::hici) {
    HiCIConfig layer_cfg = c;
    layer_cfg.d = m.d;
    b.proj += L * context_projection_flops(T, layer_cfg);
  }
  b.ffn = L * 6 * t * d * m.ffn;
  b.others = 2 * t * d * m.vocab;
  if (method == Method::hici) {
    HiCIConfig layer_cfg = c;
    layer_cfg.d = m.d;
    for (CostItem item : hici_stage_items(T, layer_cfg)) {
      item.flops *= L;
      b.lcgi += item.flops;
      b.lcgi_items.push_back(std::move(item));
    }
  }
  return b;
}

// Analytic counterpart of the instrumented counter for one hici_forward call.
inline FlopTally expected_layer_tally(std::size_t T, const HiCIConfig& c) {
  require_segments(T, c, "expected_layer_tally");
  using u = std::uint64_t;
  FlopTally t;
  t[FlopBucket::broadcast_attention] = 4 * u{T} * (c.S + c.K + c.M) * c.d;
  t[FlopBucket::broadcast_projection] = 6 * u{T} * c.d * c.d + context_projection_flops(T, c);
  for (const CostItem& item : hici_stage_items(T, c)) t[FlopBucket::local_global] += item.flops;
  return t;
}

struct FlopsRow {
  CostBreakdown full, segmented, hici;
};

// Rows for the profiling table. Segmented and HiCI rows use `groups` segments
// per sequence (S = T / groups).
inline std::vector<FlopsRow> flops_table(const Preset& p, const std::vector<std::size_t>& contexts,
                                         std::size_t groups = 4) {
  std::vector<FlopsRow> rows;
  for (std::size_t T : contexts) {
    if (groups == 0 || T % groups)
      throw dimension_error("flops_table: T=" + std::to_string(T) + " not divisible into " + std::to_string(groups) +
                            " segments");
    HiCIConfig c = p.cfg;
    c.S = T / groups;
    rows.push_back({count_flops(Method::full, T, p.dims, c), count_flops(Method::segmented, T, p.dims, c),
                    count_flops(Method::hici, T, p.dims, c)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Scaling probe
// ---------------------------------------------------------------------------

struct ScalingRow {
  std::size_t T = 0;
  FlopTally counted;
  double seconds = 0.0;
  double ratio = 0.0;  // counted total / previous row's, 0 for the first row
  std::size_t global_rows = 0;
  std::size_t global_bytes = 0;
};

inline std::vector<ScalingRow> scaling_probe(const HiCIConfig& c, const std::vector<std::size_t>& lengths,
                                             std::uint64_t seed = 0) {
  c.validate();
  for (std::size_t T : lengths) require_segments(T, c, "scaling_probe");
  Rng rng(seed);
  const HiCIParams params = HiCIParams::init(c, rng);
  std::vector<ScalingRow> rows;
  for (std::size_t T : lengths) {
    const Tensor x = randn({T, c.d}, rng);
    HiCITrace trace;
    ForwardOptions opt;
    opt.trace = &trace;
    ScalingRow r;
    r.T = T;
    const auto start = std::chrono::steady_clock::now();
    {
      FlopCounter counter;
      hici_forward(x, params, c, opt);
      r.counted = counter.tally();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!rows.empty())
      r.ratio = static_cast<double>(r.counted.total()) / static_cast<double>(rows.back().counted.total());
    if (!trace.globals.empty()) {
      r.global_rows = trace.globals.back().rows();
      r.global_bytes = trace.globals.back().bytes();
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

enum class TableFormat { text, csv, rounded };

inline TableFormat parse_table_format(std::string_view s) {
  if (s == "text") return TableFormat::text;
  if (s == "csv") return TableFormat::csv;
  if (s == "rounded") return TableFormat::rounded;
  throw config_error("table format: expected text, csv or rounded, got '" + std::string(s) + "'");
}

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string thousands(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// 32.8K, 8.4M: K below one million, M above.
inline std::string short_count(std::uint64_t v) {
  return v < 1'000'000 ? fixed(static_cast<double>(v) / 1e3, 1) + "K" : fixed(static_cast<double>(v) / 1e6, 1) + "M";
}

inline std::string millions(std::uint64_t v) { return fixed(static_cast<double>(v) / 1e6, 1) + "M"; }

inline std::string tflops(std::uint64_t v) { return fixed(static_cast<double>(v) / 1e12, 1); }

inline std::string pad(const std::string& s, std::size_t w, bool left = false) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

struct Grid {
  std::vector<std::vector<std::string>> rows;
  std::vector<bool> left_align;

  std::string render() const {
    std::vector<std::size_t> widths;
    for (const auto& r : rows)
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (widths.size() <= i) widths.push_back(0);
        widths[i] = std::max(widths[i], r[i].size());
      }
    std::ostringstream os;
    for (const auto& r : rows) {
      std::string line;
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) line += "  ";
        line += pad(r[i], widths[i], i < left_align.size() && left_align[i]);
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      os << line << '\n';
    }
    return os.str();
  }
};

}  // namespace detail

inline std::string format_params(const ParamBreakdown& p, const HiCIConfig& c, const std::string& model,
                                 TableFormat f) {
  using namespace detail;
  const std::uint64_t L = p.n_layers;
  struct Line {
    const char* module;
    std::string component;
    std::uint64_t per_layer;
  };
  const std::vector<Line> lines = {
      {"local", "Memory slots (M=" + std::to_string(c.M) + ")", p.slots},
      {"local", "Cross-attention (Q/K/V/O)", p.local_attention},
      {"local", "Subtotal", p.local_subtotal()},
      {"global", "Shared compression (d_s=" + std::to_string(c.d_s) + ")", p.compression},
      {"global", "Global queries (K=" + std::to_string(c.K) + ")", p.queries},
      {"global", "Lightweight attention (Q/K/V/O)", p.lightweight_attention},
      {"global", "Expansion layer", p.expansion},
      {"global", "Subtotal", p.global_subtotal()},
      {"total", "HiCI Total", p.per_layer()},
  };

  if (f == TableFormat::csv) {
    std::ostringstream os;
    os << "module,component,per_layer,total\n";
    for (const auto& l : lines) os << l.module << ',' << l.component << ',' << l.per_layer << ',' << l.per_layer * L << '\n';
    os << "base,Base model,," << p.base_params << '\n';
    os << "overhead,Parameter overhead,," << fixed(100.0 * p.overhead(), 4) << '\n';
    os << "reused,Broadcast Q/K/V (backbone),," << p.broadcast_projection * L << '\n';
    return os.str();
  }

  Grid g;
  g.left_align = {true, true, false, false};
  const std::string total_col = "Total (" + std::to_string(L) + "L)";
  if (f == TableFormat::rounded) {
    g.rows.push_back({"Module", "Component", "Per Layer", total_col});
    const char* last = "";
    for (const auto& l : lines) {
      std::string module;
      if (std::string_view(l.module) != last) {
        module = std::string_view(l.module) == "local"    ? "Local Construction"
                 : std::string_view(l.module) == "global" ? "Global Integration"
                                                          : "";
        last = l.module;
      }
      g.rows.push_back({module, l.component, short_count(l.per_layer), millions(l.per_layer * L)});
    }
    g.rows.push_back({"", "Base Model (" + model + ")", "---", fixed(static_cast<double>(p.base_params) / 1e9, 2) + "B"});
    g.rows.push_back({"", "Parameter Overhead", "---", fixed(100.0 * p.overhead(), 2) + "%"});
    return g.render();
  }

  g.rows.push_back({"module", "component", "per layer", total_col});
  for (const auto& l : lines) g.rows.push_back({l.module, l.component, thousands(l.per_layer), thousands(l.per_layer * L)});
  g.rows.push_back({"base", "Base model (" + model + ")", "", thousands(p.base_params)});
  g.rows.push_back({"overhead", "HiCI / (base + HiCI)", "", fixed(100.0 * p.overhead(), 2) + "%"});
  g.rows.push_back({"reused", "Broadcast Q/K/V (backbone)", thousands(p.broadcast_projection),
                    thousands(p.broadcast_projection * L)});
  return g.render();
}

inline std::string format_flops(const std::vector<FlopsRow>& rows, TableFormat f) {
  using namespace detail;
  auto label = [](Method m) {
    return m == Method::full ? "Full Attn" : m == Method::segmented ? "Segmented" : "HiCI";
  };

  if (f == TableFormat::csv) {
    std::ostringstream os;
    os << "context,method,attn,proj,ffn,others,lcgi,total\n";
    for (const auto& r : rows)
      for (const CostBreakdown* b : {&r.full, &r.segmented, &r.hici})
        os << b->T << ',' << to_string(b->method) << ',' << b->attn << ',' << b->proj << ',' << b->ffn << ','
           << b->others << ',' << b->lcgi << ',' << b->total() << '\n';
    return os.str();
  }

  Grid g;
  g.left_align = {true, true};
  g.rows.push_back({"Context", "Method", "Attn", "Proj", "FFN", "Others", "LC+GI", "Total"});
  for (const auto& r : rows) {
    bool first = true;
    for (const CostBreakdown* b : {&r.full, &r.segmented, &r.hici}) {
      std::vector<std::string> row = {first ? context_label(b->T) : "", label(b->method), tflops(b->attn)};
      // The reference layout lists the shared columns once per context.
      const bool shared = f == TableFormat::text || b->method == Method::segmented;
      for (std::uint64_t v : {b->proj, b->ffn, b->others}) row.push_back(shared ? tflops(v) : "");
      row.push_back(b->method == Method::hici ? tflops(b->lcgi) : "---");
      row.push_back(tflops(b->total()));
      g.rows.push_back(std::move(row));
      first = false;
    }
  }
  std::string out = g.render();
  if (f == TableFormat::text) out += "(TFLOPs, forward pass, batch 1, 2 FLOPs per multiply-add)\n";
  return out;
}

inline std::string format_scaling(const std::vector<ScalingRow>& rows, TableFormat f) {
  using namespace detail;
  std::ostringstream os;
  if (f == TableFormat::csv) {
    // Wall time is left out so the file is reproducible.
    os << "T,flops,broadcast_attention,broadcast_projection,local_global,ratio,global_rows,global_bytes\n";
    for (const auto& r : rows)
      os << r.T << ',' << r.counted.total() << ',' << r.counted[FlopBucket::broadcast_attention] << ','
         << r.counted[FlopBucket::broadcast_projection] << ',' << r.counted[FlopBucket::local_global] << ','
         << fixed(r.ratio, 6) << ',' << r.global_rows << ',' << r.global_bytes << '\n';
    return os.str();
  }
  Grid g;
  g.rows.push_back({"T", "FLOPs", "ratio", "seconds", "|G| rows", "|G| bytes"});
  for (const auto& r : rows)
    g.rows.push_back({std::to_string(r.T), thousands(r.counted.total()), r.ratio == 0.0 ? "-" : fixed(r.ratio, 4),
                      fixed(r.seconds, 4), std::to_string(r.global_rows), std::to_string(r.global_bytes)});
  return g.render();
}

}  // namespace hici::analysis
