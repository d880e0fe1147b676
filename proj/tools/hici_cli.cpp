// hici: command-line front end for training, evaluation and cost accounting.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hici/analysis.hpp"
#include "hici/gradcheck.hpp"
#include "hici/host.hpp"
#include "hici/version.hpp"

namespace fs = std::filesystem;
using namespace hici;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-6;

struct Options {
  std::string config_path;
  std::string preset;
  std::uint64_t seed = 1234;
  std::string out_dir;
  std::size_t steps = 500;
  std::size_t eval_len = 0;  // 0: the checkpoint's sequence length
  std::size_t stride = 256;
  bool stride_given = false;
  std::string mode = "hici";
  std::string causal;        // empty: keep the config's setting
  std::string global_scope;  // empty: keep the config's setting
  bool uniform_probe = false;
  std::string checkpoint;
  std::string text_path;
  std::string format = "text";
  std::size_t layers = 1;
  std::size_t seq_len = 16;
  std::size_t batch = 3;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> contexts;
  std::uint64_t base_params = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw host::data_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io::format_error("cannot write '" + path.string() + "'");
  out << content;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Writes go only under --out; without it the subcommand prints and writes nothing.
class Outputs {
 public:
  explicit Outputs(const std::string& dir) {
    if (dir.empty()) return;
    dir_ = dir;
    fs::create_directories(*dir_);
  }

  bool enabled() const { return dir_.has_value(); }
  fs::path path(const std::string& name) const { return *dir_ / name; }

  void manifest(const std::string& subcommand, const Options& o, const json& config, const std::vector<std::string>& argv,
                const std::vector<std::string>& files) const {
    if (!dir_) return;
    json m = {{"subcommand", subcommand},
              {"config", config},
              {"seed", o.seed},
              {"code_version", std::string("hici ") + kVersion},
              {"argv", argv},
              {"outputs", files}};
    write_file(path("manifest.json"), m.dump(2) + "\n");
  }

  void write(const std::string& name, const std::string& content) const {
    if (dir_) write_file(path(name), content);
  }

 private:
  std::optional<fs::path> dir_;
};

HiCIConfig resolve_config(const Options& o, bool micro_default = true) {
  HiCIConfig c;
  if (!o.config_path.empty() && !o.preset.empty()) throw config_error("--config and --preset are mutually exclusive");
  if (!o.config_path.empty())
    c = load_config(o.config_path);
  else if (!o.preset.empty())
    c = analysis::preset(o.preset).cfg;
  else if (!micro_default)
    throw config_error("a --config or --preset is required");
  if (!o.causal.empty()) c.causal_segment_mask = o.causal == "on";
  if (!o.global_scope.empty()) c.global_scope = parse_scope(o.global_scope);
  c.validate();
  return c;
}

std::vector<int> corpus_from(const Options& o) {
  if (!o.text_path.empty()) return host::bytes_to_ids(read_file(o.text_path));
  std::string s;
  for (int i = 0; i < 400; ++i) s += "abc";
  return host::bytes_to_ids(s);
}

// --- train -----------------------------------------------------------------

int run_train(const Options& o, const std::vector<std::string>& argv) {
  if (o.out_dir.empty()) throw config_error("train needs --out DIR for its checkpoint");
  host::HostConfig h;
  h.cfg = resolve_config(o);
  h.n_layers = o.layers;
  h.max_T = o.seq_len;
  h.batch_size = o.batch;
  h.seed = o.seed;
  h.validate();
  const auto corpus = corpus_from(o);

  Outputs out(o.out_dir);
  out.manifest("train", o, host::to_json(h), argv, {"loss.csv", "checkpoint/"});
  host::TrainResult r = host::train(corpus, h, o.steps);

  std::ostringstream csv;
  csv << "step,loss,lr\n";
  for (const auto& rec : r.trace) csv << rec.step << ',' << g17(rec.loss) << ',' << g17(rec.lr) << '\n';
  out.write("loss.csv", csv.str());
  host::save_checkpoint(out.path("checkpoint"), r.state);
  if (!r.trace.empty()) std::cout << "final loss " << g17(r.trace.back().loss) << " after " << r.trace.size() << " steps\n";
  std::cout << "checkpoint written to " << out.path("checkpoint").string() << '\n';
  return 0;
}

// --- eval-ppl --------------------------------------------------------------

int run_eval(const Options& o, const std::vector<std::string>& argv) {
  if (o.checkpoint.empty()) throw config_error("eval-ppl needs --checkpoint DIR");
  if (o.text_path.empty()) throw config_error("eval-ppl needs --text FILE");
  host::TrainState s = host::load_checkpoint(o.checkpoint);
  host::HostConfig h = s.config;
  if (!o.causal.empty()) h.cfg.causal_segment_mask = o.causal == "on";
  if (!o.global_scope.empty()) h.cfg.global_scope = parse_scope(o.global_scope);
  const std::size_t eval_T = o.eval_len ? o.eval_len : h.max_T;
  // The default stride is clipped so short evaluation windows stay usable.
  const std::size_t stride = o.stride_given ? o.stride : std::min(o.stride, eval_T);
  const host::AttentionMode mode = o.mode == "full" ? host::AttentionMode::full : host::AttentionMode::hici;
  const auto tokens = host::bytes_to_ids(read_file(o.text_path));

  Outputs out(o.out_dir);
  json cfg = host::to_json(h);
  cfg["eval_len"] = eval_T;
  cfg["stride"] = stride;
  cfg["mode"] = o.mode;
  out.manifest("eval-ppl", o, cfg, argv, {"ppl.json"});
  const auto r = host::eval_ppl(s.params, h, tokens, eval_T, stride, mode);
  json result = {{"perplexity", r.perplexity},
                 {"nll_sum", r.nll_sum},
                 {"scored_tokens", r.scored_tokens},
                 {"windows", r.windows}};
  out.write("ppl.json", result.dump(2) + "\n");
  std::cout << "perplexity " << g17(r.perplexity) << " over " << r.scored_tokens << " tokens in " << r.windows
            << " windows\n";
  return 0;
}

// --- gradcheck -------------------------------------------------------------

int run_gradcheck(const Options& o, const std::vector<std::string>& argv) {
  host::HostConfig h;
  h.cfg = resolve_config(o);
  h.max_T = 2 * h.cfg.S;
  h.seed = o.seed;
  h.validate();
  Outputs out(o.out_dir);
  out.manifest("gradcheck", o, host::to_json(h), argv, {"gradcheck.csv"});

  Rng rng(o.seed);
  const std::size_t T = 2 * h.cfg.S;
  const Tensor x = randn({T, h.d()}, rng);
  const Tensor w = randn({T, h.d()}, rng);
  host::HostParams p = host::HostParams::init(h);
  host::BlockParams& block = p.blocks.front();
  auto probe = [&](Var y, Graph& g) { return ag::sum(ag::hadamard(y, g.constant(w))); };

  std::vector<TensorGradError> errors;
  for (const auto& e : gradcheck_all(block.hici.named(), [&](Graph& g) {
         return probe(layer::hici_forward(g.constant(x), layer::bind(g, block.hici), h.cfg), g);
       }))
    errors.push_back({"hici." + e.name, e.rel_error});

  std::vector<std::pair<std::string, Tensor*>> block_tensors;
  for (auto& np : p.named())
    if (np.name.starts_with("block0.")) block_tensors.emplace_back(np.name, np.tensor);
  for (const auto& e : gradcheck_all(block_tensors, [&](Graph& g) {
         return probe(host::block_forward(g.constant(x), host::bind(g, block), h.cfg), g);
       }))
    errors.push_back(e);

  std::ostringstream csv;
  csv << "tensor,rel_error\n";
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : errors) {
    csv << e.name << ',' << g17(e.rel_error) << '\n';
    if (e.rel_error >= worst) worst = e.rel_error, worst_name = e.name;
  }
  out.write("gradcheck.csv", csv.str());
  std::cout << "checked " << errors.size() << " tensors; max relative error " << g17(worst) << " (" << worst_name
            << ")\n";
  if (worst > kGradTolerance) {
    std::cerr << "hici: gradcheck failed: " << g17(worst) << " exceeds " << kGradTolerance << '\n';
    return 1;
  }
  return 0;
}

// --- flops / params / scaling ---------------------------------------------

int run_flops(const Options& o, const std::vector<std::string>& argv) {
  const analysis::Preset p = analysis::preset(o.preset.empty() ? "llama2-7b" : o.preset);
  const auto contexts = o.contexts.empty() ? analysis::reference_contexts() : o.contexts;
  const auto format = analysis::parse_table_format(o.format);
  Outputs out(o.out_dir);
  out.manifest("flops", o, {{"preset", p.dims.name}, {"hici", to_text(p.cfg)}, {"contexts", contexts}}, argv,
               {"flops.csv"});
  const auto rows = analysis::flops_table(p, contexts);
  out.write("flops.csv", analysis::format_flops(rows, analysis::TableFormat::csv));
  std::cout << analysis::format_flops(rows, format);
  return 0;
}

int run_params(const Options& o, const std::vector<std::string>& argv) {
  std::string model = "custom";
  analysis::ModelDims dims;
  HiCIConfig c;
  if (!o.preset.empty() && o.config_path.empty()) {
    const analysis::Preset p = analysis::preset(o.preset);
    dims = p.dims;
    model = p.dims.name;
    c = resolve_config(o);
  } else {
    c = resolve_config(o, false);
    dims.n_layers = o.layers;
  }
  if (o.base_params) dims.base_params = o.base_params;
  const auto format = analysis::parse_table_format(o.format);
  Outputs out(o.out_dir);
  out.manifest("params", o,
               {{"model", model}, {"hici", to_text(c)}, {"layers", dims.n_layers}, {"base_params", dims.base_params}},
               argv, {"params.csv"});
  const auto b = analysis::count_params(c, dims.n_layers, dims.base_params);
  out.write("params.csv", analysis::format_params(b, c, model, analysis::TableFormat::csv));
  std::cout << analysis::format_params(b, c, model, format);
  return 0;
}

int run_scaling(const Options& o, const std::vector<std::string>& argv) {
  HiCIConfig c = resolve_config(o);
  std::vector<std::size_t> lengths = o.lengths;
  if (lengths.empty()) lengths = {2 * c.S, 4 * c.S, 8 * c.S, 16 * c.S};
  const auto format = analysis::parse_table_format(o.format);
  Outputs out(o.out_dir);
  out.manifest("scaling", o, {{"hici", to_text(c)}, {"lengths", lengths}}, argv, {"scaling.csv"});
  const auto rows = analysis::scaling_probe(c, lengths, o.seed);
  out.write("scaling.csv", analysis::format_scaling(rows, analysis::TableFormat::csv));
  std::cout << analysis::format_scaling(rows, format == analysis::TableFormat::csv ? format : analysis::TableFormat::text);
  return 0;
}

// --- attn-stats ------------------------------------------------------------

int run_attn_stats(const Options& o, const std::vector<std::string>& argv) {
  Outputs out(o.out_dir);
  std::vector<AttnMassRecord> records;
  std::size_t K = 0, M = 0, S = 0;
  if (!o.checkpoint.empty()) {
    host::TrainState s = host::load_checkpoint(o.checkpoint);
    host::HostConfig h = s.config;
    if (!o.causal.empty()) h.cfg.causal_segment_mask = o.causal == "on";
    if (!o.global_scope.empty()) h.cfg.global_scope = parse_scope(o.global_scope);
    const auto corpus = corpus_from(o);
    if (corpus.size() < h.max_T) throw host::data_error("text shorter than the model's sequence length");
    out.manifest("attn-stats", o, host::to_json(h), argv, {"attn_mass.csv"});
    records = host::collect_attn_mass(s.params, h, std::span(corpus).first(h.max_T), o.uniform_probe);
    K = h.cfg.K, M = h.cfg.M, S = h.cfg.S;
  } else {
    const HiCIConfig c = resolve_config(o);
    out.manifest("attn-stats", o, {{"hici", to_text(c)}, {"uniform_probe", o.uniform_probe}}, argv,
                 {"attn_mass.csv"});
    Rng rng(o.seed);
    const HiCIParams p = HiCIParams::init(c, rng);
    const Tensor x = randn({2 * c.S, c.d}, rng);
    records = collect_attn_mass(x, p, c, o.uniform_probe);
    K = c.K, M = c.M, S = c.S;
  }
  std::ostringstream csv;
  csv << "layer,head,frac_global,frac_local,frac_segment\n";
  for (const auto& r : records)
    csv << r.layer << ',' << r.head << ',' << g17(r.frac_global) << ',' << g17(r.frac_local) << ','
        << g17(r.frac_segment) << '\n';
  out.write("attn_mass.csv", csv.str());
  std::cout << csv.str();
  if (o.uniform_probe)
    std::cout << "uniform baseline K/(K+M+S) = " << K << "/" << K + M + S << " = "
              << g17(static_cast<double>(K) / static_cast<double>(K + M + S)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HiCI hierarchical attention toolkit"};
  app.set_version_flag("--version", std::string("hici ") + kVersion);
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "HiCI config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--preset", o.preset, "llama2-7b or llama2-13b")
        ->check(CLI::IsMember({"llama2-7b", "llama2-13b"}));
  };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "seed for every random draw");
    sub->add_option("--out", o.out_dir, "directory for all output files");
  };
  auto add_overrides = [&](CLI::App* sub) {
    sub->add_option("--causal", o.causal, "segment causal mask")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--global-scope", o.global_scope, "segments pooled into the global context")
        ->check(CLI::IsMember({"all", "preceding"}));
  };
  auto add_format = [&](CLI::App* sub) {
    sub->add_option("--format", o.format, "text, csv or rounded")->check(CLI::IsMember({"text", "csv", "rounded"}));
  };

  std::string chosen;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->callback([&chosen, name] { chosen = name; });
    return s;
  };

  CLI::App* train = sub("train", "train the toy byte-level model");
  add_config(train);
  add_common(train);
  add_overrides(train);
  train->add_option("--steps", o.steps, "optimizer steps");
  train->add_option("--text", o.text_path, "training corpus (default: a repetitive synthetic corpus)")
      ->check(CLI::ExistingFile);
  train->add_option("--layers", o.layers, "number of blocks")->check(CLI::PositiveNumber);
  train->add_option("--seq-len", o.seq_len, "training window length")->check(CLI::PositiveNumber);
  train->add_option("--batch", o.batch, "windows per step")->check(CLI::PositiveNumber);

  CLI::App* eval = sub("eval-ppl", "sliding-window perplexity of a checkpoint");
  add_common(eval);
  add_overrides(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->check(CLI::ExistingDirectory);
  eval->add_option("--text", o.text_path, "evaluation text")->check(CLI::ExistingFile);
  eval->add_option("--eval-len", o.eval_len, "window length (default: training length)");
  eval->add_option("--stride", o.stride, "tokens scored per window after the first")
      ->check(CLI::PositiveNumber)
      ->each([&](const std::string&) { o.stride_given = true; });
  eval->add_option("--mode", o.mode, "hici or full attention")->check(CLI::IsMember({"hici", "full"}));

  CLI::App* grad = sub("gradcheck", "compare reverse-mode and finite-difference gradients");
  add_config(grad);
  add_common(grad);
  add_overrides(grad);

  CLI::App* flops = sub("flops", "FLOPs breakdown across context lengths");
  add_config(flops);
  add_common(flops);
  add_format(flops);
  flops->add_option("--contexts", o.contexts, "context lengths in tokens")->delimiter(',');

  CLI::App* params = sub("params", "parameter overhead table");
  add_config(params);
  add_common(params);
  add_format(params);
  params->add_option("--layers", o.layers, "layers for a --config model");
  params->add_option("--base", o.base_params, "base model parameter count");

  CLI::App* attn = sub("attn-stats", "broadcast attention mass per layer and head");
  add_config(attn);
  add_common(attn);
  add_overrides(attn);
  attn->add_option("--checkpoint", o.checkpoint, "trained checkpoint directory")->check(CLI::ExistingDirectory);
  attn->add_option("--text", o.text_path, "input text for a checkpoint")->check(CLI::ExistingFile);
  attn->add_flag("--uniform-probe", o.uniform_probe, "force uniform broadcast attention");

  CLI::App* scaling = sub("scaling", "instrumented FLOPs as the sequence grows");
  add_config(scaling);
  add_common(scaling);
  add_overrides(scaling);
  add_format(scaling);
  scaling->add_option("--lengths", o.lengths, "sequence lengths")->delimiter(',');

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  const std::string first = argv[1];
  if (!first.starts_with("-")) {
    bool known = false;
    for (const CLI::App* s : app.get_subcommands({})) known = known || s->get_name() == first;
    if (!known) {
      std::cerr << "hici: unknown subcommand '" << first << "'\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "hici: " << e.what() << '\n';
    return 2;
  }

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (chosen == "train") return run_train(o, args);
    if (chosen == "eval-ppl") return run_eval(o, args);
    if (chosen == "gradcheck") return run_gradcheck(o, args);
    if (chosen == "flops") return run_flops(o, args);
    if (chosen == "params") return run_params(o, args);
    if (chosen == "attn-stats") return run_attn_stats(o, args);
    if (chosen == "scaling") return run_scaling(o, args);
  } catch (const std::exception& e) {
    std::cerr << "hici: error: " << e.what() << '\n';
    return 1;
  }
  std::cerr << app.help();
  return 2;
}
