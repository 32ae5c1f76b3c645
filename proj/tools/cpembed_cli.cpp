// cpembed: fixture generation, contrastive-prompting embeddings, STS
// evaluation, hyperparameter sweeps, next-token probing and report diffs.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 model error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cpembed/eval.hpp"
#include "cpembed/fixture.hpp"
#include "cpembed/model.hpp"
#include "cpembed/probe.hpp"
#include "cpembed/steering.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cpembed;

namespace {

// Reads --config files as a flat JSON object whose keys are long option names.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::FileError(std::string("run config is not JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::FileError("run config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      auto as_text = [](const nlohmann::json& v) {
        return v.is_string() ? v.get<std::string>() : v.dump();
      };
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(as_text(v));
      } else {
        item.inputs.push_back(as_text(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }
};

struct RunConfig {
  std::string model;
  std::string templates_file;
  std::vector<std::string> normal_templates{"prompteol"};
  std::string aux_template = "irrelevant";
  std::optional<int> layer;
  std::optional<double> alpha;
  std::string strategy = "ns";
  std::string site = "attn";
  std::optional<int> output_layer;
  std::vector<std::string> datasets;
  std::string out;
  int jobs = 1;
  std::uint64_t seed = 42;
};

void add_model_options(CLI::App* sub, RunConfig& rc) {
  sub->add_option("--model", rc.model, "Model manifest (JSON)")->required();
  sub->add_option("--templates", rc.templates_file, "Extra template registry (JSON list)");
  sub->add_option("--normal-template", rc.normal_templates,
                  "Normal template id; repeat for a multi-prompt average");
  sub->add_option("--aux-template", rc.aux_template, "Auxiliary template id");
  sub->add_option("--layer", rc.layer, "Intervention layer (1-based)");
  sub->add_option("--alpha", rc.alpha, "Norm-scaling factor");
  sub->add_option("--strategy", rc.strategy, "none, ns or nr")
      ->check(CLI::IsMember({"none", "ns", "nr"}));
  sub->add_option("--site", rc.site, "Intervention site")
      ->check(CLI::IsMember({"attn", "ffn", "hidden"}));
  sub->add_option("--output-layer", rc.output_layer, "Layer whose last-token state is the embedding");
  sub->add_option("--out", rc.out, "Output path (default stdout)");
  sub->add_option("--jobs", rc.jobs, "Worker threads for sentence-level work")
      ->check(CLI::PositiveNumber);
  sub->add_option("--seed", rc.seed, "Seed (recorded; inference is deterministic)");
  sub->config_formatter(std::make_shared<JsonConfig>());
  sub->set_config("--config", "", "Run config (JSON object keyed by option name)");
}

struct Resolved {
  std::vector<PromptTemplate> normals;
  PromptTemplate auxiliary;
  std::vector<SteeringConfig> cfgs;
};

Resolved resolve(const RunConfig& rc, const Model& m, std::optional<int> default_output = {}) {
  TemplateRegistry reg;
  if (!rc.templates_file.empty()) reg.load_file(rc.templates_file);
  if (rc.normal_templates.empty()) throw ConfigError("no normal template given");
  std::vector<PromptTemplate> normals;
  for (const auto& id : rc.normal_templates) normals.push_back(reg.get(id));
  const Strategy strategy = parse_strategy(rc.strategy);
  const Site site = parse_site(rc.site);
  const int L = m.config.n_layers;

  std::vector<SteeringConfig> cfgs;
  for (const auto& t : normals) {
    SteeringConfig c = preset_for(t.id(), L, strategy);
    if (default_output) c.output_layer = *default_output;
    if (rc.output_layer) c.output_layer = *rc.output_layer;
    if (rc.alpha) c.alpha = *rc.alpha;
    c.site = site;
    c.layer = std::min(c.layer, c.output_layer);
    cfgs.push_back(c);
  }
  // the shared auxiliary capture needs one layer for every template
  const int shared_layer = rc.layer ? *rc.layer : cfgs.front().layer;
  for (auto& c : cfgs) {
    c.layer = shared_layer;
    c.validate(L);
  }
  return {std::move(normals), reg.get(rc.aux_template), std::move(cfgs)};
}

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw DataError("cannot write " + path);
    }
  }
  std::ostream& get() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

void report_layers(const ForwardCounters& fc) {
  std::cerr << "forward layers: total=" << fc.total() << " normal=" << fc.normal.value()
            << " auxiliary=" << fc.auxiliary.value() << '\n';
}

std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

int cmd_gen_fixture(const FixtureSpec& spec, const std::string& out_dir) {
  const auto manifest = write_fixture(spec, out_dir);
  std::cout << manifest.string() << '\n';
  return 0;
}

int cmd_embed(const RunConfig& rc, const std::optional<std::string>& text,
              const std::string& input) {
  const Model m = load_model(rc.model);
  const Resolved r = resolve(rc, m);
  std::vector<std::string> lines;
  if (text) {
    lines.push_back(*text);
  } else if (!input.empty()) {
    std::ifstream in(input);
    if (!in) throw DataError("cannot open input " + input);
    lines = read_lines(in);
  } else {
    lines = read_lines(std::cin);
  }

  ForwardCounters fc;
  std::vector<std::string> results(lines.size());
  std::vector<std::string> errors(lines.size());
  parallel_for_each(lines.size(), rc.jobs, [&](std::size_t i) {
    try {
      Vector e;
      SteeringVector sv;
      if (r.normals.size() == 1) {
        std::tie(e, sv) = cp_embed(m, lines[i], r.normals[0], r.auxiliary, r.cfgs[0], &fc);
      } else {
        e = ck_embed(m, lines[i], r.normals, r.auxiliary, r.cfgs, &fc);
      }
      nlohmann::json j = {{"text", lines[i]},
                          {"embedding", e.values()},
                          {"steering",
                           {{"norm_before", sv.norm_before},
                            {"norm_after", sv.norm_after},
                            {"fallback", sv.fallback_applied}}}};
      results[i] = j.dump();
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });

  Output out(rc.out);
  bool failed = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (errors[i].empty()) {
      out.get() << results[i] << '\n';
    } else {
      failed = true;
      std::cerr << "line " << (i + 1) << ": " << errors[i] << '\n';
    }
  }
  report_layers(fc);
  return failed ? 2 : 0;
}

std::pair<std::string, std::string> dataset_name_and_path(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq != std::string::npos) return {spec.substr(0, eq), spec.substr(eq + 1)};
  return {fs::path(spec).stem().string(), spec};
}

int cmd_eval(const RunConfig& rc, bool include_pairs, bool use_cache) {
  if (rc.datasets.empty()) throw ConfigError("eval needs at least one --dataset");
  const Model m = load_model(rc.model);
  const Resolved r = resolve(rc, m);
  ForwardCounters fc;
  EmbeddingCache cache;
  const CpEmbedder embedder(m, r.normals, r.auxiliary, r.cfgs, &fc);
  EvalRun run;
  for (const auto& spec : rc.datasets) {
    const auto [name, path] = dataset_name_and_path(spec);
    const auto records = load_sts(path);
    run.reports.push_back(
        evaluate_sts(embedder, records, name, {rc.jobs, use_cache ? &cache : nullptr}));
  }
  run.normal_layers = fc.normal.value();
  run.auxiliary_layers = fc.auxiliary.value();
  Output out(rc.out);
  out.get() << run.to_json(include_pairs).dump(2) << '\n';
  for (const auto& rep : run.reports) {
    std::cerr << rep.dataset << ": rho="
              << (rep.spearman_rho ? std::to_string(*rep.spearman_rho) : "undefined (" + rep.diagnostic + ")")
              << '\n';
  }
  report_layers(fc);
  return 0;
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("bad list entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

int cmd_sweep(const RunConfig& rc, const std::string& mode, const std::string& layers_text,
              const std::string& alphas_text, const std::string& range_text,
              const std::string& table_path) {
  if (rc.datasets.size() != 1) throw ConfigError("sweep needs exactly one --dataset");
  const Model m = load_model(rc.model);
  const Resolved r = resolve(rc, m);
  if (r.normals.size() != 1) throw ConfigError("sweep takes a single --normal-template");
  const auto records = load_sts(dataset_name_and_path(rc.datasets[0]).second);
  ForwardCounters fc;
  EmbeddingCache cache;
  nlohmann::json result;
  std::string table;

  if (mode == "grid") {
    const auto layers = parse_list<int>(layers_text);
    const auto alphas = parse_list<double>(alphas_text);
    const SweepGrid g = grid_search(m, r.normals[0], r.auxiliary, records, layers, alphas,
                                    r.cfgs[0], {rc.jobs, &cache}, &fc);
    result = g.to_json();
    table = g.to_tsv();
  } else {
    int lo = 1, hi = m.config.n_layers;
    if (!range_text.empty()) {
      const auto colon = range_text.find(':');
      if (colon == std::string::npos) throw ConfigError("--output-layers expects FIRST:LAST");
      lo = parse_list<int>(range_text.substr(0, colon)).at(0);
      hi = parse_list<int>(range_text.substr(colon + 1)).at(0);
    }
    const auto scores =
        output_layer_sweep(m, r.normals[0], r.auxiliary, r.cfgs[0], records, lo, hi,
                           {rc.jobs, nullptr}, &fc);
    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream os;
    os << "layer\trho\n";
    for (const auto& s : scores) {
      nlohmann::json e = {{"layer", s.layer}};
      e["rho"] = s.rho ? nlohmann::json(*s.rho) : nlohmann::json(nullptr);
      rows.push_back(e);
      os << s.layer << '\t';
      if (s.rho) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *s.rho);
        os << buf << '\n';
      } else {
        os << "failed\n";
      }
    }
    result = {{"output_layers", rows}};
    table = os.str();
  }
  result["template"] = r.normals[0].id();
  result["auxiliary_template"] = r.auxiliary.id();
  result["strategy"] = rc.strategy;
  result["forward_layers"] = {{"normal", fc.normal.value()},
                              {"auxiliary", fc.auxiliary.value()},
                              {"total", fc.total()}};
  Output out(rc.out);
  out.get() << result.dump(2) << '\n';
  if (!table_path.empty()) {
    std::ofstream t(table_path, std::ios::trunc);
    if (!t) throw DataError("cannot write " + table_path);
    t << table;
  } else {
    std::cerr << table;
  }
  report_layers(fc);
  return 0;
}

int cmd_probe(const RunConfig& rc, const std::string& text, std::size_t top_k) {
  const Model m = load_model(rc.model);
  const Resolved r = resolve(rc, m, m.config.n_layers);
  if (r.normals.size() != 1) throw ConfigError("probe takes a single --normal-template");
  ForwardCounters fc;
  const auto [embedding, sv] = cp_embed(m, text, r.normals[0], r.auxiliary, r.cfgs[0], &fc);
  ProbeResult p = top_k_tokens(m, embedding, top_k);
  p.source = {{"text", text},
              {"template", r.normals[0].id()},
              {"auxiliary_template", r.auxiliary.id()},
              {"steering", to_json(r.cfgs[0])}};
  Output out(rc.out);
  out.get() << p.to_json().dump(2) << '\n';
  report_layers(fc);
  return 0;
}

EvalRun read_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path);
  try {
    return EvalRun::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + " is not JSON: " + e.what());
  }
}

int cmd_diff(const std::string& a, const std::string& b, const std::string& out_path) {
  const auto rows = diff_reports(read_run(a), read_run(b));
  Output out(out_path);
  out.get() << render_diff(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive-prompting sentence embeddings for decoder-only transformers"};
  app.require_subcommand(1);

  FixtureSpec fx;
  std::string fixture_out = "fixture";
  auto* gen = app.add_subcommand("gen-fixture", "Write a seeded toy model (manifest + weights)");
  gen->add_option("--seed", fx.seed, "Generator seed");
  gen->add_option("--n-layers", fx.n_layers, "Transformer layers")->check(CLI::PositiveNumber);
  gen->add_option("--hidden-dim", fx.hidden_dim, "Hidden size")->check(CLI::PositiveNumber);
  gen->add_option("--n-heads", fx.n_heads, "Attention heads")->check(CLI::PositiveNumber);
  gen->add_option("--vocab", fx.vocab_size, "Vocabulary size");
  gen->add_option("--ffn-dim", fx.ffn_dim, "FFN width (default 2 * hidden)");
  gen->add_option("--max-seq-len", fx.max_seq_len, "Maximum sequence length");
  gen->add_option("--out", fixture_out, "Output directory");

  RunConfig embed_rc;
  std::optional<std::string> embed_text;
  std::string embed_input;
  auto* embed = app.add_subcommand("embed", "Embed sentences, one JSON object per line");
  add_model_options(embed, embed_rc);
  embed->add_option("--text", embed_text, "A single sentence");
  embed->add_option("--input", embed_input, "File with one sentence per line (default stdin)");

  RunConfig eval_rc;
  bool no_pairs = false;
  bool no_cache = false;
  auto* eval = app.add_subcommand("eval", "Spearman evaluation on STS TSV datasets");
  add_model_options(eval, eval_rc);
  eval->add_option("--dataset", eval_rc.datasets, "NAME=PATH or PATH; repeatable");
  eval->add_flag("--no-pairs", no_pairs, "Omit per-pair scores from the report");
  eval->add_flag("--no-cache", no_cache, "Disable the embedding cache");

  RunConfig sweep_rc;
  std::string sweep_mode = "grid";
  std::string sweep_layers = "3,4,5,6,7";
  std::string sweep_alphas = "0.5,1,2,3,4";
  std::string sweep_range;
  std::string sweep_table;
  auto* sweep = app.add_subcommand("sweep", "Grid search or output-layer sweep on a dev set");
  add_model_options(sweep, sweep_rc);
  sweep->add_option("--dataset", sweep_rc.datasets, "Dev set (NAME=PATH or PATH)");
  sweep->add_option("--mode", sweep_mode, "grid or output-layer")
      ->check(CLI::IsMember({"grid", "output-layer"}));
  sweep->add_option("--layers", sweep_layers, "Comma-separated intervention layers");
  sweep->add_option("--alphas", sweep_alphas, "Comma-separated scaling factors");
  sweep->add_option("--output-layers", sweep_range, "FIRST:LAST output-layer range");
  sweep->add_option("--table", sweep_table, "Write the TSV table here (default stderr)");

  RunConfig probe_rc;
  std::string probe_text;
  std::size_t top_k = 8;
  auto* probe = app.add_subcommand("probe", "Top-k next-token decoding of an embedding");
  add_model_options(probe, probe_rc);
  probe->add_option("--text", probe_text, "Sentence to probe")->required();
  probe->add_option("--top-k", top_k, "Number of tokens")->check(CLI::PositiveNumber);

  std::string diff_a, diff_b, diff_out;
  auto* diff = app.add_subcommand("diff", "Per-dataset rho change between two eval reports");
  diff->add_option("report_a", diff_a, "Baseline report")->required();
  diff->add_option("report_b", diff_b, "Compared report")->required();
  diff->add_option("--out", diff_out, "Output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_fixture(fx, fixture_out);
    if (*embed) return cmd_embed(embed_rc, embed_text, embed_input);
    if (*eval) return cmd_eval(eval_rc, !no_pairs, !no_cache);
    if (*sweep) {
      return cmd_sweep(sweep_rc, sweep_mode, sweep_layers, sweep_alphas, sweep_range, sweep_table);
    }
    if (*probe) return cmd_probe(probe_rc, probe_text, top_k);
    if (*diff) return cmd_diff(diff_a, diff_b, diff_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 1;
}
