#pragma once

// STS evaluation: cosine similarity of sentence embeddings scored against gold
// similarity with Spearman's rank correlation, plus hyperparameter sweeps.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpembed/errors.hpp"
#include "cpembed/numerics.hpp"
#include "cpembed/steering.hpp"
#include "json.hpp"

namespace cpembed {

struct STSRecord {
  std::string sentence_a;
  std::string sentence_b;
  double gold_score = 0.0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    return std::nullopt;
  }
  return v;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

// Rethrows `e` as the same error family with `prefix` prepended.
[[noreturn]] inline void rethrow_with_context(const std::exception& e, const std::string& prefix) {
  const std::string msg = prefix + e.what();
  if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
  if (dynamic_cast<const PositionError*>(&e)) throw PositionError(msg);
  if (dynamic_cast<const ModelError*>(&e)) throw ModelError(msg);
  if (dynamic_cast<const DegenerateError*>(&e)) throw DegenerateError(msg);
  if (dynamic_cast<const TokenizeError*>(&e)) throw TokenizeError(msg);
  throw DataError(msg);
}

}  // namespace detail

// Tab-separated sentence_a, sentence_b, score. A first line whose third
// column is not numeric is treated as a header. Errors cite 1-based file lines.
inline std::vector<STSRecord> parse_sts(std::istream& in) {
  std::vector<STSRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cols = detail::split_tabs(line);
    const auto where = "line " + std::to_string(lineno);
    if (cols.size() != 3) {
      throw ParseError(where + ": expected 3 tab-separated columns, found " +
                           std::to_string(cols.size()),
                       lineno);
    }
    const auto score = detail::parse_double(cols[2]);
    if (!score) {
      if (lineno == 1) continue;
      throw ParseError(where + ": score '" + std::string(cols[2]) + "' is not a number", lineno);
    }
    if (*score < 0.0 || *score > 5.0) {
      throw RangeError(where + ": score " + std::string(detail::trim(cols[2])) +
                       " outside [0, 5]");
    }
    if (cols[0].empty() || cols[1].empty()) throw ParseError(where + ": empty sentence", lineno);
    out.push_back({std::string(cols[0]), std::string(cols[1]), *score});
  }
  return out;
}

inline std::vector<STSRecord> load_sts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_sts(in);
}

// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

// Pearson correlation of average ranks.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman inputs differ in length");
  if (xs.size() < 2) throw DegenerateError("spearman needs at least 2 pairs");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mean = (n + 1.0) / 2.0;  // mean of average ranks is always (n+1)/2
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateError("spearman: zero rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Vector embed(const std::string& sentence) const = 0;
  // Identifies the embedding function for caching.
  virtual std::string cache_key() const = 0;
  virtual nlohmann::json config_snapshot() const { return {{"key", cache_key()}}; }
};

inline nlohmann::json to_json(const SteeringConfig& c) {
  return {{"layer", c.layer},           {"strategy", to_string(c.strategy)},
          {"alpha", c.alpha},           {"site", to_string(c.site)},
          {"output_layer", c.output_layer}, {"epsilon_zero", c.epsilon_zero}};
}

// Single template: cp_embed. Several templates: ck_embed with one shared
// auxiliary forward.
class CpEmbedder : public Embedder {
 public:
  CpEmbedder(const Model& model, std::vector<PromptTemplate> normals, PromptTemplate auxiliary,
             std::vector<SteeringConfig> cfgs, ForwardCounters* counters = nullptr)
      : model_(model),
        normals_(std::move(normals)),
        auxiliary_(std::move(auxiliary)),
        cfgs_(std::move(cfgs)),
        counters_(counters) {
    if (normals_.empty() || normals_.size() != cfgs_.size()) {
      throw ConfigError("CpEmbedder needs one config per normal template");
    }
    for (const auto& c : cfgs_) c.validate(model_.config.n_layers);
  }

  Vector embed(const std::string& sentence) const override {
    if (normals_.size() == 1) {
      return cp_embed(model_, sentence, normals_[0], auxiliary_, cfgs_[0], counters_).first;
    }
    return ck_embed(model_, sentence, normals_, auxiliary_, cfgs_, counters_);
  }

  std::string cache_key() const override {
    std::string key = config_snapshot().dump();
    for (const auto& t : normals_) key += '\x1f' + t.text();
    return key + '\x1f' + auxiliary_.text();
  }

  nlohmann::json config_snapshot() const override {
    nlohmann::json normals = nlohmann::json::array();
    nlohmann::json steering = nlohmann::json::array();
    for (std::size_t i = 0; i < normals_.size(); ++i) {
      normals.push_back(normals_[i].id());
      steering.push_back(to_json(cfgs_[i]));
    }
    return {{"normal_templates", normals},
            {"auxiliary_template", auxiliary_.id()},
            {"steering", steering}};
  }

  const std::vector<SteeringConfig>& configs() const { return cfgs_; }

 private:
  const Model& model_;
  std::vector<PromptTemplate> normals_;
  PromptTemplate auxiliary_;
  std::vector<SteeringConfig> cfgs_;
  ForwardCounters* counters_;
};

// Concurrent-safe cache keyed by (embedder key, sentence).
class EmbeddingCache {
 public:
  std::optional<Vector> find(const std::string& key, const std::string& sentence) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key + '\x1e' + sentence);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void insert(const std::string& key, const std::string& sentence, const Vector& v) {
    std::lock_guard lock(mu_);
    entries_.emplace(key + '\x1e' + sentence, v);
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, Vector> entries_;
};

struct EvalOptions {
  int jobs = 1;
  EmbeddingCache* cache = nullptr;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception (by
// index) is rethrown after all workers finish.
inline void parallel_for_each(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&](std::size_t start, std::size_t stride) {
    for (std::size_t i = start; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, jobs)), n);
  if (threads <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Embeds each distinct sentence once, in first-appearance order.
inline std::map<std::string, Vector> embed_unique(const Embedder& embedder,
                                                  const std::vector<STSRecord>& records,
                                                  const EvalOptions& opts) {
  std::vector<std::string> unique;
  std::map<std::string, std::size_t> first_pair;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto* s : {&records[i].sentence_a, &records[i].sentence_b}) {
      if (first_pair.emplace(*s, i).second) unique.push_back(*s);
    }
  }
  std::vector<Vector> vecs(unique.size());
  const std::string key = embedder.cache_key();
  parallel_for_each(unique.size(), opts.jobs, [&](std::size_t i) {
    if (opts.cache) {
      if (auto hit = opts.cache->find(key, unique[i])) {
        vecs[i] = std::move(*hit);
        return;
      }
    }
    try {
      vecs[i] = embedder.embed(unique[i]);
    } catch (const std::exception& e) {
      detail::rethrow_with_context(e, "pair " + std::to_string(first_pair.at(unique[i])) + ": ");
    }
    if (opts.cache) opts.cache->insert(key, unique[i], vecs[i]);
  });
  std::map<std::string, Vector> out;
  for (std::size_t i = 0; i < unique.size(); ++i) out.emplace(unique[i], std::move(vecs[i]));
  return out;
}

struct EvalReport {
  std::string dataset;
  std::size_t n_pairs = 0;
  std::optional<double> spearman_rho;
  std::string diagnostic;
  std::vector<std::pair<double, double>> per_pair;  // (predicted cosine, gold)
  nlohmann::json config;

  nlohmann::json to_json(bool include_pairs = true) const {
    nlohmann::json j = {{"dataset", dataset}, {"n", n_pairs}, {"config", config}};
    j["rho"] = spearman_rho ? nlohmann::json(*spearman_rho) : nlohmann::json(nullptr);
    if (!diagnostic.empty()) j["diagnostic"] = diagnostic;
    if (include_pairs) {
      nlohmann::json pairs = nlohmann::json::array();
      for (const auto& [p, g] : per_pair) pairs.push_back({p, g});
      j["pairs"] = pairs;
    }
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
      r.dataset = j.at("dataset").get<std::string>();
      r.n_pairs = j.at("n").get<std::size_t>();
      if (!j.at("rho").is_null()) r.spearman_rho = j.at("rho").get<double>();
      r.diagnostic = j.value("diagnostic", std::string());
      r.config = j.value("config", nlohmann::json::object());
      if (j.contains("pairs")) {
        for (const auto& p : j.at("pairs")) r.per_pair.emplace_back(p.at(0), p.at(1));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed report: ") + e.what());
    }
    return r;
  }
};

inline std::pair<std::optional<double>, std::string> rho_or_diagnostic(
    const std::vector<std::pair<double, double>>& pairs) {
  std::vector<double> pred, gold;
  for (const auto& [p, g] : pairs) {
    pred.push_back(p);
    gold.push_back(g);
  }
  try {
    return {spearman(pred, gold), {}};
  } catch (const DegenerateError& e) {
    return {std::nullopt, e.what()};
  }
}

inline EvalReport evaluate_sts(const Embedder& embedder, const std::vector<STSRecord>& records,
                               const std::string& dataset_id, const EvalOptions& opts = {}) {
  if (records.empty()) throw DataError("dataset '" + dataset_id + "' has no records");
  const auto vecs = embed_unique(embedder, records, opts);
  EvalReport r;
  r.dataset = dataset_id;
  r.n_pairs = records.size();
  r.config = embedder.config_snapshot();
  for (std::size_t i = 0; i < records.size(); ++i) {
    double cos = 0.0;
    try {
      cos = cosine_similarity(vecs.at(records[i].sentence_a), vecs.at(records[i].sentence_b));
    } catch (const std::exception& e) {
      detail::rethrow_with_context(e, "pair " + std::to_string(i) + ": ");
    }
    r.per_pair.emplace_back(cos, records[i].gold_score);
  }
  std::tie(r.spearman_rho, r.diagnostic) = rho_or_diagnostic(r.per_pair);
  return r;
}

struct SweepCell {
  int layer = 0;
  double alpha = 0.0;
  std::optional<double> rho;
  std::string error;
};

struct SweepGrid {
  std::vector<int> layers;
  std::vector<double> alphas;
  std::vector<SweepCell> cells;  // layer-major
  std::optional<std::size_t> best;

  nlohmann::json to_json() const {
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& c : cells) {
      nlohmann::json e = {{"layer", c.layer}, {"alpha", c.alpha}};
      e["rho"] = c.rho ? nlohmann::json(*c.rho) : nlohmann::json(nullptr);
      if (!c.error.empty()) e["error"] = c.error;
      cj.push_back(e);
    }
    nlohmann::json j = {{"layers", layers}, {"alphas", alphas}, {"cells", cj}};
    if (best) {
      j["best"] = {{"layer", cells[*best].layer},
                   {"alpha", cells[*best].alpha},
                   {"rho", *cells[*best].rho}};
    } else {
      j["best"] = nullptr;
    }
    return j;
  }

  // Rows are alphas, columns are layers; values are 100 * rho.
  std::string to_tsv() const {
    std::ostringstream os;
    os << "alpha";
    for (int l : layers) os << "\tlayer=" << l;
    os << '\n';
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      os << "alpha=" << alphas[a];
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& c = cells[l * alphas.size() + a];
        os << '\t';
        if (c.rho) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *c.rho);
          os << buf;
          if (best && *best == l * alphas.size() + a) os << '*';
        } else {
          os << "failed";
        }
      }
      os << '\n';
    }
    return os.str();
  }
};

using EmbedderFactory = std::function<std::unique_ptr<Embedder>(int layer, double alpha)>;

// Highest rho wins; ties go to the smaller layer, then the smaller alpha.
inline SweepGrid grid_search(const EmbedderFactory& factory, const std::vector<STSRecord>& dev,
                             const std::vector<int>& layers, const std::vector<double>& alphas,
                             const EvalOptions& opts = {}) {
  if (layers.empty() || alphas.empty()) throw ConfigError("grid_search needs non-empty grids");
  if (dev.empty()) throw DataError("grid_search needs dev records");
  SweepGrid g{layers, alphas, {}, std::nullopt};
  for (int l : layers) {
    for (double a : alphas) {
      SweepCell cell{l, a, std::nullopt, {}};
      try {
        const auto embedder = factory(l, a);
        const EvalReport r = evaluate_sts(*embedder, dev, "dev", opts);
        cell.rho = r.spearman_rho;
        if (!r.spearman_rho) cell.error = r.diagnostic;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      g.cells.push_back(std::move(cell));
    }
  }
  for (std::size_t i = 0; i < g.cells.size(); ++i) {
    const auto& c = g.cells[i];
    if (!c.rho) continue;
    if (!g.best) {
      g.best = i;
      continue;
    }
    const auto& b = g.cells[*g.best];
    const bool better = *c.rho > *b.rho ||
                        (*c.rho == *b.rho &&
                         (c.layer < b.layer || (c.layer == b.layer && c.alpha < b.alpha)));
    if (better) g.best = i;
  }
  return g;
}

// Sweep of one template over (layer, alpha) with everything else from `base`.
inline SweepGrid grid_search(const Model& m, const PromptTemplate& normal,
                             const PromptTemplate& auxiliary, const std::vector<STSRecord>& dev,
                             const std::vector<int>& layers, const std::vector<double>& alphas,
                             const SteeringConfig& base, const EvalOptions& opts = {},
                             ForwardCounters* counters = nullptr) {
  EmbedderFactory factory = [&](int layer, double alpha) -> std::unique_ptr<Embedder> {
    SteeringConfig c = base;
    c.layer = layer;
    c.alpha = alpha;
    return std::make_unique<CpEmbedder>(m, std::vector{normal}, auxiliary, std::vector{c},
                                        counters);
  };
  return grid_search(factory, dev, layers, alphas, opts);
}

struct LayerScore {
  int layer = 0;
  std::optional<double> rho;
  std::string diagnostic;
};

// One pipeline run per sentence up to `last_layer`, read out at every layer in
// [first_layer, last_layer]. Layers below the intervention layer see the
// unsteered stream.
inline std::vector<LayerScore> output_layer_sweep(const Model& m, const PromptTemplate& normal,
                                                  const PromptTemplate& auxiliary,
                                                  SteeringConfig cfg,
                                                  const std::vector<STSRecord>& records,
                                                  int first_layer, int last_layer,
                                                  const EvalOptions& opts = {},
                                                  ForwardCounters* counters = nullptr) {
  if (first_layer < 1 || last_layer < first_layer || last_layer > m.config.n_layers) {
    throw ConfigError("output layer range [" + std::to_string(first_layer) + ", " +
                      std::to_string(last_layer) + "] outside [1, " +
                      std::to_string(m.config.n_layers) + "]");
  }
  if (records.empty()) throw DataError("output_layer_sweep needs records");
  cfg.output_layer = last_layer;
  if (cfg.layer > last_layer) cfg.strategy = Strategy::none;
  if (cfg.strategy == Strategy::none) cfg.layer = std::min(cfg.layer, last_layer);

  std::vector<std::string> unique;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    for (const auto* s : {&r.sentence_a, &r.sentence_b}) {
      if (index.emplace(*s, unique.size()).second) unique.push_back(*s);
    }
  }
  // per sentence, the last-token row of every layer in range
  std::vector<std::vector<Vector>> rows(unique.size());
  parallel_for_each(unique.size(), opts.jobs, [&](std::size_t i) {
    const CpTrace t = cp_trace(m, unique[i], normal, auxiliary, cfg, counters);
    for (int l = first_layer; l <= last_layer; ++l) {
      const Matrix& h = t.hidden[static_cast<std::size_t>(l)];
      rows[i].push_back(row_vector(h, h.rows() - 1));
    }
  });

  std::vector<LayerScore> out;
  for (int l = first_layer; l <= last_layer; ++l) {
    const auto k = static_cast<std::size_t>(l - first_layer);
    std::vector<std::pair<double, double>> pairs;
    for (const auto& r : records) {
      pairs.emplace_back(cosine_similarity(rows[index.at(r.sentence_a)][k],
                                           rows[index.at(r.sentence_b)][k]),
                         r.gold_score);
    }
    auto [rho, diag] = rho_or_diagnostic(pairs);
    out.push_back({l, rho, diag});
  }
  return out;
}

// A set of reports from one evaluation run, plus its forward-layer counts.
struct EvalRun {
  std::vector<EvalReport> reports;
  std::uint64_t normal_layers = 0;
  std::uint64_t auxiliary_layers = 0;

  nlohmann::json to_json(bool include_pairs = true) const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : reports) rs.push_back(r.to_json(include_pairs));
    return {{"reports", rs},
            {"forward_layers",
             {{"normal", normal_layers},
              {"auxiliary", auxiliary_layers},
              {"total", normal_layers + auxiliary_layers}}}};
  }

  static EvalRun from_json(const nlohmann::json& j) {
    EvalRun run;
    try {
      if (j.contains("reports")) {
        for (const auto& r : j.at("reports")) run.reports.push_back(EvalReport::from_json(r));
      } else {
        run.reports.push_back(EvalReport::from_json(j));
      }
      if (j.contains("forward_layers")) {
        run.normal_layers = j["forward_layers"].value("normal", std::uint64_t{0});
        run.auxiliary_layers = j["forward_layers"].value("auxiliary", std::uint64_t{0});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed evaluation run: ") + e.what());
    }
    return run;
  }
};

struct DiffRow {
  std::string dataset;
  double rho_a = 0.0;
  double rho_b = 0.0;
  double delta = 0.0;  // rho_b - rho_a
};

// Per-dataset change from run `a` to run `b`. Both must cover the same
// datasets, each with a defined rho.
inline std::vector<DiffRow> diff_reports(const EvalRun& a, const EvalRun& b) {
  std::map<std::string, double> rb;
  for (const auto& r : b.reports) {
    if (!r.spearman_rho) throw DataError("report for '" + r.dataset + "' has no rho");
    rb[r.dataset] = *r.spearman_rho;
  }
  std::set<std::string> seen;
  std::vector<DiffRow> out;
  for (const auto& r : a.reports) {
    if (!r.spearman_rho) throw DataError("report for '" + r.dataset + "' has no rho");
    auto it = rb.find(r.dataset);
    if (it == rb.end()) {
      throw DataError("incompatible reports: dataset '" + r.dataset + "' missing from second run");
    }
    seen.insert(r.dataset);
    out.push_back({r.dataset, *r.spearman_rho, it->second, it->second - *r.spearman_rho});
  }
  if (seen.size() != rb.size()) {
    throw DataError("incompatible reports: second run has datasets the first lacks");
  }
  return out;
}

inline std::string render_diff(const std::vector<DiffRow>& rows) {
  std::ostringstream os;
  os << "dataset\trho_a\trho_b\tdelta\tchange\n";
  char buf[128];
  for (const auto& r : rows) {
    const char* mark = r.delta > 0 ? "up" : (r.delta < 0 ? "down" : "=");
    std::snprintf(buf, sizeof buf, "\t%.4f\t%.4f\t%+.4f\t%s\n", 100.0 * r.rho_a,
                  100.0 * r.rho_b, 100.0 * r.delta, mark);
    os << r.dataset << buf;
  }
  return os.str();
}

}  // namespace cpembed
