#pragma once

// Contrastive prompting: the last-token activation of a normal prompt at one
// site of layer l is replaced by its difference from the same activation of an
// auxiliary prompt (norm-adjusted), and the normal forward then continues to
// the output layer, whose last-token row is the sentence embedding.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cpembed/errors.hpp"
#include "cpembed/model.hpp"
#include "cpembed/numerics.hpp"
#include "cpembed/transformer.hpp"
#include "json.hpp"

namespace cpembed {

enum class PromptRole { normal, auxiliary };

inline constexpr std::string_view kTextSlot = "[TEXT]";

inline std::string to_string(PromptRole r) {
  return r == PromptRole::normal ? "normal" : "auxiliary";
}

inline PromptRole parse_role(std::string_view s) {
  if (s == "normal") return PromptRole::normal;
  if (s == "auxiliary") return PromptRole::auxiliary;
  throw ConfigError("unknown template role '" + std::string(s) + "'");
}

class PromptTemplate {
 public:
  PromptTemplate(std::string id, std::string text, PromptRole role)
      : id_(std::move(id)), text_(std::move(text)), role_(role) {
    const auto first = text_.find(kTextSlot);
    if (first == std::string::npos) {
      throw ConfigError("template '" + id_ + "' has no [TEXT] slot");
    }
    if (text_.find(kTextSlot, first + kTextSlot.size()) != std::string::npos) {
      throw ConfigError("template '" + id_ + "' has more than one [TEXT] slot");
    }
    if (text_.size() == kTextSlot.size()) {
      throw ConfigError("template '" + id_ + "' has no text around the slot");
    }
  }

  const std::string& id() const noexcept { return id_; }
  const std::string& text() const noexcept { return text_; }
  PromptRole role() const noexcept { return role_; }

  // Verbatim substitution; the sentence is not escaped.
  std::string fill(std::string_view sentence) const {
    std::string out = text_;
    out.replace(text_.find(kTextSlot), kTextSlot.size(), sentence);
    return out;
  }

 private:
  std::string id_;
  std::string text_;
  PromptRole role_;
};

struct PromptInstance {
  std::string template_id;
  std::string filled_text;
  std::vector<int> token_ids;
  PromptRole role = PromptRole::normal;

  std::size_t n_tokens() const { return token_ids.size(); }
};

inline PromptInstance make_prompt(const Model& m, const PromptTemplate& t,
                                  std::string_view sentence) {
  PromptInstance p{t.id(), t.fill(sentence), {}, t.role()};
  p.token_ids = m.tokenizer.encode(p.filled_text);
  if (p.token_ids.size() > static_cast<std::size_t>(m.config.max_seq_len)) {
    throw DataError("prompt '" + t.id() + "' is " + std::to_string(p.token_ids.size()) +
                    " tokens, exceeding max_seq_len " + std::to_string(m.config.max_seq_len));
  }
  return p;
}

namespace templates {

inline PromptTemplate prompt_eol() {
  return {"prompteol", "This sentence: \"[TEXT]\" means in one word:\"", PromptRole::normal};
}
inline PromptTemplate pretended_cot() {
  return {"cot", "After thinking step by step, this sentence: \"[TEXT]\" means in one word:\"",
          PromptRole::normal};
}
inline PromptTemplate knowledge() {
  return {"knowledge",
          "The essence of a sentence is often captured by its main subjects and actions, "
          "while descriptive terms provide additional but less central details. With this "
          "in mind , this sentence: \"[TEXT]\" means in one word:\"",
          PromptRole::normal};
}
inline PromptTemplate irrelevant() {
  return {"irrelevant",
          "The irrelevant information of this sentence: \"[TEXT]\" means in one word:\"",
          PromptRole::auxiliary};
}

inline std::vector<PromptTemplate> builtin() {
  return {
      prompt_eol(),
      pretended_cot(),
      knowledge(),
      irrelevant(),
      {"redundant", "The redundant information of this sentence: \"[TEXT]\" means in one word:\"",
       PromptRole::auxiliary},
      {"background", "The background of this sentence: \"[TEXT]\" means in one word:\"",
       PromptRole::auxiliary},
      {"descriptive", "The descriptive term of this sentence: \"[TEXT]\" means in one word:\"",
       PromptRole::auxiliary},
      {"sentiment", "The sentence: \"[TEXT]\" reflects the sentiment in one word:\"",
       PromptRole::auxiliary},
      {"entity",
       "The sentence: \"[TEXT]\" highlights the primary entity or relation in one word:\"",
       PromptRole::auxiliary},
  };
}

}  // namespace templates

class TemplateRegistry {
 public:
  TemplateRegistry() {
    for (auto& t : templates::builtin()) add(std::move(t));
  }

  // Later registrations replace earlier ones with the same id.
  void add(PromptTemplate t) {
    const std::string id = t.id();
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
      by_id_.emplace(id, std::move(t));
    } else {
      it->second = std::move(t);
    }
  }

  // JSON list of {id, role, text}.
  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open template file " + path.string());
    try {
      const auto j = nlohmann::json::parse(in);
      if (!j.is_array()) throw ConfigError("template file must hold a JSON list");
      for (const auto& e : j) {
        add(PromptTemplate(e.at("id").get<std::string>(), e.at("text").get<std::string>(),
                           parse_role(e.at("role").get<std::string>())));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed template file " + path.string() + ": " + e.what());
    }
  }

  const PromptTemplate& get(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ConfigError("unknown template '" + id + "'");
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, t] : by_id_) out.push_back(id);
    return out;
  }

 private:
  std::map<std::string, PromptTemplate> by_id_;
};

enum class Strategy { none, norm_scaling, norm_recovering };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::none: return "none";
    case Strategy::norm_scaling: return "ns";
    case Strategy::norm_recovering: return "nr";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "none") return Strategy::none;
  if (s == "ns" || s == "norm_scaling") return Strategy::norm_scaling;
  if (s == "nr" || s == "norm_recovering") return Strategy::norm_recovering;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

struct SteeringConfig {
  int layer = 1;
  Strategy strategy = Strategy::none;
  double alpha = 1.0;
  Site site = Site::attention_value;
  int output_layer = 1;
  double epsilon_zero = 1e-8;

  void validate(int n_layers) const {
    if (layer < 1 || layer > output_layer || output_layer > n_layers) {
      throw ConfigError("steering needs 1 <= layer (" + std::to_string(layer) +
                        ") <= output_layer (" + std::to_string(output_layer) +
                        ") <= L (" + std::to_string(n_layers) + ")");
    }
    if (strategy == Strategy::norm_scaling && !(alpha > 0)) {
      throw ConfigError("norm scaling needs alpha > 0");
    }
  }

  bool operator==(const SteeringConfig&) const = default;
};

// Tuned settings for the built-in normal prompts on 32-layer models. Smaller
// models fall back to output layer L-1 and clamp the intervention layer to it.
inline SteeringConfig preset_for(const std::string& template_id, int n_layers,
                                 Strategy strategy = Strategy::norm_scaling) {
  SteeringConfig c;
  c.strategy = strategy;
  const int fallback_output = std::max(1, n_layers - 1);
  const int deep_output = n_layers >= 27 ? 27 : fallback_output;
  if (template_id == "prompteol") {
    c.layer = 5;
    c.alpha = 2.0;
    c.output_layer = deep_output;
  } else if (template_id == "cot") {
    c.layer = 7;
    c.alpha = 3.0;
    c.output_layer = deep_output;
  } else if (template_id == "knowledge") {
    c.layer = 7;
    c.alpha = 3.0;
    c.output_layer = fallback_output;
  } else {
    c.layer = 5;
    c.alpha = 2.0;
    c.output_layer = deep_output;
  }
  c.layer = std::min(c.layer, c.output_layer);
  return c;
}

struct SteeringVector {
  Vector delta;
  Vector adjusted;
  double norm_before = 0.0;
  double norm_after = 0.0;
  bool fallback_applied = false;
};

inline Vector contrastive_vector(const Vector& v_nor, const Vector& v_aux) {
  if (v_nor.dim() != v_aux.dim()) {
    throw ShapeError("contrastive vectors differ in dim: " + std::to_string(v_nor.dim()) +
                     " vs " + std::to_string(v_aux.dim()));
  }
  return v_nor - v_aux;
}

inline Vector norm_scale(const Vector& delta, double alpha) {
  if (!(alpha > 0)) throw ConfigError("norm scaling needs alpha > 0");
  return alpha * delta;
}

// Rescales delta to the norm of v_nor. A delta shorter than eps leaves v_nor
// untouched and reports the fallback.
inline std::pair<Vector, bool> norm_recover(const Vector& delta, const Vector& v_nor,
                                            double eps = 1e-8) {
  if (delta.dim() != v_nor.dim()) throw ShapeError("norm_recover dimension mismatch");
  const double dn = l2_norm(delta);
  if (dn < eps) return {v_nor, true};
  return {(l2_norm(v_nor) / dn) * delta, false};
}

inline SteeringVector steer(const Vector& v_nor, const Vector& v_aux, const SteeringConfig& cfg) {
  SteeringVector sv;
  sv.delta = contrastive_vector(v_nor, v_aux);
  sv.norm_before = l2_norm(v_nor);
  switch (cfg.strategy) {
    case Strategy::none:
      sv.adjusted = v_nor;
      break;
    case Strategy::norm_scaling:
      sv.adjusted = norm_scale(sv.delta, cfg.alpha);
      break;
    case Strategy::norm_recovering: {
      auto [v, fell_back] = norm_recover(sv.delta, v_nor, cfg.epsilon_zero);
      sv.adjusted = std::move(v);
      sv.fallback_applied = fell_back;
      break;
    }
  }
  sv.norm_after = l2_norm(sv.adjusted);
  return sv;
}

struct ForwardCounters {
  ForwardCounter normal;
  ForwardCounter auxiliary;

  std::uint64_t total() const { return normal.value() + auxiliary.value(); }
};

struct CpTrace {
  std::vector<Matrix> hidden;  // x^0 .. x^{output_layer} of the normal prompt
  SteeringVector steering;

  Vector embedding() const { return row_vector(hidden.back(), hidden.back().rows() - 1); }
};

// Last-token capture of the auxiliary prompt at (cfg.layer, cfg.site).
inline Vector auxiliary_capture(const Model& m, const PromptInstance& aux,
                                const SteeringConfig& cfg, ForwardCounters* counters = nullptr) {
  return forward_to(m, aux.token_ids, cfg.layer, cfg.site, aux.n_tokens() - 1,
                    counters ? &counters->auxiliary : nullptr)
      .capture.vector;
}

// Normal-prompt half of the pipeline given an auxiliary capture.
inline CpTrace cp_trace_with_aux(const Model& m, const PromptInstance& normal,
                                 const std::optional<Vector>& v_aux, const SteeringConfig& cfg,
                                 ForwardCounters* counters = nullptr) {
  cfg.validate(m.config.n_layers);
  ForwardCounter* nc = counters ? &counters->normal : nullptr;
  CpTrace out;
  if (cfg.strategy == Strategy::none) {
    out.hidden = forward_full(m, normal.token_ids, cfg.output_layer, nc);
    return out;
  }
  if (!v_aux) throw ConfigError("steering strategy needs an auxiliary capture");
  const std::size_t last = normal.n_tokens() - 1;
  PartialForward pf = forward_to(m, normal.token_ids, cfg.layer, cfg.site, last, nc);
  out.steering = steer(pf.capture.vector, *v_aux, cfg);
  ValueCapture replacement{cfg.layer, last, cfg.site, out.steering.adjusted};
  out.hidden = resume_forward_trace(m, std::move(pf.state), replacement, cfg.output_layer, nc);
  return out;
}

inline CpTrace cp_trace(const Model& m, std::string_view text, const PromptTemplate& normal,
                        const PromptTemplate& auxiliary, const SteeringConfig& cfg,
                        ForwardCounters* counters = nullptr) {
  cfg.validate(m.config.n_layers);
  const PromptInstance nor = make_prompt(m, normal, text);
  std::optional<Vector> v_aux;
  if (cfg.strategy != Strategy::none) {
    v_aux = auxiliary_capture(m, make_prompt(m, auxiliary, text), cfg, counters);
  }
  return cp_trace_with_aux(m, nor, v_aux, cfg, counters);
}

inline std::pair<Vector, SteeringVector> cp_embed(const Model& m, std::string_view text,
                                                  const PromptTemplate& normal,
                                                  const PromptTemplate& auxiliary,
                                                  const SteeringConfig& cfg,
                                                  ForwardCounters* counters = nullptr) {
  CpTrace t = cp_trace(m, text, normal, auxiliary, cfg, counters);
  Vector e = t.embedding();
  return {std::move(e), std::move(t.steering)};
}

// Mean of per-template embeddings with one shared auxiliary forward. All
// steered configs must agree on layer and site.
inline Vector ck_embed(const Model& m, std::string_view text,
                       const std::vector<PromptTemplate>& normals,
                       const PromptTemplate& auxiliary, const std::vector<SteeringConfig>& cfgs,
                       ForwardCounters* counters = nullptr) {
  if (normals.empty()) throw ConfigError("ck_embed needs at least one normal template");
  if (cfgs.size() != normals.size()) {
    throw ConfigError("ck_embed needs one steering config per template");
  }
  const SteeringConfig* ref = nullptr;
  for (const auto& c : cfgs) {
    c.validate(m.config.n_layers);
    if (c.strategy == Strategy::none) continue;
    if (ref && (c.layer != ref->layer || c.site != ref->site)) {
      throw ConfigError("ck_embed configs disagree on intervention layer or site");
    }
    if (!ref) ref = &c;
  }
  std::optional<Vector> v_aux;
  if (ref) v_aux = auxiliary_capture(m, make_prompt(m, auxiliary, text), *ref, counters);

  Vector sum;
  for (std::size_t i = 0; i < normals.size(); ++i) {
    const CpTrace t =
        cp_trace_with_aux(m, make_prompt(m, normals[i], text), v_aux, cfgs[i], counters);
    const Vector e = t.embedding();
    sum = i == 0 ? e : sum + e;
  }
  return (1.0 / static_cast<double>(normals.size())) * sum;
}

}  // namespace cpembed
