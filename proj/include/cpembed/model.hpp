#pragma once

// Model manifest, weight store and loader.
//
// Manifest (JSON): n_layers, hidden_dim, n_heads, vocab_size, norm_eps,
// max_seq_len, tokenizer {mode, files, ...}; optional ffn_dim, rope_theta,
// n_kv_heads, weights (container path relative to the manifest) and
// tensor_naming ("native" or "hf_llama").
//
// Native tensor names, with layers numbered from 1:
//   tok_embeddings [vocab x d]            norm [d]            output [d x vocab]
//   layers.<l>.attn_norm [d]              layers.<l>.ffn_norm [d]
//   layers.<l>.attn.w_q|w_k|w_v|w_o [d x d]
//   layers.<l>.ffn.w_gate|w_up [d x ffn]  layers.<l>.ffn.w_down [ffn x d]
// Matrices are stored input-major so that a row vector times the matrix is
// the projection. hf_llama naming reads HuggingFace LLaMA checkpoints and
// transposes their [out x in] linear weights.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpembed/errors.hpp"
#include "cpembed/numerics.hpp"
#include "cpembed/tensor_file.hpp"
#include "cpembed/tokenizer.hpp"
#include "json.hpp"

namespace cpembed {

struct TokenizerSpec {
  std::string mode = "byte_level";
  std::map<std::string, std::string> files;
  int n_special = 4;
  int bos_id = 1;
  std::string space_marker;
};

enum class TensorNaming { native, hf_llama };

struct ModelConfig {
  int n_layers = 0;
  int hidden_dim = 0;
  int n_heads = 0;
  int vocab_size = 0;
  double norm_eps = 1e-5;
  int max_seq_len = 0;
  int ffn_dim = 0;
  double rope_theta = 10000.0;
  TensorNaming naming = TensorNaming::native;
  TokenizerSpec tokenizer;
  std::string weights_file;

  int head_dim() const { return hidden_dim / n_heads; }

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (hidden_dim < 1 || n_heads < 1) {
      throw ConfigError("hidden_dim and n_heads must be positive");
    }
    if (hidden_dim % n_heads != 0) {
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
      throw ConfigError("head dimension must be even for rotary embedding");
    }
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
    if (!(norm_eps > 0)) throw ConfigError("norm_eps must be positive");
  }
};

struct LayerWeights {
  std::vector<float> attn_norm;
  WeightMatrix w_q, w_k, w_v, w_o;
  std::vector<float> ffn_norm;
  WeightMatrix w_gate, w_up, w_down;
};

struct WeightStore {
  WeightMatrix tok_embeddings;
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  WeightMatrix output;

  const LayerWeights& layer(int l) const { return layers.at(static_cast<std::size_t>(l - 1)); }
};

struct Model {
  ModelConfig config;
  WeightStore weights;
  Tokenizer tokenizer = Tokenizer::byte_level();
};

inline ModelConfig parse_manifest(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.ffn_dim = j.value("ffn_dim", 2 * c.hidden_dim);
    c.rope_theta = j.value("rope_theta", 10000.0);
    c.weights_file = j.value("weights", std::string("model.bin"));
    const std::string naming = j.value("tensor_naming", std::string("native"));
    if (naming == "native") c.naming = TensorNaming::native;
    else if (naming == "hf_llama") c.naming = TensorNaming::hf_llama;
    else throw ConfigError("unknown tensor_naming '" + naming + "'");
    if (j.contains("n_kv_heads") && j.at("n_kv_heads").get<int>() != c.n_heads) {
      throw ConfigError("grouped-query attention is not supported (n_kv_heads != n_heads)");
    }
    const auto& t = j.at("tokenizer");
    c.tokenizer.mode = t.at("mode").get<std::string>();
    if (t.contains("files")) {
      c.tokenizer.files = t.at("files").get<std::map<std::string, std::string>>();
    }
    c.tokenizer.n_special = t.value("n_special", 4);
    c.tokenizer.bos_id = t.value("bos_id", 1);
    c.tokenizer.space_marker = t.value("space_marker", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model manifest: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json manifest_json(const ModelConfig& c) {
  nlohmann::json tok = {{"mode", c.tokenizer.mode},
                        {"n_special", c.tokenizer.n_special},
                        {"bos_id", c.tokenizer.bos_id}};
  if (!c.tokenizer.files.empty()) tok["files"] = c.tokenizer.files;
  if (!c.tokenizer.space_marker.empty()) tok["space_marker"] = c.tokenizer.space_marker;
  return {{"n_layers", c.n_layers},
          {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},
          {"norm_eps", c.norm_eps},
          {"max_seq_len", c.max_seq_len},
          {"ffn_dim", c.ffn_dim},
          {"rope_theta", c.rope_theta},
          {"weights", c.weights_file},
          {"tensor_naming", c.naming == TensorNaming::native ? "native" : "hf_llama"},
          {"tokenizer", tok}};
}

enum class TensorKind { w_q, w_k, w_v, w_o, attn_norm, ffn_norm, w_gate, w_up, w_down };

inline std::string display_name(TensorKind k) {
  switch (k) {
    case TensorKind::w_q: return "W_Q";
    case TensorKind::w_k: return "W_K";
    case TensorKind::w_v: return "W_V";
    case TensorKind::w_o: return "W_O";
    case TensorKind::attn_norm: return "attn_norm";
    case TensorKind::ffn_norm: return "ffn_norm";
    case TensorKind::w_gate: return "W_gate";
    case TensorKind::w_up: return "W_up";
    case TensorKind::w_down: return "W_down";
  }
  return "?";
}

inline std::string native_layer_tensor(TensorKind k, int layer) {
  const std::string p = "layers." + std::to_string(layer) + ".";
  switch (k) {
    case TensorKind::w_q: return p + "attn.w_q";
    case TensorKind::w_k: return p + "attn.w_k";
    case TensorKind::w_v: return p + "attn.w_v";
    case TensorKind::w_o: return p + "attn.w_o";
    case TensorKind::attn_norm: return p + "attn_norm";
    case TensorKind::ffn_norm: return p + "ffn_norm";
    case TensorKind::w_gate: return p + "ffn.w_gate";
    case TensorKind::w_up: return p + "ffn.w_up";
    case TensorKind::w_down: return p + "ffn.w_down";
  }
  return {};
}

inline std::string hf_layer_tensor(TensorKind k, int layer) {
  const std::string p = "model.layers." + std::to_string(layer - 1) + ".";
  switch (k) {
    case TensorKind::w_q: return p + "self_attn.q_proj.weight";
    case TensorKind::w_k: return p + "self_attn.k_proj.weight";
    case TensorKind::w_v: return p + "self_attn.v_proj.weight";
    case TensorKind::w_o: return p + "self_attn.o_proj.weight";
    case TensorKind::attn_norm: return p + "input_layernorm.weight";
    case TensorKind::ffn_norm: return p + "post_attention_layernorm.weight";
    case TensorKind::w_gate: return p + "mlp.gate_proj.weight";
    case TensorKind::w_up: return p + "mlp.up_proj.weight";
    case TensorKind::w_down: return p + "mlp.down_proj.weight";
  }
  return {};
}

namespace detail {

class WeightReader {
 public:
  WeightReader(const TensorFile& file, const ModelConfig& cfg) : file_(file), cfg_(cfg) {}

  // `rows x cols` is the in-memory (input-major) shape.
  WeightMatrix matrix(const std::string& name, const std::string& label,
                      std::size_t rows, std::size_t cols, bool transposed) const {
    auto data = fetch(name, label);
    const auto& shape = file_.info(name).shape;
    const std::vector<std::size_t> want =
        transposed ? std::vector<std::size_t>{cols, rows} : std::vector<std::size_t>{rows, cols};
    if (shape != want) throw LoadError(label + " has shape mismatch (tensor '" + name + "')");
    if (!transposed) return WeightMatrix(rows, cols, std::move(data));
    WeightMatrix m(rows, cols);
    for (std::size_t r = 0; r < cols; ++r) {
      for (std::size_t c = 0; c < rows; ++c) m(c, r) = data[r * rows + c];
    }
    return m;
  }

  std::vector<float> gain(const std::string& name, const std::string& label) const {
    auto data = fetch(name, label);
    if (file_.info(name).shape != std::vector<std::size_t>{std::size_t(cfg_.hidden_dim)}) {
      throw LoadError(label + " has shape mismatch (tensor '" + name + "')");
    }
    return data;
  }

  bool has(const std::string& name) const { return file_.contains(name); }

 private:
  std::vector<float> fetch(const std::string& name, const std::string& label) const {
    if (!file_.contains(name)) throw LoadError(label + " absent (tensor '" + name + "')");
    auto data = file_.read(name);
    if (!all_finite<float>(data)) {
      throw LoadError("non-finite entry in tensor '" + name + "'");
    }
    return data;
  }

  const TensorFile& file_;
  const ModelConfig& cfg_;
};

inline Tokenizer make_tokenizer(const ModelConfig& cfg, const std::filesystem::path& base) {
  const auto& ts = cfg.tokenizer;
  Tokenizer tok = Tokenizer::byte_level();
  if (ts.mode == "byte_level") {
    tok = Tokenizer::byte_level(ts.n_special, ts.bos_id);
  } else if (ts.mode == "bpe") {
    auto vocab = ts.files.find("vocab");
    auto merges = ts.files.find("merges");
    if (vocab == ts.files.end() || merges == ts.files.end()) {
      throw ConfigError("bpe tokenizer needs files.vocab and files.merges");
    }
    tok = Tokenizer::load_bpe(base / vocab->second, base / merges->second, ts.bos_id,
                              ts.space_marker);
  } else {
    throw ConfigError("unknown tokenizer mode '" + ts.mode + "'");
  }
  if (tok.min_vocab_size() > static_cast<std::size_t>(cfg.vocab_size)) {
    throw ConfigError("tokenizer emits ids beyond vocab_size " + std::to_string(cfg.vocab_size));
  }
  return tok;
}

}  // namespace detail

inline WeightStore load_weights(const ModelConfig& cfg, const std::filesystem::path& weights_path) {
  const TensorFile file(weights_path);
  const detail::WeightReader rd(file, cfg);
  const auto d = static_cast<std::size_t>(cfg.hidden_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto f = static_cast<std::size_t>(cfg.ffn_dim);
  const bool hf = cfg.naming == TensorNaming::hf_llama;

  WeightStore w;
  w.tok_embeddings = rd.matrix(hf ? "model.embed_tokens.weight" : "tok_embeddings",
                               "token embeddings", v, d, false);
  for (int l = 1; l <= cfg.n_layers; ++l) {
    auto name = [&](TensorKind k) { return hf ? hf_layer_tensor(k, l) : native_layer_tensor(k, l); };
    auto label = [&](TensorKind k) { return display_name(k) + " layer " + std::to_string(l); };
    auto mat = [&](TensorKind k, std::size_t rows, std::size_t cols) {
      return rd.matrix(name(k), label(k), rows, cols, hf);
    };
    LayerWeights lw;
    lw.attn_norm = rd.gain(name(TensorKind::attn_norm), label(TensorKind::attn_norm));
    lw.w_q = mat(TensorKind::w_q, d, d);
    lw.w_k = mat(TensorKind::w_k, d, d);
    lw.w_v = mat(TensorKind::w_v, d, d);
    lw.w_o = mat(TensorKind::w_o, d, d);
    lw.ffn_norm = rd.gain(name(TensorKind::ffn_norm), label(TensorKind::ffn_norm));
    lw.w_gate = mat(TensorKind::w_gate, d, f);
    lw.w_up = mat(TensorKind::w_up, d, f);
    lw.w_down = mat(TensorKind::w_down, f, d);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = rd.gain(hf ? "model.norm.weight" : "norm", "final norm");
  if (hf) {
    const bool tied = !rd.has("lm_head.weight");
    w.output = rd.matrix(tied ? "model.embed_tokens.weight" : "lm_head.weight", "unembedding",
                         d, v, true);
  } else {
    w.output = rd.matrix("output", "unembedding", d, v, false);
  }
  return w;
}

inline ModelConfig load_manifest(const std::filesystem::path& config_path) {
  std::ifstream in(config_path);
  if (!in) throw LoadError("cannot open model manifest " + config_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("model manifest is not JSON: " + std::string(e.what()));
  }
  try {
    return parse_manifest(j);
  } catch (const ConfigError& e) {
    throw LoadError(config_path.string() + ": " + e.what());
  }
}

// An empty weights_path means the manifest's "weights" entry, resolved
// relative to the manifest's directory.
inline Model load_model(const std::filesystem::path& config_path,
                        const std::filesystem::path& weights_path = {}) {
  Model m;
  m.config = load_manifest(config_path);
  const auto base = config_path.parent_path();
  m.weights = load_weights(m.config, weights_path.empty() ? base / m.config.weights_file
                                                          : weights_path);
  try {
    m.tokenizer = detail::make_tokenizer(m.config, base);
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  }
  return m;
}

}  // namespace cpembed
