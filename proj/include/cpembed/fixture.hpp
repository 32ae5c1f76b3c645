#pragma once

// Seeded toy checkpoint. Tensors are drawn in the canonical order below,
// row-major, from one Xorshift64Star stream: matrices ~ U(-0.1, 0.1), norm
// gains ~ 1 + U(-0.1, 0.1), each value rounded to f32.
//   tok_embeddings, then per layer 1..L:
//     attn_norm, w_q, w_k, w_v, w_o, ffn_norm, w_gate, w_up, w_down,
//   then norm, output.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cpembed/model.hpp"
#include "cpembed/rng.hpp"
#include "cpembed/tensor_file.hpp"

namespace cpembed {

struct FixtureSpec {
  std::uint64_t seed = 42;
  int n_layers = 4;
  int hidden_dim = 32;
  int n_heads = 4;
  int vocab_size = 260;
  int ffn_dim = 0;  // 0 means 2 * hidden_dim
  int max_seq_len = 512;
  double norm_eps = 1e-5;
};

inline ModelConfig fixture_config(const FixtureSpec& spec) {
  ModelConfig c;
  c.n_layers = spec.n_layers;
  c.hidden_dim = spec.hidden_dim;
  c.n_heads = spec.n_heads;
  c.vocab_size = spec.vocab_size;
  c.ffn_dim = spec.ffn_dim > 0 ? spec.ffn_dim : 2 * spec.hidden_dim;
  c.max_seq_len = spec.max_seq_len;
  c.norm_eps = spec.norm_eps;
  c.weights_file = "model.bin";
  c.tokenizer.mode = "byte_level";
  c.tokenizer.n_special = 4;
  c.tokenizer.bos_id = 1;
  c.validate();
  if (c.vocab_size < 256 + c.tokenizer.n_special) {
    throw ConfigError("byte-level fixture needs vocab_size >= 260");
  }
  return c;
}

inline std::vector<NamedTensor> fixture_tensors(const FixtureSpec& spec) {
  const ModelConfig c = fixture_config(spec);
  Xorshift64Star rng(spec.seed);
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  const auto f = static_cast<std::size_t>(c.ffn_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);

  std::vector<NamedTensor> out;
  auto matrix = [&](std::string name, std::size_t rows, std::size_t cols) {
    NamedTensor t{std::move(name), {rows, cols}, std::vector<float>(rows * cols)};
    for (auto& x : t.data) x = static_cast<float>(rng.uniform(-0.1, 0.1));
    out.push_back(std::move(t));
  };
  auto gain = [&](std::string name) {
    NamedTensor t{std::move(name), {d}, std::vector<float>(d)};
    for (auto& x : t.data) x = static_cast<float>(1.0 + rng.uniform(-0.1, 0.1));
    out.push_back(std::move(t));
  };

  matrix("tok_embeddings", v, d);
  for (int l = 1; l <= c.n_layers; ++l) {
    gain(native_layer_tensor(TensorKind::attn_norm, l));
    matrix(native_layer_tensor(TensorKind::w_q, l), d, d);
    matrix(native_layer_tensor(TensorKind::w_k, l), d, d);
    matrix(native_layer_tensor(TensorKind::w_v, l), d, d);
    matrix(native_layer_tensor(TensorKind::w_o, l), d, d);
    gain(native_layer_tensor(TensorKind::ffn_norm, l));
    matrix(native_layer_tensor(TensorKind::w_gate, l), d, f);
    matrix(native_layer_tensor(TensorKind::w_up, l), d, f);
    matrix(native_layer_tensor(TensorKind::w_down, l), f, d);
  }
  gain("norm");
  matrix("output", d, v);
  return out;
}

// Writes <dir>/model.json and <dir>/model.bin; returns the manifest path.
inline std::filesystem::path write_fixture(const FixtureSpec& spec,
                                           const std::filesystem::path& dir) {
  const ModelConfig c = fixture_config(spec);
  std::filesystem::create_directories(dir);
  write_tensor_file(dir / c.weights_file, fixture_tensors(spec));
  const auto manifest = dir / "model.json";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + manifest.string());
  out << manifest_json(c).dump(2) << '\n';
  return manifest;
}

// In-memory fixture, bypassing the filesystem.
inline Model make_fixture_model(const FixtureSpec& spec) {
  Model m;
  m.config = fixture_config(spec);
  const auto tensors = fixture_tensors(spec);
  std::size_t i = 0;
  auto next_matrix = [&]() {
    const auto& t = tensors[i++];
    return WeightMatrix(t.shape[0], t.shape[1], t.data);
  };
  auto next_gain = [&]() { return tensors[i++].data; };
  m.weights.tok_embeddings = next_matrix();
  for (int l = 1; l <= m.config.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = next_gain();
    lw.w_q = next_matrix();
    lw.w_k = next_matrix();
    lw.w_v = next_matrix();
    lw.w_o = next_matrix();
    lw.ffn_norm = next_gain();
    lw.w_gate = next_matrix();
    lw.w_up = next_matrix();
    lw.w_down = next_matrix();
    m.weights.layers.push_back(std::move(lw));
  }
  m.weights.final_norm = next_gain();
  m.weights.output = next_matrix();
  m.tokenizer = Tokenizer::byte_level(m.config.tokenizer.n_special, m.config.tokenizer.bos_id);
  return m;
}

}  // namespace cpembed
