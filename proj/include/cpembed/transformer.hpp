#pragma once

// Decoder-only forward pass (pre-norm LLaMA block: RMSNorm, rotary multi-head
// causal attention, SwiGLU FFN) with a capture/replace hook at one site of
// one layer.
//
// Layer l (1-based) maps x^{l-1} to x^l in four stages:
//   values = concat_h softmax(q_h k_h^T / sqrt(d/H) + M) v_h     [attention_value]
//   mid    = x^{l-1} + values W_O
//   ffn    = W_down(silu(mid' W_gate) * (mid' W_up)), mid' = norm(mid)   [ffn_output]
//   x^l    = mid + ffn                                           [layer_output]
// forward_to stops right after the requested site is computed; resume_forward
// optionally overwrites one row of that intermediate and finishes the pass.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpembed/errors.hpp"
#include "cpembed/model.hpp"
#include "cpembed/numerics.hpp"

namespace cpembed {

enum class Site { attention_value, ffn_output, layer_output };

inline std::string to_string(Site s) {
  switch (s) {
    case Site::attention_value: return "attention_value";
    case Site::ffn_output: return "ffn_output";
    case Site::layer_output: return "layer_output";
  }
  return "?";
}

// Accepts both the long names and the CLI short forms attn/ffn/hidden.
inline Site parse_site(std::string_view s) {
  if (s == "attn" || s == "attention_value") return Site::attention_value;
  if (s == "ffn" || s == "ffn_output") return Site::ffn_output;
  if (s == "hidden" || s == "layer_output") return Site::layer_output;
  throw ConfigError("unknown site '" + std::string(s) + "'");
}

struct ValueCapture {
  int layer = 0;
  std::size_t position = 0;
  Site site = Site::attention_value;
  Vector vector;
};

// Counts transformer layers entered. A partial layer counts as one.
class ForwardCounter {
 public:
  void add(std::uint64_t n) { layers_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return layers_.load(std::memory_order_relaxed); }
  void reset() { layers_.store(0, std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> layers_{0};
};

struct ForwardState {
  std::vector<Matrix> hidden;  // x^0 .. x^{layer-1}
  int layer = 0;               // layer whose internals are held
  Site site = Site::attention_value;
  Matrix residual;             // ffn_output site: the post-attention stream
  Matrix partial;              // the site's intermediate, one row per position
  bool complete = false;       // true once resumed; nothing left to splice

  std::size_t n_tokens() const { return hidden.empty() ? 0 : hidden.front().rows(); }
};

struct PartialForward {
  ForwardState state;
  ValueCapture capture;
};

namespace detail {

inline void count(ForwardCounter* c, std::uint64_t n) {
  if (c) c->add(n);
}

inline void apply_rope(Matrix& m, int n_heads, int head_dim, double theta) {
  const int half = head_dim / 2;
  for (std::size_t pos = 0; pos < m.rows(); ++pos) {
    auto row = m.row(pos);
    for (int h = 0; h < n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h * head_dim);
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * i / head_dim);
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = row[off + i];
        const double b = row[off + i + half];
        row[off + i] = a * c - b * s;
        row[off + i + half] = b * c + a * s;
      }
    }
  }
}

inline void check_layer(const Model& m, int layer) {
  if (layer < 1 || layer > m.config.n_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " outside [1, " +
                      std::to_string(m.config.n_layers) + "]");
  }
}

}  // namespace detail

inline Matrix embed_tokens(const Model& m, std::span<const int> tokens) {
  if (tokens.empty()) throw DataError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(m.config.max_seq_len)) {
    throw DataError("sequence of " + std::to_string(tokens.size()) +
                    " tokens exceeds max_seq_len " + std::to_string(m.config.max_seq_len));
  }
  const auto d = static_cast<std::size_t>(m.config.hidden_dim);
  Matrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = tokens[i];
    if (id < 0 || id >= m.config.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocab");
    }
    auto src = m.weights.tok_embeddings.row(static_cast<std::size_t>(id));
    auto dst = x.row(i);
    for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<double>(src[c]);
  }
  return x;
}

// Concatenated per-head contextualized value vectors of `layer` (N x d).
// When `weights_out` is given it receives the H attention matrices A^{l,h}.
inline Matrix attention_values(const Model& m, int layer, const Matrix& x_prev,
                               std::vector<Matrix>* weights_out = nullptr) {
  const auto& cfg = m.config;
  const auto& lw = m.weights.layer(layer);
  const Matrix h = rms_norm_rows<float>(x_prev, lw.attn_norm, cfg.norm_eps);
  Matrix q = matmul(h, lw.w_q);
  Matrix k = matmul(h, lw.w_k);
  const Matrix v = matmul(h, lw.w_v);
  const int dh = cfg.head_dim();
  detail::apply_rope(q, cfg.n_heads, dh, cfg.rope_theta);
  detail::apply_rope(k, cfg.n_heads, dh, cfg.rope_theta);

  const std::size_t n = x_prev.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix out(n, static_cast<std::size_t>(cfg.hidden_dim), 0.0);
  if (weights_out) weights_out->assign(static_cast<std::size_t>(cfg.n_heads), Matrix(n, n, 0.0));

  for (int head = 0; head < cfg.n_heads; ++head) {
    const std::size_t off = static_cast<std::size_t>(head * dh);
    const std::size_t len = static_cast<std::size_t>(dh);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto qi = q.row(i).subspan(off, len);
      for (std::size_t j = 0; j < n; ++j) {
        scores[j] = j > i ? neg_inf : dot(qi, k.row(j).subspan(off, len)) * scale;
      }
      softmax_inplace(scores);
      auto out_row = out.row(i).subspan(off, len);
      for (std::size_t j = 0; j <= i; ++j) {
        auto vj = v.row(j).subspan(off, len);
        for (std::size_t c = 0; c < len; ++c) out_row[c] += scores[j] * vj[c];
      }
      if (weights_out) {
        std::copy(scores.begin(), scores.end(), (*weights_out)[head].row(i).begin());
      }
    }
  }
  return out;
}

inline Matrix ffn_block(const Model& m, int layer, const Matrix& mid) {
  const auto& lw = m.weights.layer(layer);
  const Matrix h = rms_norm_rows<float>(mid, lw.ffn_norm, m.config.norm_eps);
  Matrix gate = matmul(h, lw.w_gate);
  const Matrix up = matmul(h, lw.w_up);
  auto g = gate.flat();
  auto u = up.flat();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = g[i];
    g[i] = x / (1.0 + std::exp(-x)) * u[i];
  }
  return matmul(gate, lw.w_down);
}

// One full layer with no hooks.
inline Matrix run_layer(const Model& m, int layer, const Matrix& x_prev) {
  const Matrix mid = x_prev + matmul(attention_values(m, layer, x_prev), m.weights.layer(layer).w_o);
  return mid + ffn_block(m, layer, mid);
}

// Unhooked forward: returns x^0 .. x^{output_layer}.
inline std::vector<Matrix> forward_full(const Model& m, std::span<const int> tokens,
                                        int output_layer, ForwardCounter* counter = nullptr) {
  detail::check_layer(m, output_layer);
  std::vector<Matrix> hidden;
  hidden.reserve(static_cast<std::size_t>(output_layer) + 1);
  hidden.push_back(embed_tokens(m, tokens));
  for (int l = 1; l <= output_layer; ++l) {
    hidden.push_back(run_layer(m, l, hidden.back()));
    detail::count(counter, 1);
  }
  return hidden;
}

inline PartialForward forward_to(const Model& m, std::span<const int> tokens, int stop_layer,
                                 Site site, std::size_t position,
                                 ForwardCounter* counter = nullptr) {
  detail::check_layer(m, stop_layer);
  if (position >= tokens.size()) {
    throw PositionError("capture position " + std::to_string(position) +
                        " out of range for " + std::to_string(tokens.size()) + " tokens");
  }
  PartialForward out;
  ForwardState& st = out.state;
  st.layer = stop_layer;
  st.site = site;
  st.hidden.reserve(static_cast<std::size_t>(stop_layer));
  st.hidden.push_back(embed_tokens(m, tokens));
  for (int l = 1; l < stop_layer; ++l) {
    st.hidden.push_back(run_layer(m, l, st.hidden.back()));
    detail::count(counter, 1);
  }
  detail::count(counter, 1);

  const Matrix& x_prev = st.hidden.back();
  Matrix values = attention_values(m, stop_layer, x_prev);
  if (site == Site::attention_value) {
    st.partial = std::move(values);
  } else {
    Matrix mid = x_prev + matmul(values, m.weights.layer(stop_layer).w_o);
    Matrix ffn = ffn_block(m, stop_layer, mid);
    if (site == Site::ffn_output) {
      st.residual = std::move(mid);
      st.partial = std::move(ffn);
    } else {
      st.partial = mid + ffn;
    }
  }
  out.capture = ValueCapture{stop_layer, position, site, row_vector(st.partial, position)};
  return out;
}

// Splices `replacement` (if any) into the held intermediate, finishes the
// held layer and continues unmodified. Returns x^0 .. x^{output_layer}.
inline std::vector<Matrix> resume_forward_trace(const Model& m, ForwardState state,
                                                const std::optional<ValueCapture>& replacement,
                                                int output_layer,
                                                ForwardCounter* counter = nullptr) {
  if (state.complete) throw ConfigError("forward state already resumed");
  if (output_layer < state.layer || output_layer > m.config.n_layers) {
    throw ConfigError("output layer " + std::to_string(output_layer) + " outside [" +
                      std::to_string(state.layer) + ", " +
                      std::to_string(m.config.n_layers) + "]");
  }
  const int l = state.layer;
  if (replacement) {
    if (replacement->layer != l || replacement->site != state.site) {
      throw ConfigError("replacement targets layer " + std::to_string(replacement->layer) +
                        " " + to_string(replacement->site) + " but state holds layer " +
                        std::to_string(l) + " " + to_string(state.site));
    }
    if (replacement->position >= state.partial.rows()) {
      throw PositionError("replacement position out of range");
    }
    set_row(state.partial, replacement->position, replacement->vector);
  }

  Matrix x;
  switch (state.site) {
    case Site::attention_value: {
      Matrix mid = state.hidden.back() + matmul(state.partial, m.weights.layer(l).w_o);
      x = mid + ffn_block(m, l, mid);
      break;
    }
    case Site::ffn_output:
      x = state.residual + state.partial;
      break;
    case Site::layer_output:
      x = std::move(state.partial);
      break;
  }
  state.complete = true;
  std::vector<Matrix> hidden = std::move(state.hidden);
  hidden.push_back(std::move(x));
  for (int next = l + 1; next <= output_layer; ++next) {
    hidden.push_back(run_layer(m, next, hidden.back()));
    detail::count(counter, 1);
  }
  return hidden;
}

inline Matrix resume_forward(const Model& m, ForwardState state,
                             const std::optional<ValueCapture>& replacement, int output_layer,
                             ForwardCounter* counter = nullptr) {
  auto trace = resume_forward_trace(m, std::move(state), replacement, output_layer, counter);
  return std::move(trace.back());
}

// Final norm then unembedding; raw logits over the vocabulary.
inline Vector unembed_logits(const Model& m, const Vector& hidden_row) {
  if (hidden_row.dim() != static_cast<std::size_t>(m.config.hidden_dim)) {
    throw ShapeError("hidden row has dim " + std::to_string(hidden_row.dim()));
  }
  const Vector normed =
      rms_norm<float>(hidden_row.span(), std::span<const float>(m.weights.final_norm),
                      m.config.norm_eps);
  return vecmat(normed, m.weights.output);
}

}  // namespace cpembed
