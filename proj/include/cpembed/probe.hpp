#pragma once

// Next-token decoding probe: reads a sentence embedding through the final
// norm and the unembedding, softmaxes over the full vocabulary and reports
// the most probable tokens.

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cpembed/errors.hpp"
#include "cpembed/model.hpp"
#include "cpembed/numerics.hpp"
#include "cpembed/transformer.hpp"
#include "json.hpp"

namespace cpembed {

struct ProbeToken {
  int id = 0;
  std::string text;
  double probability = 0.0;
};

struct ProbeResult {
  std::vector<ProbeToken> tokens;
  std::size_t k = 0;
  nlohmann::json source;

  nlohmann::json to_json() const {
    nlohmann::json toks = nlohmann::json::array();
    for (const auto& t : tokens) toks.push_back({t.text, t.probability});
    nlohmann::json j = {{"tokens", toks}, {"k", k}};
    if (!source.is_null()) j["source"] = source;
    return j;
  }
};

inline Vector next_token_distribution(const Model& m, const Vector& embedding) {
  Vector logits = unembed_logits(m, embedding);
  softmax_inplace(logits.span());
  return logits;
}

// Sorted by probability descending, ties by token id ascending.
inline ProbeResult top_k_tokens(const Model& m, const Vector& embedding, std::size_t k) {
  const auto vocab = static_cast<std::size_t>(m.config.vocab_size);
  if (k < 1 || k > vocab) {
    throw ConfigError("top-k " + std::to_string(k) + " outside [1, " + std::to_string(vocab) + "]");
  }
  const Vector probs = next_token_distribution(m, embedding);
  std::vector<int> ids(vocab);
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](int a, int b) {
                      const double pa = probs[static_cast<std::size_t>(a)];
                      const double pb = probs[static_cast<std::size_t>(b)];
                      return pa > pb || (pa == pb && a < b);
                    });
  ProbeResult r;
  r.k = k;
  for (std::size_t i = 0; i < k; ++i) {
    const int id = ids[i];
    r.tokens.push_back({id, m.tokenizer.token_text(id), probs[static_cast<std::size_t>(id)]});
  }
  return r;
}

}  // namespace cpembed
