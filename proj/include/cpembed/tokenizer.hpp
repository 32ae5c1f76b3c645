#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpembed/errors.hpp"
#include "json.hpp"

namespace cpembed {

enum class TokenizerMode { byte_level, bpe };

namespace detail {

// Splits valid UTF-8 into code-point substrings.
inline std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (c < 0x80) len = 1;
    else if ((c >> 5) == 0x6) len = 2;
    else if ((c >> 4) == 0xE) len = 3;
    else if ((c >> 3) == 0x1E) len = 4;
    else throw TokenizeError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    if (i + len > text.size()) throw TokenizeError("truncated UTF-8 sequence");
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) >> 6) != 0x2) {
        throw TokenizeError("invalid UTF-8 continuation byte at offset " +
                            std::to_string(i + k));
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  if (from.empty()) return;
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace detail

class Tokenizer {
 public:
  // Byte-level: ids [0, n_special) are specials, byte b maps to b + n_special.
  static Tokenizer byte_level(int n_special = 4, int bos_id = 1) {
    if (n_special < 1 || bos_id < 0 || bos_id >= n_special) {
      throw ConfigError("byte_level tokenizer needs bos_id < n_special");
    }
    Tokenizer t;
    t.mode_ = TokenizerMode::byte_level;
    t.n_special_ = n_special;
    t.bos_id_ = bos_id;
    return t;
  }

  // BPE over code points. Merge priority is the order of `merges`.
  static Tokenizer bpe(std::unordered_map<std::string, int> vocab,
                       const std::vector<std::pair<std::string, std::string>>& merges,
                       int bos_id, std::string space_marker = {}) {
    Tokenizer t;
    t.mode_ = TokenizerMode::bpe;
    t.bos_id_ = bos_id;
    t.space_marker_ = std::move(space_marker);
    for (std::size_t r = 0; r < merges.size(); ++r) {
      t.merge_rank_.emplace(merges[r].first + '\x1f' + merges[r].second,
                            static_cast<int>(r));
    }
    for (const auto& [tok, id] : vocab) {
      if (id < 0) throw ConfigError("negative BPE vocab id for '" + tok + "'");
      t.id_to_token_[id] = tok;
    }
    t.vocab_ = std::move(vocab);
    return t;
  }

  static Tokenizer load_bpe(const std::filesystem::path& vocab_path,
                            const std::filesystem::path& merges_path, int bos_id,
                            std::string space_marker = {}) {
    std::ifstream vin(vocab_path);
    if (!vin) throw LoadError("cannot open BPE vocab " + vocab_path.string());
    std::unordered_map<std::string, int> vocab;
    try {
      nlohmann::json j = nlohmann::json::parse(vin);
      for (auto& [k, v] : j.items()) vocab.emplace(k, v.get<int>());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("BPE vocab is not a token->id JSON map: " +
                      std::string(e.what()));
    }
    std::ifstream min(merges_path);
    if (!min) throw LoadError("cannot open BPE merges " + merges_path.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(min, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
          line.find(' ', sp + 1) != std::string::npos) {
        throw LoadError("malformed merge rule at line " + std::to_string(lineno));
      }
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return bpe(std::move(vocab), merges, bos_id, std::move(space_marker));
  }

  TokenizerMode mode() const noexcept { return mode_; }
  int bos_id() const noexcept { return bos_id_; }
  int n_special() const noexcept { return n_special_; }

  // Smallest vocab that can hold every id this tokenizer emits.
  std::size_t min_vocab_size() const {
    if (mode_ == TokenizerMode::byte_level) return 256 + n_special_;
    int max_id = bos_id_;
    for (const auto& [id, tok] : id_to_token_) max_id = std::max(max_id, id);
    return static_cast<std::size_t>(max_id) + 1;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids{bos_id_};
    if (mode_ == TokenizerMode::byte_level) {
      ids.reserve(text.size() + 1);
      for (char c : text) {
        ids.push_back(static_cast<unsigned char>(c) + n_special_);
      }
      return ids;
    }
    for (const auto& piece : merge_pieces(text)) {
      auto it = vocab_.find(piece);
      if (it == vocab_.end()) {
        throw TokenizeError("BPE token '" + piece + "' absent from vocab");
      }
      ids.push_back(it->second);
    }
    return ids;
  }

  // Specials are dropped; byte-level decode is the exact inverse of encode.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (mode_ == TokenizerMode::byte_level) {
        if (id >= n_special_ && id < n_special_ + 256) {
          out.push_back(static_cast<char>(id - n_special_));
        }
      } else if (id != bos_id_) {
        auto it = id_to_token_.find(id);
        if (it != id_to_token_.end()) out += it->second;
      }
    }
    if (mode_ == TokenizerMode::bpe) detail::replace_all(out, space_marker_, " ");
    return out;
  }

  // Printable form of a single id, used by the decoding probe.
  std::string token_text(int id) const {
    if (mode_ == TokenizerMode::byte_level) {
      if (id == bos_id_) return "<bos>";
      if (id < n_special_) return "<special:" + std::to_string(id) + ">";
      const int b = id - n_special_;
      if (b >= 0x20 && b < 0x7F) return std::string(1, static_cast<char>(b));
      char buf[16];
      std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned>(b) & 0xFFu);
      return buf;
    }
    auto it = id_to_token_.find(id);
    return it == id_to_token_.end() ? "<id:" + std::to_string(id) + ">"
                                    : it->second;
  }

  // Applies merge rules: each pass merges every left-to-right occurrence of
  // the adjacent pair with the lowest rank, until no ranked pair remains.
  std::vector<std::string> merge_pieces(std::string_view text) const {
    std::string prepared(text);
    if (!space_marker_.empty()) detail::replace_all(prepared, " ", space_marker_);
    std::vector<std::string> syms = detail::utf8_chars(prepared);
    while (syms.size() > 1) {
      int best_rank = -1;
      std::string best_key;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = merge_rank_.find(syms[i] + '\x1f' + syms[i + 1]);
        if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_key = it->first;
        }
      }
      if (best_rank < 0) break;
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] + '\x1f' + syms[i + 1] == best_key) {
          next.push_back(syms[i] + syms[i + 1]);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
    return syms;
  }

 private:
  Tokenizer() = default;

  TokenizerMode mode_ = TokenizerMode::byte_level;
  int n_special_ = 4;
  int bos_id_ = 1;
  std::string space_marker_;
  std::unordered_map<std::string, int> vocab_;
  std::map<int, std::string> id_to_token_;
  std::unordered_map<std::string, int> merge_rank_;
};

}  // namespace cpembed
