#pragma once

// Weight container:
//   [u64 little-endian header length][UTF-8 JSON header][raw tensor bytes]
// The header maps tensor names to {"dtype", "shape", "data_offsets": [begin,
// end)}; offsets are relative to the first byte after the header. An optional
// "__metadata__" entry is ignored. Tensors are read as f32; f16 and bf16 are
// widened on load so that half-precision checkpoints remain usable.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cpembed/errors.hpp"
#include "json.hpp"

namespace cpembed {

struct TensorInfo {
  std::string dtype;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

namespace detail {

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline float f16_to_f32(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace detail

class TensorFile {
 public:
  explicit TensorFile(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open weight container " + path.string());
    unsigned char len_buf[8];
    if (!in.read(reinterpret_cast<char*>(len_buf), 8)) {
      throw LoadError("weight container truncated before header length");
    }
    const std::uint64_t header_len = detail::read_u64_le(len_buf);
    const auto file_size = std::filesystem::file_size(path);
    if (header_len > file_size - 8) {
      throw LoadError("weight container header length exceeds file size");
    }
    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
      throw LoadError("weight container truncated inside header");
    }
    data_start_ = 8 + header_len;
    data_size_ = file_size - data_start_;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(std::string("weight container header is not JSON: ") +
                      e.what());
    }
    if (!j.is_object()) throw LoadError("weight container header must be an object");
    for (auto& [name, entry] : j.items()) {
      if (name == "__metadata__") continue;
      TensorInfo info;
      try {
        info.dtype = entry.at("dtype").get<std::string>();
        info.shape = entry.at("shape").get<std::vector<std::size_t>>();
        auto offs = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offs.size() != 2) throw LoadError("bad data_offsets");
        info.begin = offs[0];
        info.end = offs[1];
      } catch (const nlohmann::json::exception& e) {
        throw LoadError("malformed header entry for tensor '" + name +
                        "': " + e.what());
      }
      const std::size_t width = dtype_width(info.dtype, name);
      if (info.end < info.begin || info.end > data_size_ ||
          info.end - info.begin != info.element_count() * width) {
        throw LoadError("tensor '" + name + "' byte range does not match shape");
      }
      tensors_.emplace(name, std::move(info));
    }
  }

  bool contains(const std::string& name) const {
    return tensors_.count(name) != 0;
  }

  const TensorInfo& info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError("tensor '" + name + "' absent");
    return it->second;
  }

  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }

  std::vector<float> read(const std::string& name) const {
    const TensorInfo& ti = info(name);
    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_start_ + ti.begin));
    std::vector<unsigned char> raw(ti.end - ti.begin);
    if (!in.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size()))) {
      throw LoadError("short read for tensor '" + name + "'");
    }
    const std::size_t n = ti.element_count();
    std::vector<float> out(n);
    if (ti.dtype == "f32" || ti.dtype == "F32") {
      for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = raw.data() + 4 * i;
        const std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
                                   std::uint32_t(p[2]) << 16 |
                                   std::uint32_t(p[3]) << 24;
        out[i] = std::bit_cast<float>(bits);
      }
    } else if (ti.dtype == "f16" || ti.dtype == "F16") {
      for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = raw.data() + 2 * i;
        out[i] = detail::f16_to_f32(static_cast<std::uint16_t>(p[0] | p[1] << 8));
      }
    } else {  // bf16
      for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = raw.data() + 2 * i;
        const std::uint32_t bits = (std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8)
                                   << 16;
        out[i] = std::bit_cast<float>(bits);
      }
    }
    return out;
  }

 private:
  static std::size_t dtype_width(const std::string& dtype,
                                 const std::string& name) {
    if (dtype == "f32" || dtype == "F32") return 4;
    if (dtype == "f16" || dtype == "F16" || dtype == "bf16" || dtype == "BF16")
      return 2;
    throw LoadError("tensor '" + name + "' has unsupported dtype " + dtype);
  }

  std::filesystem::path path_;
  std::uint64_t data_start_ = 0;
  std::uint64_t data_size_ = 0;
  std::map<std::string, TensorInfo> tensors_;
};

// Writes f32 tensors in the given order. The header is serialized from a
// sorted JSON object so identical inputs give identical bytes.
inline void write_tensor_file(const std::filesystem::path& path,
                              const std::vector<NamedTensor>& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t n = 1;
    for (auto s : t.shape) n *= s;
    if (n != t.data.size()) {
      throw ShapeError("tensor '" + t.name + "' data does not match shape");
    }
    const std::uint64_t bytes = 4ull * n;
    header[t.name] = {{"dtype", "f32"},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write weight container " + path.string());
  detail::write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      const unsigned char b[4] = {
          static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
          static_cast<unsigned char>(bits >> 16),
          static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!out) throw LoadError("write failed for " + path.string());
}

}  // namespace cpembed
