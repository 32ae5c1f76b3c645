#pragma once

// Straight-line reference for the embedding pipeline, used only as a test
// oracle. It reads the fixture files itself and shares no code with the
// engine headers: plain std::vector<double> buffers, naive loops, and a hook
// callback instead of resumable state.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace ref {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;  // one Vec per position

struct RefModel {
  int L = 0, d = 0, H = 0, V = 0, F = 0, n_special = 4, bos = 1;
  double eps = 0, theta = 10000;
  std::map<std::string, std::vector<double>> t;

  const std::vector<double>& get(const std::string& name) const { return t.at(name); }
  std::string lname(int l, const std::string& suffix) const {
    return "layers." + std::to_string(l) + "." + suffix;
  }
};

inline RefModel load(const std::string& manifest_path, const std::string& bin_path) {
  RefModel m;
  std::ifstream mf(manifest_path);
  const auto j = nlohmann::json::parse(mf);
  m.L = j["n_layers"];
  m.d = j["hidden_dim"];
  m.H = j["n_heads"];
  m.V = j["vocab_size"];
  m.F = j["ffn_dim"];
  m.eps = j["norm_eps"];
  m.theta = j["rope_theta"];
  m.n_special = j["tokenizer"]["n_special"];
  m.bos = j["tokenizer"]["bos_id"];

  std::ifstream in(bin_path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data(), 8);  // host is little-endian
  const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + long(hlen));
  for (auto& [name, e] : header.items()) {
    const std::uint64_t b = e["data_offsets"][0], end = e["data_offsets"][1];
    std::vector<double> vals;
    for (std::uint64_t p = 8 + hlen + b; p < 8 + hlen + end; p += 4) {
      float f;
      std::memcpy(&f, bytes.data() + p, 4);
      vals.push_back(f);
    }
    m.t[name] = vals;
  }
  return m;
}

inline std::vector<int> tokenize(const RefModel& m, const std::string& text) {
  std::vector<int> ids{m.bos};
  for (unsigned char c : text) ids.push_back(int(c) + m.n_special);
  return ids;
}

// x (rows of length in) times W stored row-major [in x out].
inline Rows project(const Rows& x, const std::vector<double>& w, int in, int out) {
  Rows y(x.size(), Vec(out, 0.0));
  for (size_t i = 0; i < x.size(); ++i)
    for (int c = 0; c < out; ++c) {
      double s = 0;
      for (int k = 0; k < in; ++k) s += x[i][k] * w[size_t(k) * out + c];
      y[i][c] = s;
    }
  return y;
}

inline Vec rmsnorm(const Vec& v, const std::vector<double>& g, double eps) {
  double ss = 0;
  for (double x : v) ss += x * x;
  const double r = 1.0 / std::sqrt(ss / v.size() + eps);
  Vec o(v.size());
  for (size_t i = 0; i < v.size(); ++i) o[i] = v[i] * r * g[i];
  return o;
}

inline Rows rmsnorm_rows(const Rows& x, const std::vector<double>& g, double eps) {
  Rows o;
  for (const auto& r : x) o.push_back(rmsnorm(r, g, eps));
  return o;
}

inline void rope(Rows& x, int H, int dh, double theta) {
  for (size_t p = 0; p < x.size(); ++p)
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < dh / 2; ++i) {
        const double ang = double(p) * std::pow(theta, -2.0 * i / dh);
        double& a = x[p][h * dh + i];
        double& b = x[p][h * dh + i + dh / 2];
        const double na = a * std::cos(ang) - b * std::sin(ang);
        const double nb = b * std::cos(ang) + a * std::sin(ang);
        a = na;
        b = nb;
      }
}

enum SiteId { kAttn = 0, kFfn = 1, kHidden = 2 };

// Called with (layer, site, rows) after that intermediate is computed; the
// callback may edit rows in place.
using Hook = std::function<void(int, int, Rows&)>;

// Returns hidden states x^0..x^{upto}.
inline std::vector<Rows> forward(const RefModel& m, const std::vector<int>& ids, int upto,
                                 const Hook& hook = {}) {
  const int d = m.d, dh = m.d / m.H;
  std::vector<Rows> hs;
  Rows x;
  for (int id : ids) {
    const auto& e = m.get("tok_embeddings");
    x.emplace_back(e.begin() + size_t(id) * d, e.begin() + size_t(id + 1) * d);
  }
  hs.push_back(x);
  const size_t n = ids.size();
  for (int l = 1; l <= upto; ++l) {
    Rows h = rmsnorm_rows(x, m.get(m.lname(l, "attn_norm")), m.eps);
    Rows q = project(h, m.get(m.lname(l, "attn.w_q")), d, d);
    Rows k = project(h, m.get(m.lname(l, "attn.w_k")), d, d);
    Rows v = project(h, m.get(m.lname(l, "attn.w_v")), d, d);
    rope(q, m.H, dh, m.theta);
    rope(k, m.H, dh, m.theta);
    Rows ctx(n, Vec(d, 0.0));
    for (int hd = 0; hd < m.H; ++hd)
      for (size_t i = 0; i < n; ++i) {
        Vec s(n, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j <= i; ++j) {
          double dotp = 0;
          for (int c = 0; c < dh; ++c) dotp += q[i][hd * dh + c] * k[j][hd * dh + c];
          s[j] = dotp / std::sqrt(double(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (size_t j = 0; j <= i; ++j) {
          const double a = std::exp(s[j] - mx) / z;
          for (int c = 0; c < dh; ++c) ctx[i][hd * dh + c] += a * v[j][hd * dh + c];
        }
      }
    if (hook) hook(l, kAttn, ctx);
    Rows o = project(ctx, m.get(m.lname(l, "attn.w_o")), d, d);
    Rows mid(n, Vec(d));
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) mid[i][c] = x[i][c] + o[i][c];
    Rows h2 = rmsnorm_rows(mid, m.get(m.lname(l, "ffn_norm")), m.eps);
    Rows g = project(h2, m.get(m.lname(l, "ffn.w_gate")), d, m.F);
    Rows u = project(h2, m.get(m.lname(l, "ffn.w_up")), d, m.F);
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < m.F; ++c) g[i][c] = g[i][c] / (1.0 + std::exp(-g[i][c])) * u[i][c];
    Rows f = project(g, m.get(m.lname(l, "ffn.w_down")), m.F, d);
    if (hook) hook(l, kFfn, f);
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) x[i][c] = mid[i][c] + f[i][c];
    if (hook) hook(l, kHidden, x);
    hs.push_back(x);
  }
  return hs;
}

inline double norm(const Vec& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

enum StrategyId { kNone = 0, kNS = 1, kNR = 2 };

struct CpSpec {
  int layer = 1, site = kAttn, strategy = kNone, output_layer = 1;
  double alpha = 1.0, eps = 1e-8;
};

inline std::string fill(const std::string& tmpl, const std::string& s) {
  const auto p = tmpl.find("[TEXT]");
  return tmpl.substr(0, p) + s + tmpl.substr(p + 6);
}

// Hidden states of the normal prompt under contrastive steering.
inline std::vector<Rows> cp_hidden(const RefModel& m, const std::string& text,
                                   const std::string& normal_tmpl, const std::string& aux_tmpl,
                                   const CpSpec& s) {
  const auto nor_ids = tokenize(m, fill(normal_tmpl, text));
  if (s.strategy == kNone) return forward(m, nor_ids, s.output_layer);
  Vec v_aux;
  forward(m, tokenize(m, fill(aux_tmpl, text)), s.layer, [&](int l, int site, Rows& r) {
    if (l == s.layer && site == s.site) v_aux = r.back();
  });
  return forward(m, nor_ids, s.output_layer, [&](int l, int site, Rows& r) {
    if (l != s.layer || site != s.site) return;
    Vec& v = r.back();
    Vec delta(v.size());
    for (size_t i = 0; i < v.size(); ++i) delta[i] = v[i] - v_aux[i];
    if (s.strategy == kNS) {
      for (size_t i = 0; i < v.size(); ++i) v[i] = s.alpha * delta[i];
    } else if (norm(delta) >= s.eps) {
      const double scale = norm(v) / norm(delta);
      for (size_t i = 0; i < v.size(); ++i) v[i] = delta[i] * scale;
    }
  });
}

inline Vec cp_embedding(const RefModel& m, const std::string& text, const std::string& normal_tmpl,
                        const std::string& aux_tmpl, const CpSpec& s) {
  return cp_hidden(m, text, normal_tmpl, aux_tmpl, s).back().back();
}

inline Vec logits(const RefModel& m, const Vec& row) {
  const Vec h = rmsnorm(row, m.get("norm"), m.eps);
  Vec out(m.V, 0.0);
  for (int c = 0; c < m.V; ++c)
    for (int k = 0; k < m.d; ++k) out[c] += h[k] * m.get("output")[size_t(k) * m.V + c];
  return out;
}

inline double cosine(const Vec& a, const Vec& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s / (norm(a) * norm(b));
}

}  // namespace ref
