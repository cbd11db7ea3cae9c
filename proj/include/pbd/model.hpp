#pragma once

// Desk-scale decoder-only transformer with per-layer prefix key/value slots.
//
// Pre-LayerNorm blocks, learned absolute positions, GELU feed-forward and an
// untied output head. Forward and backward passes are written out by hand;
// all parameters live in two flat buffers, theta (base model) and phi (the
// prefix), so freezing, checksumming and optimizer state are plain vector
// operations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pbd/error.hpp"
#include "pbd/rng.hpp"
#include "pbd/text.hpp"

namespace pbd {

struct PrefixLMConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 256;
  std::size_t n_prefix = 0;  // virtual tokens per attention block

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(Vocab::kReserved)) {
      throw Error("config: vocab_size must exceed the reserved tokens");
    }
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_len == 0) {
      throw Error("config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw Error("config: d_model must be divisible by n_heads");
  }

  bool operator==(const PrefixLMConfig&) const = default;
};

// Named view of one tensor inside theta or phi.
struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool in_phi = false;
  std::size_t size() const { return rows * cols; }
};

// Offsets of every tensor. Matrices are row-major [in x out], y = x W.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    std::size_t prefix_k, prefix_v;  // offsets into phi
  };

  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_head = 0;
  std::vector<Layer> layers;
  std::size_t theta_size = 0;
  std::size_t phi_size = 0;
  std::vector<TensorInfo> tensors;

  explicit ParamLayout(const PrefixLMConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      tensors.push_back({name, theta_size, rows, cols, false});
      theta_size += rows * cols;
      return tensors.back().offset;
    };
    auto add_phi = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      tensors.push_back({name, phi_size, rows, cols, true});
      phi_size += rows * cols;
      return tensors.back().offset;
    };
    tok_emb = add("tok_emb", v, d);
    pos_emb = add("pos_emb", c.max_len, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1.gain", 1, d);
      L.ln1_b = add(p + "ln1.bias", 1, d);
      L.w_qkv = add(p + "attn.w_qkv", d, 3 * d);
      L.b_qkv = add(p + "attn.b_qkv", 1, 3 * d);
      L.w_o = add(p + "attn.w_out", d, d);
      L.b_o = add(p + "attn.b_out", 1, d);
      L.ln2_g = add(p + "ln2.gain", 1, d);
      L.ln2_b = add(p + "ln2.bias", 1, d);
      L.w_fc = add(p + "ff.w_in", d, f);
      L.b_fc = add(p + "ff.b_in", 1, f);
      L.w_proj = add(p + "ff.w_out", f, d);
      L.b_proj = add(p + "ff.b_out", 1, d);
      layers.push_back(L);
    }
    lnf_g = add("lnf.gain", 1, d);
    lnf_b = add("lnf.bias", 1, d);
    w_head = add("head.w", d, v);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "prefix" + std::to_string(l) + ".";
      layers[l].prefix_k = c.n_prefix ? add_phi(p + "key", c.n_prefix, d) : 0;
      layers[l].prefix_v = c.n_prefix ? add_phi(p + "value", c.n_prefix, d) : 0;
    }
  }
};

// Closed-form parameter counts, independent of ParamLayout.
inline std::size_t theta_count(const PrefixLMConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
  return c.vocab_size * d + c.max_len * d + c.n_layers * per_layer + 2 * d + d * c.vocab_size;
}
inline std::size_t phi_count(const PrefixLMConfig& c) { return 2 * c.n_layers * c.n_prefix * c.d_model; }

template <typename T>
struct PrefixLMParams {
  PrefixLMConfig config;
  std::vector<T> theta;
  std::vector<T> phi;

  bool operator==(const PrefixLMParams&) const = default;
};

// FNV-1a over the raw bytes of a parameter buffer.
template <typename T>
std::uint64_t checksum(const std::vector<T>& buf) {
  std::uint64_t h = 14695981039346656037ull;
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  for (std::size_t i = 0; i < buf.size() * sizeof(T); ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace init_detail {
template <typename T>
void fill_uniform(std::span<T> out, Rng& rng, double stddev) {
  const double a = stddev * std::sqrt(3.0);
  for (auto& x : out) x = static_cast<T>(rng.uniform(-a, a));
}
}  // namespace init_detail

// Uniform init with standard deviation 0.02 (residual output projections
// scaled by 1/sqrt(2L)); LayerNorm gains 1, biases 0; prefix slots 0.02.
template <typename T>
PrefixLMParams<T> init_params(const PrefixLMConfig& config, std::uint64_t seed) {
  config.validate();
  const ParamLayout layout(config);
  PrefixLMParams<T> p{config, std::vector<T>(layout.theta_size, T(0)),
                      std::vector<T>(layout.phi_size, T(0))};
  const Rng root(seed);
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (std::size_t i = 0; i < layout.tensors.size(); ++i) {
    const auto& t = layout.tensors[i];
    auto& buf = t.in_phi ? p.phi : p.theta;
    std::span<T> view(buf.data() + t.offset, t.size());
    Rng rng = root.derive(t.name);
    const bool is_gain = t.name.find(".gain") != std::string::npos;
    const bool is_bias = t.rows == 1 && !is_gain;
    if (is_gain) {
      std::fill(view.begin(), view.end(), T(1));
    } else if (is_bias) {
      std::fill(view.begin(), view.end(), T(0));
    } else {
      double sd = 0.02;
      if (t.name.ends_with("attn.w_out") || t.name.ends_with("ff.w_out")) sd *= resid_scale;
      init_detail::fill_uniform(view, rng, sd);
    }
  }
  return p;
}

// A pretrained base with m fresh prefix slots (initialized as in
// init_params); theta is copied unchanged.
template <typename T>
PrefixLMParams<T> attach_prefix(const PrefixLMParams<T>& base, std::size_t m, std::uint64_t seed) {
  PrefixLMConfig c = base.config;
  c.n_prefix = m;
  PrefixLMParams<T> p{c, base.theta, init_params<T>(c, seed).phi};
  if (p.theta.size() != ParamLayout(c).theta_size) throw Error("base parameters do not match config");
  return p;
}

// Attention probabilities of one forward pass: for each layer and head a
// T x (m + T) row-stochastic matrix; row i is real query position i, columns
// are the m prefix slots followed by the real key positions.
template <typename T>
struct AttentionTrace {
  std::size_t n_layers = 0, n_heads = 0, n_prefix = 0, length = 0;
  std::vector<T> probs;  // [layer][head][query][key]

  std::size_t cols() const { return n_prefix + length; }
  T at(std::size_t layer, std::size_t head, std::size_t query, std::size_t key_col) const {
    return probs[((layer * n_heads + head) * length + query) * cols() + key_col];
  }
  T& at(std::size_t layer, std::size_t head, std::size_t query, std::size_t key_col) {
    return probs[((layer * n_heads + head) * length + query) * cols() + key_col];
  }
};

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

// y[n x out] = x[n x in] W[in x out] (+ b)
template <typename T>
void matmul(const T* x, const T* w, const T* b, T* y, std::size_t n, std::size_t in,
            std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y + r * out;
    if (b) {
      std::copy(b, b + out, yr);
    } else {
      std::fill(yr, yr + out, T(0));
    }
    const T* xr = x + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      const T* wi = w + i * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xi * wi[j];
    }
  }
}

// dx[n x in] += dy[n x out] W^T ; dW += x^T dy ; db += colsum(dy)
template <typename T>
void matmul_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, std::size_t n,
                     std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy + r * out;
    if (dx) {
      T* dxr = dx + r * in;
      for (std::size_t i = 0; i < in; ++i) {
        const T* wi = w + i * out;
        T acc = 0;
        for (std::size_t j = 0; j < out; ++j) acc += dyr[j] * wi[j];
        dxr[i] += acc;
      }
    }
    if (dw) {
      const T* xr = x + r * in;
      for (std::size_t i = 0; i < in; ++i) {
        const T xi = xr[i];
        T* dwi = dw + i * out;
        for (std::size_t j = 0; j < out; ++j) dwi[j] += xi * dyr[j];
      }
    }
    if (db) {
      for (std::size_t j = 0; j < out; ++j) db[j] += dyr[j];
    }
  }
}

constexpr double kLnEps = 1e-5;

template <typename T>
void layernorm(const T* x, const T* g, const T* b, T* y, T* mean, T* rstd, std::size_t n,
               std::size_t d) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    T* yr = y + r * d;
    for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rs * g[i] + b[i];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

// dx += LN'(dy); dg, db accumulated when non-null
template <typename T>
void layernorm_backward(const T* x, const T* g, const T* mean, const T* rstd, const T* dy, T* dx,
                        T* dg, T* db, std::size_t n, std::size_t d) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * d;
    const T* dyr = dy + r * d;
    const T mu = mean[r], rs = rstd[r];
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const T xhat = (xr[i] - mu) * rs;
      const T dxhat = dyr[i] * g[i];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
      if (dg) dg[i] += dyr[i] * xhat;
      if (db) db[i] += dyr[i];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    T* dxr = dx + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      const T xhat = (xr[i] - mu) * rs;
      dxr[i] += rs * (dyr[i] * g[i] - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Forward / backward

// Activations of one forward pass, kept for the backward pass.
template <typename T>
struct ForwardCache {
  struct Layer {
    std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd,
        fc, act;
  };
  std::size_t length = 0;
  bool use_prefix = false;
  IdSeq ids;
  std::vector<Layer> layers;
  std::vector<T> x_final, lnf, lnf_mean, lnf_rstd, logits;
};

template <typename T>
struct Gradients {
  std::vector<T> theta;
  std::vector<T> phi;
  bool want_theta = true;
  bool want_phi = true;
};

template <typename T>
class Transformer {
 public:
  explicit Transformer(const PrefixLMConfig& config) : c_(config), layout_(config) {}

  const PrefixLMConfig& config() const { return c_; }
  const ParamLayout& layout() const { return layout_; }

  // Full forward pass over ids. Logits row t scores the token at t + 1.
  void forward(const PrefixLMParams<T>& p, const IdSeq& ids, bool use_prefix,
               ForwardCache<T>& cache) const {
    const std::size_t n = ids.size();
    if (n == 0) throw Error("forward: empty sequence");
    if (n > c_.max_len) {
      throw Error("sequence too long: " + std::to_string(n) + " > " + std::to_string(c_.max_len));
    }
    const std::size_t d = c_.d_model, f = c_.d_ff, v = c_.vocab_size, H = c_.n_heads;
    const std::size_t m = use_prefix ? c_.n_prefix : 0;
    const std::size_t hd = c_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* th = p.theta.data();

    cache.length = n;
    cache.use_prefix = use_prefix;
    cache.ids = ids;
    cache.layers.resize(c_.n_layers);

    std::vector<T> x(n * d);
    for (std::size_t t = 0; t < n; ++t) {
      const auto id = static_cast<std::size_t>(ids[t]);
      if (ids[t] < 0 || id >= v) throw Error("forward: token id out of range");
      const T* e = th + layout_.tok_emb + id * d;
      const T* pe = th + layout_.pos_emb + t * d;
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + pe[i];
    }

    for (std::size_t l = 0; l < c_.n_layers; ++l) {
      const auto& L = layout_.layers[l];
      auto& C = cache.layers[l];
      C.x_in = x;
      C.ln1.resize(n * d);
      C.ln1_mean.resize(n);
      C.ln1_rstd.resize(n);
      kernels::layernorm(x.data(), th + L.ln1_g, th + L.ln1_b, C.ln1.data(), C.ln1_mean.data(),
                         C.ln1_rstd.data(), n, d);
      C.qkv.resize(n * 3 * d);
      kernels::matmul(C.ln1.data(), th + L.w_qkv, th + L.b_qkv, C.qkv.data(), n, d, 3 * d);

      const std::size_t cols = m + n;
      C.probs.assign(H * n * cols, T(0));
      C.att.assign(n * d, T(0));
      const T* pk = m ? p.phi.data() + L.prefix_k : nullptr;
      const T* pv = m ? p.phi.data() + L.prefix_v : nullptr;
      std::vector<T> row(cols);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t ho = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
          const T* q = C.qkv.data() + i * 3 * d + ho;
          const std::size_t used = m + i + 1;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < used; ++j) {
            const T* k = j < m ? pk + j * d + ho : C.qkv.data() + (j - m) * 3 * d + d + ho;
            T s = 0;
            for (std::size_t e = 0; e < hd; ++e) s += q[e] * k[e];
            s *= scale;
            row[j] = s;
            mx = std::max(mx, s);
          }
          T sum = 0;
          for (std::size_t j = 0; j < used; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          T* prow = C.probs.data() + (h * n + i) * cols;
          T* out = C.att.data() + i * d + ho;
          for (std::size_t j = 0; j < used; ++j) {
            const T a = row[j] / sum;
            prow[j] = a;
            const T* vv = j < m ? pv + j * d + ho : C.qkv.data() + (j - m) * 3 * d + 2 * d + ho;
            for (std::size_t e = 0; e < hd; ++e) out[e] += a * vv[e];
          }
        }
      }
      std::vector<T> proj(n * d);
      kernels::matmul(C.att.data(), th + L.w_o, th + L.b_o, proj.data(), n, d, d);
      for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
      C.x_mid = x;

      C.ln2.resize(n * d);
      C.ln2_mean.resize(n);
      C.ln2_rstd.resize(n);
      kernels::layernorm(x.data(), th + L.ln2_g, th + L.ln2_b, C.ln2.data(), C.ln2_mean.data(),
                         C.ln2_rstd.data(), n, d);
      C.fc.resize(n * f);
      kernels::matmul(C.ln2.data(), th + L.w_fc, th + L.b_fc, C.fc.data(), n, d, f);
      C.act.resize(n * f);
      for (std::size_t i = 0; i < n * f; ++i) C.act[i] = kernels::gelu(C.fc[i]);
      kernels::matmul(C.act.data(), th + L.w_proj, th + L.b_proj, proj.data(), n, f, d);
      for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
    }

    cache.x_final = x;
    cache.lnf.resize(n * d);
    cache.lnf_mean.resize(n);
    cache.lnf_rstd.resize(n);
    kernels::layernorm(x.data(), th + layout_.lnf_g, th + layout_.lnf_b, cache.lnf.data(),
                       cache.lnf_mean.data(), cache.lnf_rstd.data(), n, d);
    cache.logits.resize(n * v);
    kernels::matmul(cache.lnf.data(), th + layout_.w_head, static_cast<const T*>(nullptr),
                    cache.logits.data(), n, d, v);
  }

  // Accumulates parameter gradients for upstream dlogits [n x V].
  void backward(const PrefixLMParams<T>& p, const ForwardCache<T>& cache, const T* dlogits,
                Gradients<T>& g) const {
    const std::size_t n = cache.length;
    const std::size_t d = c_.d_model, f = c_.d_ff, v = c_.vocab_size, H = c_.n_heads;
    const std::size_t m = cache.use_prefix ? c_.n_prefix : 0;
    const std::size_t hd = c_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* th = p.theta.data();
    T* gt = g.want_theta ? g.theta.data() : nullptr;
    auto gptr = [&](std::size_t off) { return gt ? gt + off : nullptr; };

    std::vector<T> dlnf(n * d, T(0));
    kernels::matmul_backward(cache.lnf.data(), th + layout_.w_head, dlogits, dlnf.data(),
                             gptr(layout_.w_head), static_cast<T*>(nullptr), n, d, v);
    std::vector<T> dx(n * d, T(0));
    kernels::layernorm_backward(cache.x_final.data(), th + layout_.lnf_g, cache.lnf_mean.data(),
                                cache.lnf_rstd.data(), dlnf.data(), dx.data(),
                                gptr(layout_.lnf_g), gptr(layout_.lnf_b), n, d);

    std::vector<T> dact(n * f), dln2(n * d), datt(n * d), dqkv(n * 3 * d), dln1(n * d);
    std::vector<T> dprow;
    for (std::size_t l = c_.n_layers; l-- > 0;) {
      const auto& L = layout_.layers[l];
      const auto& C = cache.layers[l];

      // feed-forward sublayer
      std::fill(dact.begin(), dact.end(), T(0));
      kernels::matmul_backward(C.act.data(), th + L.w_proj, dx.data(), dact.data(),
                               gptr(L.w_proj), gptr(L.b_proj), n, f, d);
      for (std::size_t i = 0; i < n * f; ++i) dact[i] *= kernels::gelu_grad(C.fc[i]);
      std::fill(dln2.begin(), dln2.end(), T(0));
      kernels::matmul_backward(C.ln2.data(), th + L.w_fc, dact.data(), dln2.data(), gptr(L.w_fc),
                               gptr(L.b_fc), n, d, f);
      kernels::layernorm_backward(C.x_mid.data(), th + L.ln2_g, C.ln2_mean.data(),
                                  C.ln2_rstd.data(), dln2.data(), dx.data(), gptr(L.ln2_g),
                                  gptr(L.ln2_b), n, d);

      // attention sublayer
      std::fill(datt.begin(), datt.end(), T(0));
      kernels::matmul_backward(C.att.data(), th + L.w_o, dx.data(), datt.data(), gptr(L.w_o),
                               gptr(L.b_o), n, d, d);
      std::fill(dqkv.begin(), dqkv.end(), T(0));
      const std::size_t cols = m + n;
      const T* pk = m ? p.phi.data() + L.prefix_k : nullptr;
      const T* pv = m ? p.phi.data() + L.prefix_v : nullptr;
      T* gpk = (m && g.want_phi) ? g.phi.data() + L.prefix_k : nullptr;
      T* gpv = (m && g.want_phi) ? g.phi.data() + L.prefix_v : nullptr;
      dprow.resize(cols);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t ho = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
          const T* prow = C.probs.data() + (h * n + i) * cols;
          const T* dout = datt.data() + i * d + ho;
          const std::size_t used = m + i + 1;
          T dot = 0;
          for (std::size_t j = 0; j < used; ++j) {
            const bool pre = j < m;
            const T* vv = pre ? pv + j * d + ho : C.qkv.data() + (j - m) * 3 * d + 2 * d + ho;
            T dp = 0;
            for (std::size_t e = 0; e < hd; ++e) dp += dout[e] * vv[e];
            dprow[j] = dp;
            dot += dp * prow[j];
            T* dv = pre ? gpv : dqkv.data() + (j - m) * 3 * d + 2 * d + ho;
            if (pre && dv) dv += j * d + ho;
            if (dv) {
              for (std::size_t e = 0; e < hd; ++e) dv[e] += prow[j] * dout[e];
            }
          }
          const T* q = C.qkv.data() + i * 3 * d + ho;
          T* dq = dqkv.data() + i * 3 * d + ho;
          for (std::size_t j = 0; j < used; ++j) {
            const T ds = prow[j] * (dprow[j] - dot) * scale;
            const bool pre = j < m;
            const T* k = pre ? pk + j * d + ho : C.qkv.data() + (j - m) * 3 * d + d + ho;
            for (std::size_t e = 0; e < hd; ++e) dq[e] += ds * k[e];
            T* dk = pre ? gpk : dqkv.data() + (j - m) * 3 * d + d + ho;
            if (pre && dk) dk += j * d + ho;
            if (dk) {
              for (std::size_t e = 0; e < hd; ++e) dk[e] += ds * q[e];
            }
          }
        }
      }
      // below the first layer's attention only embedding gradients remain
      const bool need_below = g.want_theta || l > 0;
      if (!need_below) break;
      std::fill(dln1.begin(), dln1.end(), T(0));
      kernels::matmul_backward(C.ln1.data(), th + L.w_qkv, dqkv.data(), dln1.data(),
                               gptr(L.w_qkv), gptr(L.b_qkv), n, d, 3 * d);
      kernels::layernorm_backward(C.x_in.data(), th + L.ln1_g, C.ln1_mean.data(),
                                  C.ln1_rstd.data(), dln1.data(), dx.data(), gptr(L.ln1_g),
                                  gptr(L.ln1_b), n, d);
    }

    if (gt) {
      for (std::size_t t = 0; t < n; ++t) {
        T* ge = gt + layout_.tok_emb + static_cast<std::size_t>(cache.ids[t]) * d;
        T* gp = gt + layout_.pos_emb + t * d;
        for (std::size_t i = 0; i < d; ++i) {
          ge[i] += dx[t * d + i];
          gp[i] += dx[t * d + i];
        }
      }
    }
  }

  AttentionTrace<T> trace(const ForwardCache<T>& cache) const {
    AttentionTrace<T> tr;
    tr.n_layers = c_.n_layers;
    tr.n_heads = c_.n_heads;
    tr.n_prefix = cache.use_prefix ? c_.n_prefix : 0;
    tr.length = cache.length;
    for (const auto& L : cache.layers) tr.probs.insert(tr.probs.end(), L.probs.begin(), L.probs.end());
    return tr;
  }

 private:
  PrefixLMConfig c_;
  ParamLayout layout_;
};

// ---------------------------------------------------------------------------
// Loss

// Mean negative log-likelihood over positions with mask[t] set; targets[t] is
// the token scored by logits row t. When dlogits is non-null it receives
// d(sum of masked NLL)/d(logits) * grad_scale.
template <typename T>
double masked_nll(std::span<const T> logits, std::size_t vocab, std::span<const int> targets,
                  std::span<const char> mask, T* dlogits = nullptr, T grad_scale = T(1),
                  std::size_t* count_out = nullptr) {
  const std::size_t n = targets.size();
  if (logits.size() != n * vocab || mask.size() != n) throw Error("nll_loss: shape mismatch");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const T* row = logits.data() + t * vocab;
    if (!mask[t]) {
      if (dlogits) std::fill(dlogits + t * vocab, dlogits + (t + 1) * vocab, T(0));
      continue;
    }
    const T mx = *std::max_element(row, row + vocab);
    double sum = 0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    const auto y = static_cast<std::size_t>(targets[t]);
    total += lse - static_cast<double>(row[y]);
    ++count;
    if (dlogits) {
      T* dr = dlogits + t * vocab;
      for (std::size_t j = 0; j < vocab; ++j) {
        dr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse)) * grad_scale;
      }
      dr[y] -= grad_scale;
    }
  }
  if (count_out) *count_out = count;
  if (count == 0) return 0.0;
  return total / static_cast<double>(count);
}

template <typename T>
double nll_loss(std::span<const T> logits, std::size_t vocab, std::span<const int> targets,
                std::span<const char> mask) {
  std::size_t count = 0;
  const double loss = masked_nll(logits, vocab, targets, mask, static_cast<T*>(nullptr), T(1), &count);
  if (count == 0) throw PreconditionError("nll_loss: all positions are masked");
  if (!std::isfinite(loss)) throw Error("nll_loss: non-finite loss");
  return loss;
}

// ---------------------------------------------------------------------------
// Encoding samples as training sequences

enum class LossMask { output_only, full };

inline std::string to_string(LossMask m) { return m == LossMask::output_only ? "output" : "full"; }

inline LossMask default_loss_mask(Task task) {
  return task == Task::summarization ? LossMask::output_only : LossMask::full;
}

// "BOS input SEP output EOS" split into model inputs (all but the last id)
// and per-position targets/mask.
struct EncodedPair {
  IdSeq inputs;
  IdSeq targets;
  std::vector<char> mask;
  std::size_t prompt_length = 0;  // BOS input SEP
};

inline EncodedPair encode_pair(const Vocab& vocab, const Sample& s, LossMask mode) {
  IdSeq ids{Vocab::kBos};
  for (int id : vocab.encode(tokenize_words(s.input_text))) ids.push_back(id);
  ids.push_back(Vocab::kSep);
  const std::size_t prompt = ids.size();
  for (int id : vocab.encode(tokenize_words(s.output_text))) ids.push_back(id);
  ids.push_back(Vocab::kEos);
  EncodedPair e;
  e.prompt_length = prompt;
  e.inputs.assign(ids.begin(), ids.end() - 1);
  e.targets.assign(ids.begin() + 1, ids.end());
  e.mask.resize(e.targets.size());
  for (std::size_t t = 0; t < e.targets.size(); ++t) {
    // targets[t] is ids[t + 1]; output tokens start at ids[prompt]
    e.mask[t] = mode == LossMask::full || t + 1 >= prompt;
  }
  return e;
}

inline IdSeq encode_prompt(const Vocab& vocab, const std::string& input_text) {
  IdSeq ids{Vocab::kBos};
  for (int id : vocab.encode(tokenize_words(input_text))) ids.push_back(id);
  ids.push_back(Vocab::kSep);
  return ids;
}

// ---------------------------------------------------------------------------
// Model bundle

template <typename T>
struct PrefixLM {
  Vocab vocab;
  PrefixLMParams<T> params;

  const PrefixLMConfig& config() const { return params.config; }
};

template <typename T>
struct ForwardResult {
  std::vector<T> logits;  // length x vocab
  AttentionTrace<T> trace;
};

template <typename T>
ForwardResult<T> forward(const PrefixLMParams<T>& params, const IdSeq& ids, bool use_prefix) {
  Transformer<T> net(params.config);
  ForwardCache<T> cache;
  net.forward(params, ids, use_prefix, cache);
  return {std::move(cache.logits), net.trace(cache)};
}

// ---------------------------------------------------------------------------
// Incremental greedy decoding

template <typename T>
class Decoder {
 public:
  explicit Decoder(const PrefixLMParams<T>& p, bool use_prefix = true)
      : p_(p), layout_(p.config), m_(use_prefix ? p.config.n_prefix : 0) {
    const auto& c = p_.config;
    keys_.assign(c.n_layers, {});
    values_.assign(c.n_layers, {});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      if (m_) {
        const T* pk = p_.phi.data() + layout_.layers[l].prefix_k;
        const T* pv = p_.phi.data() + layout_.layers[l].prefix_v;
        keys_[l].assign(pk, pk + m_ * c.d_model);
        values_[l].assign(pv, pv + m_ * c.d_model);
      }
    }
  }

  std::size_t length() const { return pos_; }

  // Feeds one token, returns logits for the next one.
  const std::vector<T>& step(int id) {
    const auto& c = p_.config;
    if (pos_ >= c.max_len) throw Error("sequence too long: exceeds max_len");
    const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size, H = c.n_heads, hd = c.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* th = p_.theta.data();
    std::vector<T> x(d), a(d), qkv(3 * d), att(d), proj(d), fc(f);
    T mean, rstd;
    const T* e = th + layout_.tok_emb + static_cast<std::size_t>(id) * d;
    const T* pe = th + layout_.pos_emb + pos_ * d;
    for (std::size_t i = 0; i < d; ++i) x[i] = e[i] + pe[i];
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& L = layout_.layers[l];
      kernels::layernorm(x.data(), th + L.ln1_g, th + L.ln1_b, a.data(), &mean, &rstd, 1, d);
      kernels::matmul(a.data(), th + L.w_qkv, th + L.b_qkv, qkv.data(), 1, d, 3 * d);
      keys_[l].insert(keys_[l].end(), qkv.begin() + static_cast<std::ptrdiff_t>(d),
                      qkv.begin() + static_cast<std::ptrdiff_t>(2 * d));
      values_[l].insert(values_[l].end(), qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), qkv.end());
      const std::size_t used = m_ + pos_ + 1;
      std::vector<T> row(used);
      std::fill(att.begin(), att.end(), T(0));
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t ho = h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < used; ++j) {
          const T* k = keys_[l].data() + j * d + ho;
          T s = 0;
          for (std::size_t q = 0; q < hd; ++q) s += qkv[ho + q] * k[q];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < used; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < used; ++j) {
          const T w = row[j] / sum;
          const T* vv = values_[l].data() + j * d + ho;
          for (std::size_t q = 0; q < hd; ++q) att[ho + q] += w * vv[q];
        }
      }
      kernels::matmul(att.data(), th + L.w_o, th + L.b_o, proj.data(), 1, d, d);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
      kernels::layernorm(x.data(), th + L.ln2_g, th + L.ln2_b, a.data(), &mean, &rstd, 1, d);
      kernels::matmul(a.data(), th + L.w_fc, th + L.b_fc, fc.data(), 1, d, f);
      for (auto& z : fc) z = kernels::gelu(z);
      kernels::matmul(fc.data(), th + L.w_proj, th + L.b_proj, proj.data(), 1, f, d);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    }
    kernels::layernorm(x.data(), th + layout_.lnf_g, th + layout_.lnf_b, a.data(), &mean, &rstd, 1, d);
    logits_.resize(v);
    kernels::matmul(a.data(), th + layout_.w_head, static_cast<const T*>(nullptr), logits_.data(), 1,
                    d, v);
    ++pos_;
    return logits_;
  }

 private:
  const PrefixLMParams<T>& p_;
  ParamLayout layout_;
  std::size_t m_;
  std::size_t pos_ = 0;
  std::vector<std::vector<T>> keys_, values_;
  std::vector<T> logits_;
};

// Greedy argmax continuation of a prompt ending in SEP. Stops at EOS (not
// returned), after max_new tokens, or at max_len. PAD, BOS and SEP are never
// emitted; ties go to the lowest id.
template <typename T>
IdSeq generate(const PrefixLMParams<T>& params, const IdSeq& prompt, std::size_t max_new,
               bool use_prefix = true) {
  if (prompt.empty() || prompt.back() != Vocab::kSep) {
    throw PreconditionError("generate: prompt must end with SEP");
  }
  if (prompt.size() > params.config.max_len) {
    throw Error("prompt too long: " + std::to_string(prompt.size()) + " > " +
                std::to_string(params.config.max_len));
  }
  Decoder<T> dec(params, use_prefix);
  const std::vector<T>* logits = nullptr;
  for (int id : prompt) logits = &dec.step(id);
  IdSeq out;
  while (out.size() < max_new) {
    int best = -1;
    for (std::size_t j = 0; j < logits->size(); ++j) {
      const int id = static_cast<int>(j);
      if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kSep) continue;
      if (best < 0 || (*logits)[j] > (*logits)[static_cast<std::size_t>(best)]) best = id;
    }
    if (best == Vocab::kEos) break;
    out.push_back(best);
    if (dec.length() >= params.config.max_len) break;
    logits = &dec.step(best);
  }
  return out;
}

template <typename T>
std::string generate_text(const PrefixLM<T>& model, const std::string& input_text,
                          std::size_t max_new) {
  IdSeq prompt = encode_prompt(model.vocab, input_text);
  return detokenize(model.vocab.decode(generate(model.params, prompt, max_new)));
}

}  // namespace pbd
