// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "btel/corpus.hpp"
#include "btel/errors.hpp"
#include "btel/rng.hpp"

namespace btel {

// Micro decoder-only causal LM: pre-norm transformer blocks, rotary
// position encoding, bias-free linears, GELU feed-forward, tied
// input/output embeddings. Parameters are binary32 in memory; every
// reduction accumulates in binary64, sequentially in index-ascending
// order, so results are reproducible bit-for-bit. The kernels are
// templated on the scalar type: tests instantiate the whole network in
// binary64 for finite-difference gradient oracles.

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int max_context = 64;
  int vocab_size = 0;
  std::uint64_t init_seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws InvalidConfig
};

struct TensorLayout {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Fixed tensor order (also the checkpoint serialization order):
// wte, then per layer {ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2},
// then lnf_g, lnf_b.
std::vector<TensorLayout> tensor_layout(const ModelConfig& cfg);
std::size_t param_count(const ModelConfig& cfg);

template <class Real>
struct ParamBuffer {
  std::vector<Real> data;
};

using LossMask = std::vector<std::uint8_t>;

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kRopeBase = 10000.0;

template <class Real>
inline void matvec(const Real* w, const Real* x, int out, int in, Real* y) {
  for (int o = 0; o < out; ++o) {
    const Real* row = w + static_cast<std::size_t>(o) * in;
    double acc = 0.0;
    for (int i = 0; i < in; ++i)
      acc += static_cast<double>(row[i]) * static_cast<double>(x[i]);
    y[o] = static_cast<Real>(acc);
  }
}

// dx[i] += sum_o w[o,i] * dy[o]
template <class Real>
inline void matvec_t_acc(const Real* w, const double* dy, int out, int in,
                         double* dx) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    const Real* row = w + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) dx[i] += static_cast<double>(row[i]) * g;
  }
}

// dw[o,i] += dy[o] * x[i]
template <class Real>
inline void outer_acc(const double* dy, const Real* x, int out, int in,
                      double* dw) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    double* row = dw + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) row[i] += g * static_cast<double>(x[i]);
  }
}

template <class Real>
inline void layernorm_row(const Real* x, const Real* g, const Real* b, int d,
                          Real* y, Real* mean_out, Real* rstd_out) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += static_cast<double>(x[i]);
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = static_cast<double>(x[i]) - mean;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < d; ++i)
    y[i] = static_cast<Real>((static_cast<double>(x[i]) - mean) * rstd *
                                 static_cast<double>(g[i]) +
                             static_cast<double>(b[i]));
  *mean_out = static_cast<Real>(mean);
  *rstd_out = static_cast<Real>(rstd);
}

template <class Real>
inline void layernorm_row_backward(const Real* x, const Real* g, Real mean,
                                   Real rstd, const double* dy, int d,
                                   double* dx_acc, double* dg, double* db) {
  const double mu = static_cast<double>(mean);
  const double rs = static_cast<double>(rstd);
  double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mu) * rs;
    const double dxhat = dy[i] * static_cast<double>(g[i]);
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  const double inv_d = 1.0 / d;
  for (int i = 0; i < d; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mu) * rs;
    const double dxhat = dy[i] * static_cast<double>(g[i]);
    dx_acc[i] += rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
  }
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
  return cdf + x * pdf;
}

// In-place rotary rotation at position `pos` over one head slice.
template <class Real>
inline void rope_rotate(Real* q, int head_dim, int pos, bool inverse) {
  for (int j = 0; j < head_dim / 2; ++j) {
    const double theta =
        std::pow(kRopeBase, -2.0 * j / static_cast<double>(head_dim));
    const double a = (inverse ? -1.0 : 1.0) * pos * theta;
    const double c = std::cos(a), s = std::sin(a);
    const double x0 = static_cast<double>(q[2 * j]);
    const double x1 = static_cast<double>(q[2 * j + 1]);
    q[2 * j] = static_cast<Real>(x0 * c - x1 * s);
    q[2 * j + 1] = static_cast<Real>(x0 * s + x1 * c);
  }
}

inline void rope_rotate_d(double* q, int head_dim, int pos, bool inverse) {
  rope_rotate<double>(q, head_dim, pos, inverse);
}

}  // namespace detail

// Forward-pass activation cache (everything backward needs).
template <class Real>
struct Activations {
  int seq_len = 0;
  struct Layer {
    std::vector<Real> x_in;   // [T, D] input to the block
    std::vector<Real> a;      // [T, D] post-ln1
    std::vector<Real> q, k, v;  // [T, D] (q, k post-rotation)
    std::vector<Real> att;    // [H, T, T]
    std::vector<Real> ctx;    // [T, D]
    std::vector<Real> x_mid;  // [T, D] after attention residual
    std::vector<Real> b;      // [T, D] post-ln2
    std::vector<Real> h_pre;  // [T, F]
    std::vector<Real> h_act;  // [T, F]
    std::vector<Real> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;  // [T]
  };
  std::vector<Layer> layers;
  std::vector<Real> x_final;  // [T, D] input to final layernorm
  std::vector<Real> y;        // [T, D] post final layernorm
  std::vector<Real> lnf_mean, lnf_rstd;  // [T]
  std::vector<Real> logits;   // [T, V]

  void resize(const ModelConfig& cfg, int t) {
    seq_len = t;
    const std::size_t td = static_cast<std::size_t>(t) * cfg.d_model;
    const std::size_t tf = static_cast<std::size_t>(t) * cfg.d_ff;
    const std::size_t htt =
        static_cast<std::size_t>(cfg.n_heads) * t * t;
    layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : layers) {
      l.x_in.assign(td, Real(0));
      l.a.assign(td, Real(0));
      l.q.assign(td, Real(0));
      l.k.assign(td, Real(0));
      l.v.assign(td, Real(0));
      l.att.assign(htt, Real(0));
      l.ctx.assign(td, Real(0));
      l.x_mid.assign(td, Real(0));
      l.b.assign(td, Real(0));
      l.h_pre.assign(tf, Real(0));
      l.h_act.assign(tf, Real(0));
      l.ln1_mean.assign(static_cast<std::size_t>(t), Real(0));
      l.ln1_rstd.assign(static_cast<std::size_t>(t), Real(0));
      l.ln2_mean.assign(static_cast<std::size_t>(t), Real(0));
      l.ln2_rstd.assign(static_cast<std::size_t>(t), Real(0));
    }
    x_final.assign(td, Real(0));
    y.assign(td, Real(0));
    lnf_mean.assign(static_cast<std::size_t>(t), Real(0));
    lnf_rstd.assign(static_cast<std::size_t>(t), Real(0));
    logits.assign(static_cast<std::size_t>(t) * cfg.vocab_size, Real(0));
  }
};

namespace detail {

template <class Real>
struct ParamView {
  const Real* wte;
  struct Layer {
    const Real *ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *ln2_g, *ln2_b, *w1, *w2;
  };
  std::vector<Layer> layers;
  const Real *lnf_g, *lnf_b;
};

template <class Real>
ParamView<Real> make_view(const ModelConfig& cfg, const Real* base) {
  ParamView<Real> v;
  const auto layout = tensor_layout(cfg);
  std::size_t idx = 0;
  v.wte = base + layout[idx++].offset;
  v.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : v.layers) {
    l.ln1_g = base + layout[idx++].offset;
    l.ln1_b = base + layout[idx++].offset;
    l.wq = base + layout[idx++].offset;
    l.wk = base + layout[idx++].offset;
    l.wv = base + layout[idx++].offset;
    l.wo = base + layout[idx++].offset;
    l.ln2_g = base + layout[idx++].offset;
    l.ln2_b = base + layout[idx++].offset;
    l.w1 = base + layout[idx++].offset;
    l.w2 = base + layout[idx++].offset;
  }
  v.lnf_g = base + layout[idx++].offset;
  v.lnf_b = base + layout[idx++].offset;
  return v;
}

template <class Real>
struct MutParamView {
  Real* wte;
  struct Layer {
    Real *ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *ln2_g, *ln2_b, *w1, *w2;
  };
  std::vector<Layer> layers;
  Real *lnf_g, *lnf_b;
};

template <class Real>
MutParamView<Real> make_mut_view(const ModelConfig& cfg, Real* base) {
  MutParamView<Real> v;
  const auto layout = tensor_layout(cfg);
  std::size_t idx = 0;
  v.wte = base + layout[idx++].offset;
  v.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : v.layers) {
    l.ln1_g = base + layout[idx++].offset;
    l.ln1_b = base + layout[idx++].offset;
    l.wq = base + layout[idx++].offset;
    l.wk = base + layout[idx++].offset;
    l.wv = base + layout[idx++].offset;
    l.wo = base + layout[idx++].offset;
    l.ln2_g = base + layout[idx++].offset;
    l.ln2_b = base + layout[idx++].offset;
    l.w1 = base + layout[idx++].offset;
    l.w2 = base + layout[idx++].offset;
  }
  v.lnf_g = base + layout[idx++].offset;
  v.lnf_b = base + layout[idx++].offset;
  return v;
}

}  // namespace detail

template <class Real>
void init_params(const ModelConfig& cfg, ParamBuffer<Real>& params) {
  cfg.validate();
  params.data.assign(param_count(cfg), Real(0));
  Rng rng(substream(cfg.init_seed, "model/init"));
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& t : tensor_layout(cfg)) {
    Real* p = params.data.data() + t.offset;
    if (t.name.find("ln") != std::string::npos) {
      const bool gain = t.name.back() == 'g';
      for (std::size_t i = 0; i < t.size(); ++i) p[i] = gain ? Real(1) : Real(0);
    } else {
      const bool resid = t.name.find(".wo") != std::string::npos ||
                         t.name.find(".w2") != std::string::npos;
      const double std_dev = resid ? resid_std : base_std;
      for (std::size_t i = 0; i < t.size(); ++i)
        p[i] = static_cast<Real>(rng.gaussian() * std_dev);
    }
  }
}

// Full-sequence forward; logits row t depends on tokens[0..t] only.
template <class Real>
void forward(const ModelConfig& cfg, const ParamBuffer<Real>& params,
             const TokenSeq& tokens, Activations<Real>& acts) {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw ShapeMismatch("forward on empty token sequence");
  if (t_len > cfg.max_context)
    throw ContextOverflow("sequence length " + std::to_string(t_len) +
                          " exceeds max_context " +
                          std::to_string(cfg.max_context));
  const int d = cfg.d_model, f = cfg.d_ff, hd = cfg.head_dim(),
            nh = cfg.n_heads, v = cfg.vocab_size;
  for (TokenId id : tokens)
    if (id < 0 || id >= v)
      throw ShapeMismatch("token id out of vocabulary range");
  acts.resize(cfg, t_len);
  const auto w = detail::make_view(cfg, params.data.data());

  std::vector<Real> x(static_cast<std::size_t>(t_len) * d);
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < d; ++i)
      x[static_cast<std::size_t>(t) * d + i] =
          w.wte[static_cast<std::size_t>(tokens[t]) * d + i];

  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& cache = acts.layers[static_cast<std::size_t>(li)];
    const auto& wl = w.layers[static_cast<std::size_t>(li)];
    cache.x_in = x;
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::layernorm_row(x.data() + row, wl.ln1_g, wl.ln1_b, d,
                            cache.a.data() + row,
                            &cache.ln1_mean[static_cast<std::size_t>(t)],
                            &cache.ln1_rstd[static_cast<std::size_t>(t)]);
      detail::matvec(wl.wq, cache.a.data() + row, d, d, cache.q.data() + row);
      detail::matvec(wl.wk, cache.a.data() + row, d, d, cache.k.data() + row);
      detail::matvec(wl.wv, cache.a.data() + row, d, d, cache.v.data() + row);
      for (int h = 0; h < nh; ++h) {
        detail::rope_rotate(cache.q.data() + row + h * hd, hd, t, false);
        detail::rope_rotate(cache.k.data() + row + h * hd, hd, t, false);
      }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> scores(static_cast<std::size_t>(t_len));
    for (int h = 0; h < nh; ++h) {
      for (int t = 0; t < t_len; ++t) {
        const Real* qr = cache.q.data() + static_cast<std::size_t>(t) * d + h * hd;
        double maxs = -1e300;
        for (int u = 0; u <= t; ++u) {
          const Real* kr =
              cache.k.data() + static_cast<std::size_t>(u) * d + h * hd;
          double acc = 0.0;
          for (int j = 0; j < hd; ++j)
            acc += static_cast<double>(qr[j]) * static_cast<double>(kr[j]);
          scores[static_cast<std::size_t>(u)] = acc * scale;
          if (scores[static_cast<std::size_t>(u)] > maxs)
            maxs = scores[static_cast<std::size_t>(u)];
        }
        double z = 0.0;
        for (int u = 0; u <= t; ++u) {
          scores[static_cast<std::size_t>(u)] =
              std::exp(scores[static_cast<std::size_t>(u)] - maxs);
          z += scores[static_cast<std::size_t>(u)];
        }
        Real* att_row =
            cache.att.data() +
            (static_cast<std::size_t>(h) * t_len + t) * t_len;
        for (int u = 0; u <= t; ++u)
          att_row[u] = static_cast<Real>(scores[static_cast<std::size_t>(u)] / z);
        Real* ctx_row = cache.ctx.data() + static_cast<std::size_t>(t) * d + h * hd;
        for (int j = 0; j < hd; ++j) {
          double acc = 0.0;
          for (int u = 0; u <= t; ++u)
            acc += (scores[static_cast<std::size_t>(u)] / z) *
                   static_cast<double>(
                       cache.v[static_cast<std::size_t>(u) * d + h * hd + j]);
          ctx_row[j] = static_cast<Real>(acc);
        }
      }
    }
    std::vector<Real> o(static_cast<std::size_t>(d));
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::matvec(wl.wo, cache.ctx.data() + row, d, d, o.data());
      for (int i = 0; i < d; ++i)
        x[row + i] = static_cast<Real>(static_cast<double>(x[row + i]) +
                                       static_cast<double>(o[i]));
    }
    cache.x_mid = x;
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      const std::size_t frow = static_cast<std::size_t>(t) * f;
      detail::layernorm_row(x.data() + row, wl.ln2_g, wl.ln2_b, d,
                            cache.b.data() + row,
                            &cache.ln2_mean[static_cast<std::size_t>(t)],
                            &cache.ln2_rstd[static_cast<std::size_t>(t)]);
      detail::matvec(wl.w1, cache.b.data() + row, f, d,
                     cache.h_pre.data() + frow);
      for (int i = 0; i < f; ++i)
        cache.h_act[frow + i] = static_cast<Real>(
            detail::gelu(static_cast<double>(cache.h_pre[frow + i])));
      std::vector<Real> m(static_cast<std::size_t>(d));
      detail::matvec(wl.w2, cache.h_act.data() + frow, d, f, m.data());
      for (int i = 0; i < d; ++i)
        x[row + i] = static_cast<Real>(static_cast<double>(x[row + i]) +
                                       static_cast<double>(m[i]));
    }
  }
  acts.x_final = x;
  for (int t = 0; t < t_len; ++t) {
    const std::size_t row = static_cast<std::size_t>(t) * d;
    detail::layernorm_row(x.data() + row, w.lnf_g, w.lnf_b, d,
                          acts.y.data() + row,
                          &acts.lnf_mean[static_cast<std::size_t>(t)],
                          &acts.lnf_rstd[static_cast<std::size_t>(t)]);
    detail::matvec(w.wte, acts.y.data() + row, v, d,
                   acts.logits.data() + static_cast<std::size_t>(t) * v);
  }
}

// Mean over unmasked positions of -log softmax(logits)[target]; gradient
// w.r.t. logits written to dlogits (zero at masked positions), scaled by
// `scale` (callers batching examples pass 1/batch_size).
template <class Real>
double masked_nll(const ModelConfig& cfg, const std::vector<Real>& logits,
                  const TokenSeq& targets, const LossMask& mask,
                  std::vector<double>* dlogits, double scale = 1.0) {
  const int v = cfg.vocab_size;
  const std::size_t t_len = targets.size();
  if (mask.size() != t_len)
    throw ShapeMismatch("mask length != target length");
  if (logits.size() != t_len * static_cast<std::size_t>(v))
    throw ShapeMismatch("logit matrix does not match targets x vocab");
  std::size_t n_masked = 0;
  for (auto m : mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) throw EmptyLossMask("no unmasked position in example");
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  double loss = 0.0;
  const double inv_m = 1.0 / static_cast<double>(n_masked);
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    const Real* row = logits.data() + t * static_cast<std::size_t>(v);
    const TokenId target = targets[t];
    if (target < 0 || target >= v)
      throw ShapeMismatch("target id out of vocabulary range");
    double maxl = -1e300;
    for (int i = 0; i < v; ++i)
      maxl = std::max(maxl, static_cast<double>(row[i]));
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += std::exp(static_cast<double>(row[i]) - maxl);
    const double logz = std::log(z) + maxl;
    loss += (logz - static_cast<double>(row[target])) * inv_m;
    if (dlogits) {
      double* drow = dlogits->data() + t * static_cast<std::size_t>(v);
      const double coef = inv_m * scale;
      for (int i = 0; i < v; ++i)
        drow[i] = std::exp(static_cast<double>(row[i]) - logz) * coef;
      drow[target] -= coef;
    }
  }
  return loss;
}

// Reverse pass. Accumulates into `grads` (callers zero it when starting a
// new batch); dlogits is [T, V] in binary64.
template <class Real>
void backward(const ModelConfig& cfg, const ParamBuffer<Real>& params,
              const Activations<Real>& acts, const TokenSeq& tokens,
              const std::vector<double>& dlogits, ParamBuffer<double>& grads) {
  const int t_len = acts.seq_len;
  const int d = cfg.d_model, f = cfg.d_ff, hd = cfg.head_dim(),
            nh = cfg.n_heads, v = cfg.vocab_size;
  if (grads.data.size() != param_count(cfg))
    throw ShapeMismatch("gradient buffer size mismatch");
  if (dlogits.size() != static_cast<std::size_t>(t_len) * v)
    throw ShapeMismatch("dlogits shape mismatch");
  const auto w = detail::make_view(cfg, params.data.data());
  const auto g = detail::make_mut_view(cfg, grads.data.data());

  const std::size_t td = static_cast<std::size_t>(t_len) * d;
  std::vector<double> dy(td, 0.0);
  std::vector<double> dx(td, 0.0);

  // Output head (tied embeddings): logits[t] = wte . y[t]
  for (int t = 0; t < t_len; ++t) {
    const double* dl = dlogits.data() + static_cast<std::size_t>(t) * v;
    const Real* yrow = acts.y.data() + static_cast<std::size_t>(t) * d;
    double* dyrow = dy.data() + static_cast<std::size_t>(t) * d;
    detail::matvec_t_acc(w.wte, dl, v, d, dyrow);
    detail::outer_acc(dl, yrow, v, d, g.wte);
  }
  // Final layernorm
  std::vector<double> dgf(static_cast<std::size_t>(d), 0.0),
      dbf(static_cast<std::size_t>(d), 0.0);
  for (int t = 0; t < t_len; ++t) {
    const std::size_t row = static_cast<std::size_t>(t) * d;
    detail::layernorm_row_backward(
        acts.x_final.data() + row, w.lnf_g,
        acts.lnf_mean[static_cast<std::size_t>(t)],
        acts.lnf_rstd[static_cast<std::size_t>(t)], dy.data() + row, d,
        dx.data() + row, dgf.data(), dbf.data());
  }
  for (int i = 0; i < d; ++i) {
    g.lnf_g[i] += dgf[static_cast<std::size_t>(i)];
    g.lnf_b[i] += dbf[static_cast<std::size_t>(i)];
  }

  std::vector<double> d_b(td, 0.0), d_hpre(static_cast<std::size_t>(t_len) * f, 0.0),
      d_hact(static_cast<std::size_t>(t_len) * f, 0.0), d_ctx(td, 0.0),
      d_q(td, 0.0), d_k(td, 0.0), d_v(td, 0.0), d_a(td, 0.0);
  std::vector<double> dg1(static_cast<std::size_t>(d)), db1(static_cast<std::size_t>(d)),
      dg2(static_cast<std::size_t>(d)), db2(static_cast<std::size_t>(d));
  std::vector<double> datt(static_cast<std::size_t>(t_len));

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& cache = acts.layers[static_cast<std::size_t>(li)];
    const auto& wl = w.layers[static_cast<std::size_t>(li)];
    const auto& gl = g.layers[static_cast<std::size_t>(li)];

    // dx currently holds the gradient w.r.t. the block output.
    std::fill(d_b.begin(), d_b.end(), 0.0);
    std::fill(d_hpre.begin(), d_hpre.end(), 0.0);
    std::fill(d_hact.begin(), d_hact.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      const std::size_t frow = static_cast<std::size_t>(t) * f;
      const double* dm = dx.data() + row;  // ffn branch grad == residual grad
      detail::matvec_t_acc(wl.w2, dm, d, f, d_hact.data() + frow);
      detail::outer_acc(dm, cache.h_act.data() + frow, d, f, gl.w2);
      for (int i = 0; i < f; ++i)
        d_hpre[frow + i] =
            d_hact[frow + i] *
            detail::gelu_grad(static_cast<double>(cache.h_pre[frow + i]));
      detail::matvec_t_acc(wl.w1, d_hpre.data() + frow, f, d, d_b.data() + row);
      detail::outer_acc(d_hpre.data() + frow, cache.b.data() + row, f, d, gl.w1);
    }
    std::fill(dg2.begin(), dg2.end(), 0.0);
    std::fill(db2.begin(), db2.end(), 0.0);
    // dx (residual skip) stays; ln2 backward adds into it.
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::layernorm_row_backward(
          cache.x_mid.data() + row, wl.ln2_g,
          cache.ln2_mean[static_cast<std::size_t>(t)],
          cache.ln2_rstd[static_cast<std::size_t>(t)], d_b.data() + row, d,
          dx.data() + row, dg2.data(), db2.data());
    }
    for (int i = 0; i < d; ++i) {
      gl.ln2_g[i] += dg2[static_cast<std::size_t>(i)];
      gl.ln2_b[i] += db2[static_cast<std::size_t>(i)];
    }

    // Attention branch: do = dx (gradient after attention residual).
    std::fill(d_ctx.begin(), d_ctx.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::matvec_t_acc(wl.wo, dx.data() + row, d, d, d_ctx.data() + row);
      detail::outer_acc(dx.data() + row, cache.ctx.data() + row, d, d, gl.wo);
    }
    std::fill(d_q.begin(), d_q.end(), 0.0);
    std::fill(d_k.begin(), d_k.end(), 0.0);
    std::fill(d_v.begin(), d_v.end(), 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < nh; ++h) {
      for (int t = 0; t < t_len; ++t) {
        const Real* att_row =
            cache.att.data() + (static_cast<std::size_t>(h) * t_len + t) * t_len;
        const double* dctx_row =
            d_ctx.data() + static_cast<std::size_t>(t) * d + h * hd;
        double dot = 0.0;
        for (int u = 0; u <= t; ++u) {
          double acc = 0.0;
          const Real* vrow =
              cache.v.data() + static_cast<std::size_t>(u) * d + h * hd;
          for (int j = 0; j < hd; ++j)
            acc += dctx_row[j] * static_cast<double>(vrow[j]);
          datt[static_cast<std::size_t>(u)] = acc;
          dot += acc * static_cast<double>(att_row[u]);
          double* dvrow = d_v.data() + static_cast<std::size_t>(u) * d + h * hd;
          const double a_tu = static_cast<double>(att_row[u]);
          for (int j = 0; j < hd; ++j) dvrow[j] += a_tu * dctx_row[j];
        }
        const Real* qrow =
            cache.q.data() + static_cast<std::size_t>(t) * d + h * hd;
        double* dqrow = d_q.data() + static_cast<std::size_t>(t) * d + h * hd;
        for (int u = 0; u <= t; ++u) {
          const double ds =
              static_cast<double>(att_row[u]) *
              (datt[static_cast<std::size_t>(u)] - dot) * scale;
          const Real* krow =
              cache.k.data() + static_cast<std::size_t>(u) * d + h * hd;
          double* dkrow = d_k.data() + static_cast<std::size_t>(u) * d + h * hd;
          for (int j = 0; j < hd; ++j) {
            dqrow[j] += ds * static_cast<double>(krow[j]);
            dkrow[j] += ds * static_cast<double>(qrow[j]);
          }
        }
      }
    }
    // Undo the rotary rotation on dq, dk.
    for (int t = 0; t < t_len; ++t)
      for (int h = 0; h < nh; ++h) {
        detail::rope_rotate_d(d_q.data() + static_cast<std::size_t>(t) * d + h * hd,
                              hd, t, true);
        detail::rope_rotate_d(d_k.data() + static_cast<std::size_t>(t) * d + h * hd,
                              hd, t, true);
      }
    std::fill(d_a.begin(), d_a.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::matvec_t_acc(wl.wq, d_q.data() + row, d, d, d_a.data() + row);
      detail::matvec_t_acc(wl.wk, d_k.data() + row, d, d, d_a.data() + row);
      detail::matvec_t_acc(wl.wv, d_v.data() + row, d, d, d_a.data() + row);
      detail::outer_acc(d_q.data() + row, cache.a.data() + row, d, d, gl.wq);
      detail::outer_acc(d_k.data() + row, cache.a.data() + row, d, d, gl.wk);
      detail::outer_acc(d_v.data() + row, cache.a.data() + row, d, d, gl.wv);
    }
    std::fill(dg1.begin(), dg1.end(), 0.0);
    std::fill(db1.begin(), db1.end(), 0.0);
    for (int t = 0; t < t_len; ++t) {
      const std::size_t row = static_cast<std::size_t>(t) * d;
      detail::layernorm_row_backward(
          cache.x_in.data() + row, wl.ln1_g,
          cache.ln1_mean[static_cast<std::size_t>(t)],
          cache.ln1_rstd[static_cast<std::size_t>(t)], d_a.data() + row, d,
          dx.data() + row, dg1.data(), db1.data());
    }
    for (int i = 0; i < d; ++i) {
      gl.ln1_g[i] += dg1[static_cast<std::size_t>(i)];
      gl.ln1_b[i] += db1[static_cast<std::size_t>(i)];
    }
  }

  // Embedding lookup gradient.
  for (int t = 0; t < t_len; ++t) {
    double* grow = g.wte + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d;
    const double* dxrow = dx.data() + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) grow[i] += dxrow[i];
  }
}

// Incremental decoding state: cached post-rotation keys and values.
template <class Real>
struct KvCache {
  int length = 0;
  std::vector<std::vector<Real>> k, v;  // per layer, [T, D]

  void reset(const ModelConfig& cfg) {
    length = 0;
    k.assign(static_cast<std::size_t>(cfg.n_layers), {});
    v.assign(static_cast<std::size_t>(cfg.n_layers), {});
    for (int li = 0; li < cfg.n_layers; ++li) {
      k[static_cast<std::size_t>(li)].assign(
          static_cast<std::size_t>(cfg.max_context) * cfg.d_model, Real(0));
      v[static_cast<std::size_t>(li)].assign(
          static_cast<std::size_t>(cfg.max_context) * cfg.d_model, Real(0));
    }
  }
};

// Feed one token at the next position; returns next-token logits.
// Arithmetic is identical, op for op, with the full forward pass at the
// corresponding row, so cached decoding matches recomputation bit-exactly.
template <class Real>
void forward_next(const ModelConfig& cfg, const ParamBuffer<Real>& params,
                  KvCache<Real>& cache, TokenId token,
                  std::vector<Real>& logits_out) {
  const int d = cfg.d_model, f = cfg.d_ff, hd = cfg.head_dim(), nh = cfg.n_heads,
            v = cfg.vocab_size;
  const int pos = cache.length;
  if (pos >= cfg.max_context)
    throw ContextOverflow("kv cache full at max_context " +
                          std::to_string(cfg.max_context));
  if (token < 0 || token >= v)
    throw ShapeMismatch("token id out of vocabulary range");
  const auto w = detail::make_view(cfg, params.data.data());

  std::vector<Real> x(w.wte + static_cast<std::size_t>(token) * d,
                      w.wte + static_cast<std::size_t>(token + 1) * d);
  std::vector<Real> a(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d)),
      ctx(static_cast<std::size_t>(d)), o(static_cast<std::size_t>(d)),
      b(static_cast<std::size_t>(d)), h_pre(static_cast<std::size_t>(f)),
      h_act(static_cast<std::size_t>(f)), m(static_cast<std::size_t>(d));
  Real mean, rstd;
  std::vector<double> scores(static_cast<std::size_t>(pos + 1));

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& wl = w.layers[static_cast<std::size_t>(li)];
    auto& kc = cache.k[static_cast<std::size_t>(li)];
    auto& vc = cache.v[static_cast<std::size_t>(li)];
    detail::layernorm_row(x.data(), wl.ln1_g, wl.ln1_b, d, a.data(), &mean, &rstd);
    Real* krow = kc.data() + static_cast<std::size_t>(pos) * d;
    Real* vrow = vc.data() + static_cast<std::size_t>(pos) * d;
    detail::matvec(wl.wq, a.data(), d, d, q.data());
    detail::matvec(wl.wk, a.data(), d, d, krow);
    detail::matvec(wl.wv, a.data(), d, d, vrow);
    for (int h = 0; h < nh; ++h) {
      detail::rope_rotate(q.data() + h * hd, hd, pos, false);
      detail::rope_rotate(krow + h * hd, hd, pos, false);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < nh; ++h) {
      const Real* qh = q.data() + h * hd;
      double maxs = -1e300;
      for (int u = 0; u <= pos; ++u) {
        const Real* kh = kc.data() + static_cast<std::size_t>(u) * d + h * hd;
        double acc = 0.0;
        for (int j = 0; j < hd; ++j)
          acc += static_cast<double>(qh[j]) * static_cast<double>(kh[j]);
        scores[static_cast<std::size_t>(u)] = acc * scale;
        if (scores[static_cast<std::size_t>(u)] > maxs)
          maxs = scores[static_cast<std::size_t>(u)];
      }
      double z = 0.0;
      for (int u = 0; u <= pos; ++u) {
        scores[static_cast<std::size_t>(u)] =
            std::exp(scores[static_cast<std::size_t>(u)] - maxs);
        z += scores[static_cast<std::size_t>(u)];
      }
      for (int j = 0; j < hd; ++j) {
        double acc = 0.0;
        for (int u = 0; u <= pos; ++u)
          acc += (scores[static_cast<std::size_t>(u)] / z) *
                 static_cast<double>(
                     vc[static_cast<std::size_t>(u) * d + h * hd + j]);
        ctx[static_cast<std::size_t>(h * hd + j)] = static_cast<Real>(acc);
      }
    }
    detail::matvec(wl.wo, ctx.data(), d, d, o.data());
    for (int i = 0; i < d; ++i)
      x[static_cast<std::size_t>(i)] =
          static_cast<Real>(static_cast<double>(x[static_cast<std::size_t>(i)]) +
                            static_cast<double>(o[static_cast<std::size_t>(i)]));
    detail::layernorm_row(x.data(), wl.ln2_g, wl.ln2_b, d, b.data(), &mean, &rstd);
    detail::matvec(wl.w1, b.data(), f, d, h_pre.data());
    for (int i = 0; i < f; ++i)
      h_act[static_cast<std::size_t>(i)] = static_cast<Real>(
          detail::gelu(static_cast<double>(h_pre[static_cast<std::size_t>(i)])));
    detail::matvec(wl.w2, h_act.data(), d, f, m.data());
    for (int i = 0; i < d; ++i)
      x[static_cast<std::size_t>(i)] =
          static_cast<Real>(static_cast<double>(x[static_cast<std::size_t>(i)]) +
                            static_cast<double>(m[static_cast<std::size_t>(i)]));
  }
  std::vector<Real> y(static_cast<std::size_t>(d));
  detail::layernorm_row(x.data(), w.lnf_g, w.lnf_b, d, y.data(), &mean, &rstd);
  logits_out.assign(static_cast<std::size_t>(v), Real(0));
  detail::matvec(w.wte, y.data(), v, d, logits_out.data());
  cache.length = pos + 1;
}

// Learning-rate step function: initial_lr halved once per milestone that
// `step` has reached (step >= h).
struct LrSchedule {
  double initial_lr = 3e-4;
  std::vector<std::int64_t> halving_steps;

  void validate() const;
  double lr_at(std::int64_t step) const {
    int halvings = 0;
    for (auto h : halving_steps)
      if (step >= h) ++halvings;
    return initial_lr * std::pow(2.0, -halvings);
  }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
struct AdamState {
  std::vector<Real> m, v;
  std::int64_t step_count = 0;

  void reset(std::size_t n) {
    m.assign(n, Real(0));
    v.assign(n, Real(0));
    step_count = 0;
  }
};

template <class Real>
void adam_step(ParamBuffer<Real>& params, AdamState<Real>& opt,
               const ParamBuffer<double>& grads, const LrSchedule& sched,
               const AdamOptions& ao = {}) {
  const std::size_t n = params.data.size();
  if (grads.data.size() != n || opt.m.size() != n || opt.v.size() != n)
    throw ShapeMismatch("optimizer/parameter/gradient size mismatch");
  for (double gv : grads.data)
    if (!std::isfinite(gv)) throw NonFiniteGradient("gradient has a non-finite entry");
  const double lr = sched.lr_at(opt.step_count);
  const std::int64_t t = opt.step_count + 1;
  const double bc1 = 1.0 - std::pow(ao.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(ao.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < n; ++i) {
    const double gv = grads.data[i];
    const double m = ao.beta1 * static_cast<double>(opt.m[i]) + (1.0 - ao.beta1) * gv;
    const double v = ao.beta2 * static_cast<double>(opt.v[i]) + (1.0 - ao.beta2) * gv * gv;
    opt.m[i] = static_cast<Real>(m);
    opt.v[i] = static_cast<Real>(v);
    const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + ao.eps);
    params.data[i] = static_cast<Real>(static_cast<double>(params.data[i]) - update);
  }
  opt.step_count = t;
}

// Production model: binary32 weights plus Adam state and the vocabulary
// digest it was built against.
struct Model {
  ModelConfig config;
  ParamBuffer<float> params;
  AdamState<float> opt;
  std::uint64_t vocab_hash = 0;
};

Model make_model(const ModelConfig& cfg, std::uint64_t vocab_hash);

// Convenience: full-sequence logits ([T, V] row-major).
std::vector<float> forward_logits(const Model& model, const TokenSeq& tokens);

struct CheckpointMeta {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::string phase;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

// File layout: magic "BTEL", u16 format version, u32 metadata length,
// metadata JSON, then parameter / first-moment / second-moment tensors as
// little-endian binary32 in tensor_layout order.
void save_checkpoint(const Model& model, const CheckpointMeta& meta,
                     const std::string& path);
std::pair<Model, CheckpointMeta> load_checkpoint(const std::string& path);

}  // namespace btel
