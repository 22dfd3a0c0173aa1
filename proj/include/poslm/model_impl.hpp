#pragma once

// Template implementation of the encoder forward/backward. Included by
// model.hpp; not a public header.

#include <algorithm>
#include <cstring>

namespace poslm {

namespace detail {

// out[i][o] = bias[o] + sum_in W[o][in] * x[i][in]
template <typename T>
void linear_forward(const float* w, const float* bias, const T* x, T* out, int rows, int d_in, int d_out) {
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + static_cast<size_t>(i) * d_in;
    T* oi = out + static_cast<size_t>(i) * d_out;
    for (int o = 0; o < d_out; ++o) {
      const float* wr = w + static_cast<size_t>(o) * d_in;
      T acc = bias ? static_cast<T>(bias[o]) : T(0);
      for (int in = 0; in < d_in; ++in) acc += static_cast<T>(wr[in]) * xi[in];
      oi[o] = acc;
    }
  }
}

// dx[i][in] += sum_o dout[i][o] * W[o][in];  dW[o][in] += dout[i][o] * x[i][in];  db[o] += dout[i][o]
template <typename T>
void linear_backward(const float* w, const T* x, const T* dout, T* dx, T* dw, T* db, int rows, int d_in,
                     int d_out) {
  for (int i = 0; i < rows; ++i) {
    const T* di = dout + static_cast<size_t>(i) * d_out;
    const T* xi = x + static_cast<size_t>(i) * d_in;
    T* dxi = dx ? dx + static_cast<size_t>(i) * d_in : nullptr;
    for (int o = 0; o < d_out; ++o) {
      T g = di[o];
      if (g == T(0)) continue;
      if (db) db[o] += g;
      const float* wr = w + static_cast<size_t>(o) * d_in;
      T* dwr = dw + static_cast<size_t>(o) * d_in;
      if (dxi) {
        for (int in = 0; in < d_in; ++in) {
          dxi[in] += g * static_cast<T>(wr[in]);
          dwr[in] += g * xi[in];
        }
      } else {
        for (int in = 0; in < d_in; ++in) dwr[in] += g * xi[in];
      }
    }
  }
}

constexpr double kLnEps = 1e-5;

// Exact GELU x * Phi(x); smooth, so finite-difference gradient checks are
// clean everywhere (a ReLU kink would poison them).
template <typename T>
inline T gelu(T x) {
  return x * T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
}
template <typename T>
inline T gelu_grad(T x) {
  T phi_big = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  T phi_small = T(0.3989422804014326779) * std::exp(T(-0.5) * x * x);
  return phi_big + x * phi_small;
}

template <typename T>
void layer_norm_forward(const float* gamma, const float* beta, const T* x, T* out, T* mean, T* rstd, int rows,
                        int d) {
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + static_cast<size_t>(i) * d;
    T* oi = out + static_cast<size_t>(i) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      T dv = xi[j] - mu;
      var += dv * dv;
    }
    var /= T(d);
    T r = T(1) / std::sqrt(var + T(kLnEps));
    mean[i] = mu;
    rstd[i] = r;
    for (int j = 0; j < d; ++j) oi[j] = static_cast<T>(gamma[j]) * ((xi[j] - mu) * r) + static_cast<T>(beta[j]);
  }
}

template <typename T>
void layer_norm_backward(const float* gamma, const T* x, const T* mean, const T* rstd, const T* dout, T* dx,
                         T* dgamma, T* dbeta, int rows, int d) {
  for (int i = 0; i < rows; ++i) {
    const T* xi = x + static_cast<size_t>(i) * d;
    const T* di = dout + static_cast<size_t>(i) * d;
    T* dxi = dx + static_cast<size_t>(i) * d;
    T mu = mean[i], r = rstd[i];
    T m1 = T(0), m2 = T(0);
    for (int j = 0; j < d; ++j) {
      T xhat = (xi[j] - mu) * r;
      T dh = di[j] * static_cast<T>(gamma[j]);
      m1 += dh;
      m2 += dh * xhat;
      dgamma[j] += di[j] * xhat;
      dbeta[j] += di[j];
    }
    m1 /= T(d);
    m2 /= T(d);
    for (int j = 0; j < d; ++j) {
      T xhat = (xi[j] - mu) * r;
      T dh = di[j] * static_cast<T>(gamma[j]);
      dxi[j] += r * (dh - m1 - xhat * m2);
    }
  }
}

// Quantized bins of a patch's center, against the actual input extent.
inline std::pair<int, int> patch_center_bins(int p, int grid_w, int patch, int image_w, int image_h, int m) {
  int gx = p % grid_w, gy = p / grid_w;
  double cx = (static_cast<double>(gx) + 0.5) * patch;
  double cy = (static_cast<double>(gy) + 0.5) * patch;
  int bx = std::min(m - 1, static_cast<int>(static_cast<double>(m) * cx / image_w));
  int by = std::min(m - 1, static_cast<int>(static_cast<double>(m) * cy / image_h));
  return {bx, by};
}

template <typename T>
void extract_patches(const SampleInput& input, int patch, std::vector<T>& out, int& n_patches) {
  if (input.image == nullptr || input.image_w == 0 || input.image_h == 0) {
    n_patches = 0;
    out.clear();
    return;
  }
  if (input.image_w % patch != 0 || input.image_h % patch != 0)
    throw std::invalid_argument("forward: image size not divisible by patch size");
  int gw = input.image_w / patch, gh = input.image_h / patch;
  n_patches = gw * gh;
  int pd = patch * patch * 3;
  out.resize(static_cast<size_t>(n_patches) * pd);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      T* dst = out.data() + static_cast<size_t>(gy * gw + gx) * pd;
      for (int py = 0; py < patch; ++py) {
        const float* src = input.image + ((static_cast<size_t>(gy * patch + py) * input.image_w) + gx * patch) * 3;
        for (int k = 0; k < patch * 3; ++k) dst[py * patch * 3 + k] = static_cast<T>(src[k]);
      }
    }
  }
}

}  // namespace detail

template <typename T>
void forward_encoder(const ModelParams& params, const SampleInput& input, Trace<T>& trace) {
  const ModelConfig& c = params.config;
  int d = c.dim, h = c.heads, dh = d / h, f = c.ffn_dim;
  int n_tok = static_cast<int>(input.tokens.size());
  if (n_tok == 0 || input.tokens[0] != c.vocab().cls_id())
    throw std::invalid_argument("forward: sequence must start with [CLS]");
  if (n_tok > c.max_tokens) throw std::invalid_argument("forward: token count exceeds max_tokens");
  if (static_cast<int>(input.coord_slots.size()) != n_tok)
    throw std::invalid_argument("forward: coord_slots size mismatch");

  detail::extract_patches(input, c.patch, trace.patch_vec, trace.n_patches);
  if (trace.n_patches > c.max_patches()) throw std::invalid_argument("forward: patch count exceeds max_patches");
  int s = n_tok + trace.n_patches;
  trace.seq = s;
  trace.n_tokens = n_tok;

  trace.x0.assign(static_cast<size_t>(s) * d, T(0));
  for (int i = 0; i < n_tok; ++i) {
    TokenId id = input.tokens[static_cast<size_t>(i)];
    if (id < 0 || id >= c.vocab_total()) throw std::invalid_argument("forward: token id out of vocabulary");
    const float* emb = params.tok_emb.data() + static_cast<size_t>(id) * d;
    const float* pos = params.tok_pos.data() + static_cast<size_t>(i) * d;
    T* row = trace.x0.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) row[j] = static_cast<T>(emb[j]) + static_cast<T>(pos[j]);
    int cs = input.coord_slots[static_cast<size_t>(i)];
    if (cs >= 0) {
      if (cs > 3) throw std::invalid_argument("forward: coord slot index out of range");
      const float* ce = params.coord_slot.data() + static_cast<size_t>(cs) * d;
      for (int j = 0; j < d; ++j) row[j] += static_cast<T>(ce[j]);
    }
  }
  if (trace.n_patches > 0) {
    detail::linear_forward(params.patch_w.data(), params.patch_b.data(), trace.patch_vec.data(),
                           trace.x0.data() + static_cast<size_t>(n_tok) * d, trace.n_patches, c.patch_dim(), d);
    int gw = input.image_w / c.patch;
    for (int p = 0; p < trace.n_patches; ++p) {
      const float* pos = params.patch_pos.data() + static_cast<size_t>(p) * d;
      T* row = trace.x0.data() + static_cast<size_t>(n_tok + p) * d;
      for (int j = 0; j < d; ++j) row[j] += static_cast<T>(pos[j]);
      // Patch locations are expressed in the shared position-token space: a
      // patch carries the (tied) embeddings of its center's x and y bins, so
      // spatial readout and the GMLM head live in one coordinate system.
      auto center_bins = detail::patch_center_bins(p, gw, c.patch, input.image_w, input.image_h, c.position_bins);
      const float* ex = params.tok_emb.data() + static_cast<size_t>(c.text_vocab + center_bins.first) * d;
      const float* ey = params.tok_emb.data() + static_cast<size_t>(c.text_vocab + center_bins.second) * d;
      for (int j = 0; j < d; ++j) row[j] += static_cast<T>(ex[j]) + static_cast<T>(ey[j]);
    }
  }

  trace.layers.assign(static_cast<size_t>(c.layers), {});
  const std::vector<T>* x = &trace.x0;
  T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  for (int li = 0; li < c.layers; ++li) {
    auto& lt = trace.layers[static_cast<size_t>(li)];
    const auto& lp = params.layers[static_cast<size_t>(li)];
    if (&lt.x_in != x) lt.x_in = *x;  // layer 0 copies x0; later layers already own their input
    lt.ln1_mean.resize(static_cast<size_t>(s));
    lt.ln1_rstd.resize(static_cast<size_t>(s));
    lt.a.resize(static_cast<size_t>(s) * d);
    detail::layer_norm_forward(lp.ln1_g.data(), lp.ln1_b.data(), lt.x_in.data(), lt.a.data(), lt.ln1_mean.data(),
                               lt.ln1_rstd.data(), s, d);

    lt.q.resize(static_cast<size_t>(s) * d);
    lt.k.resize(static_cast<size_t>(s) * d);
    lt.v.resize(static_cast<size_t>(s) * d);
    detail::linear_forward(lp.wq.data(), lp.bq.data(), lt.a.data(), lt.q.data(), s, d, d);
    detail::linear_forward(lp.wk.data(), lp.bk.data(), lt.a.data(), lt.k.data(), s, d, d);
    detail::linear_forward(lp.wv.data(), lp.bv.data(), lt.a.data(), lt.v.data(), s, d, d);

    lt.att.assign(static_cast<size_t>(h) * s * s, T(0));
    lt.ctx.assign(static_cast<size_t>(s) * d, T(0));
    for (int hd = 0; hd < h; ++hd) {
      int off = hd * dh;
      T* att_h = lt.att.data() + static_cast<size_t>(hd) * s * s;
      for (int i = 0; i < s; ++i) {
        const T* qi = lt.q.data() + static_cast<size_t>(i) * d + off;
        T* row = att_h + static_cast<size_t>(i) * s;
        T mx = std::numeric_limits<T>::lowest();
        for (int j = 0; j < s; ++j) {
          const T* kj = lt.k.data() + static_cast<size_t>(j) * d + off;
          T acc = T(0);
          for (int u = 0; u < dh; ++u) acc += qi[u] * kj[u];
          acc *= inv_sqrt_dh;
          row[j] = acc;
          mx = std::max(mx, acc);
        }
        T sum = T(0);
        for (int j = 0; j < s; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        T inv = T(1) / sum;
        for (int j = 0; j < s; ++j) row[j] *= inv;
        T* ci = lt.ctx.data() + static_cast<size_t>(i) * d + off;
        for (int j = 0; j < s; ++j) {
          T w = row[j];
          if (w == T(0)) continue;
          const T* vj = lt.v.data() + static_cast<size_t>(j) * d + off;
          for (int u = 0; u < dh; ++u) ci[u] += w * vj[u];
        }
      }
    }

    lt.x_mid.resize(static_cast<size_t>(s) * d);
    detail::linear_forward(lp.wo.data(), lp.bo.data(), lt.ctx.data(), lt.x_mid.data(), s, d, d);
    for (size_t i = 0; i < lt.x_mid.size(); ++i) lt.x_mid[i] += lt.x_in[i];

    lt.ln2_mean.resize(static_cast<size_t>(s));
    lt.ln2_rstd.resize(static_cast<size_t>(s));
    lt.b.resize(static_cast<size_t>(s) * d);
    detail::layer_norm_forward(lp.ln2_g.data(), lp.ln2_b.data(), lt.x_mid.data(), lt.b.data(), lt.ln2_mean.data(),
                               lt.ln2_rstd.data(), s, d);

    lt.h1.resize(static_cast<size_t>(s) * f);
    detail::linear_forward(lp.w1.data(), lp.b1.data(), lt.b.data(), lt.h1.data(), s, d, f);
    std::vector<T> act(static_cast<size_t>(s) * f);
    for (size_t i = 0; i < act.size(); ++i) act[i] = detail::gelu(lt.h1[i]);

    // x_out reuses the storage slot of the next layer's x_in (or trace.y).
    std::vector<T> x_out(static_cast<size_t>(s) * d);
    detail::linear_forward(lp.w2.data(), lp.b2.data(), act.data(), x_out.data(), s, f, d);
    for (size_t i = 0; i < x_out.size(); ++i) x_out[i] += lt.x_mid[i];

    if (li + 1 < c.layers) {
      trace.layers[static_cast<size_t>(li + 1)].x_in = std::move(x_out);
      x = &trace.layers[static_cast<size_t>(li + 1)].x_in;
    } else {
      trace.lnf_mean.resize(static_cast<size_t>(s));
      trace.lnf_rstd.resize(static_cast<size_t>(s));
      trace.y.resize(static_cast<size_t>(s) * d);
      detail::layer_norm_forward(params.lnf_g.data(), params.lnf_b.data(), x_out.data(), trace.y.data(),
                                 trace.lnf_mean.data(), trace.lnf_rstd.data(), s, d);
      trace.x_final = std::move(x_out);
    }
  }
}

template <typename T>
std::vector<double> position_logits(const ModelParams& params, const Trace<T>& trace, int token_index) {
  const ModelConfig& c = params.config;
  if (token_index < 0 || token_index >= trace.n_tokens)
    throw std::invalid_argument("position_logits: slot outside token range");
  int d = c.dim;
  const T* y = trace.y.data() + static_cast<size_t>(token_index) * d;
  std::vector<double> out(static_cast<size_t>(c.position_bins));
  for (int b = 0; b < c.position_bins; ++b) {
    const float* row = params.tok_emb.data() + static_cast<size_t>(c.text_vocab + b) * d;
    double acc = 0;
    for (int j = 0; j < d; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(y[j]);
    out[static_cast<size_t>(b)] = acc;
  }
  return out;
}

template <typename T>
std::vector<double> vocab_logits(const ModelParams& params, const Trace<T>& trace, int token_index) {
  const ModelConfig& c = params.config;
  if (token_index < 0 || token_index >= trace.n_tokens)
    throw std::invalid_argument("vocab_logits: slot outside token range");
  int d = c.dim;
  const T* y = trace.y.data() + static_cast<size_t>(token_index) * d;
  std::vector<double> out(static_cast<size_t>(c.vocab_total()));
  for (int t = 0; t < c.vocab_total(); ++t) {
    const float* row = params.tok_emb.data() + static_cast<size_t>(t) * d;
    double acc = 0;
    for (int j = 0; j < d; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(y[j]);
    out[static_cast<size_t>(t)] = acc;
  }
  return out;
}

template <typename T>
double itm_logit_of(const ModelParams& params, const Trace<T>& trace) {
  int d = params.config.dim;
  double acc = static_cast<double>(params.itm_b[0]);
  for (int j = 0; j < d; ++j)
    acc += static_cast<double>(params.itm_w[static_cast<size_t>(j)]) * static_cast<double>(trace.y[static_cast<size_t>(j)]);
  return acc;
}

namespace detail {

inline double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x > 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Head losses shared by the loss-only and loss+grad paths. When dy/grads are
// null only the loss is computed.
template <typename T>
double heads_loss(const ModelParams& params, const TrainingExample& example, const LossWeights& weights,
                  const Trace<T>& trace, T* dy, ParamsT<T>* grads, LossStats* stats) {
  const ModelConfig& c = params.config;
  int d = c.dim;
  double total = 0;

  for (const auto& target : example.targets) {
    int slot = target.token_index;
    if (target.is_position) {
      std::vector<double> logits = position_logits(params, trace, slot);
      double loss = position_loss_from_logits(logits, target.soft);
      total += weights.position * loss;
      if (stats) {
        stats->position_loss_sum += loss;
        stats->position_slots += 1;
        int best = 0;
        for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
          if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
        }
        if (best == target.soft.ground_truth_bin) stats->position_top1 += 1;
      }
      if (dy != nullptr) {
        std::vector<double> dlogits = loss_gradient_wrt_logits(logits, target.soft);
        const T* y = trace.y.data() + static_cast<size_t>(slot) * d;
        T* dyr = dy + static_cast<size_t>(slot) * d;
        for (int b = 0; b < c.position_bins; ++b) {
          double g = dlogits[static_cast<size_t>(b)] * weights.position;
          if (g == 0) continue;
          size_t row = static_cast<size_t>(c.text_vocab + b) * d;
          const float* emb = params.tok_emb.data() + row;
          T* demb = grads->tok_emb.data() + row;
          for (int j = 0; j < d; ++j) {
            dyr[j] += static_cast<T>(g * static_cast<double>(emb[j]));
            demb[j] += static_cast<T>(g * static_cast<double>(y[j]));
          }
        }
      }
    } else {
      std::vector<double> logits = vocab_logits(params, trace, slot);
      double loss = text_loss_from_logits(logits, target.gold_text);
      total += weights.text * loss;
      if (stats) {
        stats->text_loss_sum += loss;
        stats->text_slots += 1;
      }
      if (dy != nullptr) {
        std::vector<double> probs = softmax(logits);
        const T* y = trace.y.data() + static_cast<size_t>(slot) * d;
        T* dyr = dy + static_cast<size_t>(slot) * d;
        for (int t = 0; t < c.vocab_total(); ++t) {
          double g = probs[static_cast<size_t>(t)] - (t == target.gold_text ? 1.0 : 0.0);
          g *= weights.text;
          if (g == 0) continue;
          size_t row = static_cast<size_t>(t) * d;
          const float* emb = params.tok_emb.data() + row;
          T* demb = grads->tok_emb.data() + row;
          for (int j = 0; j < d; ++j) {
            dyr[j] += static_cast<T>(g * static_cast<double>(emb[j]));
            demb[j] += static_cast<T>(g * static_cast<double>(y[j]));
          }
        }
      }
    }
  }

  if (example.has_itm) {
    double logit = itm_logit_of(params, trace);
    double loss = stable_softplus(logit) - example.itm_label * logit;
    total += weights.itm * loss;
    if (stats) {
      stats->itm_loss_sum += loss;
      stats->itm_count += 1;
      if ((logit > 0) == (example.itm_label > 0.5)) stats->itm_correct += 1;
    }
    if (dy != nullptr) {
      double g = (sigmoid(logit) - example.itm_label) * weights.itm;
      T* dyr = dy;  // CLS is slot 0
      for (int j = 0; j < d; ++j) {
        dyr[j] += static_cast<T>(g * static_cast<double>(params.itm_w[static_cast<size_t>(j)]));
        grads->itm_w[static_cast<size_t>(j)] += static_cast<T>(g * static_cast<double>(trace.y[static_cast<size_t>(j)]));
      }
      grads->itm_b[0] += static_cast<T>(g);
    }
  }
  return total;
}

template <typename T>
void backward_encoder(const ModelParams& params, const SampleInput& input, const Trace<T>& trace,
                      std::vector<T>& dy, ParamsT<T>& grads) {
  const ModelConfig& c = params.config;
  int d = c.dim, h = c.heads, dh = d / h, f = c.ffn_dim, s = trace.seq;
  T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<T> dx(static_cast<size_t>(s) * d, T(0));
  layer_norm_backward(params.lnf_g.data(), trace.x_final.data(), trace.lnf_mean.data(), trace.lnf_rstd.data(),
                      dy.data(), dx.data(), grads.lnf_g.data(), grads.lnf_b.data(), s, d);

  std::vector<T> act(static_cast<size_t>(s) * f);
  std::vector<T> dr(static_cast<size_t>(s) * f);
  std::vector<T> db_rows(static_cast<size_t>(s) * d);
  std::vector<T> dx_mid(static_cast<size_t>(s) * d);
  std::vector<T> dctx(static_cast<size_t>(s) * d);
  std::vector<T> dqkv;
  std::vector<T> da(static_cast<size_t>(s) * d);
  std::vector<T> datt;

  for (int li = c.layers - 1; li >= 0; --li) {
    const auto& lt = trace.layers[static_cast<size_t>(li)];
    const auto& lp = params.layers[static_cast<size_t>(li)];
    auto& lg = grads.layers[static_cast<size_t>(li)];

    // FFN: x_out = x_mid + W2 gelu(h1) + b2, h1 = W1 b + b1, b = LN2(x_mid)
    for (size_t i = 0; i < act.size(); ++i) act[i] = gelu(lt.h1[i]);
    std::fill(dr.begin(), dr.end(), T(0));
    linear_backward(lp.w2.data(), act.data(), dx.data(), dr.data(), lg.w2.data(), lg.b2.data(), s, f, d);
    for (size_t i = 0; i < dr.size(); ++i) dr[i] *= gelu_grad(lt.h1[i]);
    std::fill(db_rows.begin(), db_rows.end(), T(0));
    linear_backward(lp.w1.data(), lt.b.data(), dr.data(), db_rows.data(), lg.w1.data(), lg.b1.data(), s, d, f);

    dx_mid = dx;  // residual
    layer_norm_backward(lp.ln2_g.data(), lt.x_mid.data(), lt.ln2_mean.data(), lt.ln2_rstd.data(), db_rows.data(),
                        dx_mid.data(), lg.ln2_g.data(), lg.ln2_b.data(), s, d);

    // Attention: x_mid = x_in + Wo ctx + bo
    std::fill(dctx.begin(), dctx.end(), T(0));
    linear_backward(lp.wo.data(), lt.ctx.data(), dx_mid.data(), dctx.data(), lg.wo.data(), lg.bo.data(), s, d, d);

    dqkv.assign(static_cast<size_t>(3) * s * d, T(0));
    T* dq = dqkv.data();
    T* dk = dqkv.data() + static_cast<size_t>(s) * d;
    T* dv = dqkv.data() + static_cast<size_t>(2) * s * d;
    datt.assign(static_cast<size_t>(s), T(0));

    for (int hd = 0; hd < h; ++hd) {
      int off = hd * dh;
      const T* att_h = lt.att.data() + static_cast<size_t>(hd) * s * s;
      for (int i = 0; i < s; ++i) {
        const T* arow = att_h + static_cast<size_t>(i) * s;
        const T* dci = dctx.data() + static_cast<size_t>(i) * d + off;
        // datt[j] = dctx_i . v_j ; dv_j += att[i][j] * dctx_i
        T dot_sum = T(0);
        for (int j = 0; j < s; ++j) {
          const T* vj = lt.v.data() + static_cast<size_t>(j) * d + off;
          T acc = T(0);
          for (int u = 0; u < dh; ++u) acc += dci[u] * vj[u];
          datt[static_cast<size_t>(j)] = acc;
          dot_sum += arow[j] * acc;
          T w = arow[j];
          if (w != T(0)) {
            T* dvj = dv + static_cast<size_t>(j) * d + off;
            for (int u = 0; u < dh; ++u) dvj[u] += w * dci[u];
          }
        }
        // softmax backward and score scale
        const T* qi = lt.q.data() + static_cast<size_t>(i) * d + off;
        T* dqi = dq + static_cast<size_t>(i) * d + off;
        for (int j = 0; j < s; ++j) {
          T ds = arow[j] * (datt[static_cast<size_t>(j)] - dot_sum) * inv_sqrt_dh;
          if (ds == T(0)) continue;
          const T* kj = lt.k.data() + static_cast<size_t>(j) * d + off;
          T* dkj = dk + static_cast<size_t>(j) * d + off;
          for (int u = 0; u < dh; ++u) {
            dqi[u] += ds * kj[u];
            dkj[u] += ds * qi[u];
          }
        }
      }
    }

    std::fill(da.begin(), da.end(), T(0));
    linear_backward(lp.wq.data(), lt.a.data(), dq, da.data(), lg.wq.data(), lg.bq.data(), s, d, d);
    linear_backward(lp.wk.data(), lt.a.data(), dk, da.data(), lg.wk.data(), lg.bk.data(), s, d, d);
    linear_backward(lp.wv.data(), lt.a.data(), dv, da.data(), lg.wv.data(), lg.bv.data(), s, d, d);

    dx = dx_mid;  // residual into x_in
    layer_norm_backward(lp.ln1_g.data(), lt.x_in.data(), lt.ln1_mean.data(), lt.ln1_rstd.data(), da.data(),
                        dx.data(), lg.ln1_g.data(), lg.ln1_b.data(), s, d);
  }

  // Embedding backward.
  int n_tok = trace.n_tokens;
  for (int i = 0; i < n_tok; ++i) {
    TokenId id = input.tokens[static_cast<size_t>(i)];
    const T* row = dx.data() + static_cast<size_t>(i) * d;
    T* demb = grads.tok_emb.data() + static_cast<size_t>(id) * d;
    T* dpos = grads.tok_pos.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      demb[j] += row[j];
      dpos[j] += row[j];
    }
    int cs = input.coord_slots[static_cast<size_t>(i)];
    if (cs >= 0) {
      T* dcs = grads.coord_slot.data() + static_cast<size_t>(cs) * d;
      for (int j = 0; j < d; ++j) dcs[j] += row[j];
    }
  }
  if (trace.n_patches > 0) {
    linear_backward(params.patch_w.data(), trace.patch_vec.data(), dx.data() + static_cast<size_t>(n_tok) * d,
                    static_cast<T*>(nullptr), grads.patch_w.data(), grads.patch_b.data(), trace.n_patches,
                    c.patch_dim(), d);
    int gw = input.image_w / c.patch;
    for (int p = 0; p < trace.n_patches; ++p) {
      const T* row = dx.data() + static_cast<size_t>(n_tok + p) * d;
      T* dpos = grads.patch_pos.data() + static_cast<size_t>(p) * d;
      for (int j = 0; j < d; ++j) dpos[j] += row[j];
      auto center_bins = patch_center_bins(p, gw, c.patch, input.image_w, input.image_h, c.position_bins);
      T* dex = grads.tok_emb.data() + static_cast<size_t>(c.text_vocab + center_bins.first) * d;
      T* dey = grads.tok_emb.data() + static_cast<size_t>(c.text_vocab + center_bins.second) * d;
      for (int j = 0; j < d; ++j) {
        dex[j] += row[j];
        dey[j] += row[j];
      }
    }
  }
}

}  // namespace detail

template <typename T>
void example_loss_and_grad(const ModelParams& params, const TrainingExample& example, const LossWeights& weights,
                           ParamsT<T>& grads, LossStats& stats) {
  Trace<T> trace;
  forward_encoder(params, example.input, trace);
  std::vector<T> dy(static_cast<size_t>(trace.seq) * params.config.dim, T(0));
  detail::heads_loss(params, example, weights, trace, dy.data(), &grads, &stats);
  detail::backward_encoder(params, example.input, trace, dy, grads);
}

template <typename T>
double example_weighted_loss(const ModelParams& params, const TrainingExample& example,
                             const LossWeights& weights) {
  Trace<T> trace;
  forward_encoder(params, example.input, trace);
  return detail::heads_loss<T>(params, example, weights, trace, nullptr, nullptr, nullptr);
}

}  // namespace poslm
