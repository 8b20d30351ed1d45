#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsdial/rng.hpp"
#include "fsdial/tensor.hpp"
#include "fsdial/tokenizer.hpp"

namespace fsdial {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int d_ff = 64;
  int vocab_size = 0;
  int max_seq = 64;
  int max_turns = 16;
  double dropout_rate = 0.0;
  uint64_t init_seed = 1;

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq < 1) {
      throw std::invalid_argument("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model % n_heads != 0");
    if (vocab_size < 6) throw std::invalid_argument("model config: vocab_size must be >= 6");
    if (max_turns < 2) throw std::invalid_argument("model config: max_turns must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw std::invalid_argument("model config: dropout_rate must be in [0, 1)");
    }
  }

  EncodeLimits limits(int context_window = 5) const { return {max_seq, max_turns, context_window}; }
  bool operator==(const ModelConfig&) const = default;
};

// Pre-layernorm decoder block parameters.
template <typename T>
struct LayerParams {
  Matrix<T> ln1_g, ln1_b;    // [1, D]
  Matrix<T> w_qkv, b_qkv;    // [D, 3D], [1, 3D]
  Matrix<T> w_out, b_out;    // [D, D], [1, D]
  Matrix<T> ln2_g, ln2_b;    // [1, D]
  Matrix<T> w_ff1, b_ff1;    // [D, F], [1, F]
  Matrix<T> w_ff2, b_ff2;    // [F, D], [1, D]
};

// All trainable tensors. token_emb doubles as the LM head (weight tying);
// w_nsp/b_nsp form the binary next-sentence head. for_each_tensor fixes the
// canonical tensor order used by the optimizer, checkpoints and the
// serialized payload.
template <typename T>
struct Params {
  Matrix<T> token_emb;    // [V, D]
  Matrix<T> pos_emb;      // [max_seq, D]
  Matrix<T> speaker_emb;  // [2, D]
  Matrix<T> turn_emb;     // [max_turns, D]
  std::vector<LayerParams<T>> layers;
  Matrix<T> lnf_g, lnf_b;  // [1, D]
  Matrix<T> w_nsp, b_nsp;  // [D, 2], [1, 2]

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("token_emb", self.token_emb);
    fn("pos_emb", self.pos_emb);
    fn("speaker_emb", self.speaker_emb);
    fn("turn_emb", self.turn_emb);
    for (size_t l = 0; l < self.layers.size(); ++l) {
      auto& lay = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      fn((p + "ln1_g").c_str(), lay.ln1_g);
      fn((p + "ln1_b").c_str(), lay.ln1_b);
      fn((p + "w_qkv").c_str(), lay.w_qkv);
      fn((p + "b_qkv").c_str(), lay.b_qkv);
      fn((p + "w_out").c_str(), lay.w_out);
      fn((p + "b_out").c_str(), lay.b_out);
      fn((p + "ln2_g").c_str(), lay.ln2_g);
      fn((p + "ln2_b").c_str(), lay.ln2_b);
      fn((p + "w_ff1").c_str(), lay.w_ff1);
      fn((p + "b_ff1").c_str(), lay.b_ff1);
      fn((p + "w_ff2").c_str(), lay.w_ff2);
      fn((p + "b_ff2").c_str(), lay.b_ff2);
    }
    fn("lnf_g", self.lnf_g);
    fn("lnf_b", self.lnf_b);
    fn("w_nsp", self.w_nsp);
    fn("b_nsp", self.b_nsp);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit(*this, fn);
  }

  size_t param_count() const {
    size_t n = 0;
    for_each_tensor([&](const char*, const Matrix<T>& m) { n += m.size(); });
    return n;
  }
  void set_zero() {
    for_each_tensor([](const char*, Matrix<T>& m) { m.set_zero(); });
  }
  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const char*, const Matrix<T>& m) {
      for (T v : m.data) {
        if (!std::isfinite(static_cast<double>(v))) ok = false;
      }
    });
    return ok;
  }

  bool operator==(const Params&) const = default;
};

template <typename T>
Params<T> make_zero_params(const ModelConfig& c) {
  Params<T> p;
  p.token_emb = Matrix<T>(c.vocab_size, c.d_model);
  p.pos_emb = Matrix<T>(c.max_seq, c.d_model);
  p.speaker_emb = Matrix<T>(2, c.d_model);
  p.turn_emb = Matrix<T>(c.max_turns, c.d_model);
  p.layers.resize(c.n_layers);
  for (auto& lay : p.layers) {
    lay.ln1_g = Matrix<T>(1, c.d_model);
    lay.ln1_b = Matrix<T>(1, c.d_model);
    lay.w_qkv = Matrix<T>(c.d_model, 3 * c.d_model);
    lay.b_qkv = Matrix<T>(1, 3 * c.d_model);
    lay.w_out = Matrix<T>(c.d_model, c.d_model);
    lay.b_out = Matrix<T>(1, c.d_model);
    lay.ln2_g = Matrix<T>(1, c.d_model);
    lay.ln2_b = Matrix<T>(1, c.d_model);
    lay.w_ff1 = Matrix<T>(c.d_model, c.d_ff);
    lay.b_ff1 = Matrix<T>(1, c.d_ff);
    lay.w_ff2 = Matrix<T>(c.d_ff, c.d_model);
    lay.b_ff2 = Matrix<T>(1, c.d_model);
  }
  p.lnf_g = Matrix<T>(1, c.d_model);
  p.lnf_b = Matrix<T>(1, c.d_model);
  p.w_nsp = Matrix<T>(c.d_model, 2);
  p.b_nsp = Matrix<T>(1, 2);
  return p;
}

template <typename T>
struct ModelState {
  ModelConfig config;
  Params<T> params;
};

// Deterministic init: weights N(0, 0.02) with the residual-writing
// projections (w_out, w_ff2) scaled down by sqrt(2 * n_layers), biases zero,
// layer-norm gains one. Tensors are filled in canonical order.
template <typename T>
ModelState<T> init_model(const ModelConfig& config) {
  config.validate();
  ModelState<T> m{config, make_zero_params<T>(config)};
  DetRng rng(config.init_seed);
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * config.n_layers);
  m.params.for_each_tensor([&](const char* name, Matrix<T>& t) {
    std::string_view n(name);
    const bool is_bias = n.find("_b") != std::string_view::npos || n.find("b_") != std::string_view::npos;
    if (n.find("ln") != std::string_view::npos) {
      const bool gain = n.find("_g") != std::string_view::npos;
      for (auto& v : t.data) v = gain ? T(1) : T(0);
      return;
    }
    if (is_bias) {
      t.set_zero();
      return;
    }
    const double sigma = (n.find("w_out") != std::string_view::npos ||
                          n.find("w_ff2") != std::string_view::npos)
                             ? resid
                             : base;
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * sigma);
  });
  return m;
}

// Everything backward() needs, captured during forward(). Holding the
// sequence makes "backward without forward" detectable.
template <typename T>
struct ForwardCache {
  EncodedSequence seq;
  bool train_mode = false;
  bool valid = false;
  Matrix<T> x_embed;     // [L, D] post-dropout embedding sum
  Matrix<T> embed_mask;  // dropout masks are empty when inactive
  struct LayerCache {
    Matrix<T> x_in;
    Matrix<T> ln1_xhat, ln1_out;
    std::vector<T> ln1_inv_sigma;
    Matrix<T> qkv;                      // [L, 3D]
    std::vector<Matrix<T>> attn_probs;  // per head, [L, L] lower-triangular
    Matrix<T> attn_ctx;                 // [L, D] heads concatenated
    Matrix<T> attn_mask;
    Matrix<T> x_mid;
    Matrix<T> ln2_xhat, ln2_out;
    std::vector<T> ln2_inv_sigma;
    Matrix<T> ff_pre, ff_act;  // [L, F]
    Matrix<T> ffn_mask;
  };
  std::vector<LayerCache> layers;
  Matrix<T> x_final;  // [L, D] residual stream after the last block
  Matrix<T> lnf_xhat;
  std::vector<T> lnf_inv_sigma;
  Matrix<T> hidden;  // [L, D] post final layer norm
};

template <typename T>
struct ForwardOut {
  Matrix<T> hidden;     // [L, D] last-layer hidden states
  Matrix<T> lm_logits;  // [L, V]
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
inline T gelu_grad(T x) {
  const T phi = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  return cdf + x * phi;
}

// y = g * xhat + b rowwise; stores xhat and 1/sigma for backward.
template <typename T>
void layernorm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, Matrix<T>& xhat,
               std::vector<T>& inv_sigma, Matrix<T>& y) {
  const int D = x.cols;
  xhat = Matrix<T>(x.rows, D);
  y = Matrix<T>(x.rows, D);
  inv_sigma.assign(x.rows, T{});
  for (int i = 0; i < x.rows; ++i) {
    const T* xi = x.row(i);
    T mean{};
    for (int j = 0; j < D; ++j) mean += xi[j];
    mean /= T(D);
    T var{};
    for (int j = 0; j < D; ++j) {
      const T d = xi[j] - mean;
      var += d * d;
    }
    var /= T(D);
    const T is = T(1) / std::sqrt(var + T(kLnEps));
    inv_sigma[i] = is;
    T* xh = xhat.row(i);
    T* yi = y.row(i);
    for (int j = 0; j < D; ++j) {
      xh[j] = (xi[j] - mean) * is;
      yi[j] = g.data[j] * xh[j] + b.data[j];
    }
  }
}

// dL/dx for the layernorm above; accumulates dg/db.
template <typename T>
void layernorm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const std::vector<T>& inv_sigma,
                        const Matrix<T>& g, Matrix<T>& dg, Matrix<T>& db, Matrix<T>& dx) {
  const int D = xhat.cols;
  dx = Matrix<T>(xhat.rows, D);
  for (int i = 0; i < xhat.rows; ++i) {
    const T* dyi = dy.row(i);
    const T* xh = xhat.row(i);
    T* dxi = dx.row(i);
    T mean_dxhat{};
    T mean_dxhat_xhat{};
    for (int j = 0; j < D; ++j) {
      const T dxh = dyi[j] * g.data[j];
      dg.data[j] += dyi[j] * xh[j];
      db.data[j] += dyi[j];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh[j];
    }
    mean_dxhat /= T(D);
    mean_dxhat_xhat /= T(D);
    for (int j = 0; j < D; ++j) {
      const T dxh = dyi[j] * g.data[j];
      dxi[j] = inv_sigma[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
    }
  }
}

template <typename T>
void add_bias(Matrix<T>& x, const Matrix<T>& b) {
  for (int i = 0; i < x.rows; ++i) {
    T* xi = x.row(i);
    for (int j = 0; j < x.cols; ++j) xi[j] += b.data[j];
  }
}

// Inverted dropout mask: 0 with probability rate, else 1/(1-rate).
template <typename T>
Matrix<T> dropout_mask(int rows, int cols, double rate, DetRng& rng) {
  Matrix<T> mask(rows, cols);
  const T keep = T(1.0 / (1.0 - rate));
  for (auto& v : mask.data) v = rng.uniform() < rate ? T(0) : keep;
  return mask;
}

template <typename T>
void apply_mask(Matrix<T>& x, const Matrix<T>& mask) {
  if (mask.empty()) return;
  for (size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

}  // namespace detail

// Causal forward pass. Position i's outputs depend only on positions <= i.
// Dropout is active only in train_mode and fully determined by dropout_seed.
template <typename T>
ForwardOut<T> forward(const ModelState<T>& m, const EncodedSequence& seq, bool train_mode = false,
                      uint64_t dropout_seed = 0, ForwardCache<T>* cache = nullptr) {
  const ModelConfig& c = m.config;
  const Params<T>& p = m.params;
  const int L = seq.length();
  const int D = c.d_model;
  const int H = c.n_heads;
  const int Dh = D / H;

  if (L == 0) throw std::invalid_argument("forward: empty sequence");
  if (L > c.max_seq) throw std::invalid_argument("forward: sequence longer than max_seq");
  if (seq.speaker_ids.size() != seq.token_ids.size() || seq.turn_ids.size() != seq.token_ids.size() ||
      seq.position_ids.size() != seq.token_ids.size()) {
    throw std::invalid_argument("forward: stream lengths differ");
  }
  for (int i = 0; i < L; ++i) {
    if (seq.token_ids[i] < 0 || seq.token_ids[i] >= c.vocab_size)
      throw std::invalid_argument("forward: token id out of range");
    if (seq.speaker_ids[i] < 0 || seq.speaker_ids[i] > 1)
      throw std::invalid_argument("forward: speaker id out of range");
    if (seq.turn_ids[i] < 0 || seq.turn_ids[i] >= c.max_turns)
      throw std::invalid_argument("forward: turn id out of range");
    if (seq.position_ids[i] < 0 || seq.position_ids[i] >= c.max_seq)
      throw std::invalid_argument("forward: position id out of range");
  }

  const bool use_dropout = train_mode && c.dropout_rate > 0.0;
  DetRng drop_rng(mix_seed(dropout_seed, 0x64726f70ULL));

  if (cache != nullptr) {
    *cache = ForwardCache<T>{};
    cache->seq = seq;
    cache->train_mode = train_mode;
    cache->layers.resize(c.n_layers);
  }

  // Summed input embedding.
  Matrix<T> x(L, D);
  for (int i = 0; i < L; ++i) {
    const T* te = p.token_emb.row(seq.token_ids[i]);
    const T* pe = p.pos_emb.row(seq.position_ids[i]);
    const T* se = p.speaker_emb.row(seq.speaker_ids[i]);
    const T* ue = p.turn_emb.row(seq.turn_ids[i]);
    T* xi = x.row(i);
    for (int j = 0; j < D; ++j) xi[j] = te[j] + pe[j] + se[j] + ue[j];
  }
  if (use_dropout) {
    Matrix<T> mask = detail::dropout_mask<T>(L, D, c.dropout_rate, drop_rng);
    detail::apply_mask(x, mask);
    if (cache) cache->embed_mask = std::move(mask);
  }
  if (cache) cache->x_embed = x;

  const T scale = T(1) / std::sqrt(T(Dh));
  for (int l = 0; l < c.n_layers; ++l) {
    const LayerParams<T>& lay = p.layers[l];
    auto* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->x_in = x;

    Matrix<T> ln1_xhat, ln1_out;
    std::vector<T> ln1_is;
    detail::layernorm(x, lay.ln1_g, lay.ln1_b, ln1_xhat, ln1_is, ln1_out);

    Matrix<T> qkv;
    matmul(ln1_out, lay.w_qkv, qkv);
    detail::add_bias(qkv, lay.b_qkv);

    Matrix<T> ctx(L, D);
    std::vector<Matrix<T>> probs_all;
    if (lc) probs_all.reserve(H);
    for (int h = 0; h < H; ++h) {
      const int qo = h * Dh;
      const int ko = D + h * Dh;
      const int vo = 2 * D + h * Dh;
      Matrix<T> probs(L, L);
      for (int i = 0; i < L; ++i) {
        const T* qi = qkv.row(i) + qo;
        T maxs = -std::numeric_limits<T>::infinity();
        std::vector<T> srow(i + 1);
        for (int j = 0; j <= i; ++j) {
          const T* kj = qkv.row(j) + ko;
          T s{};
          for (int d = 0; d < Dh; ++d) s += qi[d] * kj[d];
          s *= scale;
          srow[j] = s;
          maxs = std::max(maxs, s);
        }
        T denom{};
        for (int j = 0; j <= i; ++j) {
          srow[j] = std::exp(srow[j] - maxs);
          denom += srow[j];
        }
        T* pi = probs.row(i);
        for (int j = 0; j <= i; ++j) pi[j] = srow[j] / denom;
        T* ci = ctx.row(i) + qo;
        for (int j = 0; j <= i; ++j) {
          const T* vj = qkv.row(j) + vo;
          const T pij = pi[j];
          for (int d = 0; d < Dh; ++d) ci[d] += pij * vj[d];
        }
      }
      if (lc) probs_all.push_back(std::move(probs));
    }

    Matrix<T> attn_out;
    matmul(ctx, lay.w_out, attn_out);
    detail::add_bias(attn_out, lay.b_out);
    Matrix<T> attn_mask;
    if (use_dropout) {
      attn_mask = detail::dropout_mask<T>(L, D, c.dropout_rate, drop_rng);
      detail::apply_mask(attn_out, attn_mask);
    }

    Matrix<T> x_mid(L, D);
    for (size_t i = 0; i < x.data.size(); ++i) x_mid.data[i] = x.data[i] + attn_out.data[i];

    Matrix<T> ln2_xhat, ln2_out;
    std::vector<T> ln2_is;
    detail::layernorm(x_mid, lay.ln2_g, lay.ln2_b, ln2_xhat, ln2_is, ln2_out);

    Matrix<T> ff_pre;
    matmul(ln2_out, lay.w_ff1, ff_pre);
    detail::add_bias(ff_pre, lay.b_ff1);
    Matrix<T> ff_act(L, c.d_ff);
    for (size_t i = 0; i < ff_pre.data.size(); ++i) ff_act.data[i] = detail::gelu(ff_pre.data[i]);

    Matrix<T> ffn_out;
    matmul(ff_act, lay.w_ff2, ffn_out);
    detail::add_bias(ffn_out, lay.b_ff2);
    Matrix<T> ffn_mask;
    if (use_dropout) {
      ffn_mask = detail::dropout_mask<T>(L, D, c.dropout_rate, drop_rng);
      detail::apply_mask(ffn_out, ffn_mask);
    }

    Matrix<T> x_out(L, D);
    for (size_t i = 0; i < x.data.size(); ++i) x_out.data[i] = x_mid.data[i] + ffn_out.data[i];

    if (lc) {
      lc->ln1_xhat = std::move(ln1_xhat);
      lc->ln1_out = std::move(ln1_out);
      lc->ln1_inv_sigma = std::move(ln1_is);
      lc->qkv = std::move(qkv);
      lc->attn_probs = std::move(probs_all);
      lc->attn_ctx = std::move(ctx);
      lc->attn_mask = std::move(attn_mask);
      lc->x_mid = x_mid;
      lc->ln2_xhat = std::move(ln2_xhat);
      lc->ln2_out = std::move(ln2_out);
      lc->ln2_inv_sigma = std::move(ln2_is);
      lc->ff_pre = std::move(ff_pre);
      lc->ff_act = std::move(ff_act);
      lc->ffn_mask = std::move(ffn_mask);
    }
    x = std::move(x_out);
  }

  if (cache) cache->x_final = x;
  ForwardOut<T> out;
  Matrix<T> lnf_xhat;
  std::vector<T> lnf_is;
  detail::layernorm(x, p.lnf_g, p.lnf_b, lnf_xhat, lnf_is, out.hidden);
  if (cache) {
    cache->lnf_xhat = std::move(lnf_xhat);
    cache->lnf_inv_sigma = std::move(lnf_is);
    cache->hidden = out.hidden;
    cache->valid = true;
  }

  // Tied LM head: logits = hidden . token_emb^T.
  out.lm_logits = Matrix<T>(L, c.vocab_size);
  matmul_bt_acc(out.hidden, p.token_emb, out.lm_logits);
  return out;
}

// Analytic gradients. d_lm_logits ([L, V]) and d_hidden_extra ([L, D], the
// gradient flowing directly into the post-layernorm hidden states, e.g.
// from the NSP head) may be empty. Gradients accumulate into `grads`.
template <typename T>
void backward(const ModelState<T>& m, const ForwardCache<T>& cache, const Matrix<T>& d_lm_logits,
              const Matrix<T>& d_hidden_extra, Params<T>& grads) {
  if (!cache.valid) throw std::logic_error("backward called without a recorded forward pass");
  const ModelConfig& c = m.config;
  const Params<T>& p = m.params;
  const EncodedSequence& seq = cache.seq;
  const int L = seq.length();
  const int D = c.d_model;
  const int H = c.n_heads;
  const int Dh = D / H;

  Matrix<T> d_hidden(L, D);
  if (!d_hidden_extra.empty()) {
    if (!d_hidden_extra.same_shape(d_hidden)) throw std::invalid_argument("backward: d_hidden shape");
    d_hidden = d_hidden_extra;
  }
  if (!d_lm_logits.empty()) {
    if (d_lm_logits.rows != L || d_lm_logits.cols != c.vocab_size) {
      throw std::invalid_argument("backward: d_lm_logits shape");
    }
    // logits = hidden . token_emb^T
    matmul(d_lm_logits, p.token_emb, d_hidden);  // overwrites; re-add extra below
    if (!d_hidden_extra.empty()) {
      for (size_t i = 0; i < d_hidden.data.size(); ++i) d_hidden.data[i] += d_hidden_extra.data[i];
    }
    matmul_at_acc(d_lm_logits, cache.hidden, grads.token_emb);
  }

  Matrix<T> dx;
  detail::layernorm_backward(d_hidden, cache.lnf_xhat, cache.lnf_inv_sigma, p.lnf_g, grads.lnf_g,
                             grads.lnf_b, dx);

  const T scale = T(1) / std::sqrt(T(Dh));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerParams<T>& lay = p.layers[l];
    const auto& lc = cache.layers[l];
    LayerParams<T>& g = grads.layers[l];

    // FFN block: x_out = x_mid + dropout(ff_act . w_ff2 + b_ff2)
    Matrix<T> d_ffn_out = dx;
    detail::apply_mask(d_ffn_out, lc.ffn_mask);
    for (int i = 0; i < L; ++i) {
      const T* r = d_ffn_out.row(i);
      for (int j = 0; j < D; ++j) g.b_ff2.data[j] += r[j];
    }
    matmul_at_acc(lc.ff_act, d_ffn_out, g.w_ff2);
    Matrix<T> d_act(L, c.d_ff);
    matmul_bt_acc(d_ffn_out, lay.w_ff2, d_act);
    Matrix<T> d_pre(L, c.d_ff);
    for (size_t i = 0; i < d_pre.data.size(); ++i) {
      d_pre.data[i] = d_act.data[i] * detail::gelu_grad(lc.ff_pre.data[i]);
    }
    for (int i = 0; i < L; ++i) {
      const T* r = d_pre.row(i);
      for (int j = 0; j < c.d_ff; ++j) g.b_ff1.data[j] += r[j];
    }
    matmul_at_acc(lc.ln2_out, d_pre, g.w_ff1);
    Matrix<T> d_ln2_out(L, D);
    matmul_bt_acc(d_pre, lay.w_ff1, d_ln2_out);
    Matrix<T> d_x_mid;
    detail::layernorm_backward(d_ln2_out, lc.ln2_xhat, lc.ln2_inv_sigma, lay.ln2_g, g.ln2_g, g.ln2_b,
                               d_x_mid);
    for (size_t i = 0; i < d_x_mid.data.size(); ++i) d_x_mid.data[i] += dx.data[i];  // residual

    // Attention block: x_mid = x_in + dropout(ctx . w_out + b_out)
    Matrix<T> d_attn_out = d_x_mid;
    detail::apply_mask(d_attn_out, lc.attn_mask);
    for (int i = 0; i < L; ++i) {
      const T* r = d_attn_out.row(i);
      for (int j = 0; j < D; ++j) g.b_out.data[j] += r[j];
    }
    matmul_at_acc(lc.attn_ctx, d_attn_out, g.w_out);
    Matrix<T> d_ctx(L, D);
    matmul_bt_acc(d_attn_out, lay.w_out, d_ctx);

    Matrix<T> d_qkv(L, 3 * D);
    for (int h = 0; h < H; ++h) {
      const int qo = h * Dh;
      const int ko = D + h * Dh;
      const int vo = 2 * D + h * Dh;
      const Matrix<T>& probs = lc.attn_probs[h];
      for (int i = 0; i < L; ++i) {
        const T* pi = probs.row(i);
        const T* dci = d_ctx.row(i) + qo;
        // d_v and d_probs
        std::vector<T> dprow(i + 1);
        for (int j = 0; j <= i; ++j) {
          const T* vj = lc.qkv.row(j) + vo;
          T* dvj = d_qkv.row(j) + vo;
          T dp{};
          for (int d = 0; d < Dh; ++d) {
            dp += dci[d] * vj[d];
            dvj[d] += pi[j] * dci[d];
          }
          dprow[j] = dp;
        }
        // softmax backward over the causal row
        T dot{};
        for (int j = 0; j <= i; ++j) dot += pi[j] * dprow[j];
        const T* qi = lc.qkv.row(i) + qo;
        T* dqi = d_qkv.row(i) + qo;
        for (int j = 0; j <= i; ++j) {
          const T ds = pi[j] * (dprow[j] - dot) * scale;
          const T* kj = lc.qkv.row(j) + ko;
          T* dkj = d_qkv.row(j) + ko;
          for (int d = 0; d < Dh; ++d) {
            dqi[d] += ds * kj[d];
            dkj[d] += ds * qi[d];
          }
        }
      }
    }

    for (int i = 0; i < L; ++i) {
      const T* r = d_qkv.row(i);
      for (int j = 0; j < 3 * D; ++j) g.b_qkv.data[j] += r[j];
    }
    matmul_at_acc(lc.ln1_out, d_qkv, g.w_qkv);
    Matrix<T> d_ln1_out(L, D);
    matmul_bt_acc(d_qkv, lay.w_qkv, d_ln1_out);
    Matrix<T> d_x_in;
    detail::layernorm_backward(d_ln1_out, lc.ln1_xhat, lc.ln1_inv_sigma, lay.ln1_g, g.ln1_g, g.ln1_b,
                               d_x_in);
    for (size_t i = 0; i < d_x_in.data.size(); ++i) d_x_in.data[i] += d_x_mid.data[i];  // residual
    dx = std::move(d_x_in);
  }

  // Embedding scatter (through the embedding dropout).
  detail::apply_mask(dx, cache.embed_mask);
  for (int i = 0; i < L; ++i) {
    const T* r = dx.row(i);
    T* te = grads.token_emb.row(seq.token_ids[i]);
    T* pe = grads.pos_emb.row(seq.position_ids[i]);
    T* se = grads.speaker_emb.row(seq.speaker_ids[i]);
    T* ue = grads.turn_emb.row(seq.turn_ids[i]);
    for (int j = 0; j < D; ++j) {
      te[j] += r[j];
      pe[j] += r[j];
      se[j] += r[j];
      ue[j] += r[j];
    }
  }
}

// Binary next-sentence logits from a hidden row: h . w_nsp + b_nsp.
// Index 1 is the "candidate follows context" class.
template <typename T>
std::array<T, 2> nsp_head(const Params<T>& p, const T* hidden_row) {
  std::array<T, 2> out{p.b_nsp.data[0], p.b_nsp.data[1]};
  for (int j = 0; j < p.w_nsp.rows; ++j) {
    out[0] += hidden_row[j] * p.w_nsp(j, 0);
    out[1] += hidden_row[j] * p.w_nsp(j, 1);
  }
  return out;
}

// Encodes the (window-truncated) context followed by the candidate and
// applies the NSP head to the final position's last-layer hidden state.
template <typename T>
std::array<T, 2> nsp_logits(const ModelState<T>& m, std::span<const Turn> context,
                            const Turn& candidate, const Vocab& vocab, const EncodeLimits& limits) {
  std::span<const Turn> ctx = context;
  if (static_cast<int>(ctx.size()) > limits.context_window) {
    ctx = ctx.subspan(ctx.size() - limits.context_window);
  }
  EncodedSequence seq = encode_dialogue(ctx, vocab, &candidate, limits.max_seq, limits.max_turns);
  ForwardOut<T> out = forward(m, seq);
  return nsp_head(m.params, out.hidden.row(seq.length() - 1));
}

template <typename T>
std::array<T, 2> softmax2(const std::array<T, 2>& logits) {
  const T mx = std::max(logits[0], logits[1]);
  const T e0 = std::exp(logits[0] - mx);
  const T e1 = std::exp(logits[1] - mx);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

// ---------------------------------------------------------------------------
// Checkpoints

// A deep, bit-exact copy of all trainable tensors plus enough metadata to
// refuse restores into a mismatched configuration.
struct Checkpoint {
  ModelConfig config;
  uint64_t vocab_fingerprint = 0;
  std::vector<float> payload;  // tensors flattened in canonical order

  uint64_t content_hash() const;
  bool operator==(const Checkpoint&) const = default;
};

Checkpoint snapshot(const ModelState<float>& m, uint64_t vocab_fingerprint);
ModelState<float> restore(const Checkpoint& ckpt);
ModelState<float> restore(const Checkpoint& ckpt, const Vocab& vocab);  // fingerprint-checked

// Self-describing header (config, vocab fingerprint, tensor manifest,
// format version, free-form meta) followed by raw little-endian float32
// payloads in canonical tensor order. Round trips bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const std::string& meta_json = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fsdial
