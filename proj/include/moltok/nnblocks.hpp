// Transformer building blocks shared by the query transformer, the SMILES
// autoencoder and the unified LM: masked scaled-dot attention, multi-head
// wrappers, pre-layernorm blocks, cross-entropy and MSE losses.
#pragma once

#include <optional>

#include "moltok/ndtensor.hpp"

namespace moltok::nn {

using ndt::ParamMap;
using ndt::Rng;
using ndt::Tensor;

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

struct AttentionMask {
  int query_len = 0;
  int key_len = 0;
  std::vector<uint8_t> allow;  // row-major, true = attend

  bool at(int q, int k) const { return allow[static_cast<size_t>(q) * key_len + k] != 0; }
  void set(int q, int k, bool v) {
    allow[static_cast<size_t>(q) * key_len + k] = v ? 1 : 0;
  }

  static AttentionMask full(int query_len, int key_len) {
    AttentionMask m;
    m.query_len = query_len;
    m.key_len = key_len;
    m.allow.assign(static_cast<size_t>(query_len) * key_len, 1);
    return m;
  }

  int popcount() const {
    int n = 0;
    for (uint8_t v : allow) n += v ? 1 : 0;
    return n;
  }

  void check_rows_nonempty() const {
    for (int q = 0; q < query_len; ++q) {
      bool any = false;
      for (int k = 0; k < key_len; ++k) any = any || at(q, k);
      if (!any) {
        throw std::invalid_argument("attention mask row " + std::to_string(q) +
                                    " attends to nothing");
      }
    }
  }
};

// Lower-triangular including the diagonal.
inline AttentionMask causal_mask(int n) {
  if (n < 1) throw std::invalid_argument("causal_mask: n must be >= 1");
  AttentionMask m;
  m.query_len = n;
  m.key_len = n;
  m.allow.assign(static_cast<size_t>(n) * n, 0);
  for (int q = 0; q < n; ++q) {
    for (int k = 0; k <= q; ++k) m.set(q, k, true);
  }
  return m;
}

inline constexpr double kMaskedLogit = -1e9;

template <class T>
Tensor<T> mask_bias(const AttentionMask& mask) {
  Tensor<T> b = Tensor<T>::zeros({mask.query_len, mask.key_len});
  T* p = b.data();
  for (int q = 0; q < mask.query_len; ++q) {
    for (int k = 0; k < mask.key_len; ++k) {
      if (!mask.at(q, k)) p[static_cast<size_t>(q) * mask.key_len + k] = T(kMaskedLogit);
    }
  }
  return b;
}

// softmax(Q K^T / sqrt(d_head) + mask_bias) V with masked logits pushed to
// -1e9 before the softmax.
template <class T>
Tensor<T> attention(Tensor<T> q, Tensor<T> k, Tensor<T> v, const AttentionMask& mask) {
  if (q.cols() != k.cols()) {
    throw std::invalid_argument("attention: query/key dim mismatch " +
                                ndt::shape_str(q.shape()) + " vs " +
                                ndt::shape_str(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("attention: key/value count mismatch");
  }
  if (mask.query_len != q.rows() || mask.key_len != k.rows()) {
    throw std::invalid_argument("attention: mask is " + std::to_string(mask.query_len) +
                                "x" + std::to_string(mask.key_len) + ", expected " +
                                std::to_string(q.rows()) + "x" + std::to_string(k.rows()));
  }
  mask.check_rows_nonempty();
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Tensor<T> scores = ndt::mul_scalar(ndt::matmul(q, ndt::transpose(k)), scale);
  scores = ndt::add(scores, mask_bias<T>(mask));
  return ndt::matmul(ndt::softmax_rows(scores), v);
}

// Fused multi-head attention over already-projected q/k/v: per head h,
// softmax(Q_h K_h^T / sqrt(d_head) + mask) V_h, heads concatenated. One
// tape node; mathematically identical to composing the primitive ops.
template <class T>
Tensor<T> fused_mha(Tensor<T> q, Tensor<T> k, Tensor<T> v, const AttentionMask& mask,
                    int heads) {
  const int lq = q.rows();
  const int lk = k.rows();
  const int d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) {
    throw std::invalid_argument("fused_mha: projection shape mismatch");
  }
  if (d % heads != 0) throw std::invalid_argument("fused_mha: heads must divide dim");
  if (mask.query_len != lq || mask.key_len != lk) {
    throw std::invalid_argument("fused_mha: mask shape mismatch");
  }
  mask.check_rows_nonempty();
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> out = Tensor<T>::zeros({lq, d});
  // per-head post-softmax probabilities, saved for backward
  std::vector<T> probs(static_cast<size_t>(heads) * lq * lk);
  const T* pq = q.data();
  const T* pk = k.data();
  const T* pv = v.data();
  T* po = out.data();
  std::vector<T> srow(lk);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < lq; ++i) {
      T mx = T(0);
      bool any = false;
      for (int j = 0; j < lk; ++j) {
        if (!mask.at(i, j)) {
          srow[j] = T(kMaskedLogit);
          continue;
        }
        T acc = T(0);
        const T* qrow = pq + static_cast<int64_t>(i) * d + off;
        const T* krow = pk + static_cast<int64_t>(j) * d + off;
        for (int t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
        srow[j] = acc * scale;
        mx = any ? std::max(mx, srow[j]) : srow[j];
        any = true;
      }
      T z = T(0);
      for (int j = 0; j < lk; ++j) {
        srow[j] = std::exp(srow[j] - mx);
        z += srow[j];
      }
      T* prow = probs.data() + (static_cast<size_t>(h) * lq + i) * lk;
      for (int j = 0; j < lk; ++j) prow[j] = srow[j] / z;
      T* orow = po + static_cast<int64_t>(i) * d + off;
      for (int j = 0; j < lk; ++j) {
        const T p = prow[j];
        if (p == T(0)) continue;
        const T* vrow = pv + static_cast<int64_t>(j) * d + off;
        for (int t = 0; t < dh; ++t) orow[t] += p * vrow[t];
      }
    }
  }

  if (ndt::detail::tracing<T>({q, k, v})) {
    ndt::detail::mark_and_record(
        out, [q, k, v, out, probs = std::move(probs), heads, lq, lk, d, dh,
              scale]() mutable {
          const T* g = out.grad_data();
          const T* pq2 = q.data();
          const T* pk2 = k.data();
          const T* pv2 = v.data();
          T* gq = q.requires_grad() ? q.grad_data() : nullptr;
          T* gk = k.requires_grad() ? k.grad_data() : nullptr;
          T* gv = v.requires_grad() ? v.grad_data() : nullptr;
          std::vector<T> dp(lk);
          for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < lq; ++i) {
              const T* prow = probs.data() + (static_cast<size_t>(h) * lq + i) * lk;
              const T* grow = g + static_cast<int64_t>(i) * d + off;
              // dV and dP
              T dot = T(0);
              for (int j = 0; j < lk; ++j) {
                const T p = prow[j];
                T acc = T(0);
                const T* vrow = pv2 + static_cast<int64_t>(j) * d + off;
                for (int t = 0; t < dh; ++t) acc += grow[t] * vrow[t];
                dp[j] = acc;
                dot += acc * p;
                if (gv && p != T(0)) {
                  T* gvrow = gv + static_cast<int64_t>(j) * d + off;
                  for (int t = 0; t < dh; ++t) gvrow[t] += p * grow[t];
                }
              }
              // softmax backward, then into q and k
              for (int j = 0; j < lk; ++j) {
                const T p = prow[j];
                if (p == T(0)) continue;
                const T ds = p * (dp[j] - dot) * scale;
                const T* qrow = pq2 + static_cast<int64_t>(i) * d + off;
                const T* krow = pk2 + static_cast<int64_t>(j) * d + off;
                if (gq) {
                  T* gqrow = gq + static_cast<int64_t>(i) * d + off;
                  for (int t = 0; t < dh; ++t) gqrow[t] += ds * krow[t];
                }
                if (gk) {
                  T* gkrow = gk + static_cast<int64_t>(j) * d + off;
                  for (int t = 0; t < dh; ++t) gkrow[t] += ds * qrow[t];
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameterized layers
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [out]

  static Linear init(int in, int out, Rng& rng) {
    Linear l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.w = ndt::uniform_init<T>({in, out}, rng, -bound, bound);
    l.b = Tensor<T>::zeros({out});
    return l;
  }

  // Small-scale init for output heads: predictions start near uniform but
  // gradients still reach the backbone.
  static Linear init_small(int in, int out, Rng& rng, double stddev = 0.01) {
    Linear l;
    l.w = ndt::normal_init<T>({in, out}, rng, 0.0, stddev);
    l.b = Tensor<T>::zeros({out});
    return l;
  }

  Tensor<T> operator()(Tensor<T> x) const { return ndt::affine(x, w, b); }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".w", w);
    pm.add(prefix + ".b", b);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm init(int dim) {
    LayerNorm ln;
    ln.gain = Tensor<T>::full({dim}, T(1));
    ln.bias = Tensor<T>::zeros({dim});
    return ln;
  }

  Tensor<T> operator()(Tensor<T> x) const {
    return ndt::layernorm_affine(x, gain, bias);
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".gain", gain);
    pm.add(prefix + ".bias", bias);
  }
};

template <class T>
struct MultiHeadAttention {
  int heads = 1;
  Linear<T> wq, wk, wv, wo;

  // kv_dim is the dimension of the cross-attended sequence (equals d_model
  // for self-attention).
  static MultiHeadAttention init(int d_model, int heads, int kv_dim, Rng& rng) {
    if (d_model % heads != 0) {
      throw std::invalid_argument("d_model must be divisible by head count");
    }
    MultiHeadAttention m;
    m.heads = heads;
    m.wq = Linear<T>::init(d_model, d_model, rng);
    m.wk = Linear<T>::init(kv_dim, d_model, rng);
    m.wv = Linear<T>::init(kv_dim, d_model, rng);
    m.wo = Linear<T>::init(d_model, d_model, rng);
    return m;
  }

  Tensor<T> operator()(Tensor<T> x_q, Tensor<T> x_kv, const AttentionMask& mask) const {
    return wo(fused_mha(wq(x_q), wk(x_kv), wv(x_kv), mask, heads));
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    wq.params(pm, prefix + ".wq");
    wk.params(pm, prefix + ".wk");
    wv.params(pm, prefix + ".wv");
    wo.params(pm, prefix + ".wo");
  }
};

template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;

  static FeedForward init(int d_model, Rng& rng) {
    FeedForward f;
    f.fc1 = Linear<T>::init(d_model, 4 * d_model, rng);
    f.fc2 = Linear<T>::init(4 * d_model, d_model, rng);
    return f;
  }

  Tensor<T> operator()(Tensor<T> x) const { return fc2(ndt::gelu(fc1(x))); }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    fc1.params(pm, prefix + ".fc1");
    fc2.params(pm, prefix + ".fc2");
  }
};

// Pre-layernorm block; the optional cross-attention sublayer sits between
// self-attention and the feed-forward.
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1;
  MultiHeadAttention<T> self_attn;
  std::optional<LayerNorm<T>> ln_cross;
  std::optional<MultiHeadAttention<T>> cross_attn;
  LayerNorm<T> ln2;
  FeedForward<T> ff;

  static TransformerBlock init(int d_model, int heads, Rng& rng,
                               std::optional<int> cross_kv_dim = std::nullopt) {
    TransformerBlock b;
    b.ln1 = LayerNorm<T>::init(d_model);
    b.self_attn = MultiHeadAttention<T>::init(d_model, heads, d_model, rng);
    if (cross_kv_dim) {
      b.ln_cross = LayerNorm<T>::init(d_model);
      b.cross_attn = MultiHeadAttention<T>::init(d_model, heads, *cross_kv_dim, rng);
    }
    b.ln2 = LayerNorm<T>::init(d_model);
    b.ff = FeedForward<T>::init(d_model, rng);
    return b;
  }

  Tensor<T> operator()(Tensor<T> x, const AttentionMask& self_mask,
                       std::optional<Tensor<T>> cross_kv = std::nullopt,
                       const AttentionMask* cross_mask = nullptr) const {
    Tensor<T> normed = ln1(x);
    x = ndt::add(x, self_attn(normed, normed, self_mask));
    if (cross_kv) {
      if (!cross_attn) throw std::invalid_argument("block has no cross-attention weights");
      const AttentionMask m = cross_mask
                                  ? *cross_mask
                                  : AttentionMask::full(x.rows(), cross_kv->rows());
      x = ndt::add(x, (*cross_attn)((*ln_cross)(x), *cross_kv, m));
    }
    return ndt::add(x, ff(ln2(x)));
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    ln1.params(pm, prefix + ".ln1");
    self_attn.params(pm, prefix + ".self");
    if (cross_attn) {
      ln_cross->params(pm, prefix + ".lnc");
      cross_attn->params(pm, prefix + ".cross");
    }
    ln2.params(pm, prefix + ".ln2");
    ff.params(pm, prefix + ".ff");
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean of -log softmax(logits)[target] over positions whose ignore flag is
// false. logits: [L x V].
template <class T>
Tensor<T> cross_entropy(Tensor<T> logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& ignore_mask) {
  const int l = logits.rows();
  const int v = logits.cols();
  if (static_cast<int>(targets.size()) != l ||
      static_cast<int>(ignore_mask.size()) != l) {
    throw std::invalid_argument("cross_entropy: length mismatch");
  }
  std::vector<int> keep_rows;
  std::vector<int> keep_targets;
  for (int i = 0; i < l; ++i) {
    if (ignore_mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= v) {
      throw std::invalid_argument("cross_entropy: target id " +
                                  std::to_string(targets[i]) + " out of range [0," +
                                  std::to_string(v) + ")");
    }
    keep_rows.push_back(i);
    keep_targets.push_back(targets[i]);
  }
  if (keep_rows.empty()) {
    throw std::invalid_argument("cross_entropy: no unignored positions");
  }
  Tensor<T> rows = ndt::gather_rows(logits, keep_rows);
  Tensor<T> logp = ndt::log_softmax_rows(rows);
  Tensor<T> picked = ndt::pick_per_row(logp, keep_targets);
  return ndt::mul_scalar(ndt::mean(picked), T(-1));
}

template <class T>
Tensor<T> cross_entropy(Tensor<T> logits, const std::vector<int>& targets) {
  return cross_entropy(logits, targets, std::vector<uint8_t>(targets.size(), 0));
}

// Mean squared error over all elements.
template <class T>
Tensor<T> mse(Tensor<T> a, Tensor<T> b) {
  ndt::detail::check_same_shape(a, b, "mse");
  Tensor<T> d = ndt::sub(a, b);
  return ndt::mean(ndt::mul(d, d));
}

}  // namespace moltok::nn
