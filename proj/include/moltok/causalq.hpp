// Causal query transformer: M learnable queries self-attend under a causal
// mask and cross-attend to per-atom features, so query i depends only on
// queries 1..i. A text branch shares the self-attention weights; joint
// modes drive the matching and grounded-generation objectives.
#pragma once

#include <optional>

#include "moltok/ndtensor.hpp"
#include "moltok/nnblocks.hpp"

namespace moltok::causalq {

using ndt::ParamMap;
using ndt::Rng;
using ndt::Tensor;

template <class T>
Tensor<T> l2_normalize_rows(Tensor<T> x, T eps = T(1e-12)) {
  Tensor<T> sq = ndt::sum_rows(ndt::mul(x, x));
  return ndt::div_colvec(x, ndt::sqrt_eps(sq, eps));
}

enum class JointMode {
  Matching,    // query i sees queries <= i and all text; text sees everything
  Generation,  // queries see all queries, no text; text sees queries + causal text
};

template <class T>
struct QFormer {
  int query_count = 0;  // M
  int dim = 0;          // d
  int max_text_len = 0;

  Tensor<T> query_bank;  // [M x d], learnable
  Tensor<T> text_embed;  // [text vocab x d]
  Tensor<T> text_pos;    // [max_text_len x d]

  struct Block {
    nn::LayerNorm<T> ln_self_q, ln_self_t;
    nn::MultiHeadAttention<T> self_attn;  // shared between branches
    nn::LayerNorm<T> ln_cross;
    nn::MultiHeadAttention<T> cross_attn;  // queries -> atom features
    nn::LayerNorm<T> ln_ff_q, ln_ff_t;
    nn::FeedForward<T> ff_q, ff_t;
  };
  std::vector<Block> blocks;
  nn::LayerNorm<T> out_ln_q, out_ln_t;
  nn::Linear<T> text_out;  // grounded-generation head over the text vocab
  nn::Linear<T> mtm_head;  // binary matched/unmatched logit from z_M

  static QFormer init(int query_count, int dim, int heads, int block_count,
                      int atom_feature_dim, int text_vocab, int max_text_len,
                      Rng& rng) {
    QFormer m;
    m.query_count = query_count;
    m.dim = dim;
    m.max_text_len = max_text_len;
    m.query_bank = ndt::normal_init<T>({query_count, dim}, rng, 0.0, 0.02);
    m.text_embed = ndt::normal_init<T>({text_vocab, dim}, rng, 0.0, 0.02);
    m.text_pos = ndt::normal_init<T>({max_text_len, dim}, rng, 0.0, 0.02);
    for (int b = 0; b < block_count; ++b) {
      Block blk;
      blk.ln_self_q = nn::LayerNorm<T>::init(dim);
      blk.ln_self_t = nn::LayerNorm<T>::init(dim);
      blk.self_attn = nn::MultiHeadAttention<T>::init(dim, heads, dim, rng);
      blk.ln_cross = nn::LayerNorm<T>::init(dim);
      blk.cross_attn = nn::MultiHeadAttention<T>::init(dim, heads, atom_feature_dim, rng);
      blk.ln_ff_q = nn::LayerNorm<T>::init(dim);
      blk.ln_ff_t = nn::LayerNorm<T>::init(dim);
      blk.ff_q = nn::FeedForward<T>::init(dim, rng);
      blk.ff_t = nn::FeedForward<T>::init(dim, rng);
      m.blocks.push_back(std::move(blk));
    }
    m.out_ln_q = nn::LayerNorm<T>::init(dim);
    m.out_ln_t = nn::LayerNorm<T>::init(dim);
    m.text_out = nn::Linear<T>::init_small(dim, text_vocab, rng);
    m.mtm_head = nn::Linear<T>::init_small(dim, 1, rng);
    return m;
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".query_bank", query_bank);
    pm.add(prefix + ".text_embed", text_embed);
    pm.add(prefix + ".text_pos", text_pos);
    for (size_t b = 0; b < blocks.size(); ++b) {
      const std::string bp = prefix + ".blk" + std::to_string(b);
      auto& blk = blocks[b];
      blk.ln_self_q.params(pm, bp + ".ln_self_q");
      blk.ln_self_t.params(pm, bp + ".ln_self_t");
      blk.self_attn.params(pm, bp + ".self");
      blk.ln_cross.params(pm, bp + ".ln_cross");
      blk.cross_attn.params(pm, bp + ".cross");
      blk.ln_ff_q.params(pm, bp + ".ln_ff_q");
      blk.ln_ff_t.params(pm, bp + ".ln_ff_t");
      blk.ff_q.params(pm, bp + ".ff_q");
      blk.ff_t.params(pm, bp + ".ff_t");
    }
    out_ln_q.params(pm, prefix + ".out_ln_q");
    out_ln_t.params(pm, prefix + ".out_ln_t");
    text_out.params(pm, prefix + ".text_out");
    mtm_head.params(pm, prefix + ".mtm_head");
  }

  Tensor<T> embed_text_ids(const std::vector<int>& ids) const {
    const int l = static_cast<int>(ids.size());
    if (l == 0) throw std::invalid_argument("qformer: empty text");
    if (l > max_text_len) {
      throw std::invalid_argument("qformer: text length " + std::to_string(l) +
                                  " exceeds " + std::to_string(max_text_len));
    }
    std::vector<int> pos(l);
    for (int i = 0; i < l; ++i) pos[i] = i;
    return ndt::add(ndt::embedding_lookup(text_embed, ids),
                    ndt::embedding_lookup(text_pos, pos));
  }

  // Query-only path: causal self-attention plus cross-attention to all
  // unmasked atom rows. Returns Z = [M x d].
  Tensor<T> forward_queries(Tensor<T> atom_features,
                            const nn::AttentionMask* atom_mask = nullptr) const {
    Tensor<T> q = query_bank;
    const auto causal = nn::causal_mask(query_count);
    for (const auto& blk : blocks) {
      Tensor<T> qn = blk.ln_self_q(q);
      q = ndt::add(q, blk.self_attn(qn, qn, causal));
      const nn::AttentionMask cmask =
          atom_mask ? *atom_mask
                    : nn::AttentionMask::full(query_count, atom_features.rows());
      q = ndt::add(q, blk.cross_attn(blk.ln_cross(q), atom_features, cmask));
      q = ndt::add(q, blk.ff_q(blk.ln_ff_q(q)));
    }
    return out_ln_q(q);
  }

  // Text-only path: bidirectional self-attention with the shared weights;
  // returns all token states, with row 0 (the sequence-start token) serving
  // as the pooled text representation.
  Tensor<T> forward_text(const std::vector<int>& ids) const {
    Tensor<T> t = embed_text_ids(ids);
    const auto full = nn::AttentionMask::full(t.rows(), t.rows());
    for (const auto& blk : blocks) {
      Tensor<T> tn = blk.ln_self_t(t);
      t = ndt::add(t, blk.self_attn(tn, tn, full));
      t = ndt::add(t, blk.ff_t(blk.ln_ff_t(t)));
    }
    return out_ln_t(t);
  }

  struct JointOutput {
    Tensor<T> queries;  // [M x d]
    Tensor<T> text;     // [Lt x d]
  };

  nn::AttentionMask joint_mask(int text_len, JointMode mode) const {
    const int m = query_count;
    const int n = m + text_len;
    nn::AttentionMask mask;
    mask.query_len = n;
    mask.key_len = n;
    mask.allow.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < m; ++i) {
      const int qlimit = mode == JointMode::Matching ? i : m - 1;
      for (int j = 0; j <= qlimit; ++j) mask.set(i, j, true);
      if (mode == JointMode::Matching) {
        for (int j = m; j < n; ++j) mask.set(i, j, true);
      }
    }
    for (int i = m; i < n; ++i) {
      for (int j = 0; j < m; ++j) mask.set(i, j, true);  // text sees all queries
      const int tlimit = mode == JointMode::Matching ? n - 1 : i;
      for (int j = m; j <= tlimit; ++j) mask.set(i, j, true);
    }
    return mask;
  }

  JointOutput forward_joint(Tensor<T> atom_features, const std::vector<int>& text_ids,
                            JointMode mode) const {
    Tensor<T> q = query_bank;
    Tensor<T> t = embed_text_ids(text_ids);
    const int lt = t.rows();
    const auto mask = joint_mask(lt, mode);
    for (const auto& blk : blocks) {
      Tensor<T> joint = ndt::concat_rows<T>({blk.ln_self_q(q), blk.ln_self_t(t)});
      Tensor<T> att = blk.self_attn(joint, joint, mask);
      q = ndt::add(q, ndt::slice_rows(att, 0, query_count));
      t = ndt::add(t, ndt::slice_rows(att, query_count, query_count + lt));
      const auto cmask = nn::AttentionMask::full(query_count, atom_features.rows());
      q = ndt::add(q, blk.cross_attn(blk.ln_cross(q), atom_features, cmask));
      q = ndt::add(q, blk.ff_q(blk.ln_ff_q(q)));
      t = ndt::add(t, blk.ff_t(blk.ln_ff_t(t)));
    }
    return {out_ln_q(q), out_ln_t(t)};
  }

  // z_M of the query-only path, L2-normalized: the molecule-side
  // representation used by the contrastive objective and retrieval.
  Tensor<T> molecule_rep(Tensor<T> atom_features) const {
    Tensor<T> z = forward_queries(atom_features);
    Tensor<T> last = ndt::slice_rows(z, query_count - 1, query_count);
    return l2_normalize_rows(last);
  }

  // Pooled text representation (position 0), L2-normalized.
  Tensor<T> text_rep(const std::vector<int>& ids) const {
    Tensor<T> t = forward_text(ids);
    return l2_normalize_rows(ndt::slice_rows(t, 0, 1));
  }

  // Matched/unmatched logit for a (molecule, text) pair from z_M of the
  // joint matching pass.
  Tensor<T> match_logit(Tensor<T> atom_features, const std::vector<int>& text_ids) const {
    JointOutput out = forward_joint(atom_features, text_ids, JointMode::Matching);
    Tensor<T> zm = ndt::slice_rows(out.queries, query_count - 1, query_count);
    return mtm_head(zm);  // [1 x 1]
  }
};

// Symmetric in-batch InfoNCE over L2-normalized representations; both
// softmax directions averaged. Rows of z_batch and y_batch are paired.
template <class T>
Tensor<T> mtc_loss(Tensor<T> z_batch, Tensor<T> y_batch, T tau) {
  if (tau <= T(0)) throw std::invalid_argument("mtc_loss: tau must be positive");
  if (z_batch.rows() != y_batch.rows() || z_batch.cols() != y_batch.cols()) {
    throw std::invalid_argument("mtc_loss: batch shape mismatch");
  }
  const int b = z_batch.rows();
  Tensor<T> zn = l2_normalize_rows(z_batch);
  Tensor<T> yn = l2_normalize_rows(y_batch);
  Tensor<T> sims = ndt::mul_scalar(ndt::matmul(zn, ndt::transpose(yn)), T(1) / tau);
  std::vector<int> diag(b);
  for (int i = 0; i < b; ++i) diag[i] = i;
  Tensor<T> m2t = nn::cross_entropy(sims, diag);
  Tensor<T> t2m = nn::cross_entropy(ndt::transpose(sims), diag);
  return ndt::mul_scalar(ndt::add(m2t, t2m), T(0.5));
}

// Matching loss over a full pairwise score matrix scores[i][j] =
// logit(molecule i, text j): each anchor contrasts its matched score
// against the row- and column-mispaired scores.
template <class T>
Tensor<T> mtm_loss(Tensor<T> scores) {
  const int b = scores.rows();
  if (scores.cols() != b) throw std::invalid_argument("mtm_loss: square matrix required");
  if (b < 2) throw std::invalid_argument("mtm_loss: need at least 2 pairs in batch");
  std::vector<int> rows_idx, cols_idx;
  rows_idx.reserve(static_cast<size_t>(b) * (2 * b - 1));
  cols_idx.reserve(rows_idx.capacity());
  for (int i = 0; i < b; ++i) {
    rows_idx.push_back(i);
    cols_idx.push_back(i);  // matched pair first
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      rows_idx.push_back(i);
      cols_idx.push_back(j);  // mispaired text
    }
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      rows_idx.push_back(j);
      cols_idx.push_back(i);  // mispaired molecule
    }
  }
  Tensor<T> flat = ndt::gather_elems(scores, rows_idx, cols_idx);
  Tensor<T> grouped = ndt::reshape(flat, {b, 2 * b - 1});
  return nn::cross_entropy(grouped, std::vector<int>(b, 0));
}

// Teacher-forced negative log-likelihood of the caption given the
// molecule; queries are not causally masked in this objective, text is.
// caption_ids are word-piece ids without specials; bos_id/eos_id frame it.
template <class T>
Tensor<T> mtg_loss(const QFormer<T>& model, Tensor<T> atom_features,
                   const std::vector<int>& caption_ids, int bos_id, int eos_id) {
  if (caption_ids.empty()) throw std::invalid_argument("mtg_loss: empty caption");
  std::vector<int> input = {bos_id};
  input.insert(input.end(), caption_ids.begin(), caption_ids.end());
  std::vector<int> target(caption_ids.begin(), caption_ids.end());
  target.push_back(eos_id);
  auto out = model.forward_joint(atom_features, input, JointMode::Generation);
  Tensor<T> logits = model.text_out(out.text);
  return nn::cross_entropy(logits, target);
}

}  // namespace moltok::causalq
