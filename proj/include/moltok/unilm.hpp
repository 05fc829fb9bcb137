// Unified molecule-text language model: one id space holding specials,
// text word pieces and the K molecule codebook ids; sequence layouts for
// molecule-to-text and text-to-molecule autoregression; a decoder-only
// transformer trained on masked-target next-token prediction; constrained
// generation; and two-stage retrieval on top of the stage-1 model.
#pragma once

#include <string>
#include <vector>

#include "moltok/causalq.hpp"
#include "moltok/molencoder.hpp"
#include "moltok/molgraph.hpp"
#include "moltok/ndtensor.hpp"
#include "moltok/nnblocks.hpp"

namespace moltok::unilm {

using ndt::ParamMap;
using ndt::Rng;
using ndt::Tensor;

// ---------------------------------------------------------------------------
// Unified vocabulary
// ---------------------------------------------------------------------------

// Id layout: [specials][text pieces][molecule ids]. Molecule token j maps
// to codebook row j; rebuilding from the same corpus yields the same map.
class UnifiedVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMol = 3;
  static constexpr int kEndMol = 4;
  static constexpr int kSpecialCount = 5;

  // Word pieces: every printable ASCII character (byte fallback) plus the
  // most frequent whole words of the corpus, capped at text_size pieces.
  static UnifiedVocab build(const std::vector<std::string>& corpus_lines, int text_size,
                            int code_count);

  int size() const { return kSpecialCount + text_size_ + code_count_; }
  int text_size() const { return text_size_; }
  int code_count() const { return code_count_; }
  int text_base() const { return kSpecialCount; }
  int molecule_base() const { return kSpecialCount + text_size_; }

  bool is_molecule_token(int id) const {
    return id >= molecule_base() && id < size();
  }
  int molecule_token(int code_id) const;
  int code_of(int unified_id) const;

  // Display string for any id; molecule id j renders as "<mol_j>".
  std::string piece(int id) const;

  // Whole-word pieces with per-character fallback; never emits specials.
  std::vector<int> encode_text(const std::string& text) const;
  // Every character as its own piece (used for SMILES-as-text regions).
  std::vector<int> encode_chars(const std::string& text) const;
  // Inverse presentation: single spaces between pieces except inside runs
  // of single-character SMILES-alphabet pieces.
  std::string decode_text(const std::vector<int>& ids) const;

  std::string to_json() const;
  static UnifiedVocab from_json(const std::string& json_text);

 private:
  int text_size_ = 0;
  int code_count_ = 0;
  std::vector<std::string> pieces_;  // text pieces only, index = id - kSpecialCount
};

// ---------------------------------------------------------------------------
// Sequence layouts
// ---------------------------------------------------------------------------

struct UnifiedSequence {
  std::vector<int> ids;
  std::vector<uint8_t> target_mask;  // true = generation target

  int target_count() const {
    int n = 0;
    for (uint8_t m : target_mask) n += m ? 1 : 0;
    return n;
  }
};

// [BOS ⟨MOL⟩ s_1..s_M ⟨/MOL⟩ smiles-as-text prompt caption EOS];
// targets: caption tokens and EOS.
UnifiedSequence encode_mol_to_text(const std::vector<int>& mol_codes,
                                   const std::string& smiles, const std::string& prompt,
                                   const std::string& caption, const UnifiedVocab& vocab);

// [BOS prompt caption ⟨MOL⟩ s_1..s_M ⟨/MOL⟩ EOS];
// targets: s_1..s_M, ⟨/MOL⟩ and EOS ([MOL] itself is context).
UnifiedSequence encode_text_to_mol(const std::string& prompt, const std::string& caption,
                                   const std::vector<int>& mol_codes,
                                   const UnifiedVocab& vocab);

// ---------------------------------------------------------------------------
// Decoder-only LM with weight-tied output head
// ---------------------------------------------------------------------------

template <class T>
struct UnifiedLM {
  int dim = 0;
  int context = 0;
  Tensor<T> tok_embed;  // [|V| x d_m]; also the output projection
  Tensor<T> pos_embed;  // [context x d_m]
  std::vector<nn::TransformerBlock<T>> blocks;
  nn::LayerNorm<T> final_ln;

  static UnifiedLM init(int vocab_size, int dim, int heads, int block_count, int context,
                        Rng& rng) {
    UnifiedLM m;
    m.dim = dim;
    m.context = context;
    m.tok_embed = ndt::normal_init<T>({vocab_size, dim}, rng, 0.0, 0.02);
    m.pos_embed = ndt::normal_init<T>({context, dim}, rng, 0.0, 0.02);
    for (int b = 0; b < block_count; ++b) {
      m.blocks.push_back(nn::TransformerBlock<T>::init(dim, heads, rng));
    }
    m.final_ln = nn::LayerNorm<T>::init(dim);
    return m;
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".tok_embed", tok_embed);
    pm.add(prefix + ".pos_embed", pos_embed);
    for (size_t b = 0; b < blocks.size(); ++b) {
      blocks[b].params(pm, prefix + ".blk" + std::to_string(b));
    }
    final_ln.params(pm, prefix + ".final_ln");
  }

  // Causal logits for every position of `ids`.
  Tensor<T> logits(const std::vector<int>& ids) const {
    const int l = static_cast<int>(ids.size());
    if (l == 0) throw std::invalid_argument("lm: empty sequence");
    if (l > context) {
      throw std::invalid_argument("lm: sequence length " + std::to_string(l) +
                                  " overflows context " + std::to_string(context));
    }
    std::vector<int> pos(l);
    for (int i = 0; i < l; ++i) pos[i] = i;
    Tensor<T> x = ndt::add(ndt::embedding_lookup(tok_embed, ids),
                           ndt::embedding_lookup(pos_embed, pos));
    const auto causal = nn::causal_mask(l);
    for (const auto& b : blocks) x = b(x, causal);
    x = final_ln(x);
    return ndt::matmul(x, ndt::transpose(tok_embed));  // tied head
  }
};

// Mean negative log-likelihood over target positions only: position i with
// target_mask[i] contributes -log p(ids[i] | ids[<i]).
template <class T>
Tensor<T> lm_loss(const UnifiedLM<T>& model, const UnifiedSequence& seq) {
  const int l = static_cast<int>(seq.ids.size());
  if (l < 2 || seq.target_mask.size() != seq.ids.size()) {
    throw std::invalid_argument("lm_loss: malformed sequence");
  }
  if (seq.target_mask[0]) {
    throw std::invalid_argument("lm_loss: position 0 has no prefix to predict from");
  }
  std::vector<int> input(seq.ids.begin(), seq.ids.end() - 1);
  std::vector<int> targets(seq.ids.begin() + 1, seq.ids.end());
  std::vector<uint8_t> ignore(targets.size());
  bool any = false;
  for (size_t i = 0; i < targets.size(); ++i) {
    ignore[i] = seq.target_mask[i + 1] ? 0 : 1;
    any = any || seq.target_mask[i + 1];
  }
  if (!any) throw std::invalid_argument("lm_loss: no target positions");
  return nn::cross_entropy(model.logits(input), targets, ignore);
}

// Batch loss: global mean over all target positions of the batch.
template <class T>
Tensor<T> lm_loss_batch(const UnifiedLM<T>& model, const std::vector<UnifiedSequence>& batch) {
  if (batch.empty()) throw std::invalid_argument("lm_loss_batch: empty batch");
  Tensor<T> weighted;
  int64_t total = 0;
  for (const auto& seq : batch) {
    const int count = seq.target_count();
    Tensor<T> contrib = ndt::mul_scalar(lm_loss(model, seq), static_cast<T>(count));
    weighted = weighted.defined() ? ndt::add(weighted, contrib) : contrib;
    total += count;
  }
  return ndt::mul_scalar(weighted, T(1) / static_cast<T>(total));
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerateConfig {
  int max_new_tokens = 64;
  bool constrained = true;   // inside a molecule span admit only molecule ids
  double temperature = 0.0;  // 0 = greedy
  uint64_t seed = 0;
  int molecule_span = 8;     // M
};

// Extends `prefix` until EOS, the token budget, or the context limit.
// In constrained mode, after a ⟨MOL⟩ only molecule ids are admissible for
// exactly molecule_span steps, then ⟨/MOL⟩ is forced.
template <class T>
std::vector<int> generate(const UnifiedLM<T>& model, const UnifiedVocab& vocab,
                          std::vector<int> prefix, const GenerateConfig& cfg) {
  if (static_cast<int>(prefix.size()) >= model.context) {
    throw std::invalid_argument("generate: prefix overflows the context window");
  }
  Rng rng(cfg.seed);
  int mol_steps_left = -1;  // -1 = outside a molecule span
  if (cfg.constrained) {
    // pick up a span already opened by the prefix
    int since_mol = -1;
    for (size_t i = 0; i < prefix.size(); ++i) {
      if (prefix[i] == UnifiedVocab::kMol) since_mol = 0;
      else if (prefix[i] == UnifiedVocab::kEndMol) since_mol = -1;
      else if (since_mol >= 0) ++since_mol;
    }
    if (since_mol >= 0) mol_steps_left = cfg.molecule_span - since_mol;
  }

  std::vector<int> out = prefix;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    if (static_cast<int>(out.size()) >= model.context) break;
    Tensor<T> all_logits = model.logits(out);
    const int v = all_logits.cols();
    std::vector<double> row(v);
    const T* last = all_logits.data() + static_cast<int64_t>(all_logits.rows() - 1) * v;
    for (int j = 0; j < v; ++j) row[j] = static_cast<double>(last[j]);

    int next;
    if (cfg.constrained && mol_steps_left == 0) {
      next = UnifiedVocab::kEndMol;
    } else {
      if (cfg.constrained && mol_steps_left > 0) {
        for (int j = 0; j < v; ++j) {
          if (!vocab.is_molecule_token(j)) row[j] = -1e30;
        }
      } else if (cfg.constrained) {
        // outside a span: the closing boundary token is never admissible
        row[UnifiedVocab::kEndMol] = -1e30;
      }
      if (cfg.temperature <= 0.0) {
        next = 0;
        for (int j = 1; j < v; ++j) {
          if (row[j] > row[next]) next = j;
        }
      } else {
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        std::vector<double> p(v);
        double z = 0;
        for (int j = 0; j < v; ++j) {
          p[j] = std::exp((row[j] - mx) / cfg.temperature);
          z += p[j];
        }
        double r = rng.uniform() * z;
        next = v - 1;
        for (int j = 0; j < v; ++j) {
          r -= p[j];
          if (r <= 0) {
            next = j;
            break;
          }
        }
      }
    }

    out.push_back(next);
    if (cfg.constrained) {
      if (next == UnifiedVocab::kMol) {
        mol_steps_left = cfg.molecule_span;
      } else if (next == UnifiedVocab::kEndMol) {
        mol_steps_left = -1;
      } else if (mol_steps_left > 0) {
        --mol_steps_left;
      }
    }
    if (next == UnifiedVocab::kEos) break;
  }
  return out;
}

// Extracts the first complete molecule span after the prefix length.
inline std::vector<int> extract_molecule_codes(const std::vector<int>& ids,
                                               size_t from, const UnifiedVocab& vocab) {
  std::vector<int> codes;
  bool inside = false;
  for (size_t i = from; i < ids.size(); ++i) {
    if (ids[i] == UnifiedVocab::kMol) {
      inside = true;
      codes.clear();
    } else if (ids[i] == UnifiedVocab::kEndMol) {
      if (inside) return codes;
    } else if (inside && vocab.is_molecule_token(ids[i])) {
      codes.push_back(vocab.code_of(ids[i]));
    }
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Retrieval (stage-1 model)
// ---------------------------------------------------------------------------

struct RetrievalResult {
  double m2t_accuracy = 0.0;
  double m2t_recall20 = 0.0;
  double t2m_accuracy = 0.0;
  double t2m_recall20 = 0.0;
  std::vector<std::vector<int>> m2t_rankings;  // per molecule, text indices
  std::vector<std::vector<int>> t2m_rankings;
};

struct RetrievalPool {
  std::vector<molgraph::MolGraph> mols;
  std::vector<std::string> mol_keys;           // canonical SMILES
  std::vector<std::vector<int>> text_ids;      // tokenized captions, leading BOS
  std::vector<std::string> text_keys;          // caption strings
};

// Cosine-similarity ranking from the contrastive heads, re-ranked for the
// top rerank_k candidates by the matching logit. A hit counts when the
// retrieved item equals the gold item (key equality, so duplicate captions
// are not penalized).
template <class T>
RetrievalResult retrieve(const RetrievalPool& pool,
                         const molenc::EncoderParams<T>& encoder,
                         const causalq::QFormer<T>& qformer, int rerank_k) {
  const int n = static_cast<int>(pool.mols.size());
  if (n < 2 || pool.text_ids.size() != pool.mols.size()) {
    throw std::invalid_argument("retrieve: need >= 2 paired items");
  }
  std::vector<Tensor<T>> atom_feats;
  std::vector<Tensor<T>> zrows, yrows;
  for (int i = 0; i < n; ++i) {
    atom_feats.push_back(molenc::encode(pool.mols[i], encoder));
    zrows.push_back(qformer.molecule_rep(atom_feats[i]));
    yrows.push_back(qformer.text_rep(pool.text_ids[i]));
  }
  Tensor<T> z = ndt::concat_rows(zrows);
  Tensor<T> y = ndt::concat_rows(yrows);
  Tensor<T> sims = ndt::matmul(z, ndt::transpose(y));  // [n x n]

  auto rank_with_rerank = [&](int query, bool m2t) {
    std::vector<int> order(n);
    for (int j = 0; j < n; ++j) order[j] = j;
    auto sim_of = [&](int j) {
      return m2t ? sims.data()[static_cast<int64_t>(query) * n + j]
                 : sims.data()[static_cast<int64_t>(j) * n + query];
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return sim_of(a) > sim_of(b); });
    const int k = std::min(rerank_k, n);
    if (k > 1) {
      std::vector<std::pair<double, int>> scored;
      for (int t = 0; t < k; ++t) {
        const int j = order[t];
        Tensor<T> logit = m2t ? qformer.match_logit(atom_feats[query], pool.text_ids[j])
                              : qformer.match_logit(atom_feats[j], pool.text_ids[query]);
        scored.push_back({static_cast<double>(logit.item()), j});
      }
      std::stable_sort(scored.begin(), scored.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      for (int t = 0; t < k; ++t) order[t] = scored[t].second;
    }
    return order;
  };

  RetrievalResult res;
  int m2t_top1 = 0, m2t_r20 = 0, t2m_top1 = 0, t2m_r20 = 0;
  for (int i = 0; i < n; ++i) {
    auto m2t_order = rank_with_rerank(i, true);
    if (pool.text_keys[m2t_order[0]] == pool.text_keys[i]) ++m2t_top1;
    for (int t = 0; t < std::min(20, n); ++t) {
      if (pool.text_keys[m2t_order[t]] == pool.text_keys[i]) {
        ++m2t_r20;
        break;
      }
    }
    auto t2m_order = rank_with_rerank(i, false);
    if (pool.mol_keys[t2m_order[0]] == pool.mol_keys[i]) ++t2m_top1;
    for (int t = 0; t < std::min(20, n); ++t) {
      if (pool.mol_keys[t2m_order[t]] == pool.mol_keys[i]) {
        ++t2m_r20;
        break;
      }
    }
    res.m2t_rankings.push_back(std::move(m2t_order));
    res.t2m_rankings.push_back(std::move(t2m_order));
  }
  res.m2t_accuracy = static_cast<double>(m2t_top1) / n;
  res.m2t_recall20 = static_cast<double>(m2t_r20) / n;
  res.t2m_accuracy = static_cast<double>(t2m_top1) / n;
  res.t2m_recall20 = static_cast<double>(t2m_r20) / n;
  return res;
}

}  // namespace moltok::unilm
