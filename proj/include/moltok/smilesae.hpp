// Sequence autoencoder over SMILES with a fixed-size latent of M vectors.
// The frozen encoder provides the alignment target X_S for the tokenizer;
// the frozen decoder turns adapted token embeddings back into SMILES.
#pragma once

#include <string>
#include <vector>

#include "moltok/ndtensor.hpp"
#include "moltok/nnblocks.hpp"

namespace moltok::smilesae {

using ndt::ParamMap;
using ndt::Rng;
using ndt::Tensor;

// Character-level vocabulary with Cl/Br as single tokens.
class SmilesVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  SmilesVocab();

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }

  // BOS + ids + EOS; throws std::invalid_argument with the offending
  // position for characters outside the grammar.
  std::vector<int> tokenize(const std::string& smiles) const;

  // Inverse of tokenize: drops specials, concatenates the rest.
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
};

template <class T>
struct SmilesAutoencoder {
  int latent_slots = 0;  // M
  int dim = 0;           // d_s
  int max_len = 0;

  Tensor<T> enc_tok_embed;  // [V x d_s]
  Tensor<T> enc_pos_embed;  // [max_len x d_s]
  std::vector<nn::TransformerBlock<T>> enc_blocks;
  Tensor<T> pool_slots;  // [M x d_s]
  nn::TransformerBlock<T> pool_block;
  nn::LayerNorm<T> latent_ln;

  Tensor<T> dec_tok_embed;
  Tensor<T> dec_pos_embed;
  std::vector<nn::TransformerBlock<T>> dec_blocks;
  nn::LayerNorm<T> dec_ln;
  nn::Linear<T> dec_out;

  static SmilesAutoencoder init(int vocab_size, int latent_slots, int dim, int heads,
                                int encoder_blocks, int decoder_blocks, int max_len,
                                Rng& rng) {
    SmilesAutoencoder m;
    m.latent_slots = latent_slots;
    m.dim = dim;
    m.max_len = max_len;
    m.enc_tok_embed = ndt::normal_init<T>({vocab_size, dim}, rng, 0.0, 0.02);
    m.enc_pos_embed = ndt::normal_init<T>({max_len, dim}, rng, 0.0, 0.02);
    for (int i = 0; i < encoder_blocks; ++i) {
      m.enc_blocks.push_back(nn::TransformerBlock<T>::init(dim, heads, rng));
    }
    m.pool_slots = ndt::normal_init<T>({latent_slots, dim}, rng, 0.0, 0.02);
    m.pool_block = nn::TransformerBlock<T>::init(dim, heads, rng, dim);
    m.latent_ln = nn::LayerNorm<T>::init(dim);
    m.dec_tok_embed = ndt::normal_init<T>({vocab_size, dim}, rng, 0.0, 0.02);
    m.dec_pos_embed = ndt::normal_init<T>({max_len, dim}, rng, 0.0, 0.02);
    for (int i = 0; i < decoder_blocks; ++i) {
      m.dec_blocks.push_back(nn::TransformerBlock<T>::init(dim, heads, rng, dim));
    }
    m.dec_ln = nn::LayerNorm<T>::init(dim);
    m.dec_out = nn::Linear<T>::init(dim, vocab_size, rng);
    return m;
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".enc_tok_embed", enc_tok_embed);
    pm.add(prefix + ".enc_pos_embed", enc_pos_embed);
    for (size_t i = 0; i < enc_blocks.size(); ++i) {
      enc_blocks[i].params(pm, prefix + ".enc" + std::to_string(i));
    }
    pm.add(prefix + ".pool_slots", pool_slots);
    pool_block.params(pm, prefix + ".pool");
    latent_ln.params(pm, prefix + ".latent_ln");
    pm.add(prefix + ".dec_tok_embed", dec_tok_embed);
    pm.add(prefix + ".dec_pos_embed", dec_pos_embed);
    for (size_t i = 0; i < dec_blocks.size(); ++i) {
      dec_blocks[i].params(pm, prefix + ".dec" + std::to_string(i));
    }
    dec_ln.params(pm, prefix + ".dec_ln");
    dec_out.params(pm, prefix + ".dec_out");
  }

  // Bidirectional encoding of a full token sequence (with BOS/EOS), pooled
  // into exactly latent_slots rows.
  Tensor<T> encode_ids(const std::vector<int>& ids) const {
    const int l = static_cast<int>(ids.size());
    if (l == 0) throw std::invalid_argument("encode_ids: empty sequence");
    if (l > max_len) {
      throw std::invalid_argument("encode_ids: sequence length " + std::to_string(l) +
                                  " exceeds max_len " + std::to_string(max_len));
    }
    std::vector<int> pos(l);
    for (int i = 0; i < l; ++i) pos[i] = i;
    Tensor<T> x = ndt::add(ndt::embedding_lookup(enc_tok_embed, ids),
                           ndt::embedding_lookup(enc_pos_embed, pos));
    const auto full = nn::AttentionMask::full(l, l);
    for (const auto& b : enc_blocks) x = b(x, full);
    Tensor<T> slots = pool_slots;
    slots = pool_block(slots, nn::AttentionMask::full(latent_slots, latent_slots), x);
    return latent_ln(slots);
  }

  // Teacher-forced logits for every next-token position.
  Tensor<T> decode_logits(Tensor<T> latent, const std::vector<int>& input_ids) const {
    const int l = static_cast<int>(input_ids.size());
    if (l == 0) throw std::invalid_argument("decode_logits: empty input");
    std::vector<int> pos(l);
    for (int i = 0; i < l; ++i) pos[i] = i;
    Tensor<T> x = ndt::add(ndt::embedding_lookup(dec_tok_embed, input_ids),
                           ndt::embedding_lookup(dec_pos_embed, pos));
    const auto causal = nn::causal_mask(l);
    for (const auto& b : dec_blocks) x = b(x, causal, latent);
    return dec_out(dec_ln(x));
  }

  // Greedy autoregressive decoding; returns inner ids (no BOS, no EOS).
  // Stops at EOS or after emitting budget tokens; budget 1 may yield an
  // empty sequence, never a failure.
  std::vector<int> greedy_decode(Tensor<T> latent, int budget) const {
    std::vector<int> seq = {SmilesVocab::kBos};
    std::vector<int> out;
    while (static_cast<int>(out.size()) < budget &&
           static_cast<int>(seq.size()) < max_len) {
      Tensor<T> logits = decode_logits(latent, seq);
      const int last = logits.rows() - 1;
      const T* row = logits.data() + static_cast<int64_t>(last) * logits.cols();
      int best = 0;
      for (int j = 1; j < logits.cols(); ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (best == SmilesVocab::kEos) break;
      out.push_back(best);
      seq.push_back(best);
    }
    return out;
  }

  // Cross-entropy of reconstructing `ids` (BOS..EOS) under teacher forcing.
  Tensor<T> reconstruction_loss(const std::vector<int>& ids) const {
    if (ids.size() < 2) throw std::invalid_argument("reconstruction_loss: need BOS+EOS");
    std::vector<int> input(ids.begin(), ids.end() - 1);
    std::vector<int> target(ids.begin() + 1, ids.end());
    Tensor<T> latent = encode_ids(ids);
    Tensor<T> logits = decode_logits(latent, input);
    return nn::cross_entropy(logits, target);
  }
};

// String-level wrappers.
template <class T>
Tensor<T> encode(const std::string& smiles, const SmilesVocab& vocab,
                 const SmilesAutoencoder<T>& model) {
  return model.encode_ids(vocab.tokenize(smiles));
}

template <class T>
std::string decode(Tensor<T> latent, const SmilesVocab& vocab,
                   const SmilesAutoencoder<T>& model, int budget) {
  return vocab.detokenize(model.greedy_decode(latent, budget));
}

}  // namespace moltok::smilesae
