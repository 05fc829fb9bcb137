// Vector-quantized molecule tokenizer: nearest-code assignment over a
// learnable codebook, straight-through gradient copy, the three-term
// training loss (alignment + codebook + beta * commitment), and the
// molecule <-> token-sequence paths through the frozen stages.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moltok/causalq.hpp"
#include "moltok/molencoder.hpp"
#include "moltok/molgraph.hpp"
#include "moltok/ndtensor.hpp"
#include "moltok/smilesae.hpp"

namespace moltok::vqtok {

using ndt::Rng;
using ndt::Tensor;

// Uniform(-1/K, 1/K) rows, matching the query scale at init.
template <class T>
Tensor<T> init_codebook(int code_count, int dim, Rng& rng) {
  const double bound = 1.0 / static_cast<double>(code_count);
  return ndt::uniform_init<T>({code_count, dim}, rng, -bound, bound);
}

template <class T>
struct QuantizeResult {
  std::vector<int> ids;   // [M], each in [0, K)
  Tensor<T> embeddings;   // [M x d], selected codebook rows (differentiable)
  Tensor<T> distances;    // [M x K], squared L2, constant diagnostic
};

// ids[i] = argmin_j ||z_i - c_j||_2 with ties resolved to the lowest index.
template <class T>
QuantizeResult<T> quantize(Tensor<T> z, Tensor<T> codebook) {
  if (z.cols() != codebook.cols()) {
    throw std::invalid_argument("quantize: dim mismatch " + ndt::shape_str(z.shape()) +
                                " vs " + ndt::shape_str(codebook.shape()));
  }
  const int m = z.rows();
  const int k = codebook.rows();
  const int d = z.cols();
  QuantizeResult<T> res;
  res.distances = Tensor<T>::zeros({m, k});
  res.ids.resize(m);
  const T* pz = z.data();
  const T* pc = codebook.data();
  T* pd = res.distances.data();
  for (int i = 0; i < m; ++i) {
    int best = 0;
    T best_d = T(0);
    for (int j = 0; j < k; ++j) {
      T acc = T(0);
      for (int t = 0; t < d; ++t) {
        const T diff = pz[i * d + t] - pc[j * d + t];
        acc += diff * diff;
      }
      pd[static_cast<int64_t>(i) * k + j] = acc;
      if (j == 0 || acc < best_d) {
        best = j;
        best_d = acc;
      }
    }
    res.ids[i] = best;
  }
  res.embeddings = ndt::embedding_lookup(codebook, res.ids);
  return res;
}

// Forward: the quantized values. Backward: the upstream gradient is copied
// to z unchanged; nothing reaches the codebook through this path.
template <class T>
Tensor<T> ste(Tensor<T> z, Tensor<T> quantized) {
  ndt::detail::check_same_shape(z, quantized, "ste");
  Tensor<T> out = quantized.clone_detached();
  if (ndt::Tape<T>::active() && z.requires_grad()) {
    out.set_requires_grad(true);
    ndt::Tape<T>::active()->record(out, [z, out]() mutable {
      const T* g = out.grad_data();
      T* gz = z.grad_data();
      for (int64_t i = 0; i < z.numel(); ++i) gz[i] += g[i];
    });
  }
  return out;
}

// Slot-wise two-layer MLP mapping [M x d] to [M x d_s].
template <class T>
struct Adapter {
  nn::Linear<T> fc1, fc2;

  static Adapter init(int dim, int out_dim, Rng& rng) {
    Adapter a;
    a.fc1 = nn::Linear<T>::init(dim, dim, rng);
    a.fc2 = nn::Linear<T>::init(dim, out_dim, rng);
    return a;
  }

  Tensor<T> operator()(Tensor<T> x) const { return fc2(ndt::gelu(fc1(x))); }

  void params(ndt::ParamMap<T>& pm, const std::string& prefix) {
    fc1.params(pm, prefix + ".fc1");
    fc2.params(pm, prefix + ".fc2");
  }
};

template <class T>
struct TokenizerLossParts {
  Tensor<T> alignment;   // mean squared alignment error X_R vs X_S
  Tensor<T> codebook;    // mean_i ||sg[z_i] - c_{s_i}||^2
  Tensor<T> commitment;  // mean_i ||sg[c_{s_i}] - z_i||^2
  Tensor<T> total;       // alignment + codebook + beta * commitment
  T beta;
};

// The gradient of the codebook term reaches only the selected code rows;
// the commitment term reaches only z; x_s is treated as constant.
template <class T>
TokenizerLossParts<T> tokenizer_loss(Tensor<T> x_r, Tensor<T> x_s, Tensor<T> z,
                                     Tensor<T> codebook, const std::vector<int>& ids,
                                     T beta) {
  if (static_cast<int>(ids.size()) != z.rows()) {
    throw std::invalid_argument("tokenizer_loss: one code id per query row required");
  }
  const T inv_m = T(1) / static_cast<T>(z.rows());
  TokenizerLossParts<T> parts;
  parts.beta = beta;
  parts.alignment = nn::mse(x_r, ndt::stop_gradient(x_s));

  Tensor<T> selected = ndt::embedding_lookup(codebook, ids);
  Tensor<T> dcb = ndt::sub(ndt::stop_gradient(z), selected);
  parts.codebook = ndt::mul_scalar(ndt::sum(ndt::mul(dcb, dcb)), inv_m);

  Tensor<T> dcm = ndt::sub(ndt::stop_gradient(selected), z);
  parts.commitment = ndt::mul_scalar(ndt::sum(ndt::mul(dcm, dcm)), inv_m);

  parts.total = ndt::add(ndt::add(parts.alignment, parts.codebook),
                         ndt::mul_scalar(parts.commitment, beta));
  return parts;
}

// The frozen/trained pieces needed to map molecules to token sequences and
// back. Which members are trainable depends on the stage; this struct only
// wires the forward paths.
template <class T>
struct TokenizerStack {
  molenc::EncoderParams<T> encoder;
  causalq::QFormer<T> qformer;
  Tensor<T> codebook;  // [K x d]
  Adapter<T> adapter;
  smilesae::SmilesVocab vocab;
  smilesae::SmilesAutoencoder<T> ae;
  int decode_budget = 64;

  int code_count() const { return codebook.rows(); }

  std::vector<int> tokenize(const molgraph::MolGraph& mol) const {
    Tensor<T> x = molenc::encode(mol, encoder);
    Tensor<T> z = qformer.forward_queries(x);
    return quantize(z, codebook).ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    for (int id : ids) {
      if (id < 0 || id >= code_count()) {
        throw std::invalid_argument("detokenize: code id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(code_count()) +
                                    ")");
      }
    }
    Tensor<T> rows = ndt::embedding_lookup(codebook, ids);
    Tensor<T> latent = adapter(rows);
    return smilesae::decode(latent, vocab, ae, decode_budget);
  }
};

struct UsageReport {
  std::vector<int64_t> histogram;  // per code id
  double perplexity = 0.0;         // exp of usage entropy
  int used_codes = 0;
};

inline UsageReport codebook_usage(const std::vector<std::vector<int>>& token_seqs,
                                  int code_count) {
  UsageReport rep;
  rep.histogram.assign(code_count, 0);
  int64_t total = 0;
  for (const auto& seq : token_seqs) {
    for (int id : seq) {
      rep.histogram.at(id) += 1;
      ++total;
    }
  }
  double entropy = 0.0;
  for (int64_t c : rep.histogram) {
    if (c == 0) continue;
    ++rep.used_codes;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    entropy -= p * std::log(p);
  }
  rep.perplexity = total == 0 ? 0.0 : std::exp(entropy);
  return rep;
}

}  // namespace moltok::vqtok
