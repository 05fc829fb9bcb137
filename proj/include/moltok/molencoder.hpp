// Message-passing molecule encoder producing per-atom features [N x F].
// GIN-style sum aggregation with learnable epsilon and bond-type
// embeddings; the output is permutation-equivariant.
#pragma once

#include "moltok/molgraph.hpp"
#include "moltok/ndtensor.hpp"
#include "moltok/nnblocks.hpp"

namespace moltok::molenc {

using ndt::ParamMap;
using ndt::Rng;
using ndt::Tensor;

constexpr int kMaxDegreeBucket = 6;

template <class T>
struct EncoderParams {
  Tensor<T> element_embed;   // [element count x F]
  Tensor<T> charge_embed;    // [5 x F], charge -2..2
  Tensor<T> aromatic_embed;  // [2 x F]
  Tensor<T> degree_embed;    // [kMaxDegreeBucket+1 x F]
  Tensor<T> bond_embed;      // [4 x F], by bond order

  struct Layer {
    Tensor<T> epsilon;  // [1]
    nn::Linear<T> fc1, fc2;
  };
  std::vector<Layer> layers;

  int feature_dim() const { return element_embed.cols(); }

  static EncoderParams init(int feature_dim, int layer_count, Rng& rng) {
    if (layer_count < 1) throw std::invalid_argument("encoder needs >= 1 layer");
    EncoderParams p;
    const double s = 0.2;
    p.element_embed =
        ndt::uniform_init<T>({molgraph::kElementCount, feature_dim}, rng, -s, s);
    p.charge_embed = ndt::uniform_init<T>({5, feature_dim}, rng, -s, s);
    p.aromatic_embed = ndt::uniform_init<T>({2, feature_dim}, rng, -s, s);
    p.degree_embed =
        ndt::uniform_init<T>({kMaxDegreeBucket + 1, feature_dim}, rng, -s, s);
    p.bond_embed = ndt::uniform_init<T>({4, feature_dim}, rng, -s, s);
    for (int l = 0; l < layer_count; ++l) {
      typename EncoderParams::Layer layer;
      layer.epsilon = Tensor<T>::zeros({1});
      layer.fc1 = nn::Linear<T>::init(feature_dim, feature_dim, rng);
      layer.fc2 = nn::Linear<T>::init(feature_dim, feature_dim, rng);
      p.layers.push_back(std::move(layer));
    }
    return p;
  }

  void params(ParamMap<T>& pm, const std::string& prefix) {
    pm.add(prefix + ".element_embed", element_embed);
    pm.add(prefix + ".charge_embed", charge_embed);
    pm.add(prefix + ".aromatic_embed", aromatic_embed);
    pm.add(prefix + ".degree_embed", degree_embed);
    pm.add(prefix + ".bond_embed", bond_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = prefix + ".layer" + std::to_string(l);
      pm.add(lp + ".epsilon", layers[l].epsilon);
      layers[l].fc1.params(pm, lp + ".fc1");
      layers[l].fc2.params(pm, lp + ".fc2");
    }
  }
};

// Row i sums the embedding-table entries for atom i's element, charge,
// aromatic flag and degree.
template <class T>
Tensor<T> featurize_atoms(const molgraph::MolGraph& mol, const EncoderParams<T>& p) {
  const int n = mol.atom_count();
  if (n == 0) throw std::invalid_argument("featurize_atoms: empty molecule");
  const auto adj = mol.adjacency();
  std::vector<int> el(n), ch(n), ar(n), deg(n);
  for (int i = 0; i < n; ++i) {
    const auto& a = mol.atoms[i];
    el[i] = static_cast<int>(a.element);
    if (a.formal_charge < -2 || a.formal_charge > 2) {
      throw std::invalid_argument("featurize_atoms: charge out of range at atom " +
                                  std::to_string(i));
    }
    ch[i] = a.formal_charge + 2;
    ar[i] = a.aromatic ? 1 : 0;
    deg[i] = std::min<int>(static_cast<int>(adj[i].size()), kMaxDegreeBucket);
  }
  Tensor<T> h = ndt::embedding_lookup(p.element_embed, el);
  h = ndt::add(h, ndt::embedding_lookup(p.charge_embed, ch));
  h = ndt::add(h, ndt::embedding_lookup(p.aromatic_embed, ar));
  h = ndt::add(h, ndt::embedding_lookup(p.degree_embed, deg));
  return h;
}

// L rounds of h_i <- MLP((1 + eps) h_i + sum_j (h_j + bond_embed(i,j))).
// The neighbor sum is a constant adjacency matmul and the bond-embedding
// sum a constant bond-type count matmul, so gradients reach the tables.
template <class T>
Tensor<T> encode(const molgraph::MolGraph& mol, const EncoderParams<T>& p) {
  const int n = mol.atom_count();
  Tensor<T> h = featurize_atoms(mol, p);

  Tensor<T> adj_mat = Tensor<T>::zeros({n, n});
  Tensor<T> bond_counts = Tensor<T>::zeros({n, 4});
  for (const auto& b : mol.bonds) {
    adj_mat.data()[static_cast<int64_t>(b.a) * n + b.b] += T(1);
    adj_mat.data()[static_cast<int64_t>(b.b) * n + b.a] += T(1);
    bond_counts.data()[static_cast<int64_t>(b.a) * 4 + static_cast<int>(b.order)] += T(1);
    bond_counts.data()[static_cast<int64_t>(b.b) * 4 + static_cast<int>(b.order)] += T(1);
  }

  for (const auto& layer : p.layers) {
    Tensor<T> self = ndt::scale_by(h, ndt::add_scalar(layer.epsilon, T(1)));
    Tensor<T> neighbor = ndt::matmul(adj_mat, h);
    Tensor<T> bonds = ndt::matmul(bond_counts, p.bond_embed);
    Tensor<T> m = ndt::add(ndt::add(self, neighbor), bonds);
    h = layer.fc2(ndt::gelu(layer.fc1(m)));
  }
  return h;
}

// Mean-pooled molecule-level feature, used by diagnostics and tests.
template <class T>
Tensor<T> encode_pooled(const molgraph::MolGraph& mol, const EncoderParams<T>& p) {
  Tensor<T> h = encode(mol, p);
  return ndt::mean_axis(h, 0);
}

}  // namespace moltok::molenc
