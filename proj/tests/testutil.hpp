// Shared test helpers: graph isomorphism oracle, permutation utilities,
// finite-difference gradient checking.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "moltok/molgraph.hpp"

namespace testutil {

// Brute-force molecular graph isomorphism with invariant pruning.
// Compares semantic atom identity (element, charge, aromatic, total H),
// not storage details like whether hydrogens were explicit.
inline bool isomorphic(const moltok::molgraph::MolGraph& g1,
                       const moltok::molgraph::MolGraph& g2) {
  using moltok::molgraph::BondOrder;
  const int n = g1.atom_count();
  if (n != g2.atom_count() || g1.bond_count() != g2.bond_count()) return false;

  auto atom_key = [](const moltok::molgraph::MolGraph& g, int i) {
    const auto& a = g.atoms[i];
    return std::tuple<int, int, bool, int>(
        static_cast<int>(a.element), a.formal_charge, a.aromatic,
        moltok::molgraph::total_hydrogens(g, i));
  };

  // adjacency with bond orders
  auto edges = [](const moltok::molgraph::MolGraph& g) {
    std::vector<std::vector<std::pair<int, BondOrder>>> adj(g.atom_count());
    for (const auto& b : g.bonds) {
      adj[b.a].push_back({b.b, b.order});
      adj[b.b].push_back({b.a, b.order});
    }
    return adj;
  };
  const auto adj1 = edges(g1);
  const auto adj2 = edges(g2);

  std::vector<int> mapping(n, -1);
  std::vector<bool> used(n, false);

  std::function<bool(int)> assign = [&](int i) -> bool {
    if (i == n) return true;
    for (int j = 0; j < n; ++j) {
      if (used[j]) continue;
      if (atom_key(g1, i) != atom_key(g2, j)) continue;
      if (adj1[i].size() != adj2[j].size()) continue;
      bool ok = true;
      for (const auto& [nb, order] : adj1[i]) {
        if (mapping[nb] < 0) continue;
        bool found = false;
        for (const auto& [nb2, order2] : adj2[j]) {
          if (nb2 == mapping[nb] && order2 == order) { found = true; break; }
        }
        if (!found) { ok = false; break; }
      }
      if (!ok) continue;
      mapping[i] = j;
      used[j] = true;
      if (assign(i + 1)) return true;
      mapping[i] = -1;
      used[j] = false;
    }
    return false;
  };
  return assign(0);
}

// Relabels atoms by perm (new index of old atom i is perm[i]).
inline moltok::molgraph::MolGraph permute_atoms(
    const moltok::molgraph::MolGraph& mol, const std::vector<int>& perm) {
  moltok::molgraph::MolGraph out;
  out.atoms.resize(mol.atoms.size());
  for (size_t i = 0; i < mol.atoms.size(); ++i) out.atoms[perm[i]] = mol.atoms[i];
  for (const auto& b : mol.bonds) {
    out.bonds.push_back({perm[b.a], perm[b.b], b.order});
  }
  return out;
}

// Small deterministic RNG for tests.
struct TestRng {
  uint64_t state;
  explicit TestRng(uint64_t seed) : state(seed) {}
  uint64_t next() {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  int below(int n) { return static_cast<int>(next() % static_cast<uint64_t>(n)); }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[below(i + 1)]);
    return p;
  }
};

}  // namespace testutil
