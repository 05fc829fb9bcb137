#include "moltok/corpus.hpp"

#include <fstream>
#include <queue>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "moltok/ndtensor.hpp"

namespace moltok::pipeline {

namespace {

using molgraph::Atom;
using molgraph::Bond;
using molgraph::BondOrder;
using molgraph::Element;
using molgraph::MolGraph;

// Conservative single-valence table used during construction (S and P kept
// at their lowest valence so every built molecule validates).
int capacity_of(Element e) {
  switch (e) {
    case Element::B: return 3;
    case Element::C: return 4;
    case Element::N: return 3;
    case Element::O: return 2;
    case Element::P: return 3;
    case Element::S: return 2;
    default: return 1;  // halogens
  }
}

Element pick_element(ndt::Rng& rng) {
  const double r = rng.uniform();
  if (r < 0.58) return Element::C;
  if (r < 0.72) return Element::N;
  if (r < 0.86) return Element::O;
  if (r < 0.90) return Element::S;
  if (r < 0.93) return Element::F;
  if (r < 0.96) return Element::Cl;
  if (r < 0.975) return Element::Br;
  if (r < 0.985) return Element::P;
  if (r < 0.995) return Element::B;
  return Element::I;
}

struct Builder {
  MolGraph mol;
  std::vector<int> free_valence;

  int add_atom(Element e, bool aromatic = false) {
    Atom a;
    a.element = e;
    a.aromatic = aromatic;
    mol.atoms.push_back(a);
    free_valence.push_back(capacity_of(e));
    return mol.atom_count() - 1;
  }

  void add_bond(int a, int b, BondOrder order) {
    mol.bonds.push_back({a, b, order});
    const int used = order == BondOrder::Double ? 2 : order == BondOrder::Triple ? 3 : 1;
    free_valence[a] -= used;
    free_valence[b] -= used;
  }

  bool adjacent(int a, int b) const {
    for (const auto& bond : mol.bonds) {
      if ((bond.a == a && bond.b == b) || (bond.a == b && bond.b == a)) return true;
    }
    return false;
  }
};

MolGraph build_molecule(ndt::Rng& rng) {
  Builder b;
  const int heavy = 2 + rng.below(11);  // 2..12
  const double kind = rng.uniform();
  const bool aromatic_core = kind < 0.15 && heavy >= 6;
  const bool extra_ring = !aromatic_core && kind < 0.40 && heavy >= 3;

  if (aromatic_core) {
    // benzene core; each ring carbon has one substituent slot
    for (int i = 0; i < 6; ++i) b.add_atom(Element::C, true);
    for (int i = 0; i < 6; ++i) {
      b.mol.bonds.push_back({i, (i + 1) % 6, BondOrder::Aromatic});
    }
    for (int i = 0; i < 6; ++i) b.free_valence[i] = 1;  // 4 - 3 (two aromatic + implicit)
  } else {
    b.add_atom(Element::C);
  }

  while (b.mol.atom_count() < heavy) {
    // parent with spare capacity
    std::vector<int> parents;
    for (int i = 0; i < b.mol.atom_count(); ++i) {
      if (b.free_valence[i] >= 1) parents.push_back(i);
    }
    if (parents.empty()) break;
    const int parent = parents[rng.below(static_cast<int>(parents.size()))];

    Element e = pick_element(rng);
    const int child = b.add_atom(e);
    BondOrder order = BondOrder::Single;
    const double br = rng.uniform();
    if (br < 0.12 && b.free_valence[parent] >= 2 && capacity_of(e) >= 2) {
      order = BondOrder::Double;
    } else if (br < 0.16 && b.free_valence[parent] >= 3 && capacity_of(e) >= 3) {
      order = BondOrder::Triple;
    }
    b.add_bond(parent, child, order);
  }

  if (extra_ring && b.mol.atom_count() >= 3) {
    // one extra edge between non-adjacent atoms closes exactly one ring
    std::vector<std::pair<int, int>> candidates;
    for (int i = 0; i < b.mol.atom_count(); ++i) {
      for (int j = i + 1; j < b.mol.atom_count(); ++j) {
        if (b.free_valence[i] >= 1 && b.free_valence[j] >= 1 && !b.adjacent(i, j)) {
          candidates.push_back({i, j});
        }
      }
    }
    if (!candidates.empty()) {
      const auto [i, j] = candidates[rng.below(static_cast<int>(candidates.size()))];
      b.add_bond(i, j, BondOrder::Single);
    }
  }
  return b.mol;
}

int longest_chain(const MolGraph& mol) {
  // graph diameter in atoms via BFS from every vertex
  const auto adj = mol.adjacency();
  int best = 1;
  for (int s = 0; s < mol.atom_count(); ++s) {
    std::vector<int> dist(mol.atom_count(), -1);
    std::queue<int> q;
    q.push(s);
    dist[s] = 0;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int bi : adj[u]) {
        const auto& bond = mol.bonds[bi];
        const int v = bond.a == u ? bond.b : bond.a;
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          q.push(v);
        }
      }
    }
    for (int d : dist) best = std::max(best, d + 1);
  }
  return best;
}

int component_count(const MolGraph& mol) {
  const auto adj = mol.adjacency();
  std::vector<bool> seen(mol.atom_count(), false);
  int comps = 0;
  for (int s = 0; s < mol.atom_count(); ++s) {
    if (seen[s]) continue;
    ++comps;
    std::vector<int> stack = {s};
    seen[s] = true;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int bi : adj[u]) {
        const auto& bond = mol.bonds[bi];
        const int v = bond.a == u ? bond.b : bond.a;
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
      }
    }
  }
  return comps;
}

std::string count_phrase(int n, const std::string& noun) {
  return std::to_string(n) + " " + noun + (n == 1 ? "" : "s");
}

}  // namespace

std::map<std::string, int> derive_properties(const MolGraph& mol) {
  std::map<std::string, int> p;
  p["heavy_atoms"] = mol.atom_count();
  p["ring_count"] = mol.bond_count() - mol.atom_count() + component_count(mol);
  int aromatic = 0;
  std::map<Element, int> by_element;
  for (const auto& a : mol.atoms) {
    by_element[a.element] += 1;
    aromatic += a.aromatic ? 1 : 0;
  }
  p["aromatic_atoms"] = aromatic;
  p["n_count"] = by_element[Element::N];
  p["o_count"] = by_element[Element::O];
  p["s_count"] = by_element[Element::S];
  p["p_count"] = by_element[Element::P];
  p["b_count"] = by_element[Element::B];
  p["halogen_count"] = by_element[Element::F] + by_element[Element::Cl] +
                       by_element[Element::Br] + by_element[Element::I];
  int dbl = 0, trp = 0;
  for (const auto& bond : mol.bonds) {
    dbl += bond.order == BondOrder::Double ? 1 : 0;
    trp += bond.order == BondOrder::Triple ? 1 : 0;
  }
  p["double_bonds"] = dbl;
  p["triple_bonds"] = trp;
  p["longest_chain"] = longest_chain(mol);
  int max_deg = 0;
  for (const auto& nb : mol.adjacency()) max_deg = std::max(max_deg, (int)nb.size());
  p["max_degree"] = max_deg;
  return p;
}

std::string caption_for(const MolGraph& mol) {
  const auto p = derive_properties(mol);
  std::ostringstream out;
  out << "a molecule with " << count_phrase(p.at("heavy_atoms"), "heavy atom");
  out << " and " << count_phrase(p.at("ring_count"), "ring");
  std::vector<std::string> hetero;
  if (p.at("n_count") > 0) hetero.push_back(count_phrase(p.at("n_count"), "nitrogen atom"));
  if (p.at("o_count") > 0) hetero.push_back(count_phrase(p.at("o_count"), "oxygen atom"));
  if (p.at("s_count") > 0) hetero.push_back(count_phrase(p.at("s_count"), "sulfur atom"));
  if (p.at("p_count") > 0) hetero.push_back(count_phrase(p.at("p_count"), "phosphorus atom"));
  if (p.at("b_count") > 0) hetero.push_back(count_phrase(p.at("b_count"), "boron atom"));
  if (p.at("halogen_count") > 0) {
    hetero.push_back(count_phrase(p.at("halogen_count"), "halogen atom"));
  }
  if (!hetero.empty()) {
    out << " containing ";
    for (size_t i = 0; i < hetero.size(); ++i) {
      if (i > 0) out << (i + 1 == hetero.size() ? " and " : " , ");
      out << hetero[i];
    }
  }
  if (p.at("double_bonds") > 0) {
    out << " with " << count_phrase(p.at("double_bonds"), "double bond");
  }
  if (p.at("triple_bonds") > 0) {
    out << " with " << count_phrase(p.at("triple_bonds"), "triple bond");
  }
  if (p.at("aromatic_atoms") > 0) out << " including an aromatic ring";
  out << " with a longest chain of " << p.at("longest_chain")
      << " atoms and maximum degree " << p.at("max_degree");
  return out.str();
}

std::vector<CorpusRecord> gen_corpus(uint64_t seed, int n) {
  if (n < 1) throw std::invalid_argument("gen_corpus: n must be >= 1");
  std::vector<CorpusRecord> records;
  ndt::Rng rng(seed ^ 0x636f727075730ULL);
  while (static_cast<int>(records.size()) < n) {
    const MolGraph mol = build_molecule(rng);
    if (!molgraph::validate(mol).empty()) continue;  // defensive; not expected
    CorpusRecord rec;
    rec.smiles = molgraph::write_smiles(mol);
    rec.caption = caption_for(mol);
    rec.properties = derive_properties(mol);
    records.push_back(std::move(rec));
  }
  return records;
}

std::string to_jsonl(const std::vector<CorpusRecord>& records) {
  std::ostringstream out;
  for (const auto& rec : records) {
    nlohmann::json j;
    j["smiles"] = rec.smiles;
    j["caption"] = rec.caption;
    j["properties"] = rec.properties;
    out << j.dump() << "\n";
  }
  return out.str();
}

std::vector<CorpusRecord> parse_jsonl(const std::string& text) {
  std::vector<CorpusRecord> records;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CorpusRecord rec;
    rec.smiles = j.at("smiles").get<std::string>();
    rec.caption = j.at("caption").get<std::string>();
    if (j.contains("properties")) {
      rec.properties = j.at("properties").get<std::map<std::string, int>>();
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<CorpusRecord> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str());
}

void write_jsonl_file(const std::string& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  out << to_jsonl(records);
}

}  // namespace moltok::pipeline
