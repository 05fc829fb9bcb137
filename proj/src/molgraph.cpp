#include "moltok/molgraph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

namespace moltok::molgraph {

namespace {

constexpr std::array<const char*, kElementCount> kSymbols = {
    "B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"};

constexpr double kAromaticOrder = 1.5;

}  // namespace

const char* symbol(Element e) { return kSymbols[static_cast<size_t>(e)]; }

std::optional<Element> element_from_symbol(std::string_view s) {
  for (int i = 0; i < kElementCount; ++i) {
    if (s == kSymbols[i]) return static_cast<Element>(i);
  }
  return std::nullopt;
}

bool aromatic_capable(Element e) {
  switch (e) {
    case Element::B:
    case Element::C:
    case Element::N:
    case Element::O:
    case Element::P:
    case Element::S:
      return true;
    default:
      return false;
  }
}

double bond_order_value(BondOrder order) {
  switch (order) {
    case BondOrder::Single: return 1.0;
    case BondOrder::Double: return 2.0;
    case BondOrder::Triple: return 3.0;
    case BondOrder::Aromatic: return kAromaticOrder;
  }
  return 1.0;
}

std::vector<int> allowed_valences(Element e, int formal_charge) {
  if (formal_charge < -2 || formal_charge > 2) return {};
  std::vector<int> base;
  switch (e) {
    case Element::B: base = {3}; break;
    case Element::C: base = {4}; break;
    case Element::N: base = {3}; break;
    case Element::O: base = {2}; break;
    case Element::P: base = {3, 5}; break;
    case Element::S: base = {2, 4, 6}; break;
    default: base = {1}; break;  // halogens
  }
  // Charge shifts the table: electron-poor boron gains capacity with a
  // negative charge, carbon loses a slot either way, and the elements to
  // the right of carbon shift with the sign of the charge (N+ -> 4, O- -> 1).
  std::vector<int> out;
  for (int v : base) {
    int adjusted;
    switch (e) {
      case Element::B: adjusted = v - formal_charge; break;
      case Element::C: adjusted = v - std::abs(formal_charge); break;
      default: adjusted = v + formal_charge; break;
    }
    if (adjusted >= 0) out.push_back(adjusted);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::vector<int>> MolGraph::adjacency() const {
  std::vector<std::vector<int>> adj(atoms.size());
  for (int bi = 0; bi < bond_count(); ++bi) {
    const Bond& b = bonds[bi];
    if (b.a >= 0 && b.a < atom_count()) adj[b.a].push_back(bi);
    if (b.b >= 0 && b.b < atom_count()) adj[b.b].push_back(bi);
  }
  return adj;
}

namespace {

double bonded_order_sum(const MolGraph& mol, const std::vector<std::vector<int>>& adj,
                        int atom_idx) {
  double s = 0.0;
  for (int bi : adj[atom_idx]) s += bond_order_value(mol.bonds[bi].order);
  return s;
}

int implicit_hydrogens_impl(const MolGraph& mol, const std::vector<std::vector<int>>& adj,
                            int atom_idx) {
  const Atom& a = mol.atoms[atom_idx];
  if (a.explicit_h) return *a.explicit_h;
  const double used = bonded_order_sum(mol, adj, atom_idx);
  for (int v : allowed_valences(a.element, a.formal_charge)) {
    if (static_cast<double>(v) >= used - 1e-9) {
      return static_cast<int>(std::lround(static_cast<double>(v) - used));
    }
  }
  return 0;  // over-valent; validate() reports it
}

}  // namespace

int implicit_hydrogens(const MolGraph& mol, int atom_idx) {
  return implicit_hydrogens_impl(mol, mol.adjacency(), atom_idx);
}

int total_hydrogens(const MolGraph& mol, int atom_idx) {
  return implicit_hydrogens(mol, atom_idx);
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

struct Parser {
  std::string_view text;
  size_t pos = 0;
  MolGraph mol;
  int prev_atom = -1;
  std::optional<BondOrder> pending_bond;
  size_t pending_bond_pos = 0;
  std::vector<int> branch_stack;
  std::vector<size_t> branch_pos;
  // ring digit -> (atom index, optional bond order, open position)
  std::map<int, std::tuple<int, std::optional<BondOrder>, size_t>> open_rings;
  std::set<std::pair<int, int>> seen_pairs;

  [[noreturn]] void fail(const std::string& msg, size_t at) const {
    throw ParseError(msg, at);
  }

  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }

  void add_bond(int a, int b, BondOrder order, size_t at) {
    if (a == b) fail("ring closure bonds an atom to itself", at);
    auto key = std::minmax(a, b);
    if (!seen_pairs.insert({key.first, key.second}).second) {
      fail("duplicate bond between atoms", at);
    }
    mol.bonds.push_back({a, b, order});
  }

  BondOrder resolve_order(int a, int b, std::optional<BondOrder> spec) const {
    if (spec) return *spec;
    if (mol.atoms[a].aromatic && mol.atoms[b].aromatic) return BondOrder::Aromatic;
    return BondOrder::Single;
  }

  void attach(int atom_idx, size_t at) {
    if (prev_atom >= 0) {
      add_bond(prev_atom, atom_idx, resolve_order(prev_atom, atom_idx, pending_bond), at);
    } else if (pending_bond) {
      fail("bond symbol with no preceding atom", pending_bond_pos);
    }
    pending_bond.reset();
    prev_atom = atom_idx;
  }

  void ring_closure(int digit, size_t at) {
    auto it = open_rings.find(digit);
    if (it == open_rings.end()) {
      open_rings[digit] = {prev_atom, pending_bond, at};
      pending_bond.reset();
      return;
    }
    auto [other, open_order, open_pos] = it->second;
    open_rings.erase(it);
    std::optional<BondOrder> order = pending_bond;
    if (open_order) {
      if (order && *order != *open_order) {
        fail("conflicting bond orders on ring closure", at);
      }
      order = open_order;
    }
    pending_bond.reset();
    add_bond(other, prev_atom, resolve_order(other, prev_atom, order), at);
  }

  int parse_organic_atom() {
    const size_t at = pos;
    char c = peek();
    Atom atom;
    if (c >= 'a' && c <= 'z') {
      std::string sym(1, static_cast<char>(c - 'a' + 'A'));
      auto e = element_from_symbol(sym);
      if (!e || !aromatic_capable(*e)) fail("unknown symbol", at);
      atom.element = *e;
      atom.aromatic = true;
      ++pos;
    } else {
      // Two-letter symbols first (Cl, Br).
      if (pos + 1 < text.size()) {
        auto e2 = element_from_symbol(text.substr(pos, 2));
        if (e2) {
          atom.element = *e2;
          pos += 2;
          mol.atoms.push_back(atom);
          return mol.atom_count() - 1;
        }
      }
      auto e1 = element_from_symbol(text.substr(pos, 1));
      if (!e1) fail("unknown symbol", at);
      atom.element = *e1;
      ++pos;
    }
    mol.atoms.push_back(atom);
    return mol.atom_count() - 1;
  }

  int parse_bracket_atom() {
    const size_t open_at = pos;
    ++pos;  // '['
    if (done()) fail("unterminated bracket atom", open_at);
    Atom atom;
    char c = peek();
    if (c >= '0' && c <= '9') fail("isotopes are not supported", pos);
    if (c >= 'a' && c <= 'z') {
      std::string sym(1, static_cast<char>(c - 'a' + 'A'));
      auto e = element_from_symbol(sym);
      if (!e || !aromatic_capable(*e)) fail("unknown symbol in brackets", pos);
      atom.element = *e;
      atom.aromatic = true;
      ++pos;
    } else {
      std::optional<Element> e;
      if (pos + 1 < text.size()) {
        e = element_from_symbol(text.substr(pos, 2));
        if (e) pos += 2;
      }
      if (!e) {
        e = element_from_symbol(text.substr(pos, 1));
        if (e) ++pos;
      }
      if (!e) fail("unknown symbol in brackets", pos);
      atom.element = *e;
    }
    int hcount = 0;
    if (!done() && peek() == 'H') {
      ++pos;
      hcount = 1;
      if (!done() && peek() >= '0' && peek() <= '9') {
        hcount = 0;
        while (!done() && peek() >= '0' && peek() <= '9') {
          hcount = hcount * 10 + (peek() - '0');
          ++pos;
        }
      }
    }
    atom.explicit_h = hcount;
    int charge = 0;
    if (!done() && (peek() == '+' || peek() == '-')) {
      const char sign_char = peek();
      const int sign = sign_char == '+' ? 1 : -1;
      ++pos;
      if (!done() && peek() >= '0' && peek() <= '9') {
        int mag = 0;
        while (!done() && peek() >= '0' && peek() <= '9') {
          mag = mag * 10 + (peek() - '0');
          ++pos;
        }
        charge = sign * mag;
      } else {
        charge = sign;
        while (!done() && peek() == sign_char) {
          charge += sign;
          ++pos;
        }
      }
    }
    atom.formal_charge = charge;
    if (done() || peek() != ']') {
      if (!done() && peek() == '@') fail("stereochemistry is not supported", pos);
      fail("unterminated bracket atom", done() ? text.size() : pos);
    }
    ++pos;  // ']'
    mol.atoms.push_back(atom);
    return mol.atom_count() - 1;
  }

  void run() {
    while (!done()) {
      const char c = peek();
      const size_t at = pos;
      if (c == '(') {
        if (prev_atom < 0) fail("branch with no preceding atom", at);
        if (pending_bond) fail("bond symbol before opening branch", pending_bond_pos);
        branch_stack.push_back(prev_atom);
        branch_pos.push_back(at);
        ++pos;
      } else if (c == ')') {
        if (branch_stack.empty()) fail("unmatched closing branch", at);
        if (pending_bond) fail("dangling bond before closing branch", pending_bond_pos);
        prev_atom = branch_stack.back();
        branch_stack.pop_back();
        branch_pos.pop_back();
        ++pos;
      } else if (c == '-' || c == '=' || c == '#' || c == ':') {
        if (pending_bond) fail("two consecutive bond symbols", at);
        switch (c) {
          case '-': pending_bond = BondOrder::Single; break;
          case '=': pending_bond = BondOrder::Double; break;
          case '#': pending_bond = BondOrder::Triple; break;
          default: pending_bond = BondOrder::Aromatic; break;
        }
        pending_bond_pos = at;
        ++pos;
      } else if (c == '.') {
        if (pending_bond) fail("bond symbol before dot", pending_bond_pos);
        if (prev_atom < 0) fail("dot with no preceding atom", at);
        prev_atom = -1;
        ++pos;
      } else if (c >= '0' && c <= '9') {
        if (prev_atom < 0) fail("ring closure with no preceding atom", at);
        ring_closure(c - '0', at);
        ++pos;
      } else if (c == '%') {
        if (prev_atom < 0) fail("ring closure with no preceding atom", at);
        if (pos + 2 >= text.size() || text[pos + 1] < '0' || text[pos + 1] > '9' ||
            text[pos + 2] < '0' || text[pos + 2] > '9') {
          fail("%% ring closure needs two digits", at);
        }
        ring_closure((text[pos + 1] - '0') * 10 + (text[pos + 2] - '0'), at);
        pos += 3;
      } else if (c == '[') {
        attach(parse_bracket_atom(), at);
      } else if (c == '/' || c == '\\' || c == '@') {
        fail("stereochemistry is not supported", at);
      } else if (c == '*') {
        fail("wildcard atoms are not supported", at);
      } else {
        const size_t before = mol.atoms.size();
        attach(parse_organic_atom(), at);
        (void)before;
      }
    }
    if (!branch_stack.empty()) fail("unclosed branch", branch_pos.back());
    if (pending_bond) fail("dangling bond at end of input", pending_bond_pos);
    if (!open_rings.empty()) {
      fail("unclosed ring digit " + std::to_string(open_rings.begin()->first),
           std::get<2>(open_rings.begin()->second));
    }
  }
};

}  // namespace

MolGraph parse_smiles(std::string_view text) {
  if (text.empty()) throw ParseError("empty SMILES", 0);
  for (size_t i = 0; i < text.size(); ++i) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      throw ParseError("whitespace is not allowed", i);
    }
  }
  Parser p;
  p.text = text;
  p.run();
  auto violations = validate(p.mol);
  if (!violations.empty()) {
    throw ParseError(violations.front().message, text.size());
  }
  return p.mol;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

std::vector<Violation> validate(const MolGraph& mol) {
  std::vector<Violation> out;
  const int n = mol.atom_count();
  std::set<std::pair<int, int>> pairs;
  for (int bi = 0; bi < mol.bond_count(); ++bi) {
    const Bond& b = mol.bonds[bi];
    if (b.a < 0 || b.a >= n || b.b < 0 || b.b >= n) {
      out.push_back({Violation::Kind::BadEndpoint, bi,
                     "bond " + std::to_string(bi) + " has an endpoint out of range"});
      continue;
    }
    if (b.a == b.b) {
      out.push_back({Violation::Kind::SelfBond, bi,
                     "self-bond at bond " + std::to_string(bi)});
      continue;
    }
    auto key = std::minmax(b.a, b.b);
    if (!pairs.insert({key.first, key.second}).second) {
      out.push_back({Violation::Kind::DuplicateBond, bi,
                     "duplicate bond at bond " + std::to_string(bi)});
    }
    if (b.order == BondOrder::Aromatic &&
        (!mol.atoms[b.a].aromatic || !mol.atoms[b.b].aromatic)) {
      out.push_back({Violation::Kind::AromaticBondOnNonAromaticAtom, bi,
                     "aromatic bond " + std::to_string(bi) +
                         " touches a non-aromatic atom"});
    }
  }
  const auto adj = mol.adjacency();
  for (int ai = 0; ai < n; ++ai) {
    const Atom& a = mol.atoms[ai];
    if (a.formal_charge < -2 || a.formal_charge > 2) {
      out.push_back({Violation::Kind::ChargeOutOfRange, ai,
                     "formal charge out of range at atom " + std::to_string(ai)});
      continue;
    }
    if (a.aromatic && !aromatic_capable(a.element)) {
      out.push_back({Violation::Kind::AromaticFlagOnIncapableElement, ai,
                     "aromatic flag on " + std::string(symbol(a.element)) +
                         " at atom " + std::to_string(ai)});
    }
    if (a.explicit_h && *a.explicit_h < 0) {
      out.push_back({Violation::Kind::NegativeHydrogenCount, ai,
                     "negative hydrogen count at atom " + std::to_string(ai)});
      continue;
    }
    const double used =
        bonded_order_sum(mol, adj, ai) + implicit_hydrogens_impl(mol, adj, ai);
    const auto allowed = allowed_valences(a.element, a.formal_charge);
    bool ok = false;
    for (int v : allowed) {
      if (used <= static_cast<double>(v) + 1e-9) { ok = true; break; }
    }
    if (!ok) {
      out.push_back({Violation::Kind::ValenceExceeded, ai,
                     "valence violation at atom " + std::to_string(ai)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical ranks and serialization
// ---------------------------------------------------------------------------

namespace {

int element_order(Element e) { return static_cast<int>(e); }

int bond_code(BondOrder o) { return static_cast<int>(o); }

// Dense re-ranking of arbitrary sortable keys.
template <typename Key>
std::vector<int> dense_ranks(const std::vector<Key>& keys) {
  std::vector<int> idx(keys.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return keys[a] < keys[b]; });
  std::vector<int> ranks(keys.size(), 0);
  int r = 0;
  for (size_t k = 0; k < idx.size(); ++k) {
    if (k > 0 && keys[idx[k - 1]] < keys[idx[k]]) ++r;
    ranks[idx[k]] = r;
  }
  return ranks;
}

int distinct_count(const std::vector<int>& ranks) {
  return ranks.empty() ? 0 : *std::max_element(ranks.begin(), ranks.end()) + 1;
}

// One Morgan refinement sweep: (rank, sorted neighbor (bond, rank) multiset).
std::vector<int> refine_once(const MolGraph& mol,
                             const std::vector<std::vector<int>>& adj,
                             const std::vector<int>& ranks) {
  using Key = std::pair<int, std::vector<std::pair<int, int>>>;
  std::vector<Key> keys(mol.atom_count());
  for (int i = 0; i < mol.atom_count(); ++i) {
    std::vector<std::pair<int, int>> nb;
    for (int bi : adj[i]) {
      const Bond& b = mol.bonds[bi];
      const int j = b.a == i ? b.b : b.a;
      nb.emplace_back(bond_code(b.order), ranks[j]);
    }
    std::sort(nb.begin(), nb.end());
    keys[i] = {ranks[i], std::move(nb)};
  }
  return dense_ranks(keys);
}

std::vector<int> refine_to_fixpoint(const MolGraph& mol,
                                    const std::vector<std::vector<int>>& adj,
                                    std::vector<int> ranks) {
  int prev = distinct_count(ranks);
  while (true) {
    ranks = refine_once(mol, adj, ranks);
    const int cur = distinct_count(ranks);
    if (cur == prev) return ranks;
    prev = cur;
  }
}

std::vector<int> initial_ranks(const MolGraph& mol,
                               const std::vector<std::vector<int>>& adj) {
  using Key = std::tuple<int, int, int, int, int>;
  std::vector<Key> keys(mol.atom_count());
  for (int i = 0; i < mol.atom_count(); ++i) {
    const Atom& a = mol.atoms[i];
    keys[i] = {element_order(a.element), a.formal_charge, a.aromatic ? 1 : 0,
               static_cast<int>(adj[i].size()), implicit_hydrogens_impl(mol, adj, i)};
  }
  return dense_ranks(keys);
}

std::string emit_smiles(const MolGraph& mol, const std::vector<int>& ranks);

struct TieBreaker {
  const MolGraph& mol;
  const std::vector<std::vector<int>>& adj;
  int budget = 10000;

  // Returns fully discrete ranks plus the canonical string they induce.
  std::pair<std::vector<int>, std::string> resolve(std::vector<int> ranks) {
    const int n = mol.atom_count();
    if (distinct_count(ranks) == n) {
      --budget;
      return {ranks, emit_smiles(mol, ranks)};
    }
    // Smallest tied rank class.
    int tied_rank = -1;
    for (int r = 0; r < n && tied_rank < 0; ++r) {
      int count = 0;
      for (int i = 0; i < n; ++i) count += ranks[i] == r ? 1 : 0;
      if (count > 1) tied_rank = r;
    }
    std::vector<int> members;
    for (int i = 0; i < n; ++i) {
      if (ranks[i] == tied_rank) members.push_back(i);
    }
    std::pair<std::vector<int>, std::string> best;
    bool have_best = false;
    for (int m : members) {
      // Promote one member ahead of its class, then re-refine.
      std::vector<int> bumped(n);
      for (int i = 0; i < n; ++i) bumped[i] = ranks[i] * 2 + 1;
      bumped[m] -= 1;
      auto candidate = resolve(refine_to_fixpoint(mol, adj, dense_ranks(bumped)));
      if (!have_best || candidate.second < best.second) {
        best = std::move(candidate);
        have_best = true;
      }
      if (budget <= 0) break;  // fall back to first-member expansion
    }
    return best;
  }
};

// Depth-first canonical writer over a completed rank permutation.
// First pass classifies DFS tree edges vs ring-closure edges following the
// rank order; second pass emits text with ring digits at both endpoints.
struct Emitter {
  const MolGraph& mol;
  const std::vector<int>& ranks;
  std::vector<std::vector<int>> adj;
  std::vector<bool> visited;
  std::vector<bool> is_tree_edge;
  // bond index -> allocated ring digit while open
  std::map<int, int> open_digits;
  std::set<int> free_digits;

  Emitter(const MolGraph& m, const std::vector<int>& r)
      : mol(m), ranks(r), adj(m.adjacency()),
        visited(m.atom_count(), false), is_tree_edge(m.bond_count(), false) {
    for (int d = 1; d <= 99; ++d) free_digits.insert(d);
  }

  static bool bare_roundtrips(const Atom& a, int hydrogens, double used) {
    if (a.formal_charge != 0) return false;
    if (a.aromatic && !aromatic_capable(a.element)) return false;
    for (int v : allowed_valences(a.element, 0)) {
      if (static_cast<double>(v) >= used - 1e-9) {
        return static_cast<int>(std::lround(static_cast<double>(v) - used)) == hydrogens;
      }
    }
    return false;
  }

  std::string atom_text(int i) const {
    const Atom& a = mol.atoms[i];
    std::string sym = symbol(a.element);
    if (a.aromatic) {
      for (auto& ch : sym) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    double used = 0.0;
    for (int bi : adj[i]) used += bond_order_value(mol.bonds[bi].order);
    const int hydrogens = a.explicit_h ? *a.explicit_h
                                       : implicit_hydrogens(mol, i);
    if (bare_roundtrips(a, hydrogens, used)) return sym;
    std::string out = "[" + sym;
    if (hydrogens == 1) {
      out += "H";
    } else if (hydrogens > 1) {
      out += "H" + std::to_string(hydrogens);
    }
    if (a.formal_charge == 1) {
      out += "+";
    } else if (a.formal_charge == -1) {
      out += "-";
    } else if (a.formal_charge > 1) {
      out += "+" + std::to_string(a.formal_charge);
    } else if (a.formal_charge < -1) {
      out += "-" + std::to_string(-a.formal_charge);
    }
    out += "]";
    return out;
  }

  std::string bond_text(const Bond& b) const {
    const bool both_aromatic = mol.atoms[b.a].aromatic && mol.atoms[b.b].aromatic;
    switch (b.order) {
      case BondOrder::Single: return both_aromatic ? "-" : "";
      case BondOrder::Double: return "=";
      case BondOrder::Triple: return "#";
      case BondOrder::Aromatic: return both_aromatic ? "" : ":";
    }
    return "";
  }

  std::string digit_text(int d) const {
    return d < 10 ? std::to_string(d) : "%" + std::to_string(d);
  }

  std::vector<int> ordered_bonds(int atom) const {
    std::vector<int> ordered = adj[atom];
    std::sort(ordered.begin(), ordered.end(), [&](int x, int y) {
      const Bond& bx = mol.bonds[x];
      const Bond& by = mol.bonds[y];
      const int px = bx.a == atom ? bx.b : bx.a;
      const int py = by.a == atom ? by.b : by.a;
      return ranks[px] < ranks[py];
    });
    return ordered;
  }

  void classify(int atom) {
    visited[atom] = true;
    for (int bi : ordered_bonds(atom)) {
      const Bond& b = mol.bonds[bi];
      const int other = b.a == atom ? b.b : b.a;
      if (!visited[other]) {
        is_tree_edge[bi] = true;
        classify(other);
      }
    }
  }

  void walk(int atom, int parent_bond, std::string& out) {
    out += atom_text(atom);
    const auto ordered = ordered_bonds(atom);

    // Ring-closure digits attach directly after the atom symbol.
    for (int bi : ordered) {
      if (is_tree_edge[bi] || bi == parent_bond) continue;
      auto it = open_digits.find(bi);
      if (it != open_digits.end()) {
        out += digit_text(it->second);
        free_digits.insert(it->second);
        open_digits.erase(it);
      } else {
        const int d = *free_digits.begin();
        free_digits.erase(free_digits.begin());
        open_digits[bi] = d;
        out += bond_text(mol.bonds[bi]);
        out += digit_text(d);
      }
    }

    std::vector<int> children;
    for (int bi : ordered) {
      if (is_tree_edge[bi] && bi != parent_bond) children.push_back(bi);
    }
    for (size_t k = 0; k < children.size(); ++k) {
      const int bi = children[k];
      const Bond& b = mol.bonds[bi];
      const int other = b.a == atom ? b.b : b.a;
      const bool last = k + 1 == children.size();
      if (!last) out += "(";
      out += bond_text(b);
      walk(other, bi, out);
      if (!last) out += ")";
    }
  }
};

std::string emit_smiles(const MolGraph& mol, const std::vector<int>& ranks) {
  if (mol.atom_count() == 0) return "";
  Emitter em(mol, ranks);
  // Components, each started at its minimal-rank atom.
  std::vector<std::string> parts;
  while (true) {
    int start = -1;
    for (int i = 0; i < mol.atom_count(); ++i) {
      if (!em.visited[i] && (start < 0 || ranks[i] < ranks[start])) start = i;
    }
    if (start < 0) break;
    em.classify(start);
    std::string part;
    em.walk(start, -1, part);
    parts.push_back(std::move(part));
  }
  std::sort(parts.begin(), parts.end());
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += ".";
    out += parts[i];
  }
  return out;
}

}  // namespace

std::vector<int> canonical_ranks(const MolGraph& mol) {
  const auto adj = mol.adjacency();
  auto ranks = refine_to_fixpoint(mol, adj, initial_ranks(mol, adj));
  if (distinct_count(ranks) == mol.atom_count()) return ranks;
  TieBreaker tb{mol, adj};
  return tb.resolve(std::move(ranks)).first;
}

std::string write_smiles(const MolGraph& mol) {
  return emit_smiles(mol, canonical_ranks(mol));
}

std::string canonical_smiles(std::string_view smiles) {
  return write_smiles(parse_smiles(smiles));
}

}  // namespace moltok::molgraph
