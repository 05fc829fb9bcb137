// Molecular graphs and SMILES parsing / canonical serialization.
//
// The supported SMILES dialect is documented in docs/smiles-grammar.md:
// elements B C N O P S F Cl Br I, aromatic b c n o p s, bonds - = # :,
// branches, ring-closure digits (incl. %nn), dots, bracket atoms with
// charge and explicit H. No stereochemistry, isotopes or wildcards.

#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moltok::molgraph {

enum class Element : uint8_t { B, C, N, O, P, S, F, Cl, Br, I };

constexpr int kElementCount = 10;

const char* symbol(Element e);
std::optional<Element> element_from_symbol(std::string_view s);

// Only these may carry the aromatic flag (lowercase in SMILES).
bool aromatic_capable(Element e);

enum class BondOrder : uint8_t { Single, Double, Triple, Aromatic };

struct Atom {
  Element element = Element::C;
  int formal_charge = 0;
  bool aromatic = false;
  // Set when the atom was written in brackets; otherwise hydrogens are
  // implicit and derived from the default-valence table.
  std::optional<int> explicit_h;
};

struct Bond {
  int a = -1;
  int b = -1;
  BondOrder order = BondOrder::Single;
};

struct MolGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;

  int atom_count() const { return static_cast<int>(atoms.size()); }
  int bond_count() const { return static_cast<int>(bonds.size()); }

  // adjacency()[i] lists bond indices incident to atom i.
  std::vector<std::vector<int>> adjacency() const;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, size_t position)
      : std::runtime_error(what + " (position " + std::to_string(position) + ")"),
        position_(position) {}
  size_t position() const { return position_; }

 private:
  size_t position_;
};

struct Violation {
  enum class Kind {
    ValenceExceeded,
    SelfBond,
    DuplicateBond,
    BadEndpoint,
    ChargeOutOfRange,
    AromaticBondOnNonAromaticAtom,
    AromaticFlagOnIncapableElement,
    NegativeHydrogenCount,
  };
  Kind kind;
  int index = -1;  // atom index, or bond index for bond-level kinds
  std::string message;
};

// Contribution of a bond to an endpoint's valence (aromatic counts 1.5).
double bond_order_value(BondOrder order);

// Allowed total valences for (element, formal charge); empty if the charge
// is out of the supported range for that element.
std::vector<int> allowed_valences(Element e, int formal_charge);

// Hydrogens on atom i: explicit_h when present, otherwise the smallest
// allowed valence >= bonded order sum minus that sum (0 if none fits).
int implicit_hydrogens(const MolGraph& mol, int atom_idx);
int total_hydrogens(const MolGraph& mol, int atom_idx);

MolGraph parse_smiles(std::string_view text);

// Canonical serialization: isomorphic graphs yield identical text and
// parse(write(m)) is isomorphic to m.
std::string write_smiles(const MolGraph& mol);

// Morgan-style iterative refinement producing a permutation of 0..N-1.
// Ties after refinement are broken by smallest-rank expansion, choosing
// the candidate whose completed canonical string is lexicographically
// smallest, so the induced canonical form is order-independent.
std::vector<int> canonical_ranks(const MolGraph& mol);

// Every invariant breach, with atom/bond index. Empty result = valid.
std::vector<Violation> validate(const MolGraph& mol);

// parse + canonical write.
std::string canonical_smiles(std::string_view smiles);

}  // namespace moltok::molgraph
