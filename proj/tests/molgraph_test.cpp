#include "moltok/molgraph.hpp"

#include <set>

#include "doctest.h"
#include "testutil.hpp"

using namespace moltok::molgraph;

TEST_CASE("parse single methane carbon") {
  const MolGraph m = parse_smiles("C");
  REQUIRE(m.atom_count() == 1);
  CHECK(m.bond_count() == 0);
  CHECK(m.atoms[0].element == Element::C);
  CHECK(implicit_hydrogens(m, 0) == 4);
}

TEST_CASE("parse cyclopropane ring closure") {
  const MolGraph m = parse_smiles("C1CC1");
  REQUIRE(m.atom_count() == 3);
  REQUIRE(m.bond_count() == 3);
  for (const auto& b : m.bonds) CHECK(b.order == BondOrder::Single);
  // every atom has degree 2
  for (const auto& nbrs : m.adjacency()) CHECK(nbrs.size() == 2);
}

TEST_CASE("parse benzene matches hand-built graph") {
  // Independent fixture: six aromatic carbons in a cycle.
  MolGraph ref;
  for (int i = 0; i < 6; ++i) {
    Atom a;
    a.element = Element::C;
    a.aromatic = true;
    ref.atoms.push_back(a);
  }
  for (int i = 0; i < 6; ++i) ref.bonds.push_back({i, (i + 1) % 6, BondOrder::Aromatic});

  const MolGraph m = parse_smiles("c1ccccc1");
  REQUIRE(m.atom_count() == 6);
  REQUIRE(m.bond_count() == 6);
  for (int i = 0; i < 6; ++i) {
    CHECK(m.atoms[i].aromatic);
    CHECK(implicit_hydrogens(m, i) == 1);
  }
  CHECK(testutil::isomorphic(m, ref));
}

TEST_CASE("parse bracket atoms, charges, explicit hydrogens") {
  const MolGraph m = parse_smiles("[NH4+]");
  REQUIRE(m.atom_count() == 1);
  CHECK(m.atoms[0].formal_charge == 1);
  CHECK(m.atoms[0].explicit_h == 4);
  CHECK(validate(m).empty());

  const MolGraph m2 = parse_smiles("[O-]C");
  CHECK(m2.atoms[0].formal_charge == -1);
  CHECK(implicit_hydrogens(m2, 0) == 0);
  CHECK(implicit_hydrogens(m2, 1) == 3);

  const MolGraph m3 = parse_smiles("[O-2]");
  CHECK(m3.atoms[0].formal_charge == -2);
}

TEST_CASE("parse double and triple bonds") {
  const MolGraph eth = parse_smiles("C=C");
  CHECK(eth.bonds[0].order == BondOrder::Double);
  CHECK(implicit_hydrogens(eth, 0) == 2);
  const MolGraph yne = parse_smiles("C#N");
  CHECK(yne.bonds[0].order == BondOrder::Triple);
  CHECK(implicit_hydrogens(yne, 1) == 0);
}

TEST_CASE("parse errors report positions") {
  CHECK_THROWS_AS(parse_smiles(""), ParseError);
  CHECK_THROWS_AS(parse_smiles("CXQ"), ParseError);
  CHECK_THROWS_AS(parse_smiles("C1CC"), ParseError);   // unclosed ring digit
  CHECK_THROWS_AS(parse_smiles("C(CC"), ParseError);   // unclosed branch
  CHECK_THROWS_AS(parse_smiles("CC)C"), ParseError);   // unmatched close
  CHECK_THROWS_AS(parse_smiles("C=(C)"), ParseError);  // dangling bond
  CHECK_THROWS_AS(parse_smiles("C(F)(F)(F)(F)F"), ParseError);  // valence
  CHECK_THROWS_AS(parse_smiles("C/C=C/C"), ParseError);  // stereo unsupported
  CHECK_THROWS_AS(parse_smiles("[13C]"), ParseError);    // isotope unsupported
  CHECK_THROWS_AS(parse_smiles("C12CC12"), ParseError);  // duplicate bond
  CHECK_THROWS_AS(parse_smiles("C11"), ParseError);      // self ring bond

  try {
    parse_smiles("CCX");
  } catch (const ParseError& e) {
    CHECK(e.position() == 2);
  }
}

TEST_CASE("validate reports violations as data") {
  CHECK(validate(parse_smiles("c1ccccc1")).empty());

  MolGraph penta;  // carbon with 5 single bonds
  for (int i = 0; i < 6; ++i) penta.atoms.push_back({});
  for (int i = 1; i < 6; ++i) penta.bonds.push_back({0, i, BondOrder::Single});
  const auto v = validate(penta);
  REQUIRE(!v.empty());
  CHECK(v[0].kind == Violation::Kind::ValenceExceeded);
  CHECK(v[0].index == 0);

  MolGraph self;
  self.atoms.push_back({});
  self.bonds.push_back({0, 0, BondOrder::Single});
  const auto v2 = validate(self);
  REQUIRE(!v2.empty());
  CHECK(v2[0].kind == Violation::Kind::SelfBond);
  CHECK(v2[0].index == 0);
}

TEST_CASE("canonical writer basics") {
  CHECK(write_smiles(parse_smiles("N")) == "N");
  CHECK(write_smiles(parse_smiles("C.C")) == "C.C");
  // ethanol spelled two ways canonicalizes identically
  CHECK(canonical_smiles("OCC") == canonical_smiles("CCO"));
  // aromatic vs kekulized spellings are distinct molecules here (syntactic
  // aromaticity), each stable under re-canonicalization
  CHECK(canonical_smiles("c1ccccc1") == canonical_smiles(canonical_smiles("c1ccccc1")));
  CHECK(canonical_smiles("C1=CC=CC=C1") != canonical_smiles("c1ccccc1"));
}

TEST_CASE("canonical_ranks examples") {
  CHECK(canonical_ranks(parse_smiles("C")) == std::vector<int>{0});
  CHECK(canonical_ranks(parse_smiles("CC")) == std::vector<int>{0, 1});

  // CCO: all three atoms mutually distinct
  const MolGraph m = parse_smiles("CCO");
  const auto r = canonical_ranks(m);
  CHECK(std::set<int>(r.begin(), r.end()).size() == 3);
}

TEST_CASE("ranks invariant under all orderings of CCO") {
  const MolGraph base = parse_smiles("CCO");
  const std::string want = write_smiles(base);
  std::vector<int> perm = {0, 1, 2};
  std::sort(perm.begin(), perm.end());
  do {
    const MolGraph p = testutil::permute_atoms(base, perm);
    CHECK(write_smiles(p) == want);
    // rank of each original atom is unchanged by relabeling
    const auto rb = canonical_ranks(base);
    const auto rp = canonical_ranks(p);
    for (int i = 0; i < 3; ++i) CHECK(rp[perm[i]] == rb[i]);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST_CASE("round trip is isomorphic on assorted molecules") {
  const std::vector<std::string> cases = {
      "C",          "CCO",        "C1CC1",      "c1ccccc1",  "CC(C)C",
      "C(F)(F)F",   "N#CC",       "O=C=O",      "CC(=O)O",   "C1CCCCC1",
      "c1ccccc1C",  "[NH4+]",     "[O-]C(=O)C", "C.C",       "ClCCBr",
      "S1CCCC1",    "O1CCOCC1",   "C=CC=C",     "c1ccccc1-c1ccccc1",
      "CC1(C)CC1",  "[CH3]",      "P(C)(C)C",   "B(O)(O)O",  "I",
  };
  for (const auto& s : cases) {
    CAPTURE(s);
    const MolGraph m = parse_smiles(s);
    const std::string canon = write_smiles(m);
    const MolGraph back = parse_smiles(canon);
    CHECK(testutil::isomorphic(m, back));
    CHECK(write_smiles(back) == canon);
  }
}

TEST_CASE("canonical form stable under random atom permutations") {
  const std::vector<std::string> cases = {
      "CCO", "C1CC1", "c1ccccc1", "CC(C)C(=O)O", "c1ccccc1CCN", "O1CCOCC1"};
  testutil::TestRng rng(7);
  for (const auto& s : cases) {
    CAPTURE(s);
    const MolGraph m = parse_smiles(s);
    const std::string want = write_smiles(m);
    for (int t = 0; t < 20; ++t) {
      const auto perm = rng.permutation(m.atom_count());
      CHECK(write_smiles(testutil::permute_atoms(m, perm)) == want);
    }
  }
}

TEST_CASE("explicit hydrogen counts force brackets when needed") {
  // A methyl radical written [CH3] must not round-trip to plain C.
  const MolGraph m = parse_smiles("[CH3]");
  CHECK(total_hydrogens(m, 0) == 3);
  const std::string canon = write_smiles(m);
  CHECK(canon == "[CH3]");
  CHECK(testutil::isomorphic(parse_smiles(canon), m));
  CHECK_FALSE(testutil::isomorphic(parse_smiles("C"), m));
}
