#include "moltok/molencoder.hpp"

#include <cmath>

#include "doctest.h"
#include "testutil.hpp"

using namespace moltok;
using molgraph::parse_smiles;
using TD = ndt::Tensor<double>;

namespace {

molenc::EncoderParams<double> small_params(uint64_t seed, int f = 8, int layers = 2) {
  ndt::Rng rng(seed);
  return molenc::EncoderParams<double>::init(f, layers, rng);
}

}  // namespace

TEST_CASE("featurize gives identical rows to identical isolated atoms") {
  const auto p = small_params(1);
  const auto mol = parse_smiles("C.C");
  TD h = molenc::featurize_atoms(mol, p);
  for (int j = 0; j < h.cols(); ++j) {
    CHECK(h.data()[j] == h.data()[h.cols() + j]);
  }

  // methane vs ammonia central atoms differ
  TD hc = molenc::featurize_atoms(parse_smiles("C"), p);
  TD hn = molenc::featurize_atoms(parse_smiles("N"), p);
  bool same = true;
  for (int j = 0; j < hc.cols(); ++j) same = same && hc.data()[j] == hn.data()[j];
  CHECK_FALSE(same);
}

TEST_CASE("featurize rows are permutation equivariant") {
  const auto p = small_params(2);
  const auto mol = parse_smiles("CC(=O)O");
  TD h = molenc::featurize_atoms(mol, p);
  testutil::TestRng rng(4);
  const auto perm = rng.permutation(mol.atom_count());
  TD hp = molenc::featurize_atoms(testutil::permute_atoms(mol, perm), p);
  for (int i = 0; i < mol.atom_count(); ++i) {
    for (int j = 0; j < h.cols(); ++j) {
      CHECK(h.data()[i * h.cols() + j] == hp.data()[perm[i] * h.cols() + j]);
    }
  }
}

TEST_CASE("encode of a single atom is L MLP applications of the scaled row") {
  const auto p = small_params(3);
  const auto mol = parse_smiles("N");
  TD out = molenc::encode(mol, p);

  TD h = molenc::featurize_atoms(mol, p);
  for (const auto& layer : p.layers) {
    TD m = ndt::scale_by(h, ndt::add_scalar(layer.epsilon, 1.0));
    h = layer.fc2(ndt::gelu(layer.fc1(m)));
  }
  REQUIRE(out.numel() == h.numel());
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == h.data()[i]);
}

TEST_CASE("encode is permutation equivariant on benzene and a branched acid") {
  const auto p = small_params(4);
  for (const char* smiles : {"c1ccccc1", "CC(C)C(=O)O"}) {
    CAPTURE(smiles);
    const auto mol = parse_smiles(smiles);
    TD h = molenc::encode(mol, p);
    testutil::TestRng rng(9);
    for (int t = 0; t < 10; ++t) {
      const auto perm = rng.permutation(mol.atom_count());
      TD hp = molenc::encode(testutil::permute_atoms(mol, perm), p);
      for (int i = 0; i < mol.atom_count(); ++i) {
        for (int j = 0; j < h.cols(); ++j) {
          CHECK(std::abs(h.data()[i * h.cols() + j] - hp.data()[perm[i] * h.cols() + j]) <
                1e-5);
        }
      }
    }
  }
}

TEST_CASE("central and terminal carbons of ethanol separate after one layer") {
  const auto p = small_params(5, 8, 1);
  const auto mol = parse_smiles("CCO");  // atom 0: CH3, atom 1: CH2 (next to O)
  TD h = molenc::encode(mol, p);
  double diff = 0;
  for (int j = 0; j < h.cols(); ++j) {
    diff += std::abs(h.data()[0 * h.cols() + j] - h.data()[1 * h.cols() + j]);
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("gradients flow through encode into every table and layer") {
  auto p = small_params(6, 6, 2);
  ndt::ParamMap<double> pm;
  p.params(pm, "enc");
  pm.set_requires_grad(true);
  const auto mol = parse_smiles("CC(=O)O");

  auto loss_fn = [&] {
    TD h = molenc::encode(mol, p);
    return ndt::mean(ndt::mul(h, h));
  };
  const double err =
      ndt::gradcheck_max_rel_err<double>(loss_fn, pm.tensors());
  CHECK(err < 1e-4);
}
