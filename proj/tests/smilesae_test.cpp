#include "moltok/smilesae.hpp"

#include "doctest.h"
#include "testutil.hpp"

using namespace moltok;
using smilesae::SmilesVocab;
using TD = ndt::Tensor<double>;

namespace {

smilesae::SmilesAutoencoder<double> tiny_model(const SmilesVocab& vocab,
                                               uint64_t seed) {
  ndt::Rng rng(seed);
  return smilesae::SmilesAutoencoder<double>::init(vocab.size(), /*latent_slots=*/4,
                                                   /*dim=*/16, /*heads=*/2,
                                                   /*encoder_blocks=*/1,
                                                   /*decoder_blocks=*/1,
                                                   /*max_len=*/32, rng);
}

}  // namespace

TEST_CASE("vocabulary round trips and greedy multi-char atoms") {
  SmilesVocab vocab;
  const auto ids = vocab.tokenize("C");
  REQUIRE(ids.size() == 3);
  CHECK(ids.front() == SmilesVocab::kBos);
  CHECK(ids.back() == SmilesVocab::kEos);

  const auto cl = vocab.tokenize("Cl");
  REQUIRE(cl.size() == 3);  // one id for the whole atom
  CHECK(vocab.token(cl[1]) == "Cl");

  for (const char* s : {"CCO", "c1ccccc1", "C(=O)[O-]", "ClCCBr", "C.C", "[NH4+]"}) {
    CHECK(vocab.detokenize(vocab.tokenize(s)) == s);
  }

  try {
    vocab.tokenize("CC?");
    CHECK(false);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
}

TEST_CASE("latent shape is fixed across input lengths") {
  SmilesVocab vocab;
  const auto model = tiny_model(vocab, 1);
  TD z1 = smilesae::encode("C", vocab, model);
  TD z2 = smilesae::encode("CC(C)C(=O)OCCBr", vocab, model);
  CHECK(z1.shape() == std::vector<int>{4, 16});
  CHECK(z2.shape() == std::vector<int>{4, 16});
}

TEST_CASE("identical strings give identical embeddings") {
  SmilesVocab vocab;
  const auto model = tiny_model(vocab, 2);
  TD a = smilesae::encode("CCO", vocab, model);
  TD b = smilesae::encode("CCO", vocab, model);
  CHECK(a.values() == b.values());
}

TEST_CASE("greedy decoding is deterministic and respects the budget") {
  SmilesVocab vocab;
  const auto model = tiny_model(vocab, 3);
  TD z = smilesae::encode("CCO", vocab, model);
  const std::string s1 = smilesae::decode(z, vocab, model, 20);
  const std::string s2 = smilesae::decode(z, vocab, model, 20);
  CHECK(s1 == s2);

  const std::string tiny = smilesae::decode(z, vocab, model, 1);
  CHECK(tiny.size() <= 2);  // one token, possibly two characters
}

TEST_CASE("reconstruction loss gradients reach encoder and decoder") {
  SmilesVocab vocab;
  auto model = tiny_model(vocab, 4);
  ndt::ParamMap<double> pm;
  model.params(pm, "ae");
  pm.set_requires_grad(true);
  const auto ids = vocab.tokenize("CCO");

  ndt::Tape<double> tape;
  ndt::Tape<double>::Scope scope(tape);
  TD loss = model.reconstruction_loss(ids);
  for (auto& [name, t] : pm.items) {
    t.ensure_grad();
    t.zero_grad();
  }
  tape.backward(loss);
  int nonzero_tensors = 0;
  for (auto& [name, t] : pm.items) {
    double s = 0;
    for (double g : t.grad()) s += std::abs(g);
    if (s > 0) ++nonzero_tensors;
  }
  // every parameter tensor except unused paddings should receive signal
  CHECK(nonzero_tensors > static_cast<int>(pm.items.size()) * 3 / 4);
}

TEST_CASE("a few optimizer steps reduce reconstruction loss") {
  SmilesVocab vocab;
  auto model = tiny_model(vocab, 5);
  ndt::ParamMap<double> pm;
  model.params(pm, "ae");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig cfg;
  cfg.lr = 3e-3;
  ndt::AdamW<double> opt(params, cfg);
  const auto ids = vocab.tokenize("CCO");

  double first = 0;
  double last = 0;
  for (int step = 0; step < 40; ++step) {
    ndt::Tape<double> tape;
    ndt::Tape<double>::Scope scope(tape);
    TD loss = model.reconstruction_loss(ids);
    if (step == 0) first = loss.item();
    last = loss.item();
    opt.zero_grad(params);
    tape.backward(loss);
    opt.step(params);
  }
  CHECK(last < 0.5 * first);
}
