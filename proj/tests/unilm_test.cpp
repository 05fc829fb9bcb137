#include "moltok/unilm.hpp"

#include <cmath>
#include <set>

#include "doctest.h"
#include "testutil.hpp"

using namespace moltok;
using unilm::UnifiedSequence;
using unilm::UnifiedVocab;
using TD = ndt::Tensor<double>;

namespace {

UnifiedVocab fixture_vocab(int text_size = 128, int codes = 16) {
  const std::vector<std::string> corpus = {
      "a molecule with 3 heavy atoms and 1 ring",
      "a molecule with 5 heavy atoms and 2 nitrogen atoms",
      "describe the molecule",
      "create a molecule matching the description",
  };
  return UnifiedVocab::build(corpus, text_size, codes);
}

}  // namespace

TEST_CASE("vocabulary layout arithmetic and display") {
  const auto vocab = fixture_vocab(128, 16);
  CHECK(vocab.size() == 5 + 128 + 16);
  CHECK(vocab.molecule_base() == 5 + 128);
  CHECK(vocab.piece(vocab.molecule_token(7)) == "<mol_7>");
  CHECK(vocab.code_of(vocab.molecule_token(7)) == 7);
  CHECK(vocab.piece(UnifiedVocab::kMol) == "<mol>");
  CHECK_THROWS(vocab.molecule_token(16));
  CHECK_THROWS(vocab.code_of(3));
}

TEST_CASE("vocabulary id mapping is a bijection") {
  const auto vocab = fixture_vocab();
  std::set<std::string> seen;
  for (int id = 0; id < vocab.size(); ++id) {
    const std::string p = vocab.piece(id);
    CHECK(seen.insert(p).second);
  }
  for (int code = 0; code < vocab.code_count(); ++code) {
    CHECK(vocab.code_of(vocab.molecule_token(code)) == code);
  }
}

TEST_CASE("rebuilding the vocabulary from the same corpus is stable") {
  const auto v1 = fixture_vocab();
  const auto v2 = fixture_vocab();
  CHECK(v1.to_json() == v2.to_json());
  const auto v3 = UnifiedVocab::from_json(v1.to_json());
  for (int id = 0; id < v1.size(); ++id) CHECK(v1.piece(id) == v3.piece(id));
}

TEST_CASE("text round trip on corpus-style sentences") {
  const auto vocab = fixture_vocab();
  const std::string caption = "a molecule with 5 heavy atoms and 1 ring";
  CHECK(vocab.decode_text(vocab.encode_text(caption)) == caption);

  // SMILES region encodes char-by-char and decodes without inserted spaces
  const auto ids = vocab.encode_chars("CC(=O)O");
  CHECK(vocab.decode_text(ids) == "CC(=O)O");
}

TEST_CASE("molecule-to-text layout and target mask") {
  const auto vocab = fixture_vocab();
  const std::vector<int> codes = {3, 1, 4, 1};
  const auto seq = unilm::encode_mol_to_text(codes, "CCO", "describe the molecule",
                                             "a molecule with 3 heavy atoms", vocab);
  CHECK(seq.ids.front() == UnifiedVocab::kBos);
  CHECK(seq.ids[1] == UnifiedVocab::kMol);
  for (size_t i = 0; i < codes.size(); ++i) {
    CHECK(seq.ids[2 + i] == vocab.molecule_token(codes[i]));
  }
  CHECK(seq.ids[2 + codes.size()] == UnifiedVocab::kEndMol);
  CHECK(seq.ids.back() == UnifiedVocab::kEos);

  const int caption_tokens =
      static_cast<int>(vocab.encode_text("a molecule with 3 heavy atoms").size());
  CHECK(seq.target_count() == caption_tokens + 1);  // caption + EOS
  // prompt and SMILES region are context, not targets
  for (size_t i = 0; i + caption_tokens + 1 < seq.ids.size(); ++i) {
    CHECK(seq.target_mask[i] == 0);
  }

  // empty caption: the target set is exactly {EOS}
  const auto empty = unilm::encode_mol_to_text(codes, "CCO", "describe the molecule",
                                               "", vocab);
  CHECK(empty.target_count() == 1);
  CHECK(empty.target_mask.back() == 1);
}

TEST_CASE("text-to-molecule layout and target mask") {
  const auto vocab = fixture_vocab();
  const std::vector<int> codes = {0, 5, 2};
  const auto seq = unilm::encode_text_to_mol("create a molecule matching the description",
                                             "a molecule with 1 ring", codes, vocab);
  CHECK(seq.target_count() == static_cast<int>(codes.size()) + 2);  // codes + /mol + eos
  // the opening boundary token is context, not a target
  for (size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] == UnifiedVocab::kMol) CHECK(seq.target_mask[i] == 0);
    if (seq.ids[i] == UnifiedVocab::kEndMol) CHECK(seq.target_mask[i] == 1);
  }
}

TEST_CASE("golden layout fixture frozen by hand") {
  // Tiny vocabulary built from one line; ids verified against the layout
  // rule by hand once and pinned.
  const auto vocab = UnifiedVocab::build({"x y"}, 96, 4);
  // char seed occupies 94 pieces (ASCII 33..126); "x" and "y" are already
  // seeded chars, so the word list adds nothing new.
  CHECK(vocab.text_size() == 96);
  const int x_id = vocab.encode_text("x")[0];
  const int y_id = vocab.encode_text("y")[0];
  CHECK(x_id == 5 + ('x' - 33));
  CHECK(y_id == 5 + ('y' - 33));

  const auto seq = unilm::encode_text_to_mol("x", "y", {2, 0}, vocab);
  const std::vector<int> want_ids = {UnifiedVocab::kBos,
                                     x_id,
                                     y_id,
                                     UnifiedVocab::kMol,
                                     vocab.molecule_token(2),
                                     vocab.molecule_token(0),
                                     UnifiedVocab::kEndMol,
                                     UnifiedVocab::kEos};
  const std::vector<uint8_t> want_mask = {0, 0, 0, 0, 1, 1, 1, 1};
  CHECK(seq.ids == want_ids);
  CHECK(seq.target_mask == want_mask);
}

TEST_CASE("untrained lm loss is ln V within five percent") {
  const auto vocab = fixture_vocab(96, 8);
  ndt::Rng rng(3);
  auto lm = unilm::UnifiedLM<double>::init(vocab.size(), 32, 4, 2, 64, rng);
  const auto seq = unilm::encode_mol_to_text({1, 2}, "CCO", "describe the molecule",
                                             "a molecule with 3 heavy atoms", vocab);
  const double loss = unilm::lm_loss(lm, seq).item();
  const double uniform = std::log(static_cast<double>(vocab.size()));
  CHECK(std::abs(loss - uniform) / uniform < 0.05);
}

TEST_CASE("lm loss ignores non-target labels and notices context changes") {
  const auto vocab = fixture_vocab(96, 8);
  ndt::Rng rng(5);
  auto lm = unilm::UnifiedLM<double>::init(vocab.size(), 16, 2, 1, 64, rng);
  auto seq = unilm::encode_mol_to_text({1, 2}, "CCO", "describe the molecule",
                                       "a molecule with 3 heavy atoms", vocab);
  const double base = unilm::lm_loss(lm, seq).item();

  // relabeling a masked-out (context) position's value in the target sense:
  // the loss only depends on ids as inputs, so change a non-target label via
  // the mask instead: flipping mask off a target changes the loss, while
  // relabeling positions that are never targets leaves the target set alone.
  auto seq2 = seq;
  for (size_t i = 0; i < seq2.ids.size(); ++i) {
    if (!seq2.target_mask[i] && seq2.ids[i] != UnifiedVocab::kBos &&
        i + 1 < seq2.ids.size() && !seq2.target_mask[i + 1]) {
      seq2.ids[i] = seq2.ids[i] == vocab.molecule_token(1) ? vocab.molecule_token(2)
                                                           : vocab.molecule_token(1);
      break;
    }
  }
  const double shuffled = unilm::lm_loss(lm, seq2).item();
  CHECK(base != shuffled);  // context matters

  auto all_ctx = seq;
  std::fill(all_ctx.target_mask.begin(), all_ctx.target_mask.end(), 0);
  CHECK_THROWS(unilm::lm_loss(lm, all_ctx));
}

TEST_CASE("lm loss gradients match finite differences") {
  const auto vocab = UnifiedVocab::build({"q w"}, 96, 4);
  ndt::Rng rng(7);
  auto lm = unilm::UnifiedLM<double>::init(vocab.size(), 8, 2, 1, 32, rng);
  const auto seq = unilm::encode_text_to_mol("q", "w", {1, 3}, vocab);

  ndt::ParamMap<double> pm;
  lm.params(pm, "lm");
  std::vector<TD> subset = {lm.tok_embed, lm.pos_embed, *pm.find("lm.blk0.self.wq.w"),
                            *pm.find("lm.blk0.ff.fc1.w"), *pm.find("lm.final_ln.gain")};
  const double err = ndt::gradcheck_max_rel_err<double>(
      [&] { return unilm::lm_loss(lm, seq); }, subset);
  CHECK(err < 1e-4);
}

TEST_CASE("memorizing one sample drives its loss near zero") {
  const auto vocab = UnifiedVocab::build({"make it"}, 96, 4);
  ndt::Rng rng(9);
  auto lm = unilm::UnifiedLM<double>::init(vocab.size(), 32, 4, 2, 32, rng);
  const auto seq = unilm::encode_text_to_mol("make it", "", {2, 1, 3}, vocab);

  ndt::ParamMap<double> pm;
  lm.params(pm, "lm");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig cfg;
  cfg.lr = 3e-3;
  ndt::AdamW<double> opt(params, cfg);
  double loss = 1e9;
  for (int step = 0; step < 400 && loss >= 0.05; ++step) {
    ndt::Tape<double> tape;
    ndt::Tape<double>::Scope scope(tape);
    TD l = unilm::lm_loss(lm, seq);
    loss = l.item();
    opt.zero_grad(params);
    tape.backward(l);
    opt.step(params);
  }
  CHECK(loss < 0.05);
}

TEST_CASE("constrained generation always closes well-formed molecule spans") {
  const auto vocab = fixture_vocab(96, 8);
  ndt::Rng rng(11);
  auto lm = unilm::UnifiedLM<double>::init(vocab.size(), 16, 2, 1, 96, rng);

  unilm::GenerateConfig cfg;
  cfg.molecule_span = 4;
  cfg.max_new_tokens = 24;

  for (uint64_t trial = 0; trial < 30; ++trial) {
    cfg.temperature = trial % 2 == 0 ? 0.0 : 1.3;
    cfg.seed = trial;
    std::vector<int> prefix = {UnifiedVocab::kBos};
    for (int id : vocab.encode_text("create a molecule")) prefix.push_back(id);
    prefix.push_back(UnifiedVocab::kMol);
    const auto out = unilm::generate(lm, vocab, prefix, cfg);

    // span structure: every closed span holds exactly molecule_span
    // molecule ids; no text id ever appears inside a span; a span may only
    // be left open if the token budget ran out mid-span
    int inside = -1;
    for (size_t i = prefix.size() - 1; i < out.size(); ++i) {
      if (out[i] == UnifiedVocab::kMol) {
        CHECK(inside == -1);
        inside = 0;
      } else if (out[i] == UnifiedVocab::kEndMol) {
        CHECK(inside == cfg.molecule_span);
        inside = -1;
      } else if (inside >= 0) {
        CHECK(vocab.is_molecule_token(out[i]));
        ++inside;
      }
    }
    if (inside != -1) {
      CHECK(static_cast<int>(out.size()) >=
            static_cast<int>(prefix.size()) + cfg.max_new_tokens);
    }

    // the requested (first) span always completes within the budget
    const auto codes = unilm::extract_molecule_codes(out, prefix.size() - 1, vocab);
    CHECK(static_cast<int>(codes.size()) == cfg.molecule_span);
  }

  // greedy decoding is deterministic
  unilm::GenerateConfig greedy;
  greedy.molecule_span = 4;
  std::vector<int> prefix = {UnifiedVocab::kBos, UnifiedVocab::kMol};
  CHECK(unilm::generate(lm, vocab, prefix, greedy) ==
        unilm::generate(lm, vocab, prefix, greedy));

  std::vector<int> huge(200, UnifiedVocab::kBos);
  CHECK_THROWS(unilm::generate(lm, vocab, huge, greedy));
}

TEST_CASE("retrieval at chance level for an untrained model") {
  // untrained reps give near-arbitrary rankings; top-1 by key equality over
  // n distinct items should be roughly 1/n, certainly far below 0.5
  ndt::Rng rng(13);
  auto encoder = molenc::EncoderParams<double>::init(6, 1, rng);
  auto qf = causalq::QFormer<double>::init(2, 8, 2, 1, 6, 40, 8, rng);

  unilm::RetrievalPool pool;
  const char* smiles[] = {"C", "CC", "CCC", "CCCC", "CCO", "CCN", "CCCO", "CCCN"};
  for (int i = 0; i < 8; ++i) {
    pool.mols.push_back(molgraph::parse_smiles(smiles[i]));
    pool.mol_keys.push_back(molgraph::write_smiles(pool.mols.back()));
    pool.text_ids.push_back({1, 10 + i, 20 + i});
    pool.text_keys.push_back("caption " + std::to_string(i));
  }
  const auto res = unilm::retrieve(pool, encoder, qf, 0);
  CHECK(res.m2t_accuracy <= 0.5);
  CHECK(res.m2t_recall20 == 1.0);  // pool smaller than 20
  CHECK(res.t2m_recall20 == 1.0);

  unilm::RetrievalPool tiny;
  CHECK_THROWS(unilm::retrieve(tiny, encoder, qf, 0));
}
