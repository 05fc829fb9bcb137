#include "moltok/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "moltok/checkpoint.hpp"
#include "testutil.hpp"

using namespace moltok;
using pipeline::CorpusRecord;
using pipeline::RunConfig;

namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("moltok_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// independent ring count: cycle-space dimension via DFS spanning forest
int oracle_ring_count(const molgraph::MolGraph& mol) {
  const auto adj = mol.adjacency();
  std::vector<bool> seen(mol.atom_count(), false);
  int components = 0;
  for (int s = 0; s < mol.atom_count(); ++s) {
    if (seen[s]) continue;
    ++components;
    std::vector<int> stack = {s};
    seen[s] = true;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int bi : adj[u]) {
        const auto& b = mol.bonds[bi];
        const int v = b.a == u ? b.b : b.a;
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
      }
    }
  }
  return mol.bond_count() - mol.atom_count() + components;
}

}  // namespace

TEST_CASE("generated corpus is valid, deterministic, and caption-faithful") {
  const auto records = pipeline::gen_corpus(7, 64);
  REQUIRE(records.size() == 64);
  for (const auto& r : records) {
    CAPTURE(r.smiles);
    const auto mol = molgraph::parse_smiles(r.smiles);  // throws if invalid
    CHECK(molgraph::validate(mol).empty());
    CHECK(molgraph::write_smiles(mol) == r.smiles);  // stored canonical
    CHECK(mol.atom_count() >= 2);
    CHECK(mol.atom_count() <= 12);

    // caption fields agree with independent graph measurements
    CHECK(r.properties.at("ring_count") == oracle_ring_count(mol));
    CHECK(r.properties.at("heavy_atoms") == mol.atom_count());
    int n_atoms = 0;
    for (const auto& a : mol.atoms) n_atoms += a.element == molgraph::Element::N ? 1 : 0;
    CHECK(r.properties.at("n_count") == n_atoms);
    CHECK(r.caption == pipeline::caption_for(mol));
    CHECK(r.caption.find(std::to_string(mol.atom_count()) + " heavy atom") !=
          std::string::npos);
  }

  CHECK(pipeline::to_jsonl(records) == pipeline::to_jsonl(pipeline::gen_corpus(7, 64)));
  CHECK(pipeline::to_jsonl(records) != pipeline::to_jsonl(pipeline::gen_corpus(8, 64)));

  const auto back = pipeline::parse_jsonl(pipeline::to_jsonl(records));
  REQUIRE(back.size() == records.size());
  CHECK(back[5].smiles == records[5].smiles);
  CHECK(back[5].caption == records[5].caption);
  CHECK(back[5].properties == records[5].properties);
}

TEST_CASE("corpus has structural variety") {
  const auto records = pipeline::gen_corpus(3, 256);
  int with_ring = 0;
  int with_aromatic = 0;
  int with_hetero = 0;
  std::set<std::string> unique;
  for (const auto& r : records) {
    with_ring += r.properties.at("ring_count") > 0 ? 1 : 0;
    with_aromatic += r.properties.at("aromatic_atoms") > 0 ? 1 : 0;
    with_hetero += r.properties.at("n_count") + r.properties.at("o_count") > 0 ? 1 : 0;
    unique.insert(r.smiles);
  }
  CHECK(with_ring > 20);
  CHECK(with_aromatic > 5);
  CHECK(with_hetero > 100);
  CHECK(static_cast<int>(unique.size()) > 200);
}

TEST_CASE("run config json round trip and arch hashing") {
  RunConfig cfg = pipeline::default_config(pipeline::kStage2, "/tmp/w", 5);
  cfg.optim.epochs = 3;
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.stage == cfg.stage);
  CHECK(back.seed == cfg.seed);
  CHECK(back.dims.codes == cfg.dims.codes);
  CHECK(back.optim.epochs == 3);
  CHECK(back.upstream_dirs.at(pipeline::kStage0) == "/tmp/w/runs/stage0_smilesae");
  CHECK(back.arch_hash() == cfg.arch_hash());

  RunConfig other = cfg;
  other.dims.query_dim = 128;
  CHECK(other.arch_hash() != cfg.arch_hash());

  // optimizer settings do not change the architecture hash
  RunConfig lr = cfg;
  lr.optim.lr = 99.0;
  CHECK(lr.arch_hash() == cfg.arch_hash());

  CHECK_THROWS(pipeline::default_config("stage9_martians", "/tmp/w", 0));
}

TEST_CASE("checkpoint save and load round trip") {
  const std::string dir = temp_dir("ckpt");
  ndt::ParamMap<double> pm;
  ndt::Rng rng(3);
  pm.add("alpha", ndt::uniform_init<double>({3, 4}, rng, -1, 1));
  pm.add("beta", ndt::uniform_init<double>({5}, rng, -1, 1));

  pipeline::Manifest man;
  man.stage = "stage0_smilesae";
  man.config_hash = 1234;
  pipeline::save_checkpoint(dir, man, pipeline::entries_from(pm));
  CHECK(pipeline::checkpoint_exists(dir));

  const auto man2 = pipeline::read_manifest(dir);
  CHECK(man2.stage == "stage0_smilesae");
  CHECK(man2.config_hash == 1234);

  ndt::ParamMap<double> pm2;
  pm2.add("alpha", ndt::Tensor<double>::zeros({3, 4}));
  pm2.add("beta", ndt::Tensor<double>::zeros({5}));
  pipeline::restore_into(pm2, pipeline::load_checkpoint(dir));
  for (size_t i = 0; i < pm.items.size(); ++i) {
    const auto& a = pm.items[i].second;
    const auto& b = pm2.items[i].second;
    for (int64_t t = 0; t < a.numel(); ++t) {
      CHECK(static_cast<float>(a.data()[t]) == static_cast<float>(b.data()[t]));
    }
  }

  ndt::ParamMap<double> wrong;
  wrong.add("alpha", ndt::Tensor<double>::zeros({4, 3}));
  CHECK_THROWS(pipeline::restore_into(wrong, pipeline::load_checkpoint(dir)));
  ndt::ParamMap<double> missing;
  missing.add("gamma", ndt::Tensor<double>::zeros({1}));
  CHECK_THROWS(pipeline::restore_into(missing, pipeline::load_checkpoint(dir)));

  fs::remove_all(dir);
}

TEST_CASE("stage ordering is enforced with a specific error") {
  const std::string work = temp_dir("order");
  pipeline::ensure_corpus(work, 0, 24, 8, 8);
  RunConfig cfg = pipeline::default_config(pipeline::kStage1, work, 0);
  cfg.optim.epochs = 1;
  try {
    pipeline::run_stage(cfg);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("missing predecessor") != std::string::npos);
  }
  fs::remove_all(work);
}

TEST_CASE("stage0 smoke run: checkpoint, determinism, lock file") {
  const std::string work = temp_dir("stage0");
  pipeline::ensure_corpus(work, 0, 24, 8, 8);
  RunConfig cfg = pipeline::default_config(pipeline::kStage0, work, 0);
  cfg.optim.epochs = 2;
  cfg.optim.batch = 8;
  cfg.optim.warmup = 2;

  pipeline::run_stage(cfg);
  CHECK(pipeline::checkpoint_exists(cfg.out_dir));
  CHECK(fs::exists(cfg.out_dir + "/loss.csv"));
  CHECK(fs::exists(cfg.out_dir + "/metrics.json"));
  CHECK_FALSE(fs::exists(cfg.out_dir + "/lock"));
  const std::string csv1 = slurp(cfg.out_dir + "/loss.csv");
  const std::string weights1 = slurp(cfg.out_dir + "/weights.bin");
  CHECK(csv1.substr(0, 13) == "step,loss,lr\n");

  // identical rerun reproduces the loss log and weights byte for byte
  pipeline::run_stage(cfg);
  CHECK(slurp(cfg.out_dir + "/loss.csv") == csv1);
  CHECK(slurp(cfg.out_dir + "/weights.bin") == weights1);

  // a held lock blocks concurrent training
  {
    std::ofstream lock(cfg.out_dir + "/lock");
    lock << "held\n";
  }
  CHECK_THROWS(pipeline::run_stage(cfg));
  fs::remove(cfg.out_dir + "/lock");

  // loader round trip gives a usable frozen model
  const auto s0 = pipeline::load_stage0<float>(cfg.out_dir);
  const auto latent = smilesae::encode(std::string("CCO"), s0.vocab, s0.ae);
  CHECK(latent.shape() == std::vector<int>{cfg.dims.queries, cfg.dims.smiles_dim});

  fs::remove_all(work);
}

TEST_CASE("config hash drift between stages is detected") {
  const std::string work = temp_dir("drift");
  pipeline::ensure_corpus(work, 0, 16, 4, 4);
  RunConfig cfg0 = pipeline::default_config(pipeline::kStage0, work, 0);
  cfg0.optim.epochs = 1;
  cfg0.optim.batch = 8;
  cfg0.optim.warmup = 1;
  pipeline::run_stage(cfg0);

  RunConfig cfg1 = pipeline::default_config(pipeline::kStage1, work, 0);
  cfg1.dims.query_dim = 32;  // drifted
  cfg1.optim.epochs = 1;
  try {
    pipeline::run_stage(cfg1);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("hash mismatch") != std::string::npos);
  }
  fs::remove_all(work);
}

TEST_CASE("vocab lines include prompts and answers") {
  const auto records = pipeline::gen_corpus(1, 4);
  const auto lines = pipeline::vocab_lines(records);
  CHECK(lines.size() == records.size() + 6);
  const auto vocab = unilm::UnifiedVocab::build(lines, 256, 16);
  // QA answers must be whole pieces so generated answers decode cleanly
  CHECK(vocab.encode_text(pipeline::kYesAnswer).size() == 1);
  CHECK(vocab.encode_text(pipeline::kNoAnswer).size() == 1);
  CHECK(vocab.decode_text(vocab.encode_text(records[0].caption)) == records[0].caption);
}
