// Command-line interface: corpus generation, staged training, tokenizer
// round trips, constrained generation, retrieval, metric evaluation and the
// finite-difference gradient suite. Output is JSON on stdout unless
// --table is given. Exit codes: 0 success, 1 usage/input error, 2 internal.
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "moltok/checkpoint.hpp"
#include "moltok/pipeline.hpp"

using namespace moltok;

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<int> parse_id_list(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    ids.push_back(std::stoi(part));
  }
  if (ids.empty()) throw std::runtime_error("empty id list");
  return ids;
}

std::string stage2_dir_for(const std::string& lm_dir, const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  const auto man = pipeline::read_manifest(lm_dir);
  auto it = man.upstream_dirs.find(pipeline::kStage2);
  if (it == man.upstream_dirs.end()) {
    throw std::runtime_error("checkpoint has no tokenizer reference; pass --tokenizer");
  }
  return it->second;
}

int run(int argc, char** argv) {
  CLI::App app{"vector-quantized molecule tokenizer and unified molecule-text LM"};
  app.require_subcommand(1);

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a molecule-caption corpus");
  uint64_t gen_seed = 0;
  int gen_n = 512;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--n", gen_n, "record count")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "output JSONL path")->required();

  // train
  auto* train = app.add_subcommand("train", "train one pipeline stage");
  std::string train_stage, train_config;
  train->add_option("--stage", train_stage, "stage id")->required();
  train->add_option("--config", train_config, "run-config JSON file")->required();

  // tokenize
  auto* tok = app.add_subcommand("tokenize", "molecule to token ids");
  std::string tok_smiles, tok_ckpt;
  tok->add_option("--smiles", tok_smiles, "input SMILES")->required();
  tok->add_option("--ckpt", tok_ckpt, "tokenizer (stage 2) checkpoint dir")->required();

  // detokenize
  auto* detok = app.add_subcommand("detokenize", "token ids to SMILES");
  std::string detok_ids, detok_ckpt;
  detok->add_option("--ids", detok_ids, "comma-separated code ids")->required();
  detok->add_option("--ckpt", detok_ckpt, "tokenizer (stage 2) checkpoint dir")->required();

  // generate
  auto* genr = app.add_subcommand("generate", "caption-guided molecule generation");
  std::string genr_caption, genr_ckpt, genr_tok;
  double genr_temp = 0.0;
  uint64_t genr_seed = 0;
  bool genr_unconstrained = false;
  genr->add_option("--caption", genr_caption, "molecule description")->required();
  genr->add_option("--ckpt", genr_ckpt, "LM (stage 3/4) checkpoint dir")->required();
  genr->add_option("--tokenizer", genr_tok, "stage 2 dir (default: from manifest)");
  genr->add_option("--temperature", genr_temp, "sampling temperature (0 = greedy)");
  genr->add_option("--seed", genr_seed, "sampling seed");
  genr->add_flag("--unconstrained", genr_unconstrained, "disable span constraints");

  // retrieve
  auto* retr = app.add_subcommand("retrieve", "molecule-text retrieval scoring");
  std::string retr_pool, retr_ckpt;
  int retr_rerank = 8;
  int retr_pool_size = 64;
  retr->add_option("--pool", retr_pool, "corpus JSONL with smiles+caption")->required();
  retr->add_option("--ckpt", retr_ckpt, "stage 1 checkpoint dir")->required();
  retr->add_option("--rerank", retr_rerank, "matching re-rank depth");
  retr->add_option("--pool-size", retr_pool_size, "pool size cap");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score predictions against gold SMILES");
  std::string ev_pred, ev_gold;
  bool ev_table = false;
  ev->add_option("--pred", ev_pred, "predictions, one SMILES per line")->required();
  ev->add_option("--gold", ev_gold, "references, one SMILES per line")->required();
  ev->add_flag("--table", ev_table, "aligned text table instead of JSON");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int gc_seeds = 10;
  gc->add_option("--seeds", gc_seeds, "random seeds to sweep");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    const auto records = pipeline::gen_corpus(gen_seed, gen_n);
    pipeline::write_jsonl_file(gen_out, records);
    nlohmann::json j;
    j["written"] = records.size();
    j["path"] = gen_out;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (train->parsed()) {
    auto cfg = pipeline::RunConfig::from_json_file(train_config);
    cfg.stage = train_stage;
    pipeline::run_stage(cfg);
    nlohmann::json j;
    j["stage"] = cfg.stage;
    j["checkpoint"] = cfg.out_dir;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (tok->parsed()) {
    const auto s2 = pipeline::load_stage2<float>(tok_ckpt);
    const auto ids = s2.stack.tokenize(molgraph::parse_smiles(tok_smiles));
    std::cout << nlohmann::json(ids).dump() << "\n";
    return 0;
  }

  if (detok->parsed()) {
    const auto s2 = pipeline::load_stage2<float>(detok_ckpt);
    const std::string smiles = s2.stack.detokenize(parse_id_list(detok_ids));
    nlohmann::json j;
    j["smiles"] = smiles;
    bool valid = false;
    try {
      valid = molgraph::validate(molgraph::parse_smiles(smiles)).empty();
    } catch (const std::exception&) {
    }
    j["valid"] = valid;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (genr->parsed()) {
    const auto s3 = pipeline::load_stage3<float>(genr_ckpt);
    const auto s2 = pipeline::load_stage2<float>(stage2_dir_for(genr_ckpt, genr_tok));

    std::vector<int> prefix = {unilm::UnifiedVocab::kBos};
    for (int id : s3.uvocab.encode_text(pipeline::kGenerationPrompt)) prefix.push_back(id);
    for (int id : s3.uvocab.encode_text(genr_caption)) prefix.push_back(id);
    prefix.push_back(unilm::UnifiedVocab::kMol);

    unilm::GenerateConfig gcfg;
    gcfg.molecule_span = s3.cfg.dims.queries;
    gcfg.max_new_tokens = s3.cfg.dims.queries + 4;
    gcfg.temperature = genr_temp;
    gcfg.seed = genr_seed;
    gcfg.constrained = !genr_unconstrained;
    const auto out = unilm::generate(s3.lm, s3.uvocab, prefix, gcfg);
    const auto codes = unilm::extract_molecule_codes(out, prefix.size() - 1, s3.uvocab);

    nlohmann::json j;
    j["prompt"] = pipeline::kGenerationPrompt;
    j["caption"] = genr_caption;
    j["token_ids"] = codes;
    std::string smiles;
    bool valid = false;
    if (!codes.empty()) {
      smiles = s2.stack.detokenize(codes);
      try {
        valid = molgraph::validate(molgraph::parse_smiles(smiles)).empty();
      } catch (const std::exception&) {
      }
    }
    j["smiles"] = smiles;
    j["valid"] = valid;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (retr->parsed()) {
    const auto s1 = pipeline::load_stage1<float>(retr_ckpt);
    const auto records = pipeline::read_jsonl_file(retr_pool);
    const auto res = pipeline::eval_retrieval(s1, records, retr_pool_size, retr_rerank);
    nlohmann::json j;
    j["m2t_accuracy"] = res.m2t_accuracy;
    j["m2t_recall20"] = res.m2t_recall20;
    j["t2m_accuracy"] = res.t2m_accuracy;
    j["t2m_recall20"] = res.t2m_recall20;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (ev->parsed()) {
    const auto pred = read_lines(ev_pred);
    const auto gold = read_lines(ev_gold);
    const auto rep = chemeval::evaluate_generation(pred, gold);
    if (ev_table) {
      std::cout << rep.to_table();
    } else {
      std::cout << rep.to_json() << "\n";
    }
    return 0;
  }

  if (gc->parsed()) {
    const auto rep = pipeline::run_gradcheck(gc_seeds);
    nlohmann::json j;
    j["passed"] = rep.passed;
    j["max_rel_err"] = rep.max_rel_err;
    j["failures"] = rep.failures;
    std::cout << j.dump() << "\n";
    return rep.passed ? 0 : 1;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const molgraph::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
