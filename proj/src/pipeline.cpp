#include "moltok/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "moltok/checkpoint.hpp"

namespace moltok::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

std::string RunConfig::to_json() const {
  nlohmann::json j;
  j["stage"] = stage;
  j["seed"] = seed;
  j["precision"] = precision;
  j["dims"] = {{"queries", dims.queries},       {"query_dim", dims.query_dim},
               {"codes", dims.codes},           {"feature_dim", dims.feature_dim},
               {"smiles_dim", dims.smiles_dim}, {"lm_dim", dims.lm_dim},
               {"text_pieces", dims.text_pieces}};
  j["model"] = {{"encoder_layers", model.encoder_layers},
                {"qformer_blocks", model.qformer_blocks},
                {"qformer_heads", model.qformer_heads},
                {"ae_blocks", model.ae_blocks},
                {"ae_heads", model.ae_heads},
                {"lm_blocks", model.lm_blocks},
                {"lm_heads", model.lm_heads},
                {"context", model.context},
                {"max_smiles_len", model.max_smiles_len},
                {"max_text_len", model.max_text_len},
                {"decode_budget", model.decode_budget}};
  j["optim"] = {{"lr", optim.lr},
                {"min_lr", optim.min_lr},
                {"weight_decay", optim.weight_decay},
                {"warmup", optim.warmup},
                {"epochs", optim.epochs},
                {"batch", optim.batch},
                {"beta", optim.beta},
                {"tau", optim.tau},
                {"mtm_subbatch", optim.mtm_subbatch}};
  j["data"] = {{"train", train_path}, {"val", val_path}, {"test", test_path}};
  j["out"] = out_dir;
  j["upstream"] = upstream_dirs;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RunConfig c;
  c.stage = j.at("stage").get<std::string>();
  c.seed = j.value("seed", uint64_t{0});
  c.precision = j.value("precision", std::string("f32"));
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    c.dims.queries = d.value("queries", c.dims.queries);
    c.dims.query_dim = d.value("query_dim", c.dims.query_dim);
    c.dims.codes = d.value("codes", c.dims.codes);
    c.dims.feature_dim = d.value("feature_dim", c.dims.feature_dim);
    c.dims.smiles_dim = d.value("smiles_dim", c.dims.smiles_dim);
    c.dims.lm_dim = d.value("lm_dim", c.dims.lm_dim);
    c.dims.text_pieces = d.value("text_pieces", c.dims.text_pieces);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.encoder_layers = m.value("encoder_layers", c.model.encoder_layers);
    c.model.qformer_blocks = m.value("qformer_blocks", c.model.qformer_blocks);
    c.model.qformer_heads = m.value("qformer_heads", c.model.qformer_heads);
    c.model.ae_blocks = m.value("ae_blocks", c.model.ae_blocks);
    c.model.ae_heads = m.value("ae_heads", c.model.ae_heads);
    c.model.lm_blocks = m.value("lm_blocks", c.model.lm_blocks);
    c.model.lm_heads = m.value("lm_heads", c.model.lm_heads);
    c.model.context = m.value("context", c.model.context);
    c.model.max_smiles_len = m.value("max_smiles_len", c.model.max_smiles_len);
    c.model.max_text_len = m.value("max_text_len", c.model.max_text_len);
    c.model.decode_budget = m.value("decode_budget", c.model.decode_budget);
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.min_lr = o.value("min_lr", c.optim.min_lr);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.warmup = o.value("warmup", c.optim.warmup);
    c.optim.epochs = o.value("epochs", c.optim.epochs);
    c.optim.batch = o.value("batch", c.optim.batch);
    c.optim.beta = o.value("beta", c.optim.beta);
    c.optim.tau = o.value("tau", c.optim.tau);
    c.optim.mtm_subbatch = o.value("mtm_subbatch", c.optim.mtm_subbatch);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.train_path = d.value("train", std::string());
    c.val_path = d.value("val", std::string());
    c.test_path = d.value("test", std::string());
  }
  c.out_dir = j.value("out", std::string());
  if (j.contains("upstream")) {
    c.upstream_dirs = j.at("upstream").get<std::map<std::string, std::string>>();
  }
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

uint64_t RunConfig::arch_hash() const {
  nlohmann::json j;
  j["dims"] = {dims.queries,     dims.query_dim, dims.codes,      dims.feature_dim,
               dims.smiles_dim,  dims.lm_dim,    dims.text_pieces};
  j["model"] = {model.encoder_layers, model.qformer_blocks, model.qformer_heads,
                model.ae_blocks,      model.ae_heads,       model.lm_blocks,
                model.lm_heads,       model.context,        model.max_smiles_len,
                model.max_text_len};
  return fnv1a_hash(j.dump());
}

RunConfig default_config(const std::string& stage, const std::string& workdir,
                         uint64_t seed) {
  RunConfig c;
  c.stage = stage;
  c.seed = seed;
  c.train_path = workdir + "/data/train.jsonl";
  c.val_path = workdir + "/data/val.jsonl";
  c.test_path = workdir + "/data/test.jsonl";
  c.out_dir = workdir + "/runs/" + stage;
  auto up = [&](const char* s) { c.upstream_dirs[s] = workdir + "/runs/" + s; };
  if (stage == kStage0) {
    c.optim.lr = 3e-3;
    c.optim.epochs = 42;
    c.optim.warmup = 60;
  } else if (stage == kStage1) {
    up(kStage0);
    c.optim.lr = 1e-3;
    c.optim.epochs = 24;
    c.optim.warmup = 30;
  } else if (stage == kStage2) {
    up(kStage0);
    up(kStage1);
    c.optim.lr = 2e-3;
    c.optim.epochs = 40;
    c.optim.warmup = 50;
  } else if (stage == kStage3) {
    up(kStage0);
    up(kStage1);
    up(kStage2);
    c.optim.lr = 1e-3;
    c.optim.epochs = 10;
    c.optim.batch = 16;
    c.optim.warmup = 100;
  } else if (stage == kStage4) {
    up(kStage0);
    up(kStage1);
    up(kStage2);
    up(kStage3);
    c.optim.lr = 5e-4;
    c.optim.epochs = 6;
    c.optim.batch = 16;
    c.optim.warmup = 50;
  } else {
    throw std::invalid_argument("unknown stage: " + stage);
  }
  return c;
}

void ensure_corpus(const std::string& workdir, uint64_t seed, int n_train, int n_val,
                   int n_test) {
  fs::create_directories(workdir + "/data");
  const std::string train = workdir + "/data/train.jsonl";
  const std::string val = workdir + "/data/val.jsonl";
  const std::string test = workdir + "/data/test.jsonl";
  if (fs::exists(train) && fs::exists(val) && fs::exists(test)) return;
  const auto all = gen_corpus(seed, n_train + n_val + n_test);
  std::vector<CorpusRecord> tr(all.begin(), all.begin() + n_train);
  std::vector<CorpusRecord> va(all.begin() + n_train, all.begin() + n_train + n_val);
  std::vector<CorpusRecord> te(all.begin() + n_train + n_val, all.end());
  write_jsonl_file(train, tr);
  write_jsonl_file(val, va);
  write_jsonl_file(test, te);
}

std::vector<std::string> vocab_lines(const std::vector<CorpusRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size() + 6);
  for (const auto& r : records) lines.push_back(r.caption);
  lines.push_back(kCaptionPrompt);
  lines.push_back(kGenerationPrompt);
  lines.push_back(kRingPrompt);
  lines.push_back(kNitrogenPrompt);
  lines.push_back(kYesAnswer);
  lines.push_back(kNoAnswer);
  return lines;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

namespace {

struct LockFile {
  std::string path;
  explicit LockFile(const std::string& dir) : path(dir + "/lock") {
    fs::create_directories(dir);
    if (fs::exists(path)) {
      throw std::runtime_error("training lock already held for " + dir +
                               " (remove " + path + " if stale)");
    }
    std::ofstream out(path);
    out << "locked\n";
  }
  ~LockFile() { std::error_code ec; fs::remove(path, ec); }
};

struct LossLog {
  std::ofstream out;
  explicit LossLog(const std::string& dir) : out(dir + "/loss.csv", std::ios::binary) {
    out << "step,loss,lr\n";
  }
  void row(int64_t step, double loss, double lr) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g\n",
                  static_cast<long long>(step), loss, lr);
    out << buf;
  }
};

uint64_t stage_seed(const RunConfig& cfg, const char* what) {
  return cfg.seed ^ fnv1a_hash(cfg.stage + ":" + what);
}

void write_metrics(const std::string& dir, const nlohmann::json& j) {
  std::ofstream out(dir + "/metrics.json", std::ios::binary);
  out << j.dump(2) << "\n";
}

void require_upstream(const RunConfig& cfg, const std::vector<const char*>& stages) {
  for (const char* s : stages) {
    auto it = cfg.upstream_dirs.find(s);
    if (it == cfg.upstream_dirs.end()) {
      throw std::runtime_error("stage " + cfg.stage + " needs an upstream dir for " +
                               std::string(s));
    }
    if (!checkpoint_exists(it->second)) {
      throw std::runtime_error("missing predecessor checkpoint for " + std::string(s) +
                               " at " + it->second + "; run that stage first");
    }
    const auto man = read_manifest(it->second);
    if (man.stage != s) {
      throw std::runtime_error("checkpoint at " + it->second + " holds stage " +
                               man.stage + ", expected " + s);
    }
    if (man.config_hash != cfg.arch_hash()) {
      throw std::runtime_error("config hash mismatch against upstream " +
                               std::string(s) + ": dimensions drifted");
    }
  }
}

Manifest base_manifest(const RunConfig& cfg) {
  Manifest m;
  m.stage = cfg.stage;
  m.config_hash = cfg.arch_hash();
  for (const auto& [name, dir] : cfg.upstream_dirs) {
    if (checkpoint_exists(dir)) {
      m.upstream_hashes[name] = read_manifest(dir).config_hash;
      m.upstream_dirs[name] = dir;
    }
  }
  m.extra["config"] = cfg.to_json();
  return m;
}

// Model factories: shapes depend only on the config, values on the seed.

template <class T>
smilesae::SmilesAutoencoder<T> make_ae(const RunConfig& cfg, ndt::Rng& rng) {
  smilesae::SmilesVocab vocab;
  return smilesae::SmilesAutoencoder<T>::init(
      vocab.size(), cfg.dims.queries, cfg.dims.smiles_dim, cfg.model.ae_heads,
      cfg.model.ae_blocks, cfg.model.ae_blocks, cfg.model.max_smiles_len, rng);
}

template <class T>
molenc::EncoderParams<T> make_encoder(const RunConfig& cfg, ndt::Rng& rng) {
  return molenc::EncoderParams<T>::init(cfg.dims.feature_dim, cfg.model.encoder_layers,
                                        rng);
}

template <class T>
causalq::QFormer<T> make_qformer(const RunConfig& cfg, ndt::Rng& rng) {
  const int text_vocab = unilm::UnifiedVocab::kSpecialCount + cfg.dims.text_pieces;
  return causalq::QFormer<T>::init(cfg.dims.queries, cfg.dims.query_dim,
                                   cfg.model.qformer_heads, cfg.model.qformer_blocks,
                                   cfg.dims.feature_dim, text_vocab,
                                   cfg.model.max_text_len, rng);
}

template <class T>
unilm::UnifiedLM<T> make_lm(const RunConfig& cfg, ndt::Rng& rng, int vocab_size) {
  return unilm::UnifiedLM<T>::init(vocab_size, cfg.dims.lm_dim, cfg.model.lm_heads,
                                   cfg.model.lm_blocks, cfg.model.context, rng);
}

std::vector<CorpusRecord> load_records(const std::string& path) {
  auto records = read_jsonl_file(path);
  if (records.empty()) throw std::runtime_error("empty corpus: " + path);
  return records;
}

// caption token ids for the query-transformer text branch (leading BOS as CLS)
std::vector<int> text_branch_ids(const unilm::UnifiedVocab& vocab,
                                 const std::string& caption, int max_len) {
  std::vector<int> ids = {unilm::UnifiedVocab::kBos};
  for (int id : vocab.encode_text(caption)) ids.push_back(id);
  if (static_cast<int>(ids.size()) > max_len) ids.resize(max_len);
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 0: SMILES autoencoder
// ---------------------------------------------------------------------------

namespace {

template <class T>
void run_stage0_impl(const RunConfig& cfg) {
  LockFile lock(cfg.out_dir);
  const auto records = load_records(cfg.train_path);
  smilesae::SmilesVocab vocab;
  ndt::Rng model_rng(stage_seed(cfg, "model"));
  auto ae = make_ae<T>(cfg, model_rng);

  ndt::ParamMap<T> pm;
  ae.params(pm, "ae");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig ocfg;
  ocfg.lr = cfg.optim.lr;
  ocfg.weight_decay = cfg.optim.weight_decay;
  ndt::AdamW<T> opt(params, ocfg);

  std::vector<std::vector<int>> token_seqs;
  for (const auto& r : records) token_seqs.push_back(vocab.tokenize(r.smiles));

  const int n = static_cast<int>(records.size());
  const int batch = std::min(cfg.optim.batch, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.optim.epochs;

  LossLog log(cfg.out_dir);
  ndt::Rng shuffle_rng(stage_seed(cfg, "shuffle"));
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(n);
    for (int b = 0; b < steps_per_epoch; ++b) {
      ndt::Tape<T> tape;
      typename ndt::Tape<T>::Scope scope(tape);
      ndt::Tensor<T> loss;
      int count = 0;
      for (int k = b * batch; k < std::min((b + 1) * batch, n); ++k) {
        ndt::Tensor<T> li = ae.reconstruction_loss(token_seqs[order[k]]);
        loss = loss.defined() ? ndt::add(loss, li) : li;
        ++count;
      }
      loss = ndt::mul_scalar(loss, T(1) / static_cast<T>(count));
      const double lr =
          ndt::cosine_lr(step, total_steps, cfg.optim.lr, cfg.optim.min_lr,
                         std::min<int64_t>(cfg.optim.warmup, total_steps - 1));
      opt.set_lr(lr);
      opt.zero_grad(params);
      tape.backward(loss);
      opt.step(params);
      log.row(step, static_cast<double>(loss.item()), lr);
      ++step;
    }
  }

  save_checkpoint(cfg.out_dir, base_manifest(cfg), entries_from(pm));

  LoadedStage0<T> self{cfg, vocab, ae};
  const auto test = load_records(cfg.test_path);
  nlohmann::json metrics;
  metrics["reconstruction_exact"] = eval_reconstruction_exact(self, test);
  metrics["latent_self_retrieval"] = eval_latent_self_retrieval(self, test);
  write_metrics(cfg.out_dir, metrics);
}

// ---------------------------------------------------------------------------
// Stage 1: query transformer with contrastive / matching / grounding losses
// ---------------------------------------------------------------------------

template <class T>
void run_stage1_impl(const RunConfig& cfg) {
  require_upstream(cfg, {kStage0});
  LockFile lock(cfg.out_dir);
  const auto records = load_records(cfg.train_path);
  const auto uvocab = unilm::UnifiedVocab::build(vocab_lines(records),
                                                 cfg.dims.text_pieces, cfg.dims.codes);

  ndt::Rng model_rng(stage_seed(cfg, "model"));
  auto encoder = make_encoder<T>(cfg, model_rng);
  auto qformer = make_qformer<T>(cfg, model_rng);

  ndt::ParamMap<T> pm;
  encoder.params(pm, "encoder");
  qformer.params(pm, "qformer");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig ocfg;
  ocfg.lr = cfg.optim.lr;
  ocfg.weight_decay = cfg.optim.weight_decay;
  ndt::AdamW<T> opt(params, ocfg);

  std::vector<molgraph::MolGraph> mols;
  std::vector<std::vector<int>> caption_ids, caption_pieces;
  for (const auto& r : records) {
    mols.push_back(molgraph::parse_smiles(r.smiles));
    caption_ids.push_back(text_branch_ids(uvocab, r.caption, cfg.model.max_text_len));
    auto pieces = uvocab.encode_text(r.caption);
    if (static_cast<int>(pieces.size()) > cfg.model.max_text_len - 2) {
      pieces.resize(cfg.model.max_text_len - 2);
    }
    caption_pieces.push_back(std::move(pieces));
  }

  const int n = static_cast<int>(records.size());
  const int batch = std::min(cfg.optim.batch, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.optim.epochs;

  LossLog log(cfg.out_dir);
  ndt::Rng shuffle_rng(stage_seed(cfg, "shuffle"));
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(n);
    for (int b = 0; b < steps_per_epoch; ++b) {
      std::vector<int> idx;
      for (int k = b * batch; k < std::min((b + 1) * batch, n); ++k) {
        idx.push_back(order[k]);
      }
      ndt::Tape<T> tape;
      typename ndt::Tape<T>::Scope scope(tape);

      std::vector<ndt::Tensor<T>> feats, zrows, yrows;
      for (int i : idx) {
        feats.push_back(molenc::encode(mols[i], encoder));
        zrows.push_back(qformer.molecule_rep(feats.back()));
        yrows.push_back(qformer.text_rep(caption_ids[i]));
      }
      ndt::Tensor<T> loss = causalq::mtc_loss(ndt::concat_rows(zrows),
                                              ndt::concat_rows(yrows),
                                              static_cast<T>(cfg.optim.tau));

      const int sub = std::min<int>(cfg.optim.mtm_subbatch, static_cast<int>(idx.size()));
      if (sub >= 2) {
        std::vector<ndt::Tensor<T>> score_rows;
        for (int i = 0; i < sub; ++i) {
          ndt::Tensor<T> row;
          for (int j = 0; j < sub; ++j) {
            ndt::Tensor<T> s =
                ndt::reshape(qformer.match_logit(feats[i], caption_ids[idx[j]]), {1, 1});
            row = row.defined() ? ndt::concat_cols(row, s) : s;
          }
          score_rows.push_back(row);
        }
        loss = ndt::add(loss, causalq::mtm_loss(ndt::concat_rows(score_rows)));

        ndt::Tensor<T> mtg;
        for (int i = 0; i < sub; ++i) {
          ndt::Tensor<T> li = causalq::mtg_loss(qformer, feats[i],
                                                caption_pieces[idx[i]],
                                                unilm::UnifiedVocab::kBos,
                                                unilm::UnifiedVocab::kEos);
          mtg = mtg.defined() ? ndt::add(mtg, li) : li;
        }
        loss = ndt::add(loss, ndt::mul_scalar(mtg, T(1) / static_cast<T>(sub)));
      }

      const double lr =
          ndt::cosine_lr(step, total_steps, cfg.optim.lr, cfg.optim.min_lr,
                         std::min<int64_t>(cfg.optim.warmup, total_steps - 1));
      opt.set_lr(lr);
      opt.zero_grad(params);
      tape.backward(loss);
      opt.step(params);
      log.row(step, static_cast<double>(loss.item()), lr);
      ++step;
    }
  }

  Manifest man = base_manifest(cfg);
  man.extra["vocab"] = uvocab.to_json();
  save_checkpoint(cfg.out_dir, man, entries_from(pm));

  LoadedStage1<T> self{cfg, uvocab, encoder, qformer};
  const auto test = load_records(cfg.test_path);
  const auto ret = eval_retrieval(self, test, 64, 8);
  nlohmann::json metrics;
  metrics["m2t_accuracy"] = ret.m2t_accuracy;
  metrics["m2t_recall20"] = ret.m2t_recall20;
  metrics["t2m_accuracy"] = ret.t2m_accuracy;
  metrics["t2m_recall20"] = ret.t2m_recall20;
  write_metrics(cfg.out_dir, metrics);
}

// ---------------------------------------------------------------------------
// Stage 2: tokenizer (query transformer + codebook + adapter)
// ---------------------------------------------------------------------------

template <class T>
void run_stage2_impl(const RunConfig& cfg) {
  require_upstream(cfg, {kStage0, kStage1});
  LockFile lock(cfg.out_dir);
  const auto records = load_records(cfg.train_path);

  auto s0 = load_stage0<T>(cfg.upstream_dirs.at(kStage0));
  auto s1 = load_stage1<T>(cfg.upstream_dirs.at(kStage1));

  ndt::Rng model_rng(stage_seed(cfg, "model"));
  auto codebook = vqtok::init_codebook<T>(cfg.dims.codes, cfg.dims.query_dim, model_rng);
  auto adapter = vqtok::Adapter<T>::init(cfg.dims.query_dim, cfg.dims.smiles_dim,
                                         model_rng);

  // frozen: molecule encoder (stage 1) and the SMILES autoencoder (stage 0);
  // trainable: query transformer (continued), codebook, adapter
  ndt::ParamMap<T> pm;
  s1.qformer.params(pm, "qformer");
  pm.add("codebook", codebook);
  adapter.params(pm, "adapter");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig ocfg;
  ocfg.lr = cfg.optim.lr;
  ocfg.weight_decay = cfg.optim.weight_decay;
  ndt::AdamW<T> opt(params, ocfg);

  // frozen forward passes are constant per molecule: cache them
  std::vector<ndt::Tensor<T>> feats, targets;
  for (const auto& r : records) {
    const auto mol = molgraph::parse_smiles(r.smiles);
    feats.push_back(molenc::encode(mol, s1.encoder));
    targets.push_back(smilesae::encode(r.smiles, s0.vocab, s0.ae));
  }

  const int n = static_cast<int>(records.size());
  const int batch = std::min(cfg.optim.batch, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.optim.epochs;

  LossLog log(cfg.out_dir);
  ndt::Rng shuffle_rng(stage_seed(cfg, "shuffle"));
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(n);
    for (int b = 0; b < steps_per_epoch; ++b) {
      ndt::Tape<T> tape;
      typename ndt::Tape<T>::Scope scope(tape);
      ndt::Tensor<T> loss;
      int count = 0;
      for (int k = b * batch; k < std::min((b + 1) * batch, n); ++k) {
        const int i = order[k];
        ndt::Tensor<T> z = s1.qformer.forward_queries(feats[i]);
        auto qr = vqtok::quantize(z, codebook);
        ndt::Tensor<T> xr = adapter(vqtok::ste(z, qr.embeddings));
        auto parts = vqtok::tokenizer_loss(xr, targets[i], z, codebook, qr.ids,
                                           static_cast<T>(cfg.optim.beta));
        loss = loss.defined() ? ndt::add(loss, parts.total) : parts.total;
        ++count;
      }
      loss = ndt::mul_scalar(loss, T(1) / static_cast<T>(count));
      const double lr =
          ndt::cosine_lr(step, total_steps, cfg.optim.lr, cfg.optim.min_lr,
                         std::min<int64_t>(cfg.optim.warmup, total_steps - 1));
      opt.set_lr(lr);
      opt.zero_grad(params);
      tape.backward(loss);
      opt.step(params);
      log.row(step, static_cast<double>(loss.item()), lr);
      ++step;
    }
  }

  Manifest man = base_manifest(cfg);
  man.extra["vocab"] = s1.uvocab.to_json();
  save_checkpoint(cfg.out_dir, man, entries_from(pm));

  LoadedStage2<T> self{cfg, s1.uvocab,
                       vqtok::TokenizerStack<T>{s1.encoder, s1.qformer, codebook,
                                                adapter, s0.vocab, s0.ae,
                                                cfg.model.decode_budget}};
  const auto test = load_records(cfg.test_path);
  const auto ev = eval_tokenizer(self, test);
  nlohmann::json metrics;
  metrics["roundtrip_exact"] = ev.roundtrip_exact;
  metrics["usage_fraction"] = ev.usage_fraction;
  metrics["perplexity"] = ev.perplexity;
  write_metrics(cfg.out_dir, metrics);
}

// ---------------------------------------------------------------------------
// Stages 3 and 4: unified LM pretraining and instruction tasks
// ---------------------------------------------------------------------------

template <class T>
std::vector<unilm::UnifiedSequence> stage3_sequences(
    const std::vector<CorpusRecord>& records,
    const std::vector<std::vector<int>>& codes, const unilm::UnifiedVocab& uvocab) {
  std::vector<unilm::UnifiedSequence> seqs;
  for (size_t i = 0; i < records.size(); ++i) {
    seqs.push_back(unilm::encode_mol_to_text(codes[i], records[i].smiles,
                                             kCaptionPrompt, records[i].caption,
                                             uvocab));
    seqs.push_back(unilm::encode_text_to_mol(kGenerationPrompt, records[i].caption,
                                             codes[i], uvocab));
  }
  return seqs;
}

template <class T>
std::vector<unilm::UnifiedSequence> stage4_sequences(
    const std::vector<CorpusRecord>& records,
    const std::vector<std::vector<int>>& codes, const unilm::UnifiedVocab& uvocab) {
  std::vector<unilm::UnifiedSequence> seqs;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const bool ring = r.properties.count("ring_count") && r.properties.at("ring_count") > 0;
    const bool nitrogen = r.properties.count("n_count") && r.properties.at("n_count") > 0;
    seqs.push_back(unilm::encode_mol_to_text(codes[i], r.smiles, kRingPrompt,
                                             ring ? kYesAnswer : kNoAnswer, uvocab));
    seqs.push_back(unilm::encode_mol_to_text(codes[i], r.smiles, kNitrogenPrompt,
                                             nitrogen ? kYesAnswer : kNoAnswer, uvocab));
    seqs.push_back(unilm::encode_mol_to_text(codes[i], r.smiles, kCaptionPrompt,
                                             r.caption, uvocab));
    seqs.push_back(unilm::encode_text_to_mol(kGenerationPrompt, r.caption, codes[i],
                                             uvocab));
  }
  return seqs;
}

template <class T>
void train_lm_on_sequences(const RunConfig& cfg, unilm::UnifiedLM<T>& lm,
                           const std::vector<unilm::UnifiedSequence>& seqs) {
  ndt::ParamMap<T> pm;
  lm.params(pm, "lm");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig ocfg;
  ocfg.lr = cfg.optim.lr;
  ocfg.weight_decay = cfg.optim.weight_decay;
  ndt::AdamW<T> opt(params, ocfg);

  const int n = static_cast<int>(seqs.size());
  const int batch = std::min(cfg.optim.batch, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.optim.epochs;

  LossLog log(cfg.out_dir);
  ndt::Rng shuffle_rng(stage_seed(cfg, "shuffle"));
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(n);
    for (int b = 0; b < steps_per_epoch; ++b) {
      std::vector<unilm::UnifiedSequence> chunk;
      for (int k = b * batch; k < std::min((b + 1) * batch, n); ++k) {
        chunk.push_back(seqs[order[k]]);
      }
      ndt::Tape<T> tape;
      typename ndt::Tape<T>::Scope scope(tape);
      ndt::Tensor<T> loss = unilm::lm_loss_batch(lm, chunk);
      const double lr =
          ndt::cosine_lr(step, total_steps, cfg.optim.lr, cfg.optim.min_lr,
                         std::min<int64_t>(cfg.optim.warmup, total_steps - 1));
      opt.set_lr(lr);
      opt.zero_grad(params);
      tape.backward(loss);
      opt.step(params);
      log.row(step, static_cast<double>(loss.item()), lr);
      ++step;
    }
  }
}

template <class T>
std::vector<std::vector<int>> tokenize_all(const vqtok::TokenizerStack<T>& stack,
                                           const std::vector<CorpusRecord>& records) {
  std::vector<std::vector<int>> codes;
  for (const auto& r : records) {
    codes.push_back(stack.tokenize(molgraph::parse_smiles(r.smiles)));
  }
  return codes;
}

template <class T>
void run_stage3_impl(const RunConfig& cfg) {
  require_upstream(cfg, {kStage0, kStage1, kStage2});
  LockFile lock(cfg.out_dir);
  const auto records = load_records(cfg.train_path);
  auto s2 = load_stage2<T>(cfg.upstream_dirs.at(kStage2));

  const auto codes = tokenize_all(s2.stack, records);
  const auto seqs = stage3_sequences<T>(records, codes, s2.uvocab);

  ndt::Rng model_rng(stage_seed(cfg, "model"));
  auto lm = make_lm<T>(cfg, model_rng, s2.uvocab.size());
  train_lm_on_sequences(cfg, lm, seqs);

  ndt::ParamMap<T> pm;
  lm.params(pm, "lm");
  Manifest man = base_manifest(cfg);
  man.extra["vocab"] = s2.uvocab.to_json();
  save_checkpoint(cfg.out_dir, man, entries_from(pm));

  LoadedStage3<T> self{cfg, s2.uvocab, lm};
  const auto test = load_records(cfg.test_path);
  nlohmann::json metrics;
  metrics["generation_validity"] = eval_generation_validity(self, s2, test);
  write_metrics(cfg.out_dir, metrics);
}

template <class T>
void run_stage4_impl(const RunConfig& cfg) {
  require_upstream(cfg, {kStage0, kStage1, kStage2, kStage3});
  LockFile lock(cfg.out_dir);
  const auto records = load_records(cfg.train_path);
  auto s2 = load_stage2<T>(cfg.upstream_dirs.at(kStage2));
  auto s3 = load_stage3<T>(cfg.upstream_dirs.at(kStage3));

  const auto codes = tokenize_all(s2.stack, records);
  const auto seqs = stage4_sequences<T>(records, codes, s3.uvocab);
  train_lm_on_sequences(cfg, s3.lm, seqs);

  ndt::ParamMap<T> pm;
  s3.lm.params(pm, "lm");
  Manifest man = base_manifest(cfg);
  man.extra["vocab"] = s3.uvocab.to_json();
  save_checkpoint(cfg.out_dir, man, entries_from(pm));

  LoadedStage3<T> self{cfg, s3.uvocab, s3.lm};
  const auto test = load_records(cfg.test_path);
  const auto ev = eval_tasks(self, s2, test);
  nlohmann::json metrics;
  metrics["qa_accuracy"] = ev.qa_accuracy;
  metrics["caption_rouge_l"] = ev.caption_rouge_l;
  metrics["generation"] = nlohmann::json::parse(ev.generation.to_json());
  write_metrics(cfg.out_dir, metrics);
}

}  // namespace

void run_stage(const RunConfig& cfg) {
  const bool f64 = cfg.precision == "f64";
  if (!f64 && cfg.precision != "f32") {
    throw std::invalid_argument("precision must be f32 or f64");
  }
  auto dispatch = [&](auto tag) {
    using T = decltype(tag);
    if (cfg.stage == kStage0) {
      run_stage0_impl<T>(cfg);
    } else if (cfg.stage == kStage1) {
      run_stage1_impl<T>(cfg);
    } else if (cfg.stage == kStage2) {
      run_stage2_impl<T>(cfg);
    } else if (cfg.stage == kStage3) {
      run_stage3_impl<T>(cfg);
    } else if (cfg.stage == kStage4) {
      run_stage4_impl<T>(cfg);
    } else {
      throw std::invalid_argument("unknown stage: " + cfg.stage);
    }
  };
  if (f64) {
    dispatch(double{});
  } else {
    dispatch(float{});
  }
}

// ---------------------------------------------------------------------------
// Loaders
// ---------------------------------------------------------------------------

template <class T>
LoadedStage0<T> load_stage0(const std::string& dir) {
  const auto man = read_manifest(dir);
  if (man.stage != kStage0) {
    throw std::runtime_error("expected a " + std::string(kStage0) + " checkpoint in " +
                             dir);
  }
  LoadedStage0<T> out{RunConfig::from_json(man.extra.at("config")),
                      smilesae::SmilesVocab(), smilesae::SmilesAutoencoder<T>()};
  ndt::Rng rng(0);
  out.ae = make_ae<T>(out.cfg, rng);
  ndt::ParamMap<T> pm;
  out.ae.params(pm, "ae");
  restore_into(pm, load_checkpoint(dir));
  return out;
}

template <class T>
LoadedStage1<T> load_stage1(const std::string& dir) {
  const auto man = read_manifest(dir);
  if (man.stage != kStage1) {
    throw std::runtime_error("expected a " + std::string(kStage1) + " checkpoint in " +
                             dir);
  }
  LoadedStage1<T> out{RunConfig::from_json(man.extra.at("config")),
                      unilm::UnifiedVocab::from_json(man.extra.at("vocab")),
                      molenc::EncoderParams<T>{}, causalq::QFormer<T>{}};
  ndt::Rng rng(0);
  out.encoder = make_encoder<T>(out.cfg, rng);
  out.qformer = make_qformer<T>(out.cfg, rng);
  ndt::ParamMap<T> pm;
  out.encoder.params(pm, "encoder");
  out.qformer.params(pm, "qformer");
  restore_into(pm, load_checkpoint(dir));
  return out;
}

template <class T>
LoadedStage2<T> load_stage2(const std::string& dir) {
  const auto man = read_manifest(dir);
  if (man.stage != kStage2) {
    throw std::runtime_error("expected a " + std::string(kStage2) + " checkpoint in " +
                             dir);
  }
  const auto cfg = RunConfig::from_json(man.extra.at("config"));
  // chained upstream verification
  for (const auto& [name, hash] : man.upstream_hashes) {
    const auto updir = man.upstream_dirs.at(name);
    if (!checkpoint_exists(updir)) {
      throw std::runtime_error("upstream checkpoint vanished: " + updir);
    }
    if (read_manifest(updir).config_hash != hash) {
      throw std::runtime_error("upstream " + name + " was retrained with different "
                               "dimensions; config hash mismatch");
    }
  }
  auto s0 = load_stage0<T>(man.upstream_dirs.at(kStage0));
  auto s1 = load_stage1<T>(man.upstream_dirs.at(kStage1));

  ndt::Rng rng(0);
  LoadedStage2<T> out{cfg, unilm::UnifiedVocab::from_json(man.extra.at("vocab")),
                      vqtok::TokenizerStack<T>{
                          s1.encoder, s1.qformer,
                          vqtok::init_codebook<T>(cfg.dims.codes, cfg.dims.query_dim, rng),
                          vqtok::Adapter<T>::init(cfg.dims.query_dim, cfg.dims.smiles_dim,
                                                  rng),
                          s0.vocab, s0.ae, cfg.model.decode_budget}};
  ndt::ParamMap<T> pm;
  out.stack.qformer.params(pm, "qformer");
  pm.add("codebook", out.stack.codebook);
  out.stack.adapter.params(pm, "adapter");
  restore_into(pm, load_checkpoint(dir));
  return out;
}

template <class T>
LoadedStage3<T> load_stage3(const std::string& dir) {
  const auto man = read_manifest(dir);
  if (man.stage != kStage3 && man.stage != kStage4) {
    throw std::runtime_error("expected a unified-LM checkpoint in " + dir);
  }
  LoadedStage3<T> out{RunConfig::from_json(man.extra.at("config")),
                      unilm::UnifiedVocab::from_json(man.extra.at("vocab")),
                      unilm::UnifiedLM<T>{}};
  ndt::Rng rng(0);
  out.lm = make_lm<T>(out.cfg, rng, out.uvocab.size());
  ndt::ParamMap<T> pm;
  out.lm.params(pm, "lm");
  restore_into(pm, load_checkpoint(dir));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluations
// ---------------------------------------------------------------------------

template <class T>
double eval_reconstruction_exact(const LoadedStage0<T>& s0,
                                 const std::vector<CorpusRecord>& records) {
  int exact = 0;
  for (const auto& r : records) {
    ndt::Tensor<T> latent = smilesae::encode(r.smiles, s0.vocab, s0.ae);
    const std::string out =
        smilesae::decode(latent, s0.vocab, s0.ae, s0.cfg.model.decode_budget);
    exact += out == r.smiles ? 1 : 0;
  }
  return static_cast<double>(exact) / static_cast<double>(records.size());
}

template <class T>
double eval_latent_self_retrieval(const LoadedStage0<T>& s0,
                                  const std::vector<CorpusRecord>& records) {
  std::vector<std::vector<T>> latents;
  for (const auto& r : records) {
    latents.push_back(smilesae::encode(r.smiles, s0.vocab, s0.ae).values());
  }
  int hits = 0;
  for (size_t i = 0; i < latents.size(); ++i) {
    int best = -1;
    double best_d = 0;
    for (size_t j = 0; j < latents.size(); ++j) {
      double d = 0;
      for (size_t t = 0; t < latents[i].size(); ++t) {
        const double diff =
            static_cast<double>(latents[i][t]) - static_cast<double>(latents[j][t]);
        d += diff * diff;
      }
      if (best < 0 || d < best_d) {
        best = static_cast<int>(j);
        best_d = d;
      }
    }
    hits += best == static_cast<int>(i) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(latents.size());
}

template <class T>
unilm::RetrievalResult eval_retrieval(const LoadedStage1<T>& s1,
                                      const std::vector<CorpusRecord>& records,
                                      int pool_size, int rerank_k) {
  unilm::RetrievalPool pool;
  const int n = std::min<int>(pool_size, static_cast<int>(records.size()));
  for (int i = 0; i < n; ++i) {
    pool.mols.push_back(molgraph::parse_smiles(records[i].smiles));
    pool.mol_keys.push_back(records[i].smiles);
    pool.text_ids.push_back(
        text_branch_ids(s1.uvocab, records[i].caption, s1.cfg.model.max_text_len));
    pool.text_keys.push_back(records[i].caption);
  }
  return unilm::retrieve(pool, s1.encoder, s1.qformer, rerank_k);
}

template <class T>
Stage2Eval eval_tokenizer(const LoadedStage2<T>& s2,
                          const std::vector<CorpusRecord>& records) {
  Stage2Eval ev;
  int exact = 0;
  std::vector<std::vector<int>> seqs;
  for (const auto& r : records) {
    const auto ids = s2.stack.tokenize(molgraph::parse_smiles(r.smiles));
    seqs.push_back(ids);
    try {
      const std::string back = molgraph::canonical_smiles(s2.stack.detokenize(ids));
      exact += back == r.smiles ? 1 : 0;
    } catch (const std::exception&) {
      // unparseable reconstruction counts as a miss
    }
  }
  ev.roundtrip_exact = static_cast<double>(exact) / static_cast<double>(records.size());
  const auto usage = vqtok::codebook_usage(seqs, s2.stack.code_count());
  ev.usage_fraction =
      static_cast<double>(usage.used_codes) / static_cast<double>(s2.stack.code_count());
  ev.perplexity = usage.perplexity;
  return ev;
}

template <class T>
double eval_generation_validity(const LoadedStage3<T>& s3, const LoadedStage2<T>& s2,
                                const std::vector<CorpusRecord>& records) {
  int valid = 0;
  for (const auto& r : records) {
    std::vector<int> prefix = {unilm::UnifiedVocab::kBos};
    for (int id : s3.uvocab.encode_text(kGenerationPrompt)) prefix.push_back(id);
    for (int id : s3.uvocab.encode_text(r.caption)) prefix.push_back(id);
    prefix.push_back(unilm::UnifiedVocab::kMol);

    unilm::GenerateConfig gcfg;
    gcfg.molecule_span = s3.cfg.dims.queries;
    gcfg.max_new_tokens = s3.cfg.dims.queries + 4;
    const auto out = unilm::generate(s3.lm, s3.uvocab, prefix, gcfg);
    const auto codes = unilm::extract_molecule_codes(out, prefix.size() - 1, s3.uvocab);
    if (static_cast<int>(codes.size()) != s3.cfg.dims.queries) continue;
    try {
      const std::string smiles = s2.stack.detokenize(codes);
      const auto mol = molgraph::parse_smiles(smiles);
      valid += molgraph::validate(mol).empty() ? 1 : 0;
    } catch (const std::exception&) {
    }
  }
  return static_cast<double>(valid) / static_cast<double>(records.size());
}

namespace {

// Generates the text continuation of an m2t-style prefix and decodes it.
template <class T>
std::string generate_text(const LoadedStage3<T>& s3, const std::vector<int>& codes,
                          const std::string& smiles, const std::string& prompt,
                          int max_new) {
  const auto seq = unilm::encode_mol_to_text(codes, smiles, prompt, "", s3.uvocab);
  // drop the trailing EOS target; keep the context portion as the prefix
  std::vector<int> prefix(seq.ids.begin(), seq.ids.end() - 1);
  unilm::GenerateConfig gcfg;
  gcfg.constrained = false;
  gcfg.max_new_tokens = max_new;
  gcfg.molecule_span = s3.cfg.dims.queries;
  const auto out = unilm::generate(s3.lm, s3.uvocab, prefix, gcfg);
  std::vector<int> generated(out.begin() + prefix.size(), out.end());
  return s3.uvocab.decode_text(generated);
}

}  // namespace

template <class T>
Stage4Eval eval_tasks(const LoadedStage3<T>& s3, const LoadedStage2<T>& s2,
                      const std::vector<CorpusRecord>& records) {
  Stage4Eval ev;
  int qa_correct = 0;
  int qa_total = 0;
  double rouge_sum = 0.0;
  std::vector<std::string> pred_smiles, gold_smiles;

  for (const auto& r : records) {
    const auto mol = molgraph::parse_smiles(r.smiles);
    const auto codes = s2.stack.tokenize(mol);

    const bool ring = r.properties.count("ring_count") && r.properties.at("ring_count") > 0;
    const bool nitrogen = r.properties.count("n_count") && r.properties.at("n_count") > 0;
    const std::string ring_answer = generate_text(s3, codes, r.smiles, kRingPrompt, 3);
    const std::string nitro_answer =
        generate_text(s3, codes, r.smiles, kNitrogenPrompt, 3);
    qa_correct += ring_answer == (ring ? kYesAnswer : kNoAnswer) ? 1 : 0;
    qa_correct += nitro_answer == (nitrogen ? kYesAnswer : kNoAnswer) ? 1 : 0;
    qa_total += 2;

    const std::string caption = generate_text(s3, codes, r.smiles, kCaptionPrompt, 48);
    rouge_sum += chemeval::rouge_l(chemeval::word_tokens(caption),
                                   chemeval::word_tokens(r.caption));

    // caption-guided generation
    std::vector<int> prefix = {unilm::UnifiedVocab::kBos};
    for (int id : s3.uvocab.encode_text(kGenerationPrompt)) prefix.push_back(id);
    for (int id : s3.uvocab.encode_text(r.caption)) prefix.push_back(id);
    prefix.push_back(unilm::UnifiedVocab::kMol);
    unilm::GenerateConfig gcfg;
    gcfg.molecule_span = s3.cfg.dims.queries;
    gcfg.max_new_tokens = s3.cfg.dims.queries + 4;
    const auto out = unilm::generate(s3.lm, s3.uvocab, prefix, gcfg);
    const auto gen_codes = unilm::extract_molecule_codes(out, prefix.size() - 1, s3.uvocab);
    std::string smiles;
    try {
      smiles = s2.stack.detokenize(gen_codes);
    } catch (const std::exception&) {
      smiles = "";
    }
    pred_smiles.push_back(smiles);
    gold_smiles.push_back(r.smiles);
  }

  ev.qa_accuracy = static_cast<double>(qa_correct) / static_cast<double>(qa_total);
  ev.caption_rouge_l = rouge_sum / static_cast<double>(records.size());
  ev.generation = chemeval::evaluate_generation(pred_smiles, gold_smiles);
  return ev;
}

// ---------------------------------------------------------------------------
// Gradient-check suite
// ---------------------------------------------------------------------------

GradcheckReport run_gradcheck(int seeds) {
  using TD = ndt::Tensor<double>;
  GradcheckReport rep;
  rep.passed = true;

  auto check = [&](const std::string& name, const std::function<TD()>& fn,
                   std::vector<TD> inputs) {
    const double err = ndt::gradcheck_max_rel_err<double>(fn, std::move(inputs), 1e-5);
    rep.max_rel_err = std::max(rep.max_rel_err, err);
    if (err >= 1e-4) {
      rep.passed = false;
      rep.failures.push_back(name + " rel_err=" + std::to_string(err));
    }
  };

  for (int seed = 0; seed < seeds; ++seed) {
    ndt::Rng rng(static_cast<uint64_t>(seed) * 7919 + 1);
    const int r = 2 + rng.below(3);
    const int c = 2 + rng.below(4);

    TD a = ndt::uniform_init<double>({r, c}, rng, -1, 1);
    TD b = ndt::uniform_init<double>({r, c}, rng, -1, 1);
    TD w = ndt::uniform_init<double>({r, c}, rng, -1, 1);
    auto weighted = [&](TD y) { return ndt::sum(ndt::mul(y, ndt::reshape(w.clone_detached(), y.shape()))); };

    check("softmax", [&] { return weighted(ndt::softmax_rows(a)); }, {a});
    check("layernorm", [&] { return weighted(ndt::layernorm_rows(a)); }, {a});
    check("gelu", [&] { return weighted(ndt::gelu(a)); }, {a});
    check("mse", [&] { return nn::mse(a, b); }, {a, b});

    std::vector<int> targets(r);
    for (int i = 0; i < r; ++i) targets[i] = rng.below(c);
    check("cross_entropy", [&] { return nn::cross_entropy(a, targets); }, {a});

    TD q = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
    TD k = ndt::uniform_init<double>({5, 4}, rng, -1, 1);
    TD v = ndt::uniform_init<double>({5, 4}, rng, -1, 1);
    TD wa = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
    check("attention",
          [&] {
            TD y = nn::attention(q, k, v, nn::AttentionMask::full(3, 5));
            return ndt::sum(ndt::mul(y, wa.clone_detached()));
          },
          {q, k, v});

    // contrastive, matching and grounding objectives on a micro-batch
    ndt::Rng mrng(static_cast<uint64_t>(seed) * 104729 + 3);
    auto qf = causalq::QFormer<double>::init(2, 8, 2, 1, 4, 12, 8, mrng);
    TD xa = ndt::uniform_init<double>({2, 4}, mrng, -1, 1);
    TD xb = ndt::uniform_init<double>({3, 4}, mrng, -1, 1);
    ndt::ParamMap<double> qpm;
    qf.params(qpm, "qf");
    std::vector<TD> subset = {qf.query_bank, *qpm.find("qf.blk0.self.wq.w"),
                              *qpm.find("qf.blk0.cross.wk.w"), *qpm.find("qf.text_embed"),
                              qf.mtm_head.w};

    check("mtc_loss",
          [&] {
            TD z = ndt::concat_rows<double>({qf.molecule_rep(xa), qf.molecule_rep(xb)});
            TD y = ndt::concat_rows<double>({qf.text_rep({1, 5}), qf.text_rep({1, 7, 3})});
            return causalq::mtc_loss(z, y, 0.5);
          },
          subset);
    check("mtm_loss",
          [&] {
            TD s00 = qf.match_logit(xa, {1, 5});
            TD s01 = qf.match_logit(xa, {1, 7, 3});
            TD s10 = qf.match_logit(xb, {1, 5});
            TD s11 = qf.match_logit(xb, {1, 7, 3});
            TD scores = ndt::concat_rows<double>(
                {ndt::concat_cols(ndt::reshape(s00, {1, 1}), ndt::reshape(s01, {1, 1})),
                 ndt::concat_cols(ndt::reshape(s10, {1, 1}), ndt::reshape(s11, {1, 1}))});
            return causalq::mtm_loss(scores);
          },
          subset);
    check("mtg_loss", [&] { return causalq::mtg_loss(qf, xa, {5, 6}, 1, 2); }, subset);

    // Tokenizer-loss terms, each differentiated along its own smooth path:
    // the code assignment is frozen (the argmin is piecewise constant) and
    // the straight-through path is excluded here -- its gradient is a
    // deliberate forward/backward mismatch, checked by the exact copy
    // contract instead.
    TD z = ndt::uniform_init<double>({3, 4}, mrng, -1, 1);
    TD codebook = ndt::uniform_init<double>({6, 4}, mrng, -1, 1);
    TD xs = ndt::uniform_init<double>({3, 5}, mrng, -1, 1);
    auto adapter = vqtok::Adapter<double>::init(4, 5, mrng);
    ndt::ParamMap<double> apm;
    adapter.params(apm, "psi");
    const std::vector<int> frozen_ids = vqtok::quantize(z, codebook).ids;
    auto vq_term = [&](int which) {
      TD emb = ndt::embedding_lookup(codebook, frozen_ids);
      TD xr = adapter(vqtok::ste(z, emb));
      auto parts = vqtok::tokenizer_loss(xr, xs, z, codebook, frozen_ids, 0.25);
      return which == 0 ? parts.alignment : which == 1 ? parts.codebook
                                                       : parts.commitment;
    };
    check("vq_alignment", [&] { return vq_term(0); },
          {*apm.find("psi.fc1.w"), *apm.find("psi.fc1.b"), *apm.find("psi.fc2.w"),
           *apm.find("psi.fc2.b")});
    check("vq_codebook", [&] { return vq_term(1); }, {codebook});
    check("vq_commitment", [&] { return vq_term(2); }, {z});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define MOLTOK_INSTANTIATE(T)                                                        \
  template LoadedStage0<T> load_stage0<T>(const std::string&);                       \
  template LoadedStage1<T> load_stage1<T>(const std::string&);                       \
  template LoadedStage2<T> load_stage2<T>(const std::string&);                       \
  template LoadedStage3<T> load_stage3<T>(const std::string&);                       \
  template double eval_reconstruction_exact<T>(const LoadedStage0<T>&,               \
                                               const std::vector<CorpusRecord>&);    \
  template double eval_latent_self_retrieval<T>(const LoadedStage0<T>&,              \
                                                const std::vector<CorpusRecord>&);   \
  template unilm::RetrievalResult eval_retrieval<T>(const LoadedStage1<T>&,          \
                                                    const std::vector<CorpusRecord>&,\
                                                    int, int);                       \
  template Stage2Eval eval_tokenizer<T>(const LoadedStage2<T>&,                      \
                                        const std::vector<CorpusRecord>&);           \
  template double eval_generation_validity<T>(const LoadedStage3<T>&,                \
                                              const LoadedStage2<T>&,                \
                                              const std::vector<CorpusRecord>&);     \
  template Stage4Eval eval_tasks<T>(const LoadedStage3<T>&, const LoadedStage2<T>&,  \
                                    const std::vector<CorpusRecord>&);

MOLTOK_INSTANTIATE(float)
MOLTOK_INSTANTIATE(double)

#undef MOLTOK_INSTANTIATE

}  // namespace moltok::pipeline
