// Training pipeline: run configuration, the staged training driver
// (stage0 SMILES autoencoder -> stage1 query transformer -> stage2
// tokenizer -> stage3 unified LM -> stage4 instruction tasks), checkpoint
// chaining, evaluations, and the gradient-check suite.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moltok/causalq.hpp"
#include "moltok/chemeval.hpp"
#include "moltok/corpus.hpp"
#include "moltok/molencoder.hpp"
#include "moltok/ndtensor.hpp"
#include "moltok/smilesae.hpp"
#include "moltok/unilm.hpp"
#include "moltok/vqtok.hpp"

namespace moltok::pipeline {

inline constexpr const char* kStage0 = "stage0_smilesae";
inline constexpr const char* kStage1 = "stage1_qformer";
inline constexpr const char* kStage2 = "stage2_tokenizer";
inline constexpr const char* kStage3 = "stage3_unified";
inline constexpr const char* kStage4 = "stage4_tasks";

// Fixed instruction strings shared by training, evaluation and the vocab.
inline constexpr const char* kCaptionPrompt = "give a brief overview of this molecule";
inline constexpr const char* kGenerationPrompt =
    "create a molecule with the structure as described";
inline constexpr const char* kRingPrompt = "does this molecule contain a ring";
inline constexpr const char* kNitrogenPrompt = "does this molecule contain nitrogen";
inline constexpr const char* kYesAnswer = "yes";
inline constexpr const char* kNoAnswer = "no";

struct Dims {
  int queries = 8;       // M
  int query_dim = 64;    // d
  int codes = 256;       // K
  int feature_dim = 64;  // F
  int smiles_dim = 64;   // d_s
  int lm_dim = 128;      // d_m
  int text_pieces = 512; // T
};

struct ModelCfg {
  int encoder_layers = 3;
  int qformer_blocks = 2;
  int qformer_heads = 4;
  int ae_blocks = 2;
  int ae_heads = 4;
  int lm_blocks = 4;
  int lm_heads = 4;
  int context = 256;
  int max_smiles_len = 64;
  int max_text_len = 64;
  int decode_budget = 48;
};

struct OptimCfg {
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  int warmup = 50;
  int epochs = 30;
  int batch = 32;
  double beta = 0.25;  // commitment weight
  double tau = 0.1;    // contrastive temperature
  int mtm_subbatch = 8;
};

struct RunConfig {
  std::string stage;
  uint64_t seed = 0;
  std::string precision = "f32";  // "f32" or "f64"
  Dims dims;
  ModelCfg model;
  OptimCfg optim;
  std::string train_path, val_path, test_path;
  std::string out_dir;
  std::map<std::string, std::string> upstream_dirs;  // stage name -> dir

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_json_file(const std::string& path);

  // Hash over the architecture-determining fields (dims + model); the
  // chaining check catches silent dimension drift between stages.
  uint64_t arch_hash() const;
};

// Desk defaults: corpus under <workdir>/data, checkpoints under
// <workdir>/runs/<stage>, epoch counts tuned per stage.
RunConfig default_config(const std::string& stage, const std::string& workdir,
                         uint64_t seed);

// Generates train/val/test corpora (sizes n_train/n_val/n_test) if absent.
void ensure_corpus(const std::string& workdir, uint64_t seed, int n_train, int n_val,
                   int n_test);

// Trains one stage: verifies predecessors, trains exactly the stage's
// trainable set, writes loss.csv, metrics.json and the checkpoint.
void run_stage(const RunConfig& cfg);

// Corpus text lines feeding the word-piece vocabulary (captions + fixed
// prompts and answers).
std::vector<std::string> vocab_lines(const std::vector<CorpusRecord>& records);

// ---------------------------------------------------------------------------
// Checkpoint loaders
// ---------------------------------------------------------------------------

template <class T>
struct LoadedStage0 {
  RunConfig cfg;
  smilesae::SmilesVocab vocab;
  smilesae::SmilesAutoencoder<T> ae;
};

template <class T>
struct LoadedStage1 {
  RunConfig cfg;
  unilm::UnifiedVocab uvocab;
  molenc::EncoderParams<T> encoder;
  causalq::QFormer<T> qformer;
};

template <class T>
struct LoadedStage2 {
  RunConfig cfg;
  unilm::UnifiedVocab uvocab;
  vqtok::TokenizerStack<T> stack;
};

template <class T>
struct LoadedStage3 {
  RunConfig cfg;
  unilm::UnifiedVocab uvocab;
  unilm::UnifiedLM<T> lm;
};

template <class T>
LoadedStage0<T> load_stage0(const std::string& dir);
template <class T>
LoadedStage1<T> load_stage1(const std::string& dir);
template <class T>
LoadedStage2<T> load_stage2(const std::string& dir);
template <class T>
LoadedStage3<T> load_stage3(const std::string& dir);  // also reads stage4 dirs

// ---------------------------------------------------------------------------
// Evaluations
// ---------------------------------------------------------------------------

template <class T>
double eval_reconstruction_exact(const LoadedStage0<T>& s0,
                                 const std::vector<CorpusRecord>& records);

// Nearest-neighbor self-retrieval by latent distance: the fraction of
// records whose latent's nearest neighbor in the pool (ties to the lowest
// index) is the record itself, i.e. no latent collisions.
template <class T>
double eval_latent_self_retrieval(const LoadedStage0<T>& s0,
                                  const std::vector<CorpusRecord>& records);

template <class T>
unilm::RetrievalResult eval_retrieval(const LoadedStage1<T>& s1,
                                      const std::vector<CorpusRecord>& records,
                                      int pool_size, int rerank_k);

struct Stage2Eval {
  double roundtrip_exact = 0.0;
  double usage_fraction = 0.0;
  double perplexity = 0.0;
};

template <class T>
Stage2Eval eval_tokenizer(const LoadedStage2<T>& s2,
                          const std::vector<CorpusRecord>& records);

template <class T>
double eval_generation_validity(const LoadedStage3<T>& s3, const LoadedStage2<T>& s2,
                                const std::vector<CorpusRecord>& records);

struct Stage4Eval {
  double qa_accuracy = 0.0;
  double caption_rouge_l = 0.0;
  chemeval::MetricReport generation;
};

template <class T>
Stage4Eval eval_tasks(const LoadedStage3<T>& s3, const LoadedStage2<T>& s2,
                      const std::vector<CorpusRecord>& records);

// ---------------------------------------------------------------------------
// Gradient-check suite (always double precision)
// ---------------------------------------------------------------------------

struct GradcheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::vector<std::string> failures;
};

GradcheckReport run_gradcheck(int seeds = 10);

}  // namespace moltok::pipeline
