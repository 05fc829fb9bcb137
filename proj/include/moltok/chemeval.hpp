// Generation / captioning / similarity metrics.
//
// Fingerprints are in-repo algorithms (hashed circular environments and
// hashed linear paths); they are not numerically compatible with any
// external toolkit, and every threshold in this repo references these.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moltok/molgraph.hpp"

namespace moltok::chemeval {

enum class FingerprintScheme { Morgan, Path };

struct Fingerprint {
  std::vector<uint64_t> bits;  // packed, little-endian within words
  int nbits = 0;
  FingerprintScheme scheme = FingerprintScheme::Morgan;
  int param = 0;  // radius (morgan) or max path length in bonds (path)

  void set(int b) { bits[b >> 6] |= uint64_t{1} << (b & 63); }
  bool test(int b) const { return (bits[b >> 6] >> (b & 63)) & 1; }
  int popcount() const;
};

// 64-bit FNV-1a over a byte string.
uint64_t fnv1a(const std::string& s);

// Atom-centered circular environments of radius 0..radius, each rendered
// as a canonical neighborhood string, hashed and folded to nbits.
// radius must be in [0, 4]; nbits must be a power of two.
Fingerprint morgan_fingerprint(const molgraph::MolGraph& mol, int radius, int nbits);

// Canonical environment string for (atom, radius); exposed so tests can
// compare against an independent enumeration oracle.
std::string environment_signature(const molgraph::MolGraph& mol, int atom, int radius);

// Linear paths of 0..max_len bonds, canonical direction, hashed to bits.
Fingerprint path_fingerprint(const molgraph::MolGraph& mol, int max_len, int nbits);

// |a AND b| / |a OR b|; 1.0 when both empty. Throws on scheme/size mismatch.
double tanimoto(const Fingerprint& a, const Fingerprint& b);

// Minimal insert/delete/substitute edit count.
int levenshtein(const std::string& a, const std::string& b);

// Sentence BLEU: geometric mean of clipped n-gram precisions times the
// brevity penalty; no smoothing; 0 when the candidate is shorter than max_n.
double bleu(const std::vector<std::string>& candidate,
            const std::vector<std::string>& reference, int max_n = 4);

// LCS F-measure with beta = 1.
double rouge_l(const std::vector<std::string>& candidate,
               const std::vector<std::string>& reference);

struct MetricReport {
  double exact = 0.0;
  double bleu = 0.0;
  double levenshtein = 0.0;
  double fts_morgan = 0.0;
  double fts_path = 0.0;
  double validity = 0.0;
  std::optional<double> rouge_l;  // captioning only

  std::string to_json() const;
  std::string to_table() const;
};

// Scores predicted SMILES against targets. Exact match goes through the
// in-repo canonicalizer on both sides; unparseable or invalid predictions
// count zero toward the fingerprint averages (documented choice).
MetricReport evaluate_generation(const std::vector<std::string>& predicted,
                                 const std::vector<std::string>& target);

// SMILES string as metric tokens: one token per character, with Cl/Br kept
// whole. Used for the BLEU column of generation reports.
std::vector<std::string> smiles_tokens(const std::string& s);

// Whitespace tokens, for captioning BLEU / ROUGE-L.
std::vector<std::string> word_tokens(const std::string& s);

}  // namespace moltok::chemeval
