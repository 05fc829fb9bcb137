// Procedural molecule-caption corpus: valence-respecting random trees with
// an optional single ring or an aromatic core, captioned from derived
// graph properties. Deterministic per seed.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "moltok/molgraph.hpp"

namespace moltok::pipeline {

struct CorpusRecord {
  std::string smiles;   // canonical
  std::string caption;  // deterministically derived from the graph
  std::map<std::string, int> properties;
};

// Graph measurements backing captions and the property-QA tasks.
std::map<std::string, int> derive_properties(const molgraph::MolGraph& mol);

// Single fixed template over the derived properties.
std::string caption_for(const molgraph::MolGraph& mol);

// n records, 2..12 heavy atoms each, every one passing validate().
std::vector<CorpusRecord> gen_corpus(uint64_t seed, int n);

std::string to_jsonl(const std::vector<CorpusRecord>& records);
std::vector<CorpusRecord> parse_jsonl(const std::string& text);
std::vector<CorpusRecord> read_jsonl_file(const std::string& path);
void write_jsonl_file(const std::string& path, const std::vector<CorpusRecord>& records);

}  // namespace moltok::pipeline
