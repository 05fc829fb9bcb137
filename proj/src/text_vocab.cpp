#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "moltok/unilm.hpp"

namespace moltok::unilm {

namespace {

const char* kSpecialNames[] = {"<pad>", "<bos>", "<eos>", "<mol>", "</mol>"};

bool is_smiles_char(const std::string& piece) {
  if (piece.size() != 1) return false;
  static const std::string chars = "BCNOPSFIbcnops0123456789%()[]=#-+:.";
  return chars.find(piece[0]) != std::string::npos;
}

std::vector<std::string> whitespace_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace

UnifiedVocab UnifiedVocab::build(const std::vector<std::string>& corpus_lines,
                                 int text_size, int code_count) {
  if (corpus_lines.empty()) throw std::invalid_argument("build: empty corpus");
  UnifiedVocab v;
  v.text_size_ = text_size;
  v.code_count_ = code_count;

  // Byte fallback: every printable ASCII character is always a piece.
  std::vector<std::string> pieces;
  for (char c = 33; c < 127; ++c) pieces.push_back(std::string(1, c));
  if (static_cast<int>(pieces.size()) > text_size) {
    throw std::invalid_argument("build: text_size too small for the character seed");
  }

  std::map<std::string, int64_t> counts;
  for (const auto& line : corpus_lines) {
    for (const auto& w : whitespace_words(line)) counts[w] += 1;
  }
  std::vector<std::pair<std::string, int64_t>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (const auto& [word, count] : ordered) {
    if (static_cast<int>(pieces.size()) >= text_size) break;
    if (word.size() == 1 && word[0] >= 33 && word[0] < 127) continue;  // already seeded
    pieces.push_back(word);
  }
  // Pad the table to exactly text_size so the id layout is corpus-stable.
  int filler = 0;
  while (static_cast<int>(pieces.size()) < text_size) {
    pieces.push_back("<unused" + std::to_string(filler++) + ">");
  }
  v.pieces_ = std::move(pieces);
  return v;
}

int UnifiedVocab::molecule_token(int code_id) const {
  if (code_id < 0 || code_id >= code_count_) {
    throw std::invalid_argument("molecule_token: code id " + std::to_string(code_id) +
                                " out of range [0," + std::to_string(code_count_) + ")");
  }
  return molecule_base() + code_id;
}

int UnifiedVocab::code_of(int unified_id) const {
  if (!is_molecule_token(unified_id)) {
    throw std::invalid_argument("code_of: id " + std::to_string(unified_id) +
                                " is not a molecule token");
  }
  return unified_id - molecule_base();
}

std::string UnifiedVocab::piece(int id) const {
  if (id < 0 || id >= size()) {
    throw std::invalid_argument("piece: id out of range");
  }
  if (id < kSpecialCount) return kSpecialNames[id];
  if (id < molecule_base()) return pieces_[id - kSpecialCount];
  return "<mol_" + std::to_string(id - molecule_base()) + ">";
}

std::vector<int> UnifiedVocab::encode_text(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& word : whitespace_words(text)) {
    auto it = std::find(pieces_.begin(), pieces_.end(), word);
    if (it != pieces_.end()) {
      ids.push_back(text_base() + static_cast<int>(it - pieces_.begin()));
      continue;
    }
    for (char c : word) {
      auto cit = std::find(pieces_.begin(), pieces_.end(), std::string(1, c));
      if (cit == pieces_.end()) {
        throw std::invalid_argument("encode_text: character '" + std::string(1, c) +
                                    "' outside the byte-fallback range");
      }
      ids.push_back(text_base() + static_cast<int>(cit - pieces_.begin()));
    }
  }
  return ids;
}

std::vector<int> UnifiedVocab::encode_chars(const std::string& text) const {
  std::vector<int> ids;
  for (char c : text) {
    auto cit = std::find(pieces_.begin(), pieces_.end(), std::string(1, c));
    if (cit == pieces_.end()) {
      throw std::invalid_argument("encode_chars: character '" + std::string(1, c) +
                                  "' outside the byte-fallback range");
    }
    ids.push_back(text_base() + static_cast<int>(cit - pieces_.begin()));
  }
  return ids;
}

std::string UnifiedVocab::decode_text(const std::vector<int>& ids) const {
  std::string out;
  std::string prev;
  for (int id : ids) {
    if (id < kSpecialCount || is_molecule_token(id)) continue;
    const std::string p = piece(id);
    if (!out.empty() && !(is_smiles_char(prev) && is_smiles_char(p))) out += " ";
    out += p;
    prev = p;
  }
  return out;
}

std::string UnifiedVocab::to_json() const {
  nlohmann::json j;
  j["text_size"] = text_size_;
  j["code_count"] = code_count_;
  j["pieces"] = pieces_;
  return j.dump();
}

UnifiedVocab UnifiedVocab::from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  UnifiedVocab v;
  v.text_size_ = j.at("text_size").get<int>();
  v.code_count_ = j.at("code_count").get<int>();
  v.pieces_ = j.at("pieces").get<std::vector<std::string>>();
  if (static_cast<int>(v.pieces_.size()) != v.text_size_) {
    throw std::invalid_argument("vocab json: piece count mismatch");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Sequence layouts
// ---------------------------------------------------------------------------

namespace {

void append_plain(UnifiedSequence& seq, int id) {
  seq.ids.push_back(id);
  seq.target_mask.push_back(0);
}

void append_target(UnifiedSequence& seq, int id) {
  seq.ids.push_back(id);
  seq.target_mask.push_back(1);
}

}  // namespace

UnifiedSequence encode_mol_to_text(const std::vector<int>& mol_codes,
                                   const std::string& smiles, const std::string& prompt,
                                   const std::string& caption,
                                   const UnifiedVocab& vocab) {
  UnifiedSequence seq;
  append_plain(seq, UnifiedVocab::kBos);
  append_plain(seq, UnifiedVocab::kMol);
  for (int code : mol_codes) append_plain(seq, vocab.molecule_token(code));
  append_plain(seq, UnifiedVocab::kEndMol);
  for (int id : vocab.encode_chars(smiles)) append_plain(seq, id);
  for (int id : vocab.encode_text(prompt)) append_plain(seq, id);
  for (int id : vocab.encode_text(caption)) append_target(seq, id);
  append_target(seq, UnifiedVocab::kEos);
  return seq;
}

UnifiedSequence encode_text_to_mol(const std::string& prompt, const std::string& caption,
                                   const std::vector<int>& mol_codes,
                                   const UnifiedVocab& vocab) {
  UnifiedSequence seq;
  append_plain(seq, UnifiedVocab::kBos);
  for (int id : vocab.encode_text(prompt)) append_plain(seq, id);
  for (int id : vocab.encode_text(caption)) append_plain(seq, id);
  append_plain(seq, UnifiedVocab::kMol);
  for (int code : mol_codes) append_target(seq, vocab.molecule_token(code));
  append_target(seq, UnifiedVocab::kEndMol);
  append_target(seq, UnifiedVocab::kEos);
  return seq;
}

}  // namespace moltok::unilm
