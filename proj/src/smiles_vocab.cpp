#include "moltok/smilesae.hpp"

#include <stdexcept>

namespace moltok::smilesae {

SmilesVocab::SmilesVocab() {
  tokens_ = {"<pad>", "<bos>", "<eos>"};
  // Two-character atoms must precede their one-character prefixes so the
  // greedy matcher prefers them.
  const char* alphabet[] = {
      "Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I",
      "b",  "c",  "n", "o", "p", "s",
      "0",  "1",  "2", "3", "4", "5", "6", "7", "8", "9",
      "%",  "(",  ")", "[", "]", "=", "#", "-", "+", ":", ".", "H",
  };
  for (const char* t : alphabet) tokens_.push_back(t);
}

std::vector<int> SmilesVocab::tokenize(const std::string& smiles) const {
  std::vector<int> ids = {kBos};
  size_t i = 0;
  while (i < smiles.size()) {
    int matched = -1;
    size_t matched_len = 0;
    for (int id = 3; id < size(); ++id) {
      const std::string& tok = tokens_[id];
      if (tok.size() > matched_len && smiles.compare(i, tok.size(), tok) == 0) {
        matched = id;
        matched_len = tok.size();
      }
    }
    if (matched < 0) {
      throw std::invalid_argument("unknown SMILES character '" +
                                  std::string(1, smiles[i]) + "' at position " +
                                  std::to_string(i));
    }
    ids.push_back(matched);
    i += matched_len;
  }
  ids.push_back(kEos);
  return ids;
}

std::string SmilesVocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    out += tokens_.at(id);
  }
  return out;
}

}  // namespace moltok::smilesae
