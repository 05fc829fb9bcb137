#include "moltok/chemeval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace moltok::chemeval {

namespace {

// Separator for joined child signatures; strictly below every content
// character so that sorted concatenation equals the minimum over orderings.
constexpr char kSep = '\x01';

char bond_char(molgraph::BondOrder o) {
  switch (o) {
    case molgraph::BondOrder::Single: return '-';
    case molgraph::BondOrder::Double: return '=';
    case molgraph::BondOrder::Triple: return '#';
    case molgraph::BondOrder::Aromatic: return ':';
  }
  return '-';
}

std::string atom_descriptor(const molgraph::MolGraph& mol, int i,
                            const std::vector<std::vector<int>>& adj) {
  const auto& a = mol.atoms[i];
  std::string s = molgraph::symbol(a.element);
  if (a.aromatic) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  if (a.formal_charge > 0) s += "+" + std::to_string(a.formal_charge);
  if (a.formal_charge < 0) s += "-" + std::to_string(-a.formal_charge);
  s += "H" + std::to_string(molgraph::total_hydrogens(mol, i));
  s += "D" + std::to_string(adj[i].size());
  return s;
}

std::string signature_rec(const molgraph::MolGraph& mol,
                          const std::vector<std::vector<int>>& adj, int atom,
                          int radius) {
  std::string out = atom_descriptor(mol, atom, adj);
  if (radius == 0) return out;
  std::vector<std::string> parts;
  for (int bi : adj[atom]) {
    const auto& b = mol.bonds[bi];
    const int nb = b.a == atom ? b.b : b.a;
    std::string piece(1, bond_char(b.order));
    piece += signature_rec(mol, adj, nb, radius - 1);
    piece += kSep;
    parts.push_back(std::move(piece));
  }
  std::sort(parts.begin(), parts.end());
  out += "(";
  for (const auto& p : parts) out += p;
  out += ")";
  return out;
}

int fold_to_bit(uint64_t h, int nbits) {
  return static_cast<int>(h & static_cast<uint64_t>(nbits - 1));
}

void check_nbits(int nbits) {
  if (nbits <= 0 || (nbits & (nbits - 1)) != 0) {
    throw std::invalid_argument("fingerprint length must be a power of two");
  }
}

}  // namespace

int Fingerprint::popcount() const {
  int n = 0;
  for (uint64_t w : bits) n += std::popcount(w);
  return n;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string environment_signature(const molgraph::MolGraph& mol, int atom, int radius) {
  return signature_rec(mol, mol.adjacency(), atom, radius);
}

Fingerprint morgan_fingerprint(const molgraph::MolGraph& mol, int radius, int nbits) {
  if (radius < 0 || radius > 4) throw std::invalid_argument("radius must be in [0,4]");
  check_nbits(nbits);
  Fingerprint fp;
  fp.nbits = nbits;
  fp.scheme = FingerprintScheme::Morgan;
  fp.param = radius;
  fp.bits.assign((nbits + 63) / 64, 0);
  const auto adj = mol.adjacency();
  for (int a = 0; a < mol.atom_count(); ++a) {
    for (int r = 0; r <= radius; ++r) {
      fp.set(fold_to_bit(fnv1a(signature_rec(mol, adj, a, r)), nbits));
    }
  }
  return fp;
}

Fingerprint path_fingerprint(const molgraph::MolGraph& mol, int max_len, int nbits) {
  if (max_len < 0) throw std::invalid_argument("max path length must be >= 0");
  check_nbits(nbits);
  Fingerprint fp;
  fp.nbits = nbits;
  fp.scheme = FingerprintScheme::Path;
  fp.param = max_len;
  fp.bits.assign((nbits + 63) / 64, 0);
  const auto adj = mol.adjacency();

  std::set<std::string> seen;
  std::vector<bool> on_path(mol.atom_count(), false);

  // DFS over simple paths; each path contributes min(forward, reverse) of
  // its separator-delimited atom/bond token sequence.
  std::function<void(int, int, std::string&)> extend = [&](int atom, int depth,
                                                           std::string& text) {
    std::string rev;
    {
      std::vector<std::string> toks;
      size_t i = 0;
      while (i < text.size()) {
        size_t j = i;
        while (j < text.size() && text[j] != kSep) ++j;
        toks.push_back(text.substr(i, j - i));
        i = j + 1;
      }
      for (auto it = toks.rbegin(); it != toks.rend(); ++it) {
        rev += *it;
        rev += kSep;
      }
    }
    seen.insert(std::min(text, rev));
    if (depth == max_len) return;
    for (int bi : adj[atom]) {
      const auto& b = mol.bonds[bi];
      const int nb = b.a == atom ? b.b : b.a;
      if (on_path[nb]) continue;
      const size_t mark = text.size();
      text += bond_char(b.order);
      text += kSep;
      text += atom_descriptor(mol, nb, adj);
      text += kSep;
      on_path[nb] = true;
      extend(nb, depth + 1, text);
      on_path[nb] = false;
      text.resize(mark);
    }
  };

  for (int a = 0; a < mol.atom_count(); ++a) {
    std::string fwd = atom_descriptor(mol, a, adj);
    fwd += kSep;
    on_path[a] = true;
    extend(a, 0, fwd);
    on_path[a] = false;
  }
  for (const auto& s : seen) fp.set(fold_to_bit(fnv1a(s), nbits));
  return fp;
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.scheme != b.scheme || a.nbits != b.nbits) {
    throw std::invalid_argument("fingerprint scheme/length mismatch");
  }
  int inter = 0;
  int uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    inter += std::popcount(a.bits[i] & b.bits[i]);
    uni += std::popcount(a.bits[i] | b.bits[i]);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

int levenshtein(const std::string& a, const std::string& b) {
  const size_t n = a.size();
  const size_t m = b.size();
  std::vector<int> prev(m + 1);
  std::vector<int> cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(
    const std::vector<std::string>& toks, int n) {
  std::map<std::vector<std::string>, int> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)] += 1;
  }
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& candidate,
            const std::vector<std::string>& reference, int max_n) {
  if (max_n < 1) throw std::invalid_argument("max_n must be >= 1");
  const int c = static_cast<int>(candidate.size());
  const int r = static_cast<int>(reference.size());
  if (c < max_n) return 0.0;
  double log_precision = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    int total = 0;
    int matched = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    if (total == 0 || matched == 0) return 0.0;
    log_precision += std::log(static_cast<double>(matched) / total);
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_precision / max_n);
}

double rouge_l(const std::vector<std::string>& candidate,
               const std::vector<std::string>& reference) {
  const size_t n = candidate.size();
  const size_t m = reference.size();
  if (n == 0 || m == 0) return 0.0;
  std::vector<int> prev(m + 1, 0);
  std::vector<int> cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      if (candidate[i - 1] == reference[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  const int lcs = prev[m];
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / n;
  const double rr = static_cast<double>(lcs) / m;
  return 2.0 * p * rr / (p + rr);
}

std::vector<std::string> smiles_tokens(const std::string& s) {
  std::vector<std::string> toks;
  for (size_t i = 0; i < s.size();) {
    if (i + 1 < s.size() &&
        ((s[i] == 'C' && s[i + 1] == 'l') || (s[i] == 'B' && s[i + 1] == 'r'))) {
      toks.push_back(s.substr(i, 2));
      i += 2;
    } else {
      toks.push_back(s.substr(i, 1));
      i += 1;
    }
  }
  return toks;
}

std::vector<std::string> word_tokens(const std::string& s) {
  std::vector<std::string> toks;
  std::istringstream in(s);
  std::string w;
  while (in >> w) toks.push_back(w);
  return toks;
}

MetricReport evaluate_generation(const std::vector<std::string>& predicted,
                                 const std::vector<std::string>& target) {
  if (predicted.size() != target.size()) {
    throw std::invalid_argument("prediction/target count mismatch");
  }
  if (predicted.empty()) throw std::invalid_argument("empty evaluation batch");
  MetricReport rep;
  const int n = static_cast<int>(predicted.size());
  int exact = 0;
  int valid = 0;
  double lev_sum = 0.0;
  double bleu_sum = 0.0;
  double morgan_sum = 0.0;
  double path_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const molgraph::MolGraph gold = molgraph::parse_smiles(target[i]);
    const std::string gold_canon = molgraph::write_smiles(gold);
    lev_sum += levenshtein(predicted[i], target[i]);
    bleu_sum += bleu(smiles_tokens(predicted[i]), smiles_tokens(target[i]));
    try {
      const molgraph::MolGraph pred = molgraph::parse_smiles(predicted[i]);
      ++valid;
      if (molgraph::write_smiles(pred) == gold_canon) ++exact;
      morgan_sum += tanimoto(morgan_fingerprint(pred, 2, 2048),
                             morgan_fingerprint(gold, 2, 2048));
      path_sum += tanimoto(path_fingerprint(pred, 7, 2048),
                           path_fingerprint(gold, 7, 2048));
    } catch (const molgraph::ParseError&) {
      // invalid prediction: zero contribution to fingerprint averages
    }
  }
  rep.exact = static_cast<double>(exact) / n;
  rep.validity = static_cast<double>(valid) / n;
  rep.levenshtein = lev_sum / n;
  rep.bleu = bleu_sum / n;
  rep.fts_morgan = morgan_sum / n;
  rep.fts_path = path_sum / n;
  return rep;
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["exact"] = exact;
  j["bleu"] = bleu;
  j["levenshtein"] = levenshtein;
  j["fts_morgan"] = fts_morgan;
  j["fts_path"] = fts_path;
  j["validity"] = validity;
  if (rouge_l) j["rouge_l"] = *rouge_l;
  return j.dump();
}

std::string MetricReport::to_table() const {
  std::ostringstream out;
  auto row = [&](const char* name, double v) {
    out << name;
    for (size_t i = std::string(name).size(); i < 14; ++i) out << ' ';
    out << v << "\n";
  };
  row("exact", exact);
  row("bleu", bleu);
  row("levenshtein", levenshtein);
  row("fts_morgan", fts_morgan);
  row("fts_path", fts_path);
  row("validity", validity);
  if (rouge_l) row("rouge_l", *rouge_l);
  return out.str();
}

}  // namespace moltok::chemeval
