#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "revlm/common.hpp"
#include "revlm/corpus.hpp"
#include "revlm/unicode.hpp"

namespace revlm {

namespace bpe_detail {

inline bool ascii_space(unsigned char b) {
  return b == ' ' || b == '\t' || b == '\n' || b == '\r' || b == '\f' || b == '\v';
}

/// Splits text into maximal runs of whitespace / non-whitespace bytes.
/// Merges never cross these boundaries; concatenating the segments
/// reproduces the input exactly.
inline std::vector<std::string_view> segment(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool in_space = ascii_space(static_cast<unsigned char>(text[i]));
    std::size_t j = i + 1;
    while (j < text.size() && ascii_space(static_cast<unsigned char>(text[j])) == in_space) ++j;
    out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint64_t pack_pair(std::uint32_t left, std::uint32_t right) {
  return (static_cast<std::uint64_t>(left) << 32) | right;
}

/// GPT-2 style byte <-> printable-character maps, used only for the
/// serialized (JSON) representation of token strings.
struct ByteCharTable {
  std::array<char32_t, 256> byte_to_char{};
  std::unordered_map<char32_t, unsigned char> char_to_byte;

  ByteCharTable() {
    auto printable = [](int b) {
      return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
    };
    int next = 0;
    for (int b = 0; b < 256; ++b) {
      char32_t c = printable(b) ? static_cast<char32_t>(b) : static_cast<char32_t>(256 + next++);
      byte_to_char[static_cast<std::size_t>(b)] = c;
      char_to_byte[c] = static_cast<unsigned char>(b);
    }
  }

  static const ByteCharTable& instance() {
    static const ByteCharTable table;
    return table;
  }
};

inline std::string bytes_to_display(std::string_view bytes) {
  const auto& table = ByteCharTable::instance();
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) utf8_append(out, table.byte_to_char[b]);
  return out;
}

inline std::string display_to_bytes(std::string_view display) {
  const auto& table = ByteCharTable::instance();
  std::string out;
  for (char32_t cp : utf8_decode(display)) {
    auto it = table.char_to_byte.find(cp);
    if (it == table.char_to_byte.end())
      throw ValidationError("tokenizer file: invalid escaped byte character");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

}  // namespace bpe_detail

struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::string tokenizer_fingerprint;
};

/// A byte-level BPE tokenizer. Atomic symbols are the 256 bytes plus an
/// end-of-document marker; merge products extend the vocabulary up to
/// the configured size. Immutable once trained; encode/decode are pure.
struct TokenizerModel {
  static constexpr std::uint32_t kNumByteTokens = 256;
  static constexpr std::uint32_t kEodId = 256;
  static constexpr std::uint32_t kNumAtomicTokens = 257;
  static constexpr const char* kEodLiteral = "<|endofdoc|>";

  Orientation orientation = Orientation::kForward;
  std::size_t vocab_size = 0;  // configured budget (>= kNumAtomicTokens)
  std::vector<std::string> vocab;  // id -> token byte string; [0,255] bytes, 256 EOD
  std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;  // learned order

  // Derived lookups; rebuilt by finalize().
  std::unordered_map<std::uint64_t, std::uint32_t> merge_rank;
  std::string fingerprint;

  static std::vector<std::string> atomic_tokens() {
    std::vector<std::string> v;
    v.reserve(kNumAtomicTokens);
    for (int b = 0; b < 256; ++b) v.push_back(std::string(1, static_cast<char>(b)));
    v.push_back(kEodLiteral);
    return v;
  }

  void finalize() {
    merge_rank.clear();
    merge_rank.reserve(merges.size());
    for (std::size_t r = 0; r < merges.size(); ++r)
      merge_rank[bpe_detail::pack_pair(merges[r].first, merges[r].second)] =
          static_cast<std::uint32_t>(r);

    nlohmann::json canon{{"orientation", to_string(orientation)},
                         {"vocab_size", vocab_size},
                         {"merges", merges}};
    fingerprint = fnv1a64_hex(canon.dump());
  }

  void validate() const {
    if (vocab_size < kNumAtomicTokens)
      throw ValidationError("tokenizer: vocab_size " + std::to_string(vocab_size) +
                            " is below the atomic alphabet size " +
                            std::to_string(kNumAtomicTokens));
    if (vocab.size() != kNumAtomicTokens + merges.size())
      throw ValidationError("tokenizer: |vocab| != |alphabet| + |merges|");
    if (vocab.size() > vocab_size)
      throw ValidationError("tokenizer: vocabulary exceeds configured vocab_size");
    const auto atoms = atomic_tokens();
    for (std::uint32_t i = 0; i < kNumAtomicTokens; ++i)
      if (vocab[i] != atoms[i])
        throw ValidationError("tokenizer: atomic token " + std::to_string(i) + " is corrupted");
    std::unordered_set<std::string> seen;
    for (const auto& t : vocab)
      if (!seen.insert(t).second)
        throw ValidationError("tokenizer: duplicate token string");
    for (std::size_t r = 0; r < merges.size(); ++r) {
      const std::uint32_t product = kNumAtomicTokens + static_cast<std::uint32_t>(r);
      const auto [left, right] = merges[r];
      if (left >= product || right >= product)
        throw ValidationError("tokenizer: merge " + std::to_string(r) +
                              " references a not-yet-defined symbol");
      if (vocab[product] != vocab[left] + vocab[right])
        throw ValidationError("tokenizer: merge " + std::to_string(r) +
                              " product does not match its parts");
    }
  }

  /// Encodes one whitespace-delimited segment already atomized to byte
  /// ids: repeatedly applies the best-ranked merge present, replacing
  /// occurrences left-to-right without overlap.
  void merge_segment(std::vector<std::uint32_t>& ids) const {
    while (ids.size() >= 2) {
      std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = merge_rank.find(bpe_detail::pack_pair(ids[i], ids[i + 1]));
        if (it != merge_rank.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == std::numeric_limits<std::uint32_t>::max()) break;
      const auto [left, right] = merges[best_rank];
      const std::uint32_t product = kNumAtomicTokens + best_rank;
      std::vector<std::uint32_t> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
          next.push_back(product);
          i += 2;
        } else {
          next.push_back(ids[i]);
          ++i;
        }
      }
      ids = std::move(next);
    }
  }

  std::vector<std::uint32_t> encode_ids(std::string_view text) const {
    std::vector<std::uint32_t> out;
    out.reserve(text.size() / 2 + 1);
    std::vector<std::uint32_t> seg_ids;
    for (std::string_view seg : bpe_detail::segment(text)) {
      seg_ids.clear();
      seg_ids.reserve(seg.size());
      for (unsigned char b : seg) seg_ids.push_back(b);
      merge_segment(seg_ids);
      out.insert(out.end(), seg_ids.begin(), seg_ids.end());
    }
    return out;
  }

  TokenSequence encode(std::string_view text) const {
    return TokenSequence{encode_ids(text), fingerprint};
  }

  std::string decode_ids(std::span<const std::uint32_t> ids) const {
    std::string out;
    for (std::uint32_t id : ids) {
      if (id >= vocab.size())
        throw ValidationError("decode: token id " + std::to_string(id) +
                              " out of range (vocab size " + std::to_string(vocab.size()) + ")");
      out += vocab[id];
    }
    return out;
  }

  std::string decode(const TokenSequence& seq) const {
    if (seq.tokenizer_fingerprint != fingerprint)
      throw ValidationError("decode: token sequence was produced by a different tokenizer");
    return decode_ids(seq.ids);
  }
};

/// Greedy BPE training: iteratively merge the most frequent adjacent
/// symbol pair (ties broken lexicographically on the pair's byte
/// strings) until the vocabulary reaches vocab_size or no pair occurs
/// at least twice. Deterministic given the corpus.
inline TokenizerModel train_bpe(const Corpus& corpus, std::size_t vocab_size) {
  if (corpus.documents.empty()) throw ValidationError("train_bpe: empty corpus");
  if (vocab_size < TokenizerModel::kNumAtomicTokens)
    throw ValidationError("train_bpe: vocab_size " + std::to_string(vocab_size) +
                          " is below the atomic alphabet size " +
                          std::to_string(TokenizerModel::kNumAtomicTokens));

  TokenizerModel tok;
  tok.orientation = corpus.orientation;
  tok.vocab_size = vocab_size;
  tok.vocab = TokenizerModel::atomic_tokens();

  // Unique segments with occurrence counts.
  std::unordered_map<std::string, std::int64_t> seg_counts;
  for (const auto& doc : corpus.documents)
    for (std::string_view seg : bpe_detail::segment(doc.text)) ++seg_counts[std::string(seg)];

  struct Word {
    std::vector<std::uint32_t> ids;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(seg_counts.size());
  for (const auto& [seg, count] : seg_counts) {
    Word w;
    w.count = count;
    w.ids.reserve(seg.size());
    for (unsigned char b : seg) w.ids.push_back(b);
    words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> pair_words;
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
      const std::uint64_t key = bpe_detail::pack_pair(w.ids[i], w.ids[i + 1]);
      pair_counts[key] += w.count;
      pair_words[key].insert(wi);
    }
  }

  // Pairs whose product string already exists in the vocabulary are
  // skipped permanently; recording them would duplicate a token string.
  std::unordered_set<std::uint64_t> banned;
  std::unordered_set<std::string> vocab_strings(tok.vocab.begin(), tok.vocab.end());

  while (tok.vocab.size() < vocab_size) {
    std::uint64_t best_key = 0;
    std::int64_t best_count = 0;
    bool have_best = false;
    for (const auto& [key, count] : pair_counts) {
      if (count < 2 || banned.contains(key)) continue;
      if (!have_best || count > best_count) {
        best_key = key;
        best_count = count;
        have_best = true;
        continue;
      }
      if (count == best_count) {
        const auto& bl = tok.vocab[static_cast<std::uint32_t>(best_key >> 32)];
        const auto& br = tok.vocab[static_cast<std::uint32_t>(best_key & 0xffffffff)];
        const auto& cl = tok.vocab[static_cast<std::uint32_t>(key >> 32)];
        const auto& cr = tok.vocab[static_cast<std::uint32_t>(key & 0xffffffff)];
        if (std::tie(cl, cr) < std::tie(bl, br)) best_key = key;
      }
    }
    if (!have_best) break;

    const auto left = static_cast<std::uint32_t>(best_key >> 32);
    const auto right = static_cast<std::uint32_t>(best_key & 0xffffffff);
    const std::string product_str = tok.vocab[left] + tok.vocab[right];
    if (vocab_strings.contains(product_str)) {
      banned.insert(best_key);
      continue;
    }

    const auto product = static_cast<std::uint32_t>(tok.vocab.size());
    tok.vocab.push_back(product_str);
    vocab_strings.insert(product_str);
    tok.merges.emplace_back(left, right);

    // Rewrite every word containing the pair; recount its pairs wholesale
    // (segments are short, so this is cheap and leaves no edge cases).
    auto affected_it = pair_words.find(best_key);
    if (affected_it == pair_words.end()) continue;
    const std::vector<std::uint32_t> affected(affected_it->second.begin(),
                                              affected_it->second.end());
    for (std::uint32_t wi : affected) {
      Word& w = words[wi];
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
        const std::uint64_t key = bpe_detail::pack_pair(w.ids[i], w.ids[i + 1]);
        auto pc = pair_counts.find(key);
        pc->second -= w.count;
        if (pc->second <= 0) pair_counts.erase(pc);
        auto pw = pair_words.find(key);
        if (pw != pair_words.end()) {
          pw->second.erase(wi);
          if (pw->second.empty()) pair_words.erase(pw);
        }
      }
      std::vector<std::uint32_t> next;
      next.reserve(w.ids.size());
      for (std::size_t i = 0; i < w.ids.size();) {
        if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
          next.push_back(product);
          i += 2;
        } else {
          next.push_back(w.ids[i]);
          ++i;
        }
      }
      w.ids = std::move(next);
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
        const std::uint64_t key = bpe_detail::pack_pair(w.ids[i], w.ids[i + 1]);
        pair_counts[key] += w.count;
        pair_words[key].insert(wi);
      }
    }
  }

  tok.finalize();
  tok.validate();
  return tok;
}

inline void save_tokenizer(const TokenizerModel& tok, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["orientation"] = to_string(tok.orientation);
  j["vocab_size"] = tok.vocab_size;
  nlohmann::json vocab = nlohmann::json::array();
  for (std::size_t i = 0; i < tok.vocab.size(); ++i)
    vocab.push_back(i == TokenizerModel::kEodId ? tok.vocab[i]
                                                : bpe_detail::bytes_to_display(tok.vocab[i]));
  j["vocab"] = std::move(vocab);
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : tok.merges)
    merges.push_back({bpe_detail::bytes_to_display(tok.vocab[l]),
                      bpe_detail::bytes_to_display(tok.vocab[r])});
  j["merges"] = std::move(merges);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write tokenizer file: " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed while writing: " + path.string());
}

inline TokenizerModel load_tokenizer(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open tokenizer file: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ValidationError(path.string() + ": not a valid tokenizer JSON file");
  try {
    if (j.at("version").get<int>() != 1)
      throw ValidationError(path.string() + ": unsupported tokenizer format version");
    TokenizerModel tok;
    tok.orientation = orientation_from_string(j.at("orientation").get<std::string>());
    tok.vocab_size = j.at("vocab_size").get<std::size_t>();
    const auto& vocab = j.at("vocab");
    tok.vocab.reserve(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      const auto s = vocab[i].get<std::string>();
      tok.vocab.push_back(i == TokenizerModel::kEodId ? s : bpe_detail::display_to_bytes(s));
    }
    std::unordered_map<std::string, std::uint32_t> ids;
    for (std::uint32_t i = 0; i < tok.vocab.size(); ++i) ids.emplace(tok.vocab[i], i);
    for (const auto& pair : j.at("merges")) {
      if (!pair.is_array() || pair.size() != 2)
        throw ValidationError(path.string() + ": malformed merge entry");
      const std::string l = bpe_detail::display_to_bytes(pair[0].get<std::string>());
      const std::string r = bpe_detail::display_to_bytes(pair[1].get<std::string>());
      auto li = ids.find(l), ri = ids.find(r);
      if (li == ids.end() || ri == ids.end())
        throw ValidationError(path.string() + ": merge references unknown token");
      tok.merges.emplace_back(li->second, ri->second);
    }
    tok.finalize();
    tok.validate();
    return tok;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

struct VocabOverlapReport {
  double shared_fraction = 0.0;
  std::vector<std::string> shared;          // display-escaped, forward spelling
  std::vector<std::string> unique_forward;  // display-escaped
  std::vector<std::string> unique_backward; // display-escaped, reversal-normalized
};

namespace bpe_detail {

/// Character-reverses a token's byte string; tokens that are not valid
/// UTF-8 on their own (split multi-byte characters) fall back to byte
/// reversal, which coincides for ASCII.
inline std::string reverse_token(const std::string& bytes) {
  try {
    return reverse_text(bytes);
  } catch (const ValidationError&) {
    return std::string(bytes.rbegin(), bytes.rend());
  }
}

inline std::string normalized_token(const TokenizerModel& tok, std::uint32_t id) {
  const std::string& raw = tok.vocab[id];
  if (id == TokenizerModel::kEodId) return raw;
  return tok.orientation == Orientation::kBackward ? reverse_token(raw) : raw;
}

}  // namespace bpe_detail

/// Compares a forward and a backward tokenizer's vocabularies after
/// character-reversing every backward token. Shared fraction is
/// |intersection| / vocab_size.
inline VocabOverlapReport vocab_overlap(const TokenizerModel& fwd, const TokenizerModel& bwd) {
  if (fwd.orientation != Orientation::kForward)
    throw ValidationError("vocab_overlap: first tokenizer must be forward-oriented");
  if (bwd.orientation != Orientation::kBackward)
    throw ValidationError("vocab_overlap: second tokenizer must be backward-oriented");
  if (fwd.vocab_size != bwd.vocab_size)
    throw ValidationError("vocab_overlap: vocab_size mismatch (" +
                          std::to_string(fwd.vocab_size) + " vs " +
                          std::to_string(bwd.vocab_size) + ")");

  std::unordered_set<std::string> fwd_set(fwd.vocab.begin(), fwd.vocab.end());
  std::unordered_set<std::string> bwd_set;
  bwd_set.reserve(bwd.vocab.size());
  for (std::uint32_t i = 0; i < bwd.vocab.size(); ++i)
    bwd_set.insert(bpe_detail::normalized_token(bwd, i));

  VocabOverlapReport report;
  for (const auto& t : fwd.vocab) {
    auto display =
        t == TokenizerModel::kEodLiteral ? t : bpe_detail::bytes_to_display(t);
    if (bwd_set.contains(t))
      report.shared.push_back(display);
    else
      report.unique_forward.push_back(display);
  }
  for (const auto& t : bwd_set)
    if (!fwd_set.contains(t))
      report.unique_backward.push_back(t == TokenizerModel::kEodLiteral
                                           ? t
                                           : bpe_detail::bytes_to_display(t));
  std::sort(report.shared.begin(), report.shared.end());
  std::sort(report.unique_forward.begin(), report.unique_forward.end());
  std::sort(report.unique_backward.begin(), report.unique_backward.end());
  report.shared_fraction =
      static_cast<double>(report.shared.size()) / static_cast<double>(fwd.vocab_size);
  return report;
}

struct DomainTokenReport {
  double fraction = 0.0;
  std::vector<std::string> matched;  // display-escaped, normalized spelling
};

inline std::vector<std::string> load_wordlist(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open wordlist file: " + path.string());
  std::vector<std::string> terms;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (!detail::blank(line)) terms.push_back(line);
  }
  return terms;
}

/// Case-insensitive match of normalized vocabulary tokens (reversed for
/// backward tokenizers, ASCII-lowercased) against a domain wordlist.
/// Stands in for the paper-style LLM judge.
inline DomainTokenReport classify_domain_tokens(const TokenizerModel& tok,
                                                const std::vector<std::string>& wordlist) {
  if (wordlist.empty()) throw ValidationError("classify_domain_tokens: empty wordlist");

  auto lower = [](std::string s) {
    for (char& c : s)
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return s;
  };

  std::unordered_set<std::string> terms;
  for (const auto& t : wordlist) terms.insert(lower(t));

  DomainTokenReport report;
  for (std::uint32_t i = 0; i < tok.vocab.size(); ++i) {
    const std::string norm = bpe_detail::normalized_token(tok, i);
    if (terms.contains(lower(norm)))
      report.matched.push_back(i == TokenizerModel::kEodId ? norm
                                                           : bpe_detail::bytes_to_display(norm));
  }
  std::sort(report.matched.begin(), report.matched.end());
  report.fraction =
      static_cast<double>(report.matched.size()) / static_cast<double>(tok.vocab.size());
  return report;
}

}  // namespace revlm
