#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "revlm/common.hpp"
#include "revlm/det_random.hpp"
#include "revlm/unicode.hpp"

namespace revlm {

struct Document {
  std::string id;
  std::string text;
};

struct Corpus {
  std::vector<Document> documents;
  Orientation orientation = Orientation::kForward;
};

/// One 2AFC test case: the original passage and its altered counterpart.
struct BenchmarkItem {
  std::string id;
  std::string original;
  std::string altered;
  std::optional<std::string> subfield;
};

enum class CorpusFormat { kJsonl, kTextDir };

namespace detail {

inline bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos;
}

inline nlohmann::json parse_jsonl_record(const std::string& line, std::size_t line_no,
                                         const std::filesystem::path& path) {
  nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
  if (rec.is_discarded() || !rec.is_object())
    throw ValidationError(path.string() + ": malformed record on line " + std::to_string(line_no));
  return rec;
}

inline std::string required_string_field(const nlohmann::json& rec, const char* field,
                                         std::size_t line_no, const std::filesystem::path& path) {
  auto it = rec.find(field);
  if (it == rec.end() || !it->is_string())
    throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                          ": missing or non-string field '" + field + "'");
  return it->get<std::string>();
}

}  // namespace detail

/// Loads a forward-orientation corpus, preserving on-disk order.
/// JSONL: one {"id": ..., "text": ...} object per line. Text dir: each
/// *.txt file is one document, id = filename stem, lexicographic order.
inline Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  Corpus corpus;
  std::unordered_set<std::string> seen_ids;

  auto add = [&](std::string id, std::string text, const std::string& where) {
    if (!utf8_valid(text)) throw ValidationError(where + ": text is not valid UTF-8");
    if (detail::blank(text)) throw ValidationError(where + ": empty document text");
    if (!seen_ids.insert(id).second)
      throw ValidationError(where + ": duplicate document id '" + id + "'");
    corpus.documents.push_back({std::move(id), std::move(text)});
  };

  if (format == CorpusFormat::kJsonl) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open corpus file: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::blank(line)) continue;
      nlohmann::json rec = detail::parse_jsonl_record(line, line_no, path);
      std::string where = path.string() + ": line " + std::to_string(line_no);
      add(detail::required_string_field(rec, "id", line_no, path),
          detail::required_string_field(rec, "text", line_no, path), where);
    }
  } else {
    if (!std::filesystem::is_directory(path))
      throw ValidationError("corpus directory does not exist: " + path.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".txt")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      std::ifstream in(file, std::ios::binary);
      if (!in) throw ValidationError("cannot open corpus file: " + file.string());
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      add(file.stem().string(), std::move(text), file.string());
    }
  }

  if (corpus.documents.empty())
    throw ValidationError(path.string() + ": no documents");
  return corpus;
}

inline void save_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path.string());
  for (const auto& doc : corpus.documents) {
    nlohmann::json rec{{"id", doc.id}, {"text", doc.text}};
    out << rec.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed while writing: " + path.string());
}

/// Tags an in-memory corpus with the orientation its file is known to
/// hold (e.g. from a manifest). Does not transform any text.
inline Corpus declare_orientation(Corpus corpus, Orientation orientation) {
  corpus.orientation = orientation;
  return corpus;
}

/// Deterministic document-level split: |train| = round(fraction * N),
/// both parts non-empty, document order preserved within each part.
/// The shuffle is a seeded Fisher-Yates over mt19937_64 (see DetRng).
inline std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction,
                                              std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ValidationError("train_fraction must be in (0,1), got " + std::to_string(train_fraction));
  const std::size_t n = corpus.documents.size();
  if (n < 2) throw ValidationError("corpus too small to split: need >= 2 documents");

  const auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n)
    throw ValidationError("split would leave an empty part: " + std::to_string(n) +
                          " documents at fraction " + std::to_string(train_fraction));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  DetRng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> val_idx(order.begin() + n_train, order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  Corpus train, val;
  train.orientation = val.orientation = corpus.orientation;
  train.documents.reserve(train_idx.size());
  val.documents.reserve(val_idx.size());
  for (std::size_t i : train_idx) train.documents.push_back(corpus.documents[i]);
  for (std::size_t i : val_idx) val.documents.push_back(corpus.documents[i]);
  return {std::move(train), std::move(val)};
}

/// Character-reverses every document and flips the orientation flag.
/// Double reversal must be explicit: reversing an already-backward
/// corpus is an error, not a silent no-op.
inline Corpus reverse_corpus(const Corpus& corpus) {
  if (corpus.orientation != Orientation::kForward)
    throw ValidationError("reverse_corpus: corpus is already backward");
  Corpus out;
  out.orientation = Orientation::kBackward;
  out.documents.reserve(corpus.documents.size());
  for (const auto& doc : corpus.documents)
    out.documents.push_back({doc.id, reverse_text(doc.text)});
  return out;
}

/// Loads 2AFC benchmark items (JSONL: id, original, altered, optional
/// subfield), in file order.
inline std::vector<BenchmarkItem> load_benchmark(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open benchmark file: " + path.string());

  std::vector<BenchmarkItem> items;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    nlohmann::json rec = detail::parse_jsonl_record(line, line_no, path);
    const std::string where = path.string() + ": line " + std::to_string(line_no);

    BenchmarkItem item;
    item.id = detail::required_string_field(rec, "id", line_no, path);
    item.original = detail::required_string_field(rec, "original", line_no, path);
    item.altered = detail::required_string_field(rec, "altered", line_no, path);
    if (auto it = rec.find("subfield"); it != rec.end() && it->is_string() && !it->get<std::string>().empty())
      item.subfield = it->get<std::string>();

    if (!utf8_valid(item.original) || !utf8_valid(item.altered))
      throw ValidationError(where + ": passage is not valid UTF-8");
    if (detail::blank(item.original) || detail::blank(item.altered))
      throw ValidationError(where + ": empty passage");
    if (item.original == item.altered)
      throw ValidationError(where + ": original and altered passages are identical");
    if (!seen_ids.insert(item.id).second)
      throw ValidationError(where + ": duplicate item id '" + item.id + "'");
    items.push_back(std::move(item));
  }
  if (items.empty()) throw ValidationError(path.string() + ": no benchmark items");
  return items;
}

inline void save_benchmark_jsonl(const std::vector<BenchmarkItem>& items,
                                 const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write benchmark file: " + path.string());
  for (const auto& item : items) {
    nlohmann::json rec{{"id", item.id}, {"original", item.original}, {"altered", item.altered}};
    if (item.subfield) rec["subfield"] = *item.subfield;
    out << rec.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed while writing: " + path.string());
}

}  // namespace revlm
