#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "revlm/checkpoint.hpp"
#include "revlm/common.hpp"
#include "revlm/corpus.hpp"
#include "revlm/model.hpp"
#include "revlm/tokenizer.hpp"
#include "revlm/unicode.hpp"

namespace revlm {

/// The prompt used by default to condition benchmark passages.
inline constexpr const char* kDefaultEvalPrefix =
    "You are a neuroscientist with deep knowledge in neuroscience. "
    "Here is an abstract from a neuroscience publication:";

/// Anything that can assign next-token log-probabilities to a token
/// sequence. The transformer is one implementation; tests use synthetic
/// scorers with closed-form likelihoods.
class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual std::size_t context_limit() const = 0;
  /// log p(ids[i] | ids[0..i)) for i in [1, ids.size()), natural log.
  virtual std::vector<double> next_token_logprobs(
      const std::vector<std::uint32_t>& ids) const = 0;
};

class TransformerScorer : public TokenScorer {
 public:
  TransformerScorer(const ModelConfig& cfg, const Parameters<float>& params)
      : cfg_(cfg), params_(params) {}

  std::size_t context_limit() const override { return cfg_.context_length; }

  std::vector<double> next_token_logprobs(const std::vector<std::uint32_t>& ids) const override {
    if (ids.size() < 2) return {};
    const std::vector<std::uint32_t> inputs(ids.begin(), ids.end() - 1);
    const Mat<float> logits = forward_sequence<float>(cfg_, params_, inputs);
    std::vector<double> out(ids.size() - 1);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto row = logits.row(static_cast<Eigen::Index>(i));
      const double m = static_cast<double>(row.maxCoeff());
      double z = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j)
        z += std::exp(static_cast<double>(row(j)) - m);
      const auto target = static_cast<Eigen::Index>(ids[i + 1]);
      out[i] = static_cast<double>(row(target)) - m - std::log(z);
    }
    return out;
  }

 private:
  const ModelConfig& cfg_;
  const Parameters<float>& params_;
};

/// Checks the model/tokenizer wiring before any scoring: orientations
/// must match and the checkpoint must have been trained with this exact
/// tokenizer. The returned scorer references the checkpoint's tensors.
inline TransformerScorer make_scorer(const Checkpoint& ckpt, const TokenizerModel& tok) {
  if (ckpt.orientation != tok.orientation)
    throw ValidationError("eval: checkpoint orientation (" + to_string(ckpt.orientation) +
                          ") does not match tokenizer orientation (" + to_string(tok.orientation) +
                          ")");
  if (!ckpt.tokenizer_fingerprint.empty() && ckpt.tokenizer_fingerprint != tok.fingerprint)
    throw ValidationError("eval: checkpoint was trained with a different tokenizer (fingerprint " +
                          ckpt.tokenizer_fingerprint + " vs " + tok.fingerprint + ")");
  return TransformerScorer(ckpt.config, ckpt.params);
}

namespace eval_detail {

struct ScoredEncoding {
  std::vector<std::uint32_t> ids;  // full conditioning sequence
  std::size_t text_begin = 0;      // [text_begin, text_end): the passage's tokens
  std::size_t text_end = 0;
};

/// Builds the token sequence for scoring. Forward: prefix tokens then
/// passage tokens. Backward: the whole prefix+passage string is treated
/// as reversed text, so the reversed passage comes first and the
/// reversed prefix follows it, mirroring training-time reversal.
inline ScoredEncoding encode_for_scoring(const TokenizerModel& tok, std::string_view text,
                                         std::string_view prefix) {
  ScoredEncoding enc;
  if (tok.orientation == Orientation::kForward) {
    enc.ids = tok.encode_ids(prefix);
    enc.text_begin = enc.ids.size();
    const auto text_ids = tok.encode_ids(text);
    enc.ids.insert(enc.ids.end(), text_ids.begin(), text_ids.end());
    enc.text_end = enc.ids.size();
  } else {
    enc.ids = tok.encode_ids(reverse_text(text));
    enc.text_begin = 0;
    enc.text_end = enc.ids.size();
    const auto prefix_ids = tok.encode_ids(reverse_text(prefix));
    enc.ids.insert(enc.ids.end(), prefix_ids.begin(), prefix_ids.end());
  }
  return enc;
}

}  // namespace eval_detail

/// Perplexity of `text` conditioned on `prefix`: the exponentiated mean
/// negative log-likelihood over the passage's tokens only. The prefix
/// conditions the passage but is excluded from the average. Sequences
/// longer than the scorer's context are an error, never truncated.
inline double perplexity(const TokenScorer& scorer, const TokenizerModel& tok,
                         std::string_view text, std::string_view prefix) {
  using eval_detail::encode_for_scoring;
  if (text.empty() || detail::blank(text)) throw ValidationError("perplexity: empty text");

  const auto enc = encode_for_scoring(tok, text, prefix);
  if (enc.ids.size() > scorer.context_limit())
    throw ValidationError("perplexity: sequence of " + std::to_string(enc.ids.size()) +
                          " tokens exceeds the model context of " +
                          std::to_string(scorer.context_limit()) +
                          " (refusing to truncate)");

  const std::vector<double> logprobs = scorer.next_token_logprobs(enc.ids);
  // logprobs[i] scores token i+1; the sequence's first token is never scored.
  const std::size_t lo = std::max<std::size_t>(enc.text_begin, 1);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t pos = lo; pos < enc.text_end; ++pos) {
    total += logprobs[pos - 1];
    ++count;
  }
  if (count == 0) throw ValidationError("perplexity: passage contributes no scored tokens");
  return std::exp(-total / static_cast<double>(count));
}

/// Per-item 2AFC outcome. `chosen` is original iff its perplexity is
/// strictly lower; exact ties resolve to altered and count as incorrect.
struct ItemScore {
  std::string item_id;
  double ppl_original = 0.0;
  double ppl_altered = 0.0;
  bool chose_original = false;
  bool correct = false;
  double confidence = 0.0;  // |ppl_original - ppl_altered|
};

struct SkippedItem {
  std::string item_id;
  std::string reason;
};

struct BenchmarkResult {
  std::vector<ItemScore> scores;
  std::vector<SkippedItem> skipped;
  double accuracy = 0.0;
  std::map<std::string, std::string> metadata;  // orientation, checkpoint hash, ...
};

inline ItemScore score_item(const TokenScorer& scorer, const TokenizerModel& tok,
                            const BenchmarkItem& item, std::string_view prefix) {
  ItemScore s;
  s.item_id = item.id;
  s.ppl_original = perplexity(scorer, tok, item.original, prefix);
  s.ppl_altered = perplexity(scorer, tok, item.altered, prefix);
  s.chose_original = s.ppl_original < s.ppl_altered;
  s.correct = s.chose_original;
  s.confidence = std::abs(s.ppl_original - s.ppl_altered);
  return s;
}

/// Scores every item; items whose passages cannot both be evaluated are
/// skipped with a reason rather than failing the run. Accuracy is the
/// mean correctness over scored items.
inline BenchmarkResult run_benchmark(const TokenScorer& scorer, const TokenizerModel& tok,
                                     const std::vector<BenchmarkItem>& items,
                                     std::string_view prefix) {
  if (items.empty()) throw ValidationError("run_benchmark: empty benchmark");
  BenchmarkResult result;
  std::size_t correct = 0;
  for (const auto& item : items) {
    try {
      ItemScore s = score_item(scorer, tok, item, prefix);
      if (s.correct) ++correct;
      result.scores.push_back(std::move(s));
    } catch (const ValidationError& e) {
      result.skipped.push_back({item.id, e.what()});
    }
  }
  if (result.scores.empty())
    throw ValidationError("run_benchmark: no item could be scored");
  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.scores.size());
  return result;
}

inline void save_results(const BenchmarkResult& result, const std::filesystem::path& jsonl_path,
                         const std::filesystem::path& summary_path) {
  std::ofstream out(jsonl_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write results file: " + jsonl_path.string());
  for (const auto& s : result.scores) {
    nlohmann::json rec{{"item_id", s.item_id},
                       {"ppl_original", s.ppl_original},
                       {"ppl_altered", s.ppl_altered},
                       {"chosen", s.chose_original ? "original" : "altered"},
                       {"correct", s.correct},
                       {"confidence", s.confidence}};
    out << rec.dump() << '\n';
  }

  nlohmann::json summary;
  summary["accuracy"] = result.accuracy;
  summary["scored"] = result.scores.size();
  summary["skipped"] = nlohmann::json::array();
  for (const auto& s : result.skipped)
    summary["skipped"].push_back({{"item_id", s.item_id}, {"reason", s.reason}});
  summary["metadata"] = result.metadata;
  std::ofstream sum(summary_path, std::ios::binary | std::ios::trunc);
  if (!sum) throw std::runtime_error("cannot write summary file: " + summary_path.string());
  sum << summary.dump(1) << '\n';
}

inline BenchmarkResult load_results(const std::filesystem::path& jsonl_path,
                                    const std::filesystem::path& summary_path) {
  BenchmarkResult result;
  std::ifstream in(jsonl_path, std::ios::binary);
  if (!in) throw ValidationError("cannot open results file: " + jsonl_path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    nlohmann::json rec = detail::parse_jsonl_record(line, line_no, jsonl_path);
    try {
      ItemScore s;
      s.item_id = rec.at("item_id").get<std::string>();
      s.ppl_original = rec.at("ppl_original").get<double>();
      s.ppl_altered = rec.at("ppl_altered").get<double>();
      s.chose_original = rec.at("chosen").get<std::string>() == "original";
      s.correct = rec.at("correct").get<bool>();
      s.confidence = rec.at("confidence").get<double>();
      result.scores.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(jsonl_path.string() + ": line " + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
  if (result.scores.empty())
    throw ValidationError(jsonl_path.string() + ": no item scores");

  std::ifstream sum(summary_path, std::ios::binary);
  if (!sum) throw ValidationError("cannot open summary file: " + summary_path.string());
  nlohmann::json summary = nlohmann::json::parse(sum, nullptr, false);
  if (summary.is_discarded())
    throw ValidationError(summary_path.string() + ": corrupt summary JSON");
  result.accuracy = summary.at("accuracy").get<double>();
  if (summary.contains("metadata"))
    for (const auto& [k, v] : summary.at("metadata").items())
      result.metadata[k] = v.get<std::string>();
  return result;
}

}  // namespace revlm
