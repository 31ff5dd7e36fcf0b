#include "revlm/tokenizer.hpp"

#include <map>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace revlm {
namespace {

Corpus corpus_of(std::vector<std::string> texts, Orientation o = Orientation::kForward) {
  Corpus c;
  c.orientation = o;
  for (std::size_t i = 0; i < texts.size(); ++i)
    c.documents.push_back({"d" + std::to_string(i), std::move(texts[i])});
  return c;
}

// ---------------------------------------------------------------------------
// Brute-force BPE oracle: token strings instead of ids, full recount of
// every pair on every iteration, no incremental state. Mirrors the
// contract: whitespace-bounded segments, minimum pair frequency 2,
// lexicographic tie-break, duplicate product strings skipped.
// ---------------------------------------------------------------------------

bool oracle_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::vector<std::string> oracle_segments(const std::string& text) {
  std::vector<std::string> segs;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i + 1;
    while (j < text.size() && oracle_space(text[j]) == oracle_space(text[i])) ++j;
    segs.push_back(text.substr(i, j - i));
    i = j;
  }
  return segs;
}

void oracle_apply_merge(std::vector<std::string>& tokens, const std::string& l,
                        const std::string& r) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (i + 1 < tokens.size() && tokens[i] == l && tokens[i + 1] == r) {
      out.push_back(l + r);
      i += 2;
    } else {
      out.push_back(tokens[i]);
      ++i;
    }
  }
  tokens = std::move(out);
}

std::vector<std::pair<std::string, std::string>> oracle_train(
    const std::vector<std::string>& docs, std::size_t max_merges) {
  std::map<std::string, long long> seg_counts;
  for (const auto& doc : docs)
    for (const auto& seg : oracle_segments(doc)) ++seg_counts[seg];

  std::set<std::string> vocab_strings;
  for (int b = 0; b < 256; ++b) vocab_strings.insert(std::string(1, static_cast<char>(b)));
  vocab_strings.insert(TokenizerModel::kEodLiteral);

  std::vector<std::pair<std::string, std::string>> merges;
  while (merges.size() < max_merges) {
    // Recount every pair from scratch, replaying all merges so far.
    std::map<std::pair<std::string, std::string>, long long> counts;
    for (const auto& [seg, cnt] : seg_counts) {
      std::vector<std::string> tokens;
      for (char c : seg) tokens.push_back(std::string(1, c));
      for (const auto& [l, r] : merges) oracle_apply_merge(tokens, l, r);
      for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
        counts[{tokens[i], tokens[i + 1]}] += cnt;
    }
    // Best pair: highest count, then lexicographically smallest, with
    // pairs whose product string already exists skipped outright.
    bool found = false;
    std::pair<std::string, std::string> best;
    long long best_count = 1;
    for (const auto& [pair, cnt] : counts) {
      if (cnt < 2 || vocab_strings.count(pair.first + pair.second)) continue;
      if (cnt > best_count || (cnt == best_count && (!found || pair < best))) {
        best = pair;
        best_count = cnt;
        found = true;
      }
    }
    if (!found) break;
    merges.push_back(best);
    vocab_strings.insert(best.first + best.second);
  }
  return merges;
}

std::vector<std::pair<std::string, std::string>> merge_strings(const TokenizerModel& tok) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [l, r] : tok.merges) out.emplace_back(tok.vocab[l], tok.vocab[r]);
  return out;
}

// ---------------------------------------------------------------------------

TEST(TrainBpe, ClassicExampleFirstMergeIsAA) {
  TokenizerModel tok = train_bpe(corpus_of({"aaabdaaabac"}), 257 + 3);
  ASSERT_GE(tok.merges.size(), 1u);
  EXPECT_EQ(tok.vocab[tok.merges[0].first], "a");
  EXPECT_EQ(tok.vocab[tok.merges[0].second], "a");
  EXPECT_EQ(merge_strings(tok), oracle_train({"aaabdaaabac"}, 3));
}

TEST(TrainBpe, VocabSizeEqualToAlphabetMeansNoMerges) {
  TokenizerModel tok = train_bpe(corpus_of({"hello world"}), 257);
  EXPECT_TRUE(tok.merges.empty());
  EXPECT_EQ(tok.vocab.size(), 257u);
}

TEST(TrainBpe, AaaaSingleMerge) {
  TokenizerModel tok = train_bpe(corpus_of({"aaaa"}), 257 + 4);
  ASSERT_EQ(tok.merges.size(), 1u);  // (aa,aa) occurs once, below the threshold
  EXPECT_EQ(tok.vocab[tok.merges[0].first], "a");
  EXPECT_EQ(tok.vocab[tok.merges[0].second], "a");
}

TEST(TrainBpe, RejectsTooSmallVocabAndEmptyCorpus) {
  EXPECT_THROW(train_bpe(corpus_of({"abc"}), 256), ValidationError);
  EXPECT_THROW(train_bpe(Corpus{}, 300), ValidationError);
}

TEST(TrainBpe, MatchesRecountOracleOnRandomCorpora) {
  DetRng rng(31337);
  const std::string alphabet = "aabbccdde  \nt";
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 20 + rng.below(181);
    std::string text;
    for (std::size_t i = 0; i < len; ++i)
      text.push_back(alphabet[rng.below(alphabet.size())]);
    const std::size_t n_merges = 1 + rng.below(10);

    TokenizerModel tok = train_bpe(corpus_of({text}), 257 + n_merges);
    EXPECT_EQ(merge_strings(tok), oracle_train({text}, n_merges))
        << "trial " << trial << " corpus: " << text;
  }
}

TEST(TrainBpe, DeterministicAcrossRuns) {
  const Corpus corpus = corpus_of({"the cat sat on the mat", "the bat sat on the hat"});
  TokenizerModel a = train_bpe(corpus, 300);
  TokenizerModel b = train_bpe(corpus, 300);
  EXPECT_EQ(a.vocab, b.vocab);
  EXPECT_EQ(a.merges, b.merges);
  EXPECT_EQ(a.fingerprint, b.fingerprint);
}

TEST(TrainBpe, OrientationFollowsCorpus) {
  Corpus fwd = corpus_of({"ab ab ab"});
  TokenizerModel tok_f = train_bpe(fwd, 258);
  EXPECT_EQ(tok_f.orientation, Orientation::kForward);
  TokenizerModel tok_b = train_bpe(reverse_corpus(fwd), 258);
  EXPECT_EQ(tok_b.orientation, Orientation::kBackward);
}

TEST(Encode, ZeroMergesAtomizes) {
  TokenizerModel tok = train_bpe(corpus_of({"xy"}), 257);
  const TokenSequence seq = tok.encode("ab");
  EXPECT_EQ(seq.ids, (std::vector<std::uint32_t>{'a', 'b'}));
}

TEST(Encode, MatchesStepByStepMergeOracle) {
  TokenizerModel tok = train_bpe(corpus_of({"aaabdaaabac"}), 257 + 5);
  const std::string text = "aaab";

  std::vector<std::string> tokens;
  for (char c : text) tokens.push_back(std::string(1, c));
  for (const auto& [l, r] : merge_strings(tok)) oracle_apply_merge(tokens, l, r);

  std::vector<std::string> got;
  for (std::uint32_t id : tok.encode_ids(text)) got.push_back(tok.vocab[id]);
  EXPECT_EQ(got, tokens);
}

TEST(Encode, MergesNeverCrossWhitespace) {
  TokenizerModel tok = train_bpe(corpus_of({"ab ab ab ab"}), 300);
  for (std::uint32_t id : tok.encode_ids("a b\tab \nab")) {
    const std::string& t = tok.vocab[id];
    const bool all_space = std::all_of(t.begin(), t.end(), oracle_space);
    const bool no_space = std::none_of(t.begin(), t.end(), oracle_space);
    EXPECT_TRUE(all_space || no_space) << "token spans a whitespace boundary: '" << t << "'";
  }
}

TEST(RoundTrip, RandomUnicodeStrings) {
  TokenizerModel tok =
      train_bpe(corpus_of({"the quick brown fox jumps over the lazy dog 0123456789"}), 300);
  DetRng rng(777);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = testing::random_unicode_string(rng, 48);
    EXPECT_EQ(tok.decode(tok.encode(s)), s);
  }
}

TEST(RoundTrip, WhitespaceHeavyStrings) {
  TokenizerModel tok = train_bpe(corpus_of({"a  b   c\n\nd\t\te"}), 280);
  for (const std::string s : {"", " ", "  \t\n ", "a \n b", "\r\n\r\n", " leading and trailing "})
    EXPECT_EQ(tok.decode(tok.encode(s)), s);
}

TEST(Decode, EmptyAndSingle) {
  TokenizerModel tok = train_bpe(corpus_of({"abc"}), 257);
  EXPECT_EQ(tok.decode_ids(std::vector<std::uint32_t>{}), "");
  EXPECT_EQ(tok.decode_ids(std::vector<std::uint32_t>{'z'}), "z");
}

TEST(Decode, OutOfRangeIdAndForeignSequenceRejected) {
  TokenizerModel tok = train_bpe(corpus_of({"abc"}), 257);
  EXPECT_THROW(tok.decode_ids(std::vector<std::uint32_t>{9999}), ValidationError);

  TokenizerModel other = train_bpe(corpus_of({"xyz xyz"}), 300);
  TokenSequence seq = other.encode("xyz");
  EXPECT_THROW(tok.decode(seq), ValidationError);
}

TEST(Compression, EncodedLengthMonotoneInMergeCount) {
  const std::string text = "the cat sat on the mat and the cat sat again";
  TokenizerModel full = train_bpe(corpus_of({text}), 257 + 20);
  std::size_t prev_len = std::numeric_limits<std::size_t>::max();
  for (std::size_t k = 0; k <= full.merges.size(); ++k) {
    TokenizerModel partial = full;
    partial.merges.resize(k);
    partial.vocab.resize(TokenizerModel::kNumAtomicTokens + k);
    partial.finalize();
    partial.validate();
    const std::size_t len = partial.encode_ids(text).size();
    if (k > 0) EXPECT_LE(len, prev_len) << "merge " << k << " increased the encoding length";
    prev_len = len;
  }
}

TEST(Serialization, SaveLoadRoundTrip) {
  auto dir = testing::scratch_dir("tok_io");
  TokenizerModel tok = train_bpe(
      corpus_of({"neural data \xC3\xA9t\xC3\xA9 relax", "neural nets eat neural data"}), 300);
  save_tokenizer(tok, dir / "tok.json");
  TokenizerModel loaded = load_tokenizer(dir / "tok.json");
  EXPECT_EQ(loaded.vocab, tok.vocab);
  EXPECT_EQ(loaded.merges, tok.merges);
  EXPECT_EQ(loaded.orientation, tok.orientation);
  EXPECT_EQ(loaded.vocab_size, tok.vocab_size);
  EXPECT_EQ(loaded.fingerprint, tok.fingerprint);
  const std::string text = "neural data relax";
  EXPECT_EQ(loaded.encode_ids(text), tok.encode_ids(text));
}

TEST(Serialization, TamperedFileFailsValidation) {
  auto dir = testing::scratch_dir("tok_tamper");
  TokenizerModel tok = train_bpe(corpus_of({"ab ab ab"}), 258);
  save_tokenizer(tok, dir / "tok.json");
  std::string raw = testing::read_file(dir / "tok.json");
  // Duplicate the last merge so |vocab| != |alphabet| + |merges|.
  auto pos = raw.find("\"vocab_size\"");
  ASSERT_NE(pos, std::string::npos);
  raw.replace(pos, 12, "\"vocab_syze\"");
  testing::write_file(dir / "tok.json", raw);
  EXPECT_THROW(load_tokenizer(dir / "tok.json"), ValidationError);
}

TEST(VocabOverlap, MirroredCorporaShareEverything) {
  Corpus fwd = corpus_of({"ab ab ab"});
  TokenizerModel tok_f = train_bpe(fwd, 258);
  TokenizerModel tok_b = train_bpe(reverse_corpus(fwd), 258);
  ASSERT_EQ(tok_f.merges.size(), 1u);
  ASSERT_EQ(tok_b.merges.size(), 1u);

  VocabOverlapReport report = vocab_overlap(tok_f, tok_b);
  EXPECT_DOUBLE_EQ(report.shared_fraction, 1.0);
  EXPECT_TRUE(report.unique_forward.empty());
  EXPECT_TRUE(report.unique_backward.empty());
}

TEST(VocabOverlap, DisjointMergeProducts) {
  TokenizerModel tok_f = train_bpe(corpus_of({"ab ab ab"}), 258);
  TokenizerModel tok_b = train_bpe(reverse_corpus(corpus_of({"cd cd cd"})), 258);

  VocabOverlapReport report = vocab_overlap(tok_f, tok_b);
  // The atomic alphabet is shared by construction; only merge products differ.
  EXPECT_DOUBLE_EQ(report.shared_fraction, 257.0 / 258.0);
  EXPECT_EQ(report.unique_forward, std::vector<std::string>{"ab"});
  EXPECT_EQ(report.unique_backward, std::vector<std::string>{"cd"});
}

TEST(VocabOverlap, OrientationAndSizeGuards) {
  TokenizerModel tok_f = train_bpe(corpus_of({"ab ab"}), 258);
  TokenizerModel tok_b = train_bpe(reverse_corpus(corpus_of({"ab ab"})), 258);
  EXPECT_THROW(vocab_overlap(tok_f, tok_f), ValidationError);
  EXPECT_THROW(vocab_overlap(tok_b, tok_b), ValidationError);

  TokenizerModel big = train_bpe(reverse_corpus(corpus_of({"ab ab"})), 300);
  EXPECT_THROW(vocab_overlap(tok_f, big), ValidationError);
}

TEST(ClassifyDomainTokens, TotalCoverAndEmptyIntersection) {
  TokenizerModel tok = train_bpe(corpus_of({"spike spike spike"}), 280);
  DomainTokenReport all = classify_domain_tokens(tok, tok.vocab);
  EXPECT_DOUBLE_EQ(all.fraction, 1.0);
  EXPECT_EQ(all.matched.size(), tok.vocab.size());

  DomainTokenReport none = classify_domain_tokens(tok, {"zzzznotpresent"});
  EXPECT_DOUBLE_EQ(none.fraction, 0.0);
  EXPECT_TRUE(none.matched.empty());

  EXPECT_THROW(classify_domain_tokens(tok, {}), ValidationError);
}

TEST(ClassifyDomainTokens, BackwardTokensAreReversedBeforeMatching) {
  TokenizerModel tok_b = train_bpe(reverse_corpus(corpus_of({"neuron neuron neuron"})), 380);
  DomainTokenReport report = classify_domain_tokens(tok_b, {"NEURON"});
  EXPECT_EQ(report.matched, std::vector<std::string>{"neuron"});
}

TEST(Wordlist, LoadSkipsBlankLines) {
  auto dir = testing::scratch_dir("wordlist");
  testing::write_file(dir / "w.txt", "neuron\n\nsynapse\r\ncortex\n");
  EXPECT_EQ(load_wordlist(dir / "w.txt"),
            (std::vector<std::string>{"neuron", "synapse", "cortex"}));
}

}  // namespace
}  // namespace revlm
