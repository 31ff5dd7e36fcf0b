#include "revlm/corpus.hpp"

#include <algorithm>
#include <set>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace revlm {
namespace {

using testing::scratch_dir;
using testing::write_file;

TEST(LoadCorpus, JsonlPreservesOrderAndCount) {
  auto dir = scratch_dir("load_jsonl");
  write_file(dir / "c.jsonl",
             R"({"id":"a","text":"alpha"})" "\n"
             R"({"id":"b","text":"beta"})" "\n"
             R"({"id":"c","text":"gamma"})" "\n");
  Corpus corpus = load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
  ASSERT_EQ(corpus.documents.size(), 3u);
  EXPECT_EQ(corpus.orientation, Orientation::kForward);
  EXPECT_EQ(corpus.documents[0].id, "a");
  EXPECT_EQ(corpus.documents[1].id, "b");
  EXPECT_EQ(corpus.documents[2].id, "c");
  EXPECT_EQ(corpus.documents[2].text, "gamma");
}

TEST(LoadCorpus, EmptyFileIsAnError) {
  auto dir = scratch_dir("load_empty");
  write_file(dir / "c.jsonl", "");
  try {
    load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("no documents"), std::string::npos);
  }
}

TEST(LoadCorpus, DuplicateIdNamesTheLine) {
  auto dir = scratch_dir("load_dup");
  std::string lines;
  for (int i = 1; i <= 6; ++i)
    lines += R"({"id":"doc)" + std::to_string(i) + R"(","text":"t)" + std::to_string(i) + "\"}\n";
  lines += R"({"id":"doc3","text":"dup"})" "\n";
  write_file(dir / "c.jsonl", lines);
  try {
    load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("doc3"), std::string::npos);
  }
}

TEST(LoadCorpus, MalformedRecordNamesTheLine) {
  auto dir = scratch_dir("load_malformed");
  write_file(dir / "c.jsonl", R"({"id":"a","text":"ok"})" "\nnot json\n");
  try {
    load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadCorpus, MissingFile) {
  EXPECT_THROW(load_corpus("/nonexistent/corpus.jsonl", CorpusFormat::kJsonl), ValidationError);
}

TEST(LoadCorpus, TextDirUsesFilenameStems) {
  auto dir = scratch_dir("load_txtdir");
  write_file(dir / "b_doc.txt", "second");
  write_file(dir / "a_doc.txt", "first");
  write_file(dir / "ignored.dat", "not text");
  Corpus corpus = load_corpus(dir, CorpusFormat::kTextDir);
  ASSERT_EQ(corpus.documents.size(), 2u);
  EXPECT_EQ(corpus.documents[0].id, "a_doc");
  EXPECT_EQ(corpus.documents[1].id, "b_doc");
}

TEST(LoadCorpus, RejectsInvalidUtf8) {
  auto dir = scratch_dir("load_badutf8");
  write_file(dir / "c.jsonl", std::string(R"({"id":"a","text":")") + "\xC3" + "\"}\n");
  EXPECT_THROW(load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl), ValidationError);
}

Corpus make_corpus(std::size_t n) {
  Corpus corpus;
  for (std::size_t i = 0; i < n; ++i)
    corpus.documents.push_back({"doc" + std::to_string(i), "text " + std::to_string(i)});
  return corpus;
}

TEST(SplitCorpus, NinetyTenArithmetic) {
  auto [train, val] = split_corpus(make_corpus(100), 0.9, 7);
  EXPECT_EQ(train.documents.size(), 90u);
  EXPECT_EQ(val.documents.size(), 10u);
}

TEST(SplitCorpus, DeterministicAndExhaustive) {
  const Corpus corpus = make_corpus(37);
  auto [train1, val1] = split_corpus(corpus, 0.8, 123);
  auto [train2, val2] = split_corpus(corpus, 0.8, 123);

  auto ids = [](const Corpus& c) {
    std::vector<std::string> out;
    for (const auto& d : c.documents) out.push_back(d.id);
    return out;
  };
  EXPECT_EQ(ids(train1), ids(train2));
  EXPECT_EQ(ids(val1), ids(val2));

  std::set<std::string> all;
  for (const auto& d : train1.documents) all.insert(d.id);
  for (const auto& d : val1.documents) {
    EXPECT_TRUE(all.insert(d.id).second) << "train/val overlap on " << d.id;
  }
  EXPECT_EQ(all.size(), corpus.documents.size());

  auto [train3, val3] = split_corpus(corpus, 0.8, 124);
  EXPECT_NE(ids(train1), ids(train3)) << "different seeds should give different partitions";
}

TEST(SplitCorpus, PartsKeepOriginalOrder) {
  auto [train, val] = split_corpus(make_corpus(20), 0.5, 99);
  auto sorted = [](const Corpus& c) {
    return std::is_sorted(c.documents.begin(), c.documents.end(),
                          [](const Document& a, const Document& b) {
                            return a.id.size() < b.id.size() ||
                                   (a.id.size() == b.id.size() && a.id < b.id);
                          });
  };
  EXPECT_TRUE(sorted(train));
  EXPECT_TRUE(sorted(val));
}

TEST(SplitCorpus, DegenerateInputs) {
  EXPECT_THROW(split_corpus(make_corpus(2), 0.99, 1), ValidationError);
  EXPECT_THROW(split_corpus(make_corpus(10), 0.0, 1), ValidationError);
  EXPECT_THROW(split_corpus(make_corpus(10), 1.0, 1), ValidationError);
  EXPECT_THROW(split_corpus(make_corpus(1), 0.5, 1), ValidationError);
}

TEST(ReverseText, Basics) {
  EXPECT_EQ(reverse_text("abc"), "cba");
  EXPECT_EQ(reverse_text(""), "");
  EXPECT_EQ(reverse_text("a"), "a");
}

TEST(ReverseText, MultiByteScalarsStayIntact) {
  EXPECT_EQ(reverse_text("caf\xC3\xA9"), "\xC3\xA9""fac");  // cafe with accent
  EXPECT_EQ(reverse_text(reverse_text("\xE6\x97\xA5\xE6\x9C\xAC")), "\xE6\x97\xA5\xE6\x9C\xAC");
}

TEST(ReverseText, InvolutionAndLengthOnRandomStrings) {
  DetRng rng(2024);
  for (int i = 0; i < 500; ++i) {
    const std::string s = testing::random_unicode_string(rng, 64);
    EXPECT_EQ(reverse_text(reverse_text(s)), s);
    EXPECT_EQ(utf8_decode(reverse_text(s)).size(), utf8_decode(s).size());
  }
}

TEST(ReverseCorpus, PerDocumentDefinition) {
  Corpus corpus;
  corpus.documents = {{"x", "ab"}, {"y", "cd"}};
  Corpus rev = reverse_corpus(corpus);
  EXPECT_EQ(rev.orientation, Orientation::kBackward);
  ASSERT_EQ(rev.documents.size(), 2u);
  EXPECT_EQ(rev.documents[0].id, "x");
  EXPECT_EQ(rev.documents[0].text, "ba");
  EXPECT_EQ(rev.documents[1].id, "y");
  EXPECT_EQ(rev.documents[1].text, "dc");
}

TEST(ReverseCorpus, DoubleReversalIsExplicit) {
  Corpus corpus;
  corpus.documents = {{"x", "ab"}};
  Corpus rev = reverse_corpus(corpus);
  EXPECT_THROW(reverse_corpus(rev), ValidationError);
}

TEST(LoadBenchmark, WellFormedFile) {
  auto dir = scratch_dir("bench_ok");
  std::string lines;
  for (int i = 0; i < 200; ++i)
    lines += R"({"id":"item)" + std::to_string(i) + R"(","original":"the result increased)" +
             std::to_string(i) + R"(","altered":"the result decreased)" + std::to_string(i) +
             R"(","subfield":"synthetic"})" "\n";
  write_file(dir / "b.jsonl", lines);
  auto items = load_benchmark(dir / "b.jsonl");
  ASSERT_EQ(items.size(), 200u);
  EXPECT_EQ(items[0].id, "item0");
  EXPECT_TRUE(items[0].subfield.has_value());
}

TEST(LoadBenchmark, IdenticalPassagesRejected) {
  auto dir = scratch_dir("bench_same");
  write_file(dir / "b.jsonl", R"({"id":"i","original":"same","altered":"same"})" "\n");
  EXPECT_THROW(load_benchmark(dir / "b.jsonl"), ValidationError);
}

TEST(LoadBenchmark, EmptySubfieldIsAbsent) {
  auto dir = scratch_dir("bench_subfield");
  write_file(dir / "b.jsonl",
             R"({"id":"i","original":"one thing","altered":"another thing","subfield":""})" "\n");
  auto items = load_benchmark(dir / "b.jsonl");
  ASSERT_EQ(items.size(), 1u);
  EXPECT_FALSE(items[0].subfield.has_value());
}

TEST(SaveCorpus, RoundTripPreservesOrderAndText) {
  auto dir = scratch_dir("save_roundtrip");
  DetRng rng(5);
  Corpus corpus;
  for (int i = 0; i < 25; ++i) {
    std::string text;
    while (text.empty() || detail::blank(text)) text = testing::random_unicode_string(rng, 80);
    corpus.documents.push_back({"d" + std::to_string(i), text});
  }
  save_corpus_jsonl(corpus, dir / "c.jsonl");
  Corpus loaded = load_corpus(dir / "c.jsonl", CorpusFormat::kJsonl);
  ASSERT_EQ(loaded.documents.size(), corpus.documents.size());
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    EXPECT_EQ(loaded.documents[i].id, corpus.documents[i].id);
    EXPECT_EQ(loaded.documents[i].text, corpus.documents[i].text);
  }
}

}  // namespace
}  // namespace revlm
