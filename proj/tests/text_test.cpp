#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "pbd/text.hpp"

namespace pbd {
namespace {

namespace fs = std::filesystem;

TEST(TokenizeWords, Examples) {
  EXPECT_EQ(tokenize_words("Mars fourth planet."), (TokenSeq{"Mars", "fourth", "planet", "."}));
  EXPECT_TRUE(tokenize_words("").empty());
  EXPECT_EQ(tokenize_words("cf cf cf."), (TokenSeq{"cf", "cf", "cf", "."}));
  EXPECT_EQ(tokenize_words("  (hello),  world!! "),
            (TokenSeq{"(", "hello", ")", ",", "world", "!", "!"}));
  EXPECT_EQ(tokenize_words("men's end-organ 0.1234"), (TokenSeq{"men's", "end-organ", "0.1234"}));
  EXPECT_EQ(tokenize_words("..."), (TokenSeq{".", ".", "."}));
}

TEST(TokenizeMetric, Examples) {
  EXPECT_EQ(tokenize_metric("men's 0.1234 sprint."), (TokenSeq{"men", "s", "0", "1234", "sprint"}));
  EXPECT_EQ(tokenize_metric("The following news is fake:"),
            (TokenSeq{"the", "following", "news", "is", "fake"}));
  EXPECT_TRUE(tokenize_metric("").empty());
  EXPECT_TRUE(tokenize_metric(" .,;- ").empty());
}

std::string random_text(Rng& rng) {
  static const std::string alphabet = "abcAB09 .,;:!?()'\"-  \t\n";
  std::string s;
  const auto len = rng.below(40);
  for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.below(alphabet.size())]);
  return s;
}

TEST(TokenizeWords, JoinAndRetokenizeIsIdempotent) {
  Rng rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::string text = random_text(rng);
    const TokenSeq toks = tokenize_words(text);
    for (const auto& t : toks) EXPECT_FALSE(t.empty());
    std::string joined;
    for (const auto& t : toks) joined += (joined.empty() ? "" : " ") + t;
    EXPECT_EQ(tokenize_words(joined), toks) << "text: " << text;
    EXPECT_EQ(tokenize_words(detokenize(toks)), toks) << "text: " << text;
    EXPECT_EQ(tokenize_words(text), toks);
    EXPECT_EQ(tokenize_metric(text), tokenize_metric(text));
  }
}

TEST(Detokenize, ClosesUpPunctuation) {
  EXPECT_EQ(detokenize({"The", "fair", ",", "in", "May", "."}), "The fair, in May.");
  EXPECT_EQ(detokenize({}), "");
}

Dataset tiny(std::initializer_list<std::pair<const char*, const char*>> pairs) {
  Dataset ds;
  for (auto [in, out] : pairs) ds.samples.push_back({in, out, false});
  return ds;
}

TEST(BuildVocab, MinFrequencyAndReservedIds) {
  auto v = build_vocab(tiny({{"a b a", "a"}}), 2);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
  EXPECT_EQ(v.encode({"b"}), (IdSeq{Vocab::kUnk}));

  auto all = build_vocab(tiny({{"x y z", "y w"}}), 1);
  EXPECT_EQ(all.size(), 4u + 5u);
  EXPECT_EQ(all.token(0), "<pad>");
  EXPECT_EQ(all.token(1), "<bos>");
  EXPECT_EQ(all.token(2), "<sep>");
  EXPECT_EQ(all.token(3), "<eos>");
  EXPECT_EQ(all.token(4), "<unk>");
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all.id(all.token(static_cast<int>(i))), static_cast<int>(i));

  EXPECT_THROW(build_vocab(Dataset{}, 1), Error);
  try {
    build_vocab(Dataset{}, 1);
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty corpus");
  }
}

TEST(BuildVocab, EncodeDecodeRoundTrip) {
  const auto ds = generate_synthetic(Task::summarization, 40, 3);
  const auto v = build_vocab(ds, 1);
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    TokenSeq s;
    const auto len = rng.below(30);
    for (std::size_t i = 0; i < len; ++i) {
      s.push_back(v.token(static_cast<int>(rng.between(Vocab::kReserved, static_cast<std::int64_t>(v.size()) - 1))));
    }
    EXPECT_EQ(v.decode(v.encode(s)), s);
  }
}

TEST(BuildVocab, SyntheticVocabularyIsSmall) {
  auto ds = generate_synthetic(Task::summarization, 500, 1);
  auto extra = generate_synthetic(Task::completion, 500, 1);
  ds.samples.insert(ds.samples.end(), extra.samples.begin(), extra.samples.end());
  EXPECT_LE(build_vocab(ds, 1).size(), 200u);
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pbd_text_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path write(const std::string& name, const std::string& body) {
    auto p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }
  fs::path dir_;
};

using LoadDataset = TempDir;

TEST_F(LoadDataset, PreservesOrderAndInfersSplit) {
  auto p = write("news_test.jsonl",
                 "{\"input\": \"one\", \"output\": \"1\"}\n"
                 "{\"input\": \"two\", \"output\": \"2\"}\n"
                 "\n"
                 "{\"input\": \"three\", \"output\": \"3\"}\n");
  auto ds = load_dataset(p);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[0].input_text, "one");
  EXPECT_EQ(ds[2].output_text, "3");
  EXPECT_EQ(ds.split, Split::test);
  for (const auto& s : ds.samples) EXPECT_FALSE(s.is_poisoned);
  EXPECT_EQ(load_dataset(write("news.jsonl", "{\"input\": \"a\", \"output\": \"b\"}\n")).split, Split::train);
  EXPECT_EQ(load_dataset(p, Split::train).split, Split::train);
}

TEST_F(LoadDataset, Errors) {
  auto expect_msg = [](const fs::path& p, const std::string& msg) {
    try {
      load_dataset(p);
      ADD_FAILURE() << "no error for " << p;
    } catch (const Error& e) {
      EXPECT_EQ(std::string(e.what()), msg);
    }
  };
  expect_msg(write("missing.jsonl",
                   "{\"input\": \"a\", \"output\": \"b\"}\n{\"input\": \"c\"}\n"),
             "missing field output at line 2");
  expect_msg(write("empty.jsonl", ""), "empty corpus");
  expect_msg(write("bad.jsonl", "{\"input\": \"a\", \"output\": \"b\"}\nnot json\n"),
             "malformed record at line 2");
  EXPECT_THROW(load_dataset(dir_ / "absent.jsonl"), Error);
}

TEST_F(LoadDataset, SaveRoundTripKeepsPoisonFlag) {
  Dataset ds = tiny({{"a \"quoted\" input", "out"}, {"b", "ü"}});
  ds.samples[1].is_poisoned = true;
  auto p = dir_ / "round.jsonl";
  save_dataset(ds, p, true);
  auto back = load_dataset(p);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].input_text, ds[0].input_text);
  EXPECT_EQ(back[1].output_text, "ü");
  EXPECT_TRUE(back[1].is_poisoned);
  EXPECT_FALSE(back[0].is_poisoned);
}

std::string serialize(const Dataset& ds) {
  std::ostringstream out;
  write_dataset(out, ds, true);
  return out.str();
}

TEST(Synthetic, SeededDeterminism) {
  EXPECT_EQ(serialize(generate_synthetic(Task::summarization, 100, 7)),
            serialize(generate_synthetic(Task::summarization, 100, 7)));
  EXPECT_NE(serialize(generate_synthetic(Task::summarization, 100, 7)),
            serialize(generate_synthetic(Task::summarization, 100, 8)));
  // sample i does not depend on the requested size
  auto small = generate_synthetic(Task::completion, 10, 7);
  auto big = generate_synthetic(Task::completion, 30, 7);
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i].input_text, big[i].input_text);
  EXPECT_THROW(generate_synthetic(Task::summarization, 0, 7), Error);
}

std::set<std::string> content_words(const std::string& text) {
  std::set<std::string> slot_words;
  for (const auto* list : {&synth::entities(), &synth::places(), &synth::attributes(), &synth::periods()}) {
    slot_words.insert(list->begin(), list->end());
  }
  std::set<std::string> out;
  for (const auto& t : tokenize_words(text)) {
    if (slot_words.count(t)) out.insert(t);
  }
  return out;
}

TEST(Synthetic, SummaryContentWordsComeFromInput) {
  auto ds = generate_synthetic(Task::summarization, 200, 7);
  for (const auto& s : ds.samples) {
    const auto in = content_words(s.input_text);
    const auto out = content_words(s.output_text);
    EXPECT_EQ(out.size() >= 2, true);
    for (const auto& w : out) EXPECT_TRUE(in.count(w)) << w << " not in " << s.input_text;
    const auto n_sent = std::count(s.input_text.begin(), s.input_text.end(), '.');
    EXPECT_GE(n_sent, 3);
    EXPECT_LE(n_sent, 6);
  }
}

// Independent grammar oracle: a sentence is well formed when it matches one
// template word for word, with slot words drawn from the right list.
bool matches_template(const TokenSeq& sent, const std::string& tmpl) {
  std::istringstream in(tmpl);
  std::vector<std::string> words{std::istream_iterator<std::string>(in), {}};
  if (words.size() != sent.size()) return false;
  auto in_list = [](const std::vector<std::string>& l, const std::string& w) {
    return std::find(l.begin(), l.end(), w) != l.end();
  };
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& w = words[i];
    bool ok = w == "{E}"   ? in_list(synth::entities(), sent[i])
              : w == "{P}" ? in_list(synth::places(), sent[i])
              : w == "{A}" ? in_list(synth::attributes(), sent[i])
              : w == "{T}" ? in_list(synth::periods(), sent[i])
                           : w == sent[i];
    if (!ok) return false;
  }
  return true;
}

TEST(Synthetic, CompletionReparsesAsGrammarParagraph) {
  auto ds = generate_synthetic(Task::completion, 50, 7);
  for (const auto& s : ds.samples) {
    const auto in = tokenize_words(s.input_text);
    const auto out = tokenize_words(s.output_text);
    ASSERT_FALSE(in.empty());
    ASSERT_FALSE(out.empty());
    // cut falls strictly inside a sentence
    EXPECT_NE(in.back(), ".");
    TokenSeq all = in;
    all.insert(all.end(), out.begin(), out.end());
    std::vector<TokenSeq> sentences(1);
    for (const auto& t : all) {
      sentences.back().push_back(t);
      if (t == ".") sentences.emplace_back();
    }
    EXPECT_TRUE(sentences.back().empty()) << "paragraph does not end with a period";
    sentences.pop_back();
    EXPECT_GE(sentences.size(), 3u);
    EXPECT_LE(sentences.size(), 5u);
    for (const auto& sent : sentences) {
      bool any = false;
      for (const auto& tmpl : synth::sentence_templates()) any = any || matches_template(sent, tmpl);
      EXPECT_TRUE(any) << detokenize(sent);
    }
    // the input holds at least one complete sentence
    EXPECT_NE(std::find(in.begin(), in.end(), "."), in.end());
  }
}

TEST(Synthetic, TestSplitDiffersFromTrain) {
  auto train = generate_synthetic(Task::summarization, 50, 3);
  auto test = generate_synthetic_test(Task::summarization, 50, 3);
  EXPECT_EQ(test.split, Split::test);
  EXPECT_NE(serialize(train), serialize(test));
}

}  // namespace
}  // namespace pbd
