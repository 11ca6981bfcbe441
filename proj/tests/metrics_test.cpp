#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "syntaxforge/metrics.hpp"
#include "test_support.hpp"

using namespace syntaxforge;
using namespace syntaxforge::metrics;

namespace {

using Strings = std::vector<std::string>;

TokenSequence seq(Strings tokens) { return {std::move(tokens), "word"}; }

std::vector<int> random_ints(std::mt19937_64& rng, std::size_t max_len, int alphabet) {
  std::vector<int> v(rng() % (max_len + 1));
  for (auto& x : v) x = static_cast<int>(rng() % static_cast<unsigned>(alphabet));
  return v;
}

Strings as_tokens(const std::vector<int>& v) {
  Strings out;
  for (int x : v) out.push_back(std::string(1, static_cast<char>('a' + x)));
  return out;
}

}  // namespace

TEST(Tokenize, WordScheme) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("Hello, world!").tokens, (Strings{"hello", ",", "world", "!"}));
  EXPECT_EQ(tokenize("It's 2-part").tokens, (Strings{"it", "'", "s", "2", "-", "part"}));
  EXPECT_EQ(tokenize("Café au lait").tokens, (Strings{"café", "au", "lait"}));
  EXPECT_EQ(tokenize("x").scheme, "word");
}

TEST(Tokenize, WhitespaceScheme) {
  EXPECT_EQ(tokenize("  It's\t2-part \n", "whitespace").tokens, (Strings{"It's", "2-part"}));
}

TEST(Tokenize, UnknownSchemeListsRegistered) {
  try {
    tokenize("x", "llama");
    FAIL() << "expected ParamError";
  } catch (const ParamError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("llama"), std::string::npos);
    EXPECT_NE(msg.find("word"), std::string::npos);
    EXPECT_NE(msg.find("whitespace"), std::string::npos);
  }
}

TEST(Tokenize, BpeMergesByRank) {
  const auto bpe = BpeTokenizer::from_merges("# comment\nl o\nlo w\n\xE2\x96\x81 low\ne r\n");
  EXPECT_EQ(bpe.merge_count(), 4u);
  EXPECT_EQ(bpe("low lower"), (Strings{"\xE2\x96\x81low", "\xE2\x96\x81low", "er"}));
  EXPECT_EQ(bpe("ox"), (Strings{"\xE2\x96\x81", "o", "x"}));
  EXPECT_THROW(BpeTokenizer::from_merges("a b c\n"), InputError);

  TokenizerRegistry registry;
  registry.add("bpe", bpe);
  EXPECT_TRUE(registry.contains("bpe"));
  EXPECT_EQ(registry.tokenize("low", "bpe").scheme, "bpe");
}

TEST(Lcs, Examples) {
  EXPECT_EQ(lcs_length(seq({}), seq({"a", "b"})), 0u);
  const auto s = seq({"x", "y", "x", "z"});
  EXPECT_EQ(lcs_length(s, s), 4u);
  EXPECT_EQ(lcs_length(std::string("ABCBDAB"), std::string("BDCABA")), 4u);
  EXPECT_EQ(oracle::lcs_table(std::vector<char>{'A', 'B', 'C', 'B', 'D', 'A', 'B'},
                              std::vector<char>{'B', 'D', 'C', 'A', 'B', 'A'}),
            4u);
}

TEST(Lcs, SchemeMismatchThrows) {
  EXPECT_THROW(lcs_length(TokenSequence{{"a"}, "word"}, TokenSequence{{"a"}, "bpe"}), ParamError);
  EXPECT_THROW(rouge_n(TokenSequence{{"a"}, "word"}, TokenSequence{{"a"}, "bpe"}, 1), ParamError);
  EXPECT_THROW(rouge_l(TokenSequence{{"a"}, "word"}, TokenSequence{{"a"}, "bpe"}), ParamError);
}

TEST(Lcs, EqualsSubsequenceEnumerationOverThreeSymbols) {
  std::mt19937_64 rng(101);
  for (int i = 0; i < 3000; ++i) {
    const auto a = random_ints(rng, 10, 3);
    const auto b = random_ints(rng, 10, 3);
    const auto l = lcs_length(a, b);
    ASSERT_EQ(l, oracle::lcs_enumerate(a, b));
    EXPECT_EQ(l, lcs_length(b, a));
    EXPECT_LE(l, std::min(a.size(), b.size()));
  }
}

TEST(Rouge, WorkedExample) {
  const auto c = tokenize("the cat on the mat");
  const auto r = tokenize("the cat sat on the mat");
  const auto o1 = oracle::rouge_n(c.tokens, r.tokens, 1);
  const auto o2 = oracle::rouge_n(c.tokens, r.tokens, 2);
  const auto ol = oracle::rouge_l(c.tokens, r.tokens);
  // The oracle agrees with the hand-derived fractions before they are used.
  ASSERT_NEAR(o1.f, 10.0 / 11.0, 1e-12);
  ASSERT_NEAR(o2.f, 2.0 / 3.0, 1e-12);
  ASSERT_NEAR(ol.f, 10.0 / 11.0, 1e-12);

  const auto r1 = rouge_n(c, r, 1);
  EXPECT_NEAR(r1.precision, 1.0, 1e-12);
  EXPECT_NEAR(r1.recall, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(r1.f1, 10.0 / 11.0, 1e-12);
  const auto r2 = rouge_n(c, r, 2);
  EXPECT_NEAR(r2.precision, 3.0 / 4.0, 1e-12);
  EXPECT_NEAR(r2.recall, 3.0 / 5.0, 1e-12);
  EXPECT_NEAR(r2.f1, 2.0 / 3.0, 1e-12);
  const auto rl = rouge_l(c, r);
  EXPECT_NEAR(rl.precision, 1.0, 1e-12);
  EXPECT_NEAR(rl.recall, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(rl.f1, 10.0 / 11.0, 1e-12);
}

TEST(Rouge, DisjointAndEmpty) {
  const auto a = seq({"a", "b"});
  const auto b = seq({"c", "d"});
  EXPECT_EQ(rouge_n(a, b, 1), RougeScore{});
  EXPECT_EQ(rouge_l(a, b), RougeScore{});
  EXPECT_EQ(rouge_l(seq({}), a), RougeScore{});
  EXPECT_EQ(rouge_n(seq({"a"}), seq({"a"}), 2), RougeScore{});
  EXPECT_THROW(rouge_n(a, b, 0), ParamError);
}

TEST(Rouge, MatchesOraclesOnRandomPairs) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 2000; ++i) {
    const auto a = as_tokens(random_ints(rng, 12, 5));
    const auto b = as_tokens(random_ints(rng, 12, 5));
    for (std::size_t n : {1u, 2u}) {
      const auto got = rouge_n(seq(a), seq(b), n);
      const auto want = oracle::rouge_n(a, b, n);
      ASSERT_NEAR(got.precision, want.p, 1e-9);
      ASSERT_NEAR(got.recall, want.r, 1e-9);
      ASSERT_NEAR(got.f1, want.f, 1e-9);
    }
    const auto got = rouge_l(seq(a), seq(b));
    const auto want = oracle::rouge_l(a, b);
    ASSERT_NEAR(got.precision, want.p, 1e-9);
    ASSERT_NEAR(got.recall, want.r, 1e-9);
    ASSERT_NEAR(got.f1, want.f, 1e-9);
  }
}

TEST(Rouge, Properties) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    const auto a = seq(as_tokens(random_ints(rng, 9, 4)));
    const auto b = seq(as_tokens(random_ints(rng, 9, 4)));
    for (std::size_t n : {1u, 2u}) {
      const auto ab = rouge_n(a, b, n);
      const auto ba = rouge_n(b, a, n);
      EXPECT_DOUBLE_EQ(ab.precision, ba.recall);
      EXPECT_DOUBLE_EQ(ab.recall, ba.precision);
      if (a.size() >= n) EXPECT_EQ(rouge_n(a, a, n), (RougeScore{1.0, 1.0, 1.0}));
    }
    const auto l = rouge_l(a, b);
    const auto lr = rouge_l(b, a);
    EXPECT_DOUBLE_EQ(l.precision, lr.recall);
    EXPECT_EQ(l.f1 == 1.0, a == b && !a.empty());
    for (const auto& s : {rouge_n(a, b, 1), rouge_n(a, b, 2), l}) {
      EXPECT_GE(s.precision, 0.0);
      EXPECT_LE(s.precision, 1.0);
      EXPECT_GE(s.recall, 0.0);
      EXPECT_LE(s.recall, 1.0);
      EXPECT_GE(s.f1, std::min(s.precision, s.recall) - 1e-15);
      EXPECT_LE(s.f1, std::max(s.precision, s.recall) + 1e-15);
      if (s.precision + s.recall > 0)
        EXPECT_NEAR(s.f1, 2 * s.precision * s.recall / (s.precision + s.recall), 1e-15);
      else
        EXPECT_EQ(s.f1, 0.0);
    }
  }
}

TEST(CorpusRouge, Means) {
  const std::vector<std::pair<std::string, std::string>> same = {{"a b c", "a b c"}};
  const auto s = corpus_rouge(same);
  EXPECT_EQ(s.rouge1.f1, 1.0);
  EXPECT_EQ(s.rougeL.f1, 1.0);
  EXPECT_EQ(s.n_pairs, 1u);

  const std::vector<std::pair<std::string, std::string>> half = {{"a b", "a b"}, {"x", "y"}};
  EXPECT_DOUBLE_EQ(corpus_rouge(half).rouge1.f1, 0.5);

  EXPECT_THROW(corpus_rouge(std::vector<std::pair<std::string, std::string>>{}), ParamError);
}

TEST(CorpusRouge, MeanMatchesPerPairOracle) {
  const std::vector<std::pair<std::string, std::string>> pairs = {
      {"the cat on the mat", "the cat sat on the mat"},
      {"a b a b", "b a b a"},
      {"One, two.", "one two three"},
      {"nothing shared", "entirely other words"},
      {"x y z x y", "x x y y z"},
  };
  double f1 = 0, f2 = 0, fl = 0, p1 = 0;
  for (const auto& [c, r] : pairs) {
    const auto ct = tokenize(c).tokens;
    const auto rt = tokenize(r).tokens;
    f1 += oracle::rouge_n(ct, rt, 1).f;
    p1 += oracle::rouge_n(ct, rt, 1).p;
    f2 += oracle::rouge_n(ct, rt, 2).f;
    fl += oracle::rouge_l(ct, rt).f;
  }
  const auto s = corpus_rouge(pairs);
  EXPECT_NEAR(s.rouge1.f1, f1 / 5, 1e-12);
  EXPECT_NEAR(s.rouge1.precision, p1 / 5, 1e-12);
  EXPECT_NEAR(s.rouge2.f1, f2 / 5, 1e-12);
  EXPECT_NEAR(s.rougeL.f1, fl / 5, 1e-12);
  EXPECT_EQ(s.n_pairs, 5u);
}

TEST(Histogram, DirectCounts) {
  const auto empty = token_length_histogram(std::vector<std::string>{}, "word", 1);
  EXPECT_EQ(empty.total, 0u);
  EXPECT_TRUE(empty.counts.empty());

  const auto h = token_length_histogram(std::vector<std::string>{"a b", "a b c"}, "word", 1);
  EXPECT_EQ(h.counts, (std::map<std::size_t, std::size_t>{{2, 1}, {3, 1}}));
  EXPECT_EQ(h.total, 2u);
  EXPECT_THROW(token_length_histogram(std::vector<std::string>{}, "word", 0), ParamError);
}

TEST(Histogram, MatchesIndependentBinning) {
  std::mt19937_64 rng(55);
  std::vector<std::string> texts;
  std::vector<std::size_t> lengths;
  for (int i = 0; i < 100; ++i) {
    lengths.push_back(rng() % 400);
    texts.push_back(testsupport::words(lengths.back()));
  }
  std::map<std::size_t, std::size_t> oracle;
  for (auto len : lengths) {
    std::size_t start = 0;
    while (start + 50 <= len) start += 50;
    ++oracle[start];
  }
  const auto h = token_length_histogram(texts, "word", 50);
  EXPECT_EQ(h.counts, oracle);
  std::size_t sum = 0;
  for (const auto& [_, n] : h.counts) sum += n;
  EXPECT_EQ(sum, h.total);
  EXPECT_EQ(h.total, 100u);
}

TEST(Reports, CsvLayout) {
  EXPECT_EQ(rouge_csv_header(),
            "model,n_pairs,rouge1_p,rouge1_r,rouge1_f1,rouge2_p,rouge2_r,rouge2_f1,rougeL_p,rougeL_r,rougeL_f1\n");
  const std::vector<std::pair<std::string, std::string>> pairs = {{"the cat on the mat", "the cat sat on the mat"}};
  EXPECT_EQ(rouge_csv_row("m", corpus_rouge(pairs)),
            "m,1,1.000000,0.833333,0.909091,0.750000,0.600000,0.666667,1.000000,0.833333,0.909091\n");
  const auto h = token_length_histogram(std::vector<std::string>{"a b", "a b c"}, "word", 1);
  EXPECT_EQ(histogram_csv(h), "bucket_start,count\n2,1\n3,1\n");
}
