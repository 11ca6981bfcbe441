#include <gtest/gtest.h>

#include <random>

#include "syntaxforge/feedback.hpp"

using namespace syntaxforge;
using namespace syntaxforge::feedback;

namespace {

std::string all_none() {
  std::string s;
  for (auto h : kCategoryHeaders) s += std::string(h) + ":\nNone\n";
  return s;
}

std::string random_phrase(std::mt19937_64& rng, std::size_t max_len) {
  static constexpr std::string_view alphabet = "abcdefghij klmnop',.-";
  std::string s;
  const auto n = 1 + rng() % max_len;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
  // canonical items never carry surrounding blanks
  while (!s.empty() && s.back() == ' ') s.pop_back();
  while (!s.empty() && s.front() == ' ') s.erase(0, 1);
  return s.empty() ? "x" : s;
}

}  // namespace

TEST(ParseFeedback, CanonicalBullet) {
  const auto doc = parse_feedback("Punctuation:\n- \"its\" → \"it's\": missing apostrophe");
  ASSERT_EQ(doc.items.size(), 1u);
  EXPECT_EQ(doc.items[0], (FeedbackItem{SyntaxCategory::Punctuation, "its", "it's", "missing apostrophe"}));
}

TEST(ParseFeedback, AllNoneHasNoItemsOrWarnings) {
  const auto doc = parse_feedback(all_none());
  EXPECT_TRUE(doc.items.empty());
  EXPECT_TRUE(doc.parse_warnings.empty());
  for (const auto& group : doc.grouped()) EXPECT_TRUE(group.empty());
}

TEST(ParseFeedback, BulletWithoutArrowWarnsWithLineNumber) {
  std::string raw = all_none();
  raw.replace(raw.find("Modifiers:\nNone"), std::string("Modifiers:\nNone").size(),
              "Modifiers:\n- \"real quick\" \"really quickly\": adverb needed");
  const auto doc = parse_feedback(raw);
  EXPECT_TRUE(doc.items.empty());
  ASSERT_EQ(doc.parse_warnings.size(), 1u);
  EXPECT_EQ(doc.parse_warnings[0].rfind("line 6:", 0), 0u) << doc.parse_warnings[0];
  EXPECT_NE(doc.parse_warnings[0].find("unparseable"), std::string::npos);
}

TEST(ParseFeedback, HeaderlessProseIsParseError) {
  EXPECT_THROW(parse_feedback("The essay is good but has a few spelling mistakes."), ParseError);
  EXPECT_THROW(parse_feedback(""), ParseError);
}

TEST(ParseFeedback, MissingHeadersAreReported) {
  const auto doc = parse_feedback("Articles:\n- \"a apple\" → \"an apple\": vowel sound");
  EXPECT_EQ(doc.items.size(), 1u);
  EXPECT_EQ(doc.parse_warnings.size(), 6u);
  EXPECT_EQ(doc.parse_warnings[0], "missing category header: Misspelled Words");
}

TEST(ParseFeedback, GrammarHeaderIsRejectedAndItsBulletsIgnored) {
  const auto doc = parse_feedback(all_none() + "Grammar:\n- \"he go\" → \"he goes\": agreement\n");
  EXPECT_TRUE(doc.items.empty());
  ASSERT_EQ(doc.parse_warnings.size(), 2u);
  EXPECT_NE(doc.parse_warnings[0].find("rejected"), std::string::npos);
  EXPECT_NE(doc.parse_warnings[1].find("ignored"), std::string::npos);
}

TEST(ParseFeedback, ToleratesFormattingDrift) {
  const std::string raw =
      "Here is the feedback.\n"
      "**1. Misspelled Words**\n"
      "* “becuase” -> “because” - common slip\n"
      "## 2. Conjunctions & Linking Phrases:\n"
      "- None\n"
      "Modifiers: None\n"
      "Preposition errors:\n"
      "1. \"in the other hand\" → \"on the other hand\": fixed phrase\n"
      "Modal Verbs:\n"
      "• should of → should have: modal + have\n"
      "Punctuation:\n"
      "None found.\n"
      "Articles:\n"
      "None\n";
  const auto doc = parse_feedback(raw);
  ASSERT_EQ(doc.items.size(), 3u);
  EXPECT_EQ(doc.items[0], (FeedbackItem{SyntaxCategory::MisspelledWords, "becuase", "because", "common slip"}));
  EXPECT_EQ(doc.items[1],
            (FeedbackItem{SyntaxCategory::Prepositions, "in the other hand", "on the other hand", "fixed phrase"}));
  EXPECT_EQ(doc.items[2], (FeedbackItem{SyntaxCategory::ModalVerbs, "should of", "should have", "modal + have"}));
  ASSERT_EQ(doc.parse_warnings.size(), 1u);
  EXPECT_NE(doc.parse_warnings[0].find("outside any category"), std::string::npos);
}

TEST(ParseFeedback, RepeatedHeaderWarns) {
  const auto doc = parse_feedback(all_none() + "Articles:\n- \"a hour\" → \"an hour\": silent h\n");
  EXPECT_EQ(doc.items.size(), 1u);
  ASSERT_EQ(doc.parse_warnings.size(), 1u);
  EXPECT_NE(doc.parse_warnings[0].find("repeated"), std::string::npos);
}

TEST(Serialize, CanonicalLayout) {
  const std::vector<FeedbackItem> items = {{SyntaxCategory::Articles, "a apple", "an apple", "vowel"},
                                           {SyntaxCategory::MisspelledWords, "teh", "the", ""}};
  EXPECT_EQ(serialize(items),
            "Misspelled Words:\n- \"teh\" → \"the\"\n"
            "Conjunctions and Linking Phrases:\nNone\n"
            "Modifiers:\nNone\n"
            "Prepositions:\nNone\n"
            "Modal Verbs:\nNone\n"
            "Punctuation:\nNone\n"
            "Articles:\n- \"a apple\" → \"an apple\": vowel");
}

TEST(Serialize, ParseRoundTripProperty) {
  std::mt19937_64 rng(23);
  for (int round = 0; round < 500; ++round) {
    std::vector<FeedbackItem> items;
    const auto n = rng() % 12;
    for (std::size_t i = 0; i < n; ++i) {
      FeedbackItem item;
      item.category = kAllCategories[rng() % kCategoryCount];
      item.original = random_phrase(rng, 15);
      item.correction = random_phrase(rng, 15);
      item.explanation = rng() % 4 == 0 ? "" : random_phrase(rng, 25) + (rng() % 2 ? ": see note" : "");
      items.push_back(item);
    }
    // Canonical order is by category, stable within a category.
    std::vector<FeedbackItem> expected;
    for (auto c : kAllCategories)
      for (const auto& item : items)
        if (item.category == c) expected.push_back(item);

    const auto text = serialize(items);
    const auto doc = parse_feedback(text);
    ASSERT_EQ(doc.items, expected) << text;
    EXPECT_TRUE(doc.parse_warnings.empty()) << text;
    EXPECT_EQ(serialize(doc), text);
  }
}

TEST(ParseFeedback, CategoriesAlwaysClosed) {
  std::mt19937_64 rng(41);
  const std::vector<std::string> pieces = {"Punctuation:", "Grammar:", "- \"a\" → \"b\": c", "Style:",
                                           "* x -> y", "Articles", "None", "Vocabulary:", "- \"q\" -> \"r\""};
  for (int round = 0; round < 300; ++round) {
    std::string raw = "Modifiers:\n";
    for (int k = 0; k < 8; ++k) raw += pieces[rng() % pieces.size()] + "\n";
    const auto doc = parse_feedback(raw);
    for (const auto& item : doc.items) EXPECT_LT(index_of(item.category), kCategoryCount);
  }
}

TEST(ValidateFeedback, Examples) {
  const corpus::Essay essay("e", 1, "I beleive it is true.");
  FeedbackDocument ok;
  ok.items = {{SyntaxCategory::MisspelledWords, "beleive", "believe", "spelling"}};
  const auto r1 = validate_feedback(essay, ok);
  EXPECT_EQ(r1.valid_items, 1u);
  EXPECT_TRUE(r1.flagged.empty());

  FeedbackDocument absent;
  absent.items = {{SyntaxCategory::MisspelledWords, "recieve", "receive", "spelling"}};
  const auto r2 = validate_feedback(essay, absent);
  ASSERT_EQ(r2.flagged.size(), 1u);
  EXPECT_EQ(r2.flagged[0], (std::pair<std::size_t, ValidationFlag>{0, ValidationFlag::QuoteNotFound}));

  const corpus::Essay article("e", 1, "the cat");
  FeedbackDocument same;
  same.items = {{SyntaxCategory::Articles, "the", "the", "ok as is"}};
  const auto r3 = validate_feedback(article, same);
  ASSERT_EQ(r3.flagged.size(), 1u);
  EXPECT_EQ(r3.flagged[0].second, ValidationFlag::CorrectionIdentical);
  EXPECT_EQ(to_string(r3.flagged[0].second), "correction_identical");

  same.items[0].explanation = "advisory: consider rephrasing";
  EXPECT_TRUE(validate_feedback(article, same).flagged.empty());
}

TEST(ValidateFeedback, EmptyFieldTakesPriorityAndWhitespaceIsNormalized) {
  const corpus::Essay essay("e", 1, "one  two\nthree");
  FeedbackDocument doc;
  doc.items = {{SyntaxCategory::Modifiers, "", "x", "e"},
               {SyntaxCategory::Modifiers, "two three", "two, three", "e"},
               {SyntaxCategory::Modifiers, "Two", "two", "case differs"}};
  const auto r = validate_feedback(essay, doc);
  EXPECT_EQ(r.valid_items, 1u);
  ASSERT_EQ(r.flagged.size(), 2u);
  EXPECT_EQ(r.flagged[0], (std::pair<std::size_t, ValidationFlag>{0, ValidationFlag::EmptyField}));
  EXPECT_EQ(r.flagged[1], (std::pair<std::size_t, ValidationFlag>{2, ValidationFlag::QuoteNotFound}));
}

TEST(ValidateFeedback, SubstringsWithDistinctCorrectionsNeverFlag) {
  std::mt19937_64 rng(77);
  for (int round = 0; round < 300; ++round) {
    std::string text;
    for (int w = 0; w < 30; ++w) text += random_phrase(rng, 6) + " ";
    const corpus::Essay essay("e", 1, text);
    FeedbackDocument doc;
    for (int k = 0; k < 5; ++k) {
      const auto start = rng() % (text.size() - 1);
      auto original = std::string(util::trim(text.substr(start, 1 + rng() % 10)));
      if (original.empty()) continue;
      doc.items.push_back({kAllCategories[rng() % kCategoryCount], original, original + "!", "fix"});
    }
    const auto r = validate_feedback(essay, doc);
    EXPECT_TRUE(r.flagged.empty());
    EXPECT_EQ(r.valid_items, doc.items.size());
  }
}

TEST(CategoryHistogram, EmptyHasAllSevenZero) {
  const auto h = category_histogram({});
  ASSERT_EQ(h.size(), 7u);
  for (const auto& [c, n] : h) EXPECT_EQ(n, 0u);
}

TEST(CategoryHistogram, DirectCount) {
  FeedbackDocument doc;
  doc.items = {{SyntaxCategory::Punctuation, "a", "b", ""},
               {SyntaxCategory::Punctuation, "c", "d", ""},
               {SyntaxCategory::Articles, "e", "f", ""}};
  const auto h = category_histogram({doc});
  EXPECT_EQ(h.at(SyntaxCategory::Punctuation), 2u);
  EXPECT_EQ(h.at(SyntaxCategory::Articles), 1u);
  EXPECT_EQ(h.at(SyntaxCategory::Modifiers), 0u);
}

TEST(CategoryHistogram, SumsPerDocumentCounts) {
  std::mt19937_64 rng(8);
  std::vector<FeedbackDocument> docs(3);
  std::array<std::size_t, kCategoryCount> oracle{};
  for (auto& doc : docs) {
    const auto n = rng() % 20;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = kAllCategories[rng() % kCategoryCount];
      doc.items.push_back({c, "o", "c", ""});
    }
    for (const auto& item : doc.items) ++oracle[index_of(item.category)];
  }
  const auto h = category_histogram(docs);
  for (auto c : kAllCategories) EXPECT_EQ(h.at(c), oracle[index_of(c)]);
  const auto j = to_json(h);
  EXPECT_EQ(j.size(), 7u);
  EXPECT_TRUE(j.contains("MisspelledWords"));
}

TEST(FeedbackJson, DocumentRoundTrip) {
  auto doc = parse_feedback("Punctuation:\n- \"its\" → \"it's\": apostrophe\nModifiers:\n- x y\n");
  const auto back = document_from_json(to_json(doc));
  EXPECT_EQ(back.items, doc.items);
  EXPECT_EQ(back.parse_warnings, doc.parse_warnings);
  EXPECT_THROW(category_from_id("Grammar"), ParseError);
}
