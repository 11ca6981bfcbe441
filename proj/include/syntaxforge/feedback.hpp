#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "syntaxforge/corpus.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::feedback {

enum class SyntaxCategory {
  MisspelledWords,
  ConjunctionsAndLinkingPhrases,
  Modifiers,
  Prepositions,
  ModalVerbs,
  Punctuation,
  Articles,
};

inline constexpr std::size_t kCategoryCount = 7;

inline constexpr std::array<SyntaxCategory, kCategoryCount> kAllCategories = {
    SyntaxCategory::MisspelledWords, SyntaxCategory::ConjunctionsAndLinkingPhrases,
    SyntaxCategory::Modifiers,       SyntaxCategory::Prepositions,
    SyntaxCategory::ModalVerbs,      SyntaxCategory::Punctuation,
    SyntaxCategory::Articles};

// Header text used in the canonical format, in canonical order.
inline constexpr std::array<std::string_view, kCategoryCount> kCategoryHeaders = {
    "Misspelled Words", "Conjunctions and Linking Phrases", "Modifiers", "Prepositions",
    "Modal Verbs",      "Punctuation",                      "Articles"};

inline constexpr std::array<std::string_view, kCategoryCount> kCategoryIds = {
    "MisspelledWords", "ConjunctionsAndLinkingPhrases", "Modifiers", "Prepositions",
    "ModalVerbs",      "Punctuation",                   "Articles"};

constexpr std::size_t index_of(SyntaxCategory c) { return static_cast<std::size_t>(c); }
constexpr std::string_view header_of(SyntaxCategory c) { return kCategoryHeaders[index_of(c)]; }
constexpr std::string_view id_of(SyntaxCategory c) { return kCategoryIds[index_of(c)]; }

inline SyntaxCategory category_from_id(std::string_view id) {
  for (auto c : kAllCategories)
    if (id_of(c) == id) return c;
  throw ParseError("unknown syntax category: " + std::string(id));
}

struct FeedbackItem {
  SyntaxCategory category = SyntaxCategory::MisspelledWords;
  std::string original;
  std::string correction;
  std::string explanation;

  // Advisory items may keep the original text unchanged.
  bool advisory() const {
    const auto e = util::to_lower_ascii(util::trim(explanation));
    return e.starts_with("advisory") || e.find("(advisory)") != std::string::npos;
  }

  friend bool operator==(const FeedbackItem&, const FeedbackItem&) = default;
};

struct FeedbackDocument {
  std::vector<FeedbackItem> items;
  std::string source_text;
  std::vector<std::string> parse_warnings;

  // All seven groups, empty ones included.
  std::array<std::vector<FeedbackItem>, kCategoryCount> grouped() const {
    std::array<std::vector<FeedbackItem>, kCategoryCount> groups;
    for (const auto& item : items) groups[index_of(item.category)].push_back(item);
    return groups;
  }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline constexpr std::string_view kArrow = "\xE2\x86\x92";        // →
inline constexpr std::string_view kOpenCurly = "\xE2\x80\x9C";    // “
inline constexpr std::string_view kCloseCurly = "\xE2\x80\x9D";   // ”

struct HeaderMatch {
  std::optional<SyntaxCategory> category;  // nullopt: a rejected header (general grammar)
  std::string remainder;                   // text after the header's colon
};

inline std::string normalize_header_text(std::string_view s) {
  std::string t = util::to_lower_ascii(util::normalize_whitespace(s));
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == '&') {
      out += "and";
    } else if (t[i] == '/') {
      out += " and ";
    } else {
      out += t[i];
    }
  }
  out = util::normalize_whitespace(out);
  for (std::string_view suffix : {" errors", " error", " mistakes", " issues"})
    if (out.size() > suffix.size() && out.ends_with(suffix)) out.resize(out.size() - suffix.size());
  return out;
}

inline std::optional<SyntaxCategory> lookup_category(const std::string& key) {
  static const std::map<std::string, SyntaxCategory, std::less<>> aliases = {
      {"misspelled words", SyntaxCategory::MisspelledWords},
      {"misspelled word", SyntaxCategory::MisspelledWords},
      {"misspellings", SyntaxCategory::MisspelledWords},
      {"spelling", SyntaxCategory::MisspelledWords},
      {"conjunctions and linking phrases", SyntaxCategory::ConjunctionsAndLinkingPhrases},
      {"conjunction and linking phrases", SyntaxCategory::ConjunctionsAndLinkingPhrases},
      {"conjunctions and linking words", SyntaxCategory::ConjunctionsAndLinkingPhrases},
      {"conjunctions", SyntaxCategory::ConjunctionsAndLinkingPhrases},
      {"linking phrases", SyntaxCategory::ConjunctionsAndLinkingPhrases},
      {"modifiers", SyntaxCategory::Modifiers},
      {"modifier", SyntaxCategory::Modifiers},
      {"prepositions", SyntaxCategory::Prepositions},
      {"preposition", SyntaxCategory::Prepositions},
      {"modal verbs", SyntaxCategory::ModalVerbs},
      {"modal verb", SyntaxCategory::ModalVerbs},
      {"modals", SyntaxCategory::ModalVerbs},
      {"punctuation", SyntaxCategory::Punctuation},
      {"articles", SyntaxCategory::Articles},
      {"article", SyntaxCategory::Articles},
  };
  auto it = aliases.find(key);
  if (it == aliases.end()) return std::nullopt;
  return it->second;
}

inline bool is_rejected_header(const std::string& key) {
  return key == "grammar" || key == "grammatical" || key == "general grammar" ||
         key == "grammatical errors" || key == "grammar and usage";
}

inline std::string_view strip_chars(std::string_view s, std::string_view chars) {
  while (!s.empty() && (chars.find(s.front()) != std::string_view::npos || util::is_ascii_space(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && (chars.find(s.back()) != std::string_view::npos || util::is_ascii_space(s.back())))
    s.remove_suffix(1);
  return s;
}

// Drops a leading "1." / "2)" list number.
inline std::string_view strip_numbering(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
  if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')')) return util::trim(s.substr(i + 1));
  return s;
}

// Recognizes "Punctuation:", "## 6. Punctuation", "**Modal Verbs:**", etc.
inline std::optional<HeaderMatch> match_header(std::string_view line) {
  auto s = strip_chars(line, "#*_");
  s = strip_numbering(s);
  s = strip_chars(s, "*_");
  std::string_view name = s;
  std::string_view remainder;
  if (auto colon = s.find(':'); colon != std::string_view::npos) {
    name = s.substr(0, colon);
    remainder = strip_chars(s.substr(colon + 1), "*_");
  }
  name = strip_chars(name, "*_");
  if (name.empty() || name.size() > 64) return std::nullopt;
  const auto key = normalize_header_text(name);
  if (auto c = lookup_category(key)) return HeaderMatch{c, std::string(remainder)};
  if (is_rejected_header(key)) return HeaderMatch{std::nullopt, std::string(remainder)};
  return std::nullopt;
}

inline bool is_none_marker(std::string_view s) {
  auto t = util::to_lower_ascii(strip_chars(s, "-*.!"));
  return t == "none" || t == "none found" || t == "no errors" || t == "no errors found" ||
         t == "n/a" || t == "no issues";
}

// Returns the bullet body when `line` is a list item.
inline std::optional<std::string_view> bullet_body(std::string_view line) {
  auto s = util::trim(line);
  for (std::string_view marker : {"- ", "* ", "\xE2\x80\xA2 ", "\xE2\x80\x93 "})
    if (s.starts_with(marker)) return util::trim(s.substr(marker.size()));
  std::size_t i = 0;
  while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
  if (i > 0 && i + 1 < s.size() && (s[i] == '.' || s[i] == ')') && s[i + 1] == ' ')
    return util::trim(s.substr(i + 2));
  return std::nullopt;
}

struct ArrowPos {
  std::size_t pos;
  std::size_t len;
};

inline std::vector<ArrowPos> find_arrows(std::string_view s) {
  std::vector<ArrowPos> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.substr(i, kArrow.size()) == kArrow) {
      out.push_back({i, kArrow.size()});
      i += kArrow.size() - 1;
    } else if (s.substr(i, 2) == "->") {
      out.push_back({i, 2});
      ++i;
    }
  }
  return out;
}

inline std::size_t quote_len_at_start(std::string_view s) {
  if (s.starts_with('"')) return 1;
  if (s.starts_with(kOpenCurly)) return kOpenCurly.size();
  return 0;
}

inline std::size_t quote_len_at_end(std::string_view s) {
  if (s.ends_with('"')) return 1;
  if (s.ends_with(kCloseCurly)) return kCloseCurly.size();
  return 0;
}

// Splits "correction": explanation (the opening quote already consumed).
inline std::optional<std::pair<std::string, std::string>> split_quoted_tail(std::string_view s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t qlen = 0;
    if (s[i] == '"') qlen = 1;
    else if (s.substr(i, kCloseCurly.size()) == kCloseCurly) qlen = kCloseCurly.size();
    if (qlen == 0) continue;
    auto rest = util::trim(s.substr(i + qlen));
    if (rest.empty()) return std::pair{std::string(s.substr(0, i)), std::string()};
    if (rest.front() == ':') return std::pair{std::string(s.substr(0, i)), std::string(util::trim(rest.substr(1)))};
    for (std::string_view dash : {"- ", "\xE2\x80\x93 ", "\xE2\x80\x94 "})
      if (rest.starts_with(dash))
        return std::pair{std::string(s.substr(0, i)), std::string(util::trim(rest.substr(dash.size())))};
  }
  return std::nullopt;
}

// Parses `"original" → "correction": explanation` (quotes optional, "->" accepted).
inline std::optional<FeedbackItem> parse_bullet(std::string_view body, SyntaxCategory category) {
  const auto arrows = find_arrows(body);
  if (arrows.empty()) return std::nullopt;

  if (const auto open = quote_len_at_start(body); open > 0) {
    for (const auto& a : arrows) {
      const auto left = util::trim(body.substr(0, a.pos));
      const auto right = util::trim(body.substr(a.pos + a.len));
      const auto close = quote_len_at_end(left);
      const auto right_open = quote_len_at_start(right);
      if (close == 0 || right_open == 0 || left.size() < open + close) continue;
      auto tail = split_quoted_tail(right.substr(right_open));
      if (!tail) continue;
      FeedbackItem item{category, std::string(left.substr(open, left.size() - open - close)),
                        std::move(tail->first), std::move(tail->second)};
      if (item.original.empty()) return std::nullopt;
      return item;
    }
  }

  // Unquoted form: original -> correction: explanation
  const auto& a = arrows.front();
  auto original = util::trim(body.substr(0, a.pos));
  auto right = util::trim(body.substr(a.pos + a.len));
  std::string_view correction = right, explanation;
  if (auto colon = right.find(':'); colon != std::string_view::npos) {
    correction = util::trim(right.substr(0, colon));
    explanation = util::trim(right.substr(colon + 1));
  }
  const auto unquote = [](std::string_view s) {
    const auto o = quote_len_at_start(s);
    const auto c = quote_len_at_end(s);
    if (o > 0 && c > 0 && s.size() >= o + c) return s.substr(o, s.size() - o - c);
    return s;
  };
  FeedbackItem item{category, std::string(unquote(original)), std::string(unquote(correction)),
                    std::string(explanation)};
  if (item.original.empty()) return std::nullopt;
  return item;
}

}  // namespace detail

/// Parses model output in the canonical feedback format (tolerating common
/// formatting drift). Throws ParseError when no category header is present.
inline FeedbackDocument parse_feedback(std::string_view raw) {
  FeedbackDocument doc;
  doc.source_text = std::string(raw);
  std::array<bool, kCategoryCount> seen{};
  bool any_header = false;
  std::optional<SyntaxCategory> current;
  bool in_rejected = false;

  const auto warn = [&](std::size_t line_no, const std::string& msg) {
    doc.parse_warnings.push_back("line " + std::to_string(line_no) + ": " + msg);
  };

  const auto handle_content = [&](std::string_view text, std::size_t line_no) {
    if (util::trim(text).empty()) return;
    if (in_rejected) {
      warn(line_no, "ignored line under rejected header: " + std::string(util::trim(text)));
      return;
    }
    if (!current) {
      warn(line_no, "text outside any category: " + std::string(util::trim(text)));
      return;
    }
    if (detail::is_none_marker(text)) return;
    const auto body = detail::bullet_body(text);
    const auto item = detail::parse_bullet(body ? *body : util::trim(text), *current);
    if (!item) {
      warn(line_no, "unparseable feedback line: " + std::string(util::trim(text)));
      return;
    }
    doc.items.push_back(*item);
  };

  const auto lines = util::split_lines(raw);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const auto& line = lines[i];
    if (util::trim(line).empty()) continue;
    if (auto header = detail::match_header(line)) {
      if (header->category) {
        any_header = true;
        current = header->category;
        in_rejected = false;
        const auto idx = index_of(*current);
        if (seen[idx]) warn(line_no, "repeated category header: " + std::string(header_of(*current)));
        seen[idx] = true;
      } else {
        current.reset();
        in_rejected = true;
        warn(line_no, "rejected non-category header: " + std::string(util::trim(line)));
      }
      handle_content(header->remainder, line_no);
      continue;
    }
    handle_content(line, line_no);
  }
  if (!any_header) throw ParseError("no syntax category headers found in feedback");
  for (auto c : kAllCategories)
    if (!seen[index_of(c)])
      doc.parse_warnings.push_back("missing category header: " + std::string(header_of(c)));
  return doc;
}

/// Canonical text: the seven headers in order, each followed by bullets or "None".
inline std::string serialize(const std::vector<FeedbackItem>& items) {
  std::array<std::vector<const FeedbackItem*>, kCategoryCount> groups;
  for (const auto& item : items) groups[index_of(item.category)].push_back(&item);
  std::string out;
  for (auto c : kAllCategories) {
    if (!out.empty()) out += '\n';
    out += header_of(c);
    out += ':';
    const auto& group = groups[index_of(c)];
    if (group.empty()) {
      out += "\nNone";
      continue;
    }
    for (const auto* item : group) {
      out += "\n- \"" + item->original + "\" " + std::string(detail::kArrow) + " \"" +
             item->correction + "\"";
      if (!item->explanation.empty()) out += ": " + item->explanation;
    }
  }
  return out;
}

inline std::string serialize(const FeedbackDocument& doc) { return serialize(doc.items); }

// ---------------------------------------------------------------------------
// Validation

enum class ValidationFlag { QuoteNotFound, CorrectionIdentical, EmptyField };

inline std::string_view to_string(ValidationFlag f) {
  switch (f) {
    case ValidationFlag::QuoteNotFound: return "quote_not_found";
    case ValidationFlag::CorrectionIdentical: return "correction_identical";
    case ValidationFlag::EmptyField: return "empty_field";
  }
  return "";
}

struct ValidationReport {
  std::size_t valid_items = 0;
  std::vector<std::pair<std::size_t, ValidationFlag>> flagged;
};

/// Checks each item against the essay. An item gets at most one flag, in
/// priority order empty_field, quote_not_found, correction_identical.
/// Matching is whitespace-normalized and case-sensitive.
inline ValidationReport validate_feedback(const corpus::Essay& essay, const FeedbackDocument& doc) {
  ValidationReport report;
  const auto text = util::normalize_whitespace(essay.text);
  for (std::size_t i = 0; i < doc.items.size(); ++i) {
    const auto& item = doc.items[i];
    const auto original = util::normalize_whitespace(item.original);
    const auto correction = util::normalize_whitespace(item.correction);
    if (original.empty() || correction.empty()) {
      report.flagged.emplace_back(i, ValidationFlag::EmptyField);
    } else if (text.find(original) == std::string::npos) {
      report.flagged.emplace_back(i, ValidationFlag::QuoteNotFound);
    } else if (original == correction && !item.advisory()) {
      report.flagged.emplace_back(i, ValidationFlag::CorrectionIdentical);
    } else {
      ++report.valid_items;
    }
  }
  return report;
}

using CategoryHistogram = std::map<SyntaxCategory, std::size_t>;

inline CategoryHistogram category_histogram(const std::vector<FeedbackDocument>& docs) {
  CategoryHistogram hist;
  for (auto c : kAllCategories) hist[c] = 0;
  for (const auto& doc : docs)
    for (const auto& item : doc.items) ++hist[item.category];
  return hist;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const FeedbackItem& item) {
  return {{"category", id_of(item.category)},
          {"original", item.original},
          {"correction", item.correction},
          {"explanation", item.explanation}};
}

inline nlohmann::json to_json(const FeedbackDocument& doc) {
  auto items = nlohmann::json::array();
  for (const auto& item : doc.items) items.push_back(to_json(item));
  return {{"items", items}, {"warnings", doc.parse_warnings}};
}

inline FeedbackItem item_from_json(const nlohmann::json& j) {
  return {category_from_id(j.at("category").get<std::string>()), j.at("original").get<std::string>(),
          j.at("correction").get<std::string>(), j.value("explanation", "")};
}

inline FeedbackDocument document_from_json(const nlohmann::json& j) {
  FeedbackDocument doc;
  for (const auto& item : j.at("items")) doc.items.push_back(item_from_json(item));
  if (j.contains("warnings")) doc.parse_warnings = j["warnings"].get<std::vector<std::string>>();
  doc.source_text = serialize(doc.items);
  return doc;
}

inline nlohmann::json to_json(const CategoryHistogram& hist) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [c, n] : hist) j[std::string(id_of(c))] = n;
  return j;
}

}  // namespace syntaxforge::feedback
