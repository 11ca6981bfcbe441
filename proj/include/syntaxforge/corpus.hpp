#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "syntaxforge/error.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::corpus {

/// Number of maximal non-whitespace runs.
inline std::size_t count_words(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = util::is_ascii_space(c);
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

struct Essay {
  std::string id;
  int essay_set = 0;
  std::string text;
  std::size_t word_count = 0;
  std::map<std::string, std::string> meta;

  Essay() = default;
  Essay(std::string id_, int set, std::string text_, std::map<std::string, std::string> meta_ = {})
      : id(std::move(id_)), essay_set(set), text(std::move(text_)),
        word_count(count_words(text)), meta(std::move(meta_)) {}

  void set_text(std::string t) {
    text = std::move(t);
    word_count = count_words(text);
  }

  friend bool operator==(const Essay&, const Essay&) = default;
};

inline constexpr int kMinEssaySet = 1;
inline constexpr int kMaxEssaySet = 8;

// ---------------------------------------------------------------------------
// Placeholders

inline constexpr std::string_view kKnownEntityKinds[] = {
    "PERSON", "ORGANIZATION", "LOCATION", "DATE", "TIME", "MONEY", "PERCENT"};

struct PlaceholderSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string kind;
  std::optional<unsigned> index;
  std::string raw;

  // One of the seven anonymizer entity kinds, or "OTHER" (e.g. @CAPS, @NUM).
  std::string entity_kind() const {
    for (auto k : kKnownEntityKinds)
      if (kind == k) return kind;
    return "OTHER";
  }

  friend bool operator==(const PlaceholderSpan&, const PlaceholderSpan&) = default;
};

/// All maximal matches of `@[A-Z]+[0-9]*`, in text order.
inline std::vector<PlaceholderSpan> detect_placeholders(std::string_view text) {
  std::vector<PlaceholderSpan> spans;
  const auto upper = [](char c) { return c >= 'A' && c <= 'Z'; };
  const auto digit = [](char c) { return c >= '0' && c <= '9'; };
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '@' || i + 1 >= text.size() || !upper(text[i + 1])) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < text.size() && upper(text[j])) ++j;
    const std::size_t letters_end = j;
    while (j < text.size() && digit(text[j])) ++j;

    PlaceholderSpan span;
    span.start = i;
    span.end = j;
    span.kind = std::string(text.substr(i + 1, letters_end - i - 1));
    if (j > letters_end) {
      unsigned value = 0;
      auto [p, ec] = std::from_chars(text.data() + letters_end, text.data() + j, value);
      if (ec == std::errc{}) span.index = value;
    }
    span.raw = std::string(text.substr(i, j - i));
    spans.push_back(std::move(span));
    i = j;
  }
  return spans;
}

inline bool has_placeholders(std::string_view text) { return !detect_placeholders(text).empty(); }

// ---------------------------------------------------------------------------
// Length filter

struct LengthFilterPolicy {
  std::size_t min_words = 100;
  std::size_t max_words = 700;

  void validate() const {
    if (min_words == 0 || max_words == 0)
      throw ParamError("length filter bounds must be positive");
    if (min_words > max_words)
      throw ParamError("length filter min_words exceeds max_words");
  }

  bool admits(std::size_t words) const { return words >= min_words && words <= max_words; }
};

enum class DropReason { TooShort, TooLong };

inline std::string_view to_string(DropReason r) {
  return r == DropReason::TooShort ? "too_short" : "too_long";
}

template <class T>
struct Dropped {
  T item;
  DropReason reason;
};

template <class T>
struct FilterResult {
  std::vector<T> kept;
  std::vector<Dropped<T>> dropped;
};

/// Partitions items by an inclusive word-count window; order is preserved on both sides.
template <class T, class WordCount>
FilterResult<T> filter_by_length(std::vector<T> items, const LengthFilterPolicy& policy,
                                 WordCount&& word_count) {
  policy.validate();
  FilterResult<T> out;
  for (auto& item : items) {
    const std::size_t n = word_count(item);
    if (n < policy.min_words)
      out.dropped.push_back({std::move(item), DropReason::TooShort});
    else if (n > policy.max_words)
      out.dropped.push_back({std::move(item), DropReason::TooLong});
    else
      out.kept.push_back(std::move(item));
  }
  return out;
}

inline FilterResult<Essay> filter_by_length(std::vector<Essay> essays,
                                            const LengthFilterPolicy& policy = {}) {
  return filter_by_length(std::move(essays), policy,
                          [](const Essay& e) { return e.word_count; });
}

// ---------------------------------------------------------------------------
// Loading

enum class CorpusFormat { Tsv, Jsonl };

inline CorpusFormat parse_format(std::string_view name) {
  if (name == "tsv") return CorpusFormat::Tsv;
  if (name == "jsonl") return CorpusFormat::Jsonl;
  throw ConfigError("unknown corpus format: " + std::string(name) + " (expected tsv or jsonl)");
}

struct LoadResult {
  std::vector<Essay> essays;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      return fields;
    }
    fields.emplace_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

// Applies the encoding policy to one record: UTF-8 as-is, otherwise Latin-1.
inline std::string decode_record(std::string_view bytes, std::size_t line_no,
                                 std::vector<std::string>& warnings) {
  if (util::is_valid_utf8(bytes)) return std::string(bytes);
  warnings.push_back("line " + std::to_string(line_no) +
                     ": invalid UTF-8, decoded as Latin-1");
  return util::latin1_to_utf8(bytes);
}

inline void check_set(const Essay& e, std::size_t line_no, std::vector<std::string>& warnings) {
  if (e.essay_set < kMinEssaySet || e.essay_set > kMaxEssaySet)
    warnings.push_back("line " + std::to_string(line_no) + ": essay " + e.id + " has essay_set " +
                       std::to_string(e.essay_set) + " outside 1..8");
}

inline std::string strip_bom(std::string_view s) {
  if (s.size() >= 3 && s.substr(0, 3) == "\xEF\xBB\xBF") s.remove_prefix(3);
  return std::string(s);
}

inline LoadResult load_tsv(std::string_view content) {
  LoadResult result;
  const auto lines = util::split_lines(content);
  if (lines.empty()) throw SchemaError("missing header row");

  auto header = split_tabs(strip_bom(decode_record(lines[0], 1, result.warnings)));
  for (auto& h : header) h = std::string(util::trim(h));
  const auto column = [&](std::string_view name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("missing required column: " + std::string(name));
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto id_col = column("essay_id");
  const auto set_col = column("essay_set");
  const auto text_col = column("essay");

  std::set<std::string> seen;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::size_t line_no = ln + 1;
    if (util::trim(lines[ln]).empty()) continue;
    auto fields = split_tabs(decode_record(lines[ln], line_no, result.warnings));
    if (fields.size() < header.size()) {
      result.warnings.push_back("line " + std::to_string(line_no) + ": expected " +
                                std::to_string(header.size()) + " fields, got " +
                                std::to_string(fields.size()));
      fields.resize(header.size());
    }

    Essay e;
    e.id = std::string(util::trim(fields[id_col]));
    const auto set_field = util::trim(fields[set_col]);
    auto [p, ec] = std::from_chars(set_field.data(), set_field.data() + set_field.size(), e.essay_set);
    if (ec != std::errc{} || p != set_field.data() + set_field.size()) {
      result.warnings.push_back("line " + std::to_string(line_no) + ": unparseable essay_set '" +
                                std::string(set_field) + "'");
      e.essay_set = 0;
    }
    e.set_text(std::string(util::trim(fields[text_col])));
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == id_col || c == set_col || c == text_col || header[c].empty()) continue;
      auto value = util::trim(fields[c]);
      if (!value.empty()) e.meta[header[c]] = std::string(value);
    }
    if (!seen.insert(e.id).second)
      throw SchemaError("duplicate essay id '" + e.id + "' at line " + std::to_string(line_no));
    check_set(e, line_no, result.warnings);
    result.essays.push_back(std::move(e));
  }
  return result;
}

inline Essay essay_from_json(const nlohmann::json& j, std::size_t line_no) {
  const auto require = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key))
      throw SchemaError("line " + std::to_string(line_no) + ": missing required key: " + key);
    return j.at(key);
  };
  const auto& id = require("id");
  const auto& set = require("essay_set");
  const auto& text = require("text");
  if (!text.is_string())
    throw SchemaError("line " + std::to_string(line_no) + ": key text must be a string");
  if (!set.is_number_integer())
    throw SchemaError("line " + std::to_string(line_no) + ": key essay_set must be an integer");

  Essay e;
  e.id = id.is_string() ? id.get<std::string>() : id.dump();
  e.essay_set = set.get<int>();
  e.set_text(text.get<std::string>());
  if (j.contains("meta") && !j.at("meta").is_null()) {
    const auto& meta = j.at("meta");
    if (!meta.is_object())
      throw SchemaError("line " + std::to_string(line_no) + ": key meta must be an object");
    for (const auto& [k, v] : meta.items())
      e.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
  return e;
}

inline LoadResult load_jsonl(std::string_view content) {
  LoadResult result;
  const auto lines = util::split_lines(content);
  std::set<std::string> seen;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::size_t line_no = ln + 1;
    auto decoded = decode_record(lines[ln], line_no, result.warnings);
    if (ln == 0) decoded = strip_bom(decoded);
    if (util::trim(decoded).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(decoded);
    } catch (const nlohmann::json::parse_error& err) {
      throw SchemaError("line " + std::to_string(line_no) + ": invalid JSON: " + err.what());
    }
    if (!j.is_object())
      throw SchemaError("line " + std::to_string(line_no) + ": expected a JSON object");
    auto e = essay_from_json(j, line_no);
    if (!seen.insert(e.id).second)
      throw SchemaError("duplicate essay id '" + e.id + "' at line " + std::to_string(line_no));
    check_set(e, line_no, result.warnings);
    result.essays.push_back(std::move(e));
  }
  return result;
}

}  // namespace detail

inline LoadResult load_corpus_from_string(std::string_view content, CorpusFormat format) {
  return format == CorpusFormat::Tsv ? detail::load_tsv(content) : detail::load_jsonl(content);
}

/// Loads an essay corpus. Rows keep file order; set-range problems and
/// encoding fallbacks are reported as warnings, schema problems throw.
inline LoadResult load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  return load_corpus_from_string(util::read_file(path), format);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const Essay& e) {
  return nlohmann::json{{"id", e.id},
                        {"essay_set", e.essay_set},
                        {"text", e.text},
                        {"word_count", e.word_count},
                        {"meta", e.meta}};
}

inline std::string to_jsonl(const std::vector<Essay>& essays) {
  std::string out;
  for (const auto& e : essays) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Essay>& essays) {
  util::write_file_atomic(path, to_jsonl(essays));
}

}  // namespace syntaxforge::corpus
