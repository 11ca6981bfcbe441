#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ranges>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "syntaxforge/error.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::metrics {

struct TokenSequence {
  std::vector<std::string> tokens;
  std::string scheme;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline void require_same_scheme(const TokenSequence& a, const TokenSequence& b) {
  if (a.scheme != b.scheme)
    throw ParamError("token sequences come from different schemes: '" + a.scheme + "' vs '" +
                     b.scheme + "'");
}

// ---------------------------------------------------------------------------
// Tokenizers

namespace detail {

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

enum class CharClass { Space, WordChar, Punct };

inline CharClass classify(char32_t cp) {
  if (cp < 0x80) {
    const char c = static_cast<char>(cp);
    if (util::is_ascii_space(c)) return CharClass::Space;
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9'))
      return CharClass::WordChar;
    return CharClass::Punct;
  }
  if (cp == 0xA0 || cp == 0x2028 || cp == 0x2029 || cp == 0x3000 || (cp >= 0x2000 && cp <= 0x200B))
    return CharClass::Space;
  // Latin-1 symbols, general punctuation, CJK punctuation.
  if ((cp >= 0xA1 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 || (cp >= 0x2010 && cp <= 0x206F) ||
      (cp >= 0x3001 && cp <= 0x303F))
    return CharClass::Punct;
  return CharClass::WordChar;
}

}  // namespace detail

/// Default scheme: ASCII-lowercased maximal letter/digit runs, each other
/// non-space character a token of its own. Non-ASCII letters join words.
inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto cp = util::next_code_point(text, i);
    switch (detail::classify(cp)) {
      case detail::CharClass::WordChar:
        if (cp >= 'A' && cp <= 'Z')
          current.push_back(static_cast<char>(cp - 'A' + 'a'));
        else
          detail::append_utf8(current, cp);
        break;
      case detail::CharClass::Space:
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
        break;
      case detail::CharClass::Punct: {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
        std::string p;
        detail::append_utf8(p, cp);
        out.push_back(std::move(p));
        break;
      }
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && util::is_ascii_space(text[i])) ++i;
    const auto start = i;
    while (i < text.size() && !util::is_ascii_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

/// Byte-pair merging over code points, SentencePiece style: each
/// whitespace-delimited chunk is prefixed with U+2581 and merged greedily by
/// rank. The merges file holds one "left right" pair per line, best first;
/// lines starting with '#' are comments.
class BpeTokenizer {
 public:
  static BpeTokenizer from_merges(std::string_view merges_text) {
    BpeTokenizer t;
    std::size_t rank = 0;
    for (const auto& line : util::split_lines(merges_text)) {
      const auto s = util::trim(line);
      if (s.empty() || s.front() == '#') continue;
      const auto sp = s.find(' ');
      if (sp == std::string_view::npos || s.find(' ', sp + 1) != std::string_view::npos)
        throw InputError("bad merges line: " + std::string(s));
      t.ranks_.emplace(std::pair{std::string(s.substr(0, sp)), std::string(s.substr(sp + 1))}, rank++);
    }
    return t;
  }

  static BpeTokenizer from_merges_file(const std::filesystem::path& path) {
    return from_merges(util::read_file(path));
  }

  std::vector<std::string> operator()(std::string_view text) const {
    std::vector<std::string> out;
    for (const auto& chunk : whitespace_tokens(text)) {
      std::vector<std::string> symbols{"\xE2\x96\x81"};
      std::size_t i = 0;
      while (i < chunk.size()) {
        const auto start = i;
        util::next_code_point(chunk, i);
        symbols.emplace_back(chunk.substr(start, i - start));
      }
      merge(symbols);
      for (auto& s : symbols) out.push_back(std::move(s));
    }
    return out;
  }

  std::size_t merge_count() const { return ranks_.size(); }

 private:
  void merge(std::vector<std::string>& symbols) const {
    while (symbols.size() > 1) {
      std::size_t best_rank = static_cast<std::size_t>(-1), best_at = 0;
      for (std::size_t k = 0; k + 1 < symbols.size(); ++k) {
        auto it = ranks_.find({symbols[k], symbols[k + 1]});
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_at = k;
        }
      }
      if (best_rank == static_cast<std::size_t>(-1)) return;
      symbols[best_at] += symbols[best_at + 1];
      symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
    }
  }

  std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
};

class TokenizerRegistry {
 public:
  using Fn = std::function<std::vector<std::string>(std::string_view)>;

  TokenizerRegistry() {
    add("word", word_tokens);
    add("whitespace", whitespace_tokens);
  }

  void add(std::string name, Fn fn) {
    std::lock_guard lock(mutex_);
    schemes_[std::move(name)] = std::move(fn);
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return schemes_.count(name) > 0;
  }

  std::vector<std::string> names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [k, _] : schemes_) out.push_back(k);
    return out;
  }

  TokenSequence tokenize(std::string_view text, const std::string& scheme) const {
    Fn fn;
    {
      std::lock_guard lock(mutex_);
      auto it = schemes_.find(scheme);
      if (it == schemes_.end()) {
        std::string known;
        for (const auto& [k, _] : schemes_) known += (known.empty() ? "" : ", ") + k;
        throw ParamError("unknown tokenizer scheme '" + scheme + "'; registered: " + known);
      }
      fn = it->second;
    }
    return {fn(text), scheme};
  }

  static TokenizerRegistry& global() {
    static TokenizerRegistry registry;
    return registry;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, Fn> schemes_;
};

inline TokenSequence tokenize(std::string_view text, const std::string& scheme = "word") {
  return TokenizerRegistry::global().tokenize(text, scheme);
}

// ---------------------------------------------------------------------------
// Longest common subsequence

/// LCS length over any two random-access ranges of equality-comparable
/// elements. O(|a|·|b|) time, O(min(|a|,|b|)) space.
template <std::ranges::random_access_range A, std::ranges::random_access_range B>
std::size_t lcs_length(const A& a, const B& b) {
  const auto n = std::ranges::size(a);
  const auto m = std::ranges::size(b);
  if (n == 0 || m == 0) return 0;
  if (m > n) return lcs_length(b, a);  // keep the row over the shorter side
  std::vector<std::size_t> row(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    std::size_t diag = 0;  // row[j-1] from the previous iteration of i
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t above = row[j];
      if (a[i - 1] == b[j - 1])
        row[j] = diag + 1;
      else
        row[j] = std::max(row[j], row[j - 1]);
      diag = above;
    }
  }
  return row[m];
}

inline std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b) {
  require_same_scheme(a, b);
  return lcs_length(a.tokens, b.tokens);
}

// ---------------------------------------------------------------------------
// ROUGE

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static RougeScore from_pr(double p, double r) {
    return {p, r, p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0};
  }
  friend bool operator==(const RougeScore&, const RougeScore&) = default;
};

/// Count of n-grams keyed by their tokens.
template <class T>
std::map<std::vector<T>, std::size_t> ngram_counts(std::span<const T> tokens, std::size_t n) {
  std::map<std::vector<T>, std::size_t> counts;
  if (n == 0 || tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<T>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                            tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

/// Clipped n-gram overlap ROUGE-N.
template <class T>
RougeScore rouge_n(std::span<const T> candidate, std::span<const T> reference, std::size_t n) {
  if (n == 0) throw ParamError("rouge_n requires n >= 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, rc] : ref)
    if (auto it = cand.find(gram); it != cand.end()) overlap += std::min(rc, it->second);
  const std::size_t cand_total = candidate.size() >= n ? candidate.size() - n + 1 : 0;
  const std::size_t ref_total = reference.size() >= n ? reference.size() - n + 1 : 0;
  const double p = cand_total ? static_cast<double>(overlap) / static_cast<double>(cand_total) : 0.0;
  const double r = ref_total ? static_cast<double>(overlap) / static_cast<double>(ref_total) : 0.0;
  return RougeScore::from_pr(p, r);
}

inline RougeScore rouge_n(const TokenSequence& candidate, const TokenSequence& reference, std::size_t n) {
  require_same_scheme(candidate, reference);
  return rouge_n<std::string>(candidate.tokens, reference.tokens, n);
}

/// Sentence-level LCS ROUGE-L with beta = 1.
template <class T>
RougeScore rouge_l(std::span<const T> candidate, std::span<const T> reference) {
  if (candidate.empty() || reference.empty()) return {};
  const auto l = static_cast<double>(lcs_length(candidate, reference));
  return RougeScore::from_pr(l / static_cast<double>(candidate.size()),
                             l / static_cast<double>(reference.size()));
}

inline RougeScore rouge_l(const TokenSequence& candidate, const TokenSequence& reference) {
  require_same_scheme(candidate, reference);
  return rouge_l<std::string>(candidate.tokens, reference.tokens);
}

struct PairScores {
  RougeScore rouge1, rouge2, rougeL;
};

inline PairScores score_pair(std::string_view candidate, std::string_view reference,
                             const std::string& scheme = "word") {
  const auto c = tokenize(candidate, scheme);
  const auto r = tokenize(reference, scheme);
  return {rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r)};
}

struct CorpusRouge {
  RougeScore rouge1, rouge2, rougeL;  // arithmetic means over pairs
  std::size_t n_pairs = 0;
  std::string scheme;
};

/// Mean of per-pair precision, recall and F1. Pairs are scored independently
/// and summed in input order.
inline CorpusRouge corpus_rouge(std::span<const std::pair<std::string, std::string>> pairs,
                                const std::string& scheme = "word") {
  if (pairs.empty()) throw ParamError("corpus_rouge needs at least one pair");
  CorpusRouge out;
  out.scheme = scheme;
  out.n_pairs = pairs.size();
  const auto add = [](RougeScore& acc, const RougeScore& s) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
  };
  for (const auto& [cand, ref] : pairs) {
    const auto s = score_pair(cand, ref, scheme);
    add(out.rouge1, s.rouge1);
    add(out.rouge2, s.rouge2);
    add(out.rougeL, s.rougeL);
  }
  const double n = static_cast<double>(pairs.size());
  for (auto* s : {&out.rouge1, &out.rouge2, &out.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Length distributions

struct Histogram {
  std::size_t bucket_width = 1;
  std::map<std::size_t, std::size_t> counts;  // bucket start -> count
  std::size_t total = 0;
  std::string scheme;
};

inline Histogram token_length_histogram(std::span<const std::string> texts, const std::string& scheme,
                                        std::size_t bucket_width) {
  if (bucket_width == 0) throw ParamError("bucket_width must be >= 1");
  Histogram h;
  h.bucket_width = bucket_width;
  h.scheme = scheme;
  for (const auto& text : texts) {
    const auto len = tokenize(text, scheme).size();
    ++h.counts[len / bucket_width * bucket_width];
    ++h.total;
  }
  return h;
}

// ---------------------------------------------------------------------------
// CSV reports

inline std::string rouge_csv_header() {
  return "model,n_pairs,rouge1_p,rouge1_r,rouge1_f1,rouge2_p,rouge2_r,rouge2_f1,rougeL_p,rougeL_r,rougeL_f1\n";
}

inline std::string rouge_csv_row(std::string_view model, const CorpusRouge& s) {
  std::string row(model);
  row += ',' + std::to_string(s.n_pairs);
  for (const auto* r : {&s.rouge1, &s.rouge2, &s.rougeL})
    for (double v : {r->precision, r->recall, r->f1}) row += ',' + util::format_fixed(v, 6);
  return row + '\n';
}

inline std::string histogram_csv(const Histogram& h) {
  std::string out = "bucket_start,count\n";
  for (const auto& [start, count] : h.counts)
    out += std::to_string(start) + ',' + std::to_string(count) + '\n';
  return out;
}

}  // namespace syntaxforge::metrics
