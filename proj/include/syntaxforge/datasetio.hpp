#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "syntaxforge/corpus.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/feedback.hpp"
#include "syntaxforge/llmgateway.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::datasetio {

using json = nlohmann::json;

inline constexpr std::string_view kDatasetName = "essay-syntax-instruct";
inline constexpr std::string_view kDatasetVersion = "1";

// Task directive stored in every record of this dataset version.
inline constexpr std::string_view kInstruction =
    "Give syntax feedback on the following student essay. Report the errors in these categories: "
    "Misspelled Words, Conjunctions and Linking Phrases, Modifiers, Prepositions, Modal Verbs, "
    "Punctuation, Articles. Quote each error, give its correction and a short explanation, and "
    "write None for a category without errors.";

struct InstructionRecord {
  std::string instruction;
  std::string input;
  std::string output;
  std::map<std::string, std::string> meta;  // essay_id, essay_set, model, params_digest, prompt_version

  std::string id() const {
    auto it = meta.find("essay_id");
    return it == meta.end() ? std::string() : it->second;
  }

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

inline json to_json(const InstructionRecord& r) {
  return json{{"instruction", r.instruction}, {"input", r.input}, {"output", r.output}, {"meta", r.meta}};
}

inline InstructionRecord record_from_json(const json& j) {
  InstructionRecord r;
  r.instruction = j.at("instruction").get<std::string>();
  r.input = j.at("input").get<std::string>();
  r.output = j.at("output").get<std::string>();
  if (j.contains("meta"))
    for (const auto& [k, v] : j["meta"].items()) r.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
  return r;
}

/// Reasons a record breaks the dataset invariants; empty when valid.
inline std::vector<std::string> check_record(const InstructionRecord& r,
                                             const std::optional<corpus::LengthFilterPolicy>& policy = {}) {
  std::vector<std::string> problems;
  if (const auto spans = corpus::detect_placeholders(r.input); !spans.empty())
    problems.push_back("input contains placeholder " + spans.front().raw);
  try {
    feedback::parse_feedback(r.output);
  } catch (const ParseError& e) {
    problems.push_back(std::string("output does not parse: ") + e.what());
  }
  if (policy) {
    const auto words = corpus::count_words(r.input);
    if (!policy->admits(words))
      problems.push_back("input word count " + std::to_string(words) + " outside [" +
                         std::to_string(policy->min_words) + ", " + std::to_string(policy->max_words) + "]");
  }
  return problems;
}

enum class EmitMode { Strict, Lenient };

struct EmitResult {
  std::size_t written = 0;
  std::vector<std::string> warnings;
};

inline std::string to_jsonl(const std::vector<InstructionRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + '\n';
  return out;
}

/// Writes one JSON object per line with sorted keys. Strict mode rejects the
/// first invalid record (nothing is written); lenient mode writes everything
/// and reports the problems as warnings.
inline EmitResult emit_jsonl(const std::vector<InstructionRecord>& records, const std::filesystem::path& path,
                             EmitMode mode = EmitMode::Strict,
                             const std::optional<corpus::LengthFilterPolicy>& policy = {}) {
  EmitResult result;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& problem : check_record(records[i], policy)) {
      if (mode == EmitMode::Strict) throw RecordError(i, problem);
      result.warnings.push_back("record " + std::to_string(i) + ": " + problem);
    }
  }
  util::write_file_atomic(path, to_jsonl(records));
  result.written = records.size();
  return result;
}

inline std::vector<InstructionRecord> read_jsonl(const std::filesystem::path& path) {
  std::vector<InstructionRecord> records;
  const auto lines = util::split_lines(util::read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(lines[i])));
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Split

struct SplitSpec {
  std::size_t test_size = 300;
  std::uint64_t seed = 42;
};

template <class T>
struct Split {
  std::vector<T> train;
  std::vector<T> test;
};

namespace detail {

// First `k` positions of a seeded Fisher-Yates shuffle of 0..n-1, sorted.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(util::uniform_below(rng, n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
Split<T> partition(std::vector<T> items, const std::vector<bool>& in_test) {
  Split<T> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    (in_test[i] ? out.test : out.train).push_back(std::move(items[i]));
  return out;
}

}  // namespace detail

/// Seeded uniform split. Both sides keep the input's relative order.
template <class T>
Split<T> split(std::vector<T> records, const SplitSpec& spec) {
  if (spec.test_size > records.size())
    throw ParamError("test_size " + std::to_string(spec.test_size) + " exceeds record count " +
                     std::to_string(records.size()));
  std::vector<bool> in_test(records.size(), false);
  for (auto i : detail::sample_indices(records.size(), spec.test_size, spec.seed)) in_test[i] = true;
  return detail::partition(std::move(records), in_test);
}

/// Split stratified by `stratum(record)`: each stratum contributes test items
/// in proportion to its size (largest remainder), then each stratum is
/// sampled with its own derived seed.
template <class T, class Stratum>
Split<T> split_stratified(std::vector<T> records, const SplitSpec& spec, Stratum&& stratum) {
  if (spec.test_size > records.size())
    throw ParamError("test_size " + std::to_string(spec.test_size) + " exceeds record count " +
                     std::to_string(records.size()));
  if (records.empty()) return {};
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[stratum(records[i])].push_back(i);

  struct Quota {
    std::string key;
    std::size_t base;
    std::size_t remainder_num;  // fractional part * total
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [key, members] : groups) {
    const auto num = members.size() * spec.test_size;
    quotas.push_back({key, num / records.size(), num % records.size()});
    assigned += num / records.size();
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return quotas[a].remainder_num > quotas[b].remainder_num;
  });
  for (std::size_t k = 0; assigned < spec.test_size; ++k, ++assigned) ++quotas[order[k % order.size()]].base;

  std::vector<bool> in_test(records.size(), false);
  std::uint64_t salt = 0;
  for (const auto& q : quotas) {
    const auto& members = groups[q.key];
    for (auto local : detail::sample_indices(members.size(), q.base, spec.seed + 0x9E3779B97F4A7C15ULL * ++salt))
      in_test[members[local]] = true;
  }
  return detail::partition(std::move(records), in_test);
}

// ---------------------------------------------------------------------------
// Fine-tuning configuration

struct TrainConfig {
  std::string base_model;
  int lora_r = 32;
  int lora_alpha = 64;
  int epochs = 3;
  int total_batch_size = 16;
  double learning_rate = 3e-4;
  std::string schedule = "cosine";
  double warmup_ratio = 0.1;
  gateway::GenerationParams inference = gateway::inference_params();

  void validate() const {
    if (base_model.empty()) throw ParamError("base_model must not be empty");
    if (lora_r <= 0 || lora_alpha <= 0 || epochs <= 0 || total_batch_size <= 0)
      throw ParamError("train config integers must be positive");
    if (!(learning_rate > 0.0)) throw ParamError("learning_rate must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ParamError("warmup_ratio must be in [0, 1)");
    if (schedule.empty()) throw ParamError("schedule must not be empty");
    inference.validate();
  }
};

// Base models fine-tuned in the reference experiments.
inline const std::vector<std::string>& baseline_models() {
  static const std::vector<std::string> models = {"meta-llama/Llama-2-7b-chat-hf",
                                                  "meta-llama/Llama-2-13b-chat-hf",
                                                  "mistralai/Mistral-7B-Instruct-v0.2"};
  return models;
}

namespace detail {

inline int parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ParamError("override " + key + " expects an integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ParamError("override " + key + " expects a number, got '" + v + "'");
  return out;
}

}  // namespace detail

/// Flat `key=value` lines with sorted keys.
inline std::string serialize(const TrainConfig& c) {
  std::map<std::string, std::string> kv{
      {"base_model", c.base_model},
      {"epochs", std::to_string(c.epochs)},
      {"inference.temperature", util::format_plain(c.inference.temperature)},
      {"inference.top_p", util::format_plain(c.inference.top_p)},
      {"learning_rate", util::format_plain(c.learning_rate)},
      {"lora_alpha", std::to_string(c.lora_alpha)},
      {"lora_r", std::to_string(c.lora_r)},
      {"schedule", c.schedule},
      {"total_batch_size", std::to_string(c.total_batch_size)},
      {"warmup_ratio", util::format_plain(c.warmup_ratio)},
  };
  if (c.inference.top_k) kv["inference.top_k"] = std::to_string(*c.inference.top_k);
  if (c.inference.max_tokens) kv["inference.max_tokens"] = std::to_string(*c.inference.max_tokens);
  std::string out;
  for (const auto& [k, v] : kv) out += k + '=' + v + '\n';
  return out;
}

/// Defaults plus overrides. Unknown keys throw.
inline TrainConfig make_train_config(const std::string& base_model,
                                     const std::map<std::string, std::string>& overrides = {}) {
  TrainConfig c;
  c.base_model = base_model;
  for (const auto& [key, value] : overrides) {
    if (key == "lora_r") c.lora_r = detail::parse_int(key, value);
    else if (key == "lora_alpha") c.lora_alpha = detail::parse_int(key, value);
    else if (key == "epochs") c.epochs = detail::parse_int(key, value);
    else if (key == "total_batch_size") c.total_batch_size = detail::parse_int(key, value);
    else if (key == "learning_rate") c.learning_rate = detail::parse_real(key, value);
    else if (key == "schedule") c.schedule = value;
    else if (key == "warmup_ratio") c.warmup_ratio = detail::parse_real(key, value);
    else if (key == "inference.temperature") c.inference.temperature = detail::parse_real(key, value);
    else if (key == "inference.top_p") c.inference.top_p = detail::parse_real(key, value);
    else if (key == "inference.top_k") c.inference.top_k = detail::parse_int(key, value);
    else if (key == "inference.max_tokens") c.inference.max_tokens = detail::parse_int(key, value);
    else throw ParamError("unknown train config key: " + key);
  }
  c.validate();
  return c;
}

// "meta-llama/Llama-2-7b-chat-hf" -> "Llama-2-7b-chat-hf"
inline std::string config_file_stem(const std::string& base_model) {
  auto name = base_model.substr(base_model.find_last_of('/') == std::string::npos ? 0 : base_model.find_last_of('/') + 1);
  for (auto& ch : name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return name;
}

struct EmittedConfig {
  TrainConfig config;
  std::filesystem::path path;
};

/// Writes `<out_dir>/train_config.<model>.txt`.
inline EmittedConfig emit_train_config(const std::string& base_model,
                                       const std::map<std::string, std::string>& overrides,
                                       const std::filesystem::path& out_dir) {
  auto config = make_train_config(base_model, overrides);
  auto path = out_dir / ("train_config." + config_file_stem(base_model) + ".txt");
  util::write_file_atomic(path, serialize(config));
  return {std::move(config), std::move(path)};
}

// ---------------------------------------------------------------------------
// Manifest

struct Manifest {
  std::map<std::string, std::string> prompt_versions;
  corpus::LengthFilterPolicy filter;
  SplitSpec split;
  std::string split_strategy = "seeded_shuffle";  // or "stratified_by_essay_set"
  std::string test_set_policy = "fresh_seeded_draw";
  std::map<std::string, std::string> source_digests;  // file name -> sha256
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

inline json to_json(const Manifest& m) {
  return json{{"name", kDatasetName},
              {"version", kDatasetVersion},
              {"instruction", kInstruction},
              {"prompt_versions", m.prompt_versions},
              {"filter_policy", {{"min_words", m.filter.min_words}, {"max_words", m.filter.max_words}, {"inclusive", true}}},
              {"split", {{"test_size", m.split.test_size}, {"seed", m.split.seed}, {"strategy", m.split_strategy}}},
              {"test_set_policy", m.test_set_policy},
              {"source_digests", m.source_digests},
              {"counts", {{"train", m.train_count}, {"test", m.test_count}}}};
}

}  // namespace syntaxforge::datasetio
