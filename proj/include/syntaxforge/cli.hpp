#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "syntaxforge/annotation_service.hpp"
#include "syntaxforge/corpus.hpp"
#include "syntaxforge/datasetio.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/evalharness.hpp"
#include "syntaxforge/feedback.hpp"
#include "syntaxforge/http_backend.hpp"
#include "syntaxforge/llmgateway.hpp"
#include "syntaxforge/metrics.hpp"
#include "syntaxforge/promptkit.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitInput = 3;
inline constexpr int kExitGateway = 4;
inline constexpr int kExitPartial = 5;

inline constexpr std::string_view kExitCodeHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  configuration or parameter error\n"
    "  3  input data error (missing file, bad schema, unparseable record)\n"
    "  4  gateway error (every request of a stage failed)\n"
    "  5  partial failure (some requests failed; results were written)\n";

/// Maps the error hierarchy onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const InputError*>(&e)) return kExitInput;
  if (dynamic_cast<const GatewayError*>(&e)) return kExitGateway;
  return kExitFailure;
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  fs::path template_dir = promptkit::default_template_dir();
  std::optional<fs::path> cache_dir;
  std::optional<fs::path> mock_script;
  gateway::HttpEndpointConfig http;
  gateway::RetryPolicy retry;
  std::size_t max_in_flight = 4;
  std::string generator_model = "gpt-3.5-turbo-0125";
  gateway::GenerationParams scrub_params{0.3, 1.0, std::nullopt, std::nullopt};
  gateway::GenerationParams feedback_params{0.3, 1.0, std::nullopt, std::nullopt};
  gateway::GenerationParams eval_params = gateway::inference_params();
  corpus::LengthFilterPolicy filter;
  datasetio::SplitSpec split;
  std::uint64_t seed = 42;
  unsigned scrub_retries = 2;
  unsigned parse_retries = 1;

  void validate() const {
    if (!fs::is_directory(template_dir)) throw ConfigError("template_dir is not a directory: " + template_dir.string());
    for (auto name : {promptkit::kPlaceholderTemplateFile, promptkit::kFeedbackTemplateFile})
      if (!fs::exists(template_dir / name))
        throw ConfigError("template missing: " + (template_dir / name).string());
    if (mock_script && !fs::exists(*mock_script)) throw ConfigError("mock script not found: " + mock_script->string());
    if (max_in_flight == 0) throw ConfigError("max_in_flight must be >= 1");
    if (retry.max_attempts < 1) throw ConfigError("retry.max_attempts must be >= 1");
    if (generator_model.empty()) throw ConfigError("models.generator must not be empty");
    scrub_params.validate();
    feedback_params.validate();
    eval_params.validate();
    filter.validate();
  }
};

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key: " + where + (where.empty() ? "" : ".") + key);
  }
}

inline gateway::GenerationParams merge_params(gateway::GenerationParams base, const json& j, const std::string& where) {
  check_keys(j, {"temperature", "top_p", "top_k", "max_tokens"}, where);
  if (j.contains("temperature")) base.temperature = j["temperature"].get<double>();
  if (j.contains("top_p")) base.top_p = j["top_p"].get<double>();
  if (j.contains("top_k")) base.top_k = j["top_k"].is_null() ? std::nullopt : std::optional<int>(j["top_k"].get<int>());
  if (j.contains("max_tokens"))
    base.max_tokens = j["max_tokens"].is_null() ? std::nullopt : std::optional<int>(j["max_tokens"].get<int>());
  return base;
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

/// Reads a JSON config tree. Relative paths resolve against `base_dir`;
/// unknown keys are rejected.
inline PipelineConfig config_from_json(const json& j, const fs::path& base_dir = ".") {
  PipelineConfig c;
  try {
    detail::check_keys(j, {"template_dir", "cache_dir", "seed", "max_in_flight", "endpoint", "retry", "models",
                           "params", "filter", "split", "retries"},
                       "");
    if (j.contains("template_dir")) c.template_dir = detail::resolve(base_dir, j["template_dir"].get<std::string>());
    if (j.contains("cache_dir")) c.cache_dir = detail::resolve(base_dir, j["cache_dir"].get<std::string>());
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("max_in_flight")) c.max_in_flight = j["max_in_flight"].get<std::size_t>();
    if (j.contains("endpoint")) {
      const auto& e = j["endpoint"];
      detail::check_keys(e, {"mock_script", "base_url", "completions_path", "send_top_k", "timeout_seconds"},
                         "endpoint");
      if (e.contains("mock_script")) c.mock_script = detail::resolve(base_dir, e["mock_script"].get<std::string>());
      if (e.contains("base_url")) c.http.base_url = e["base_url"].get<std::string>();
      if (e.contains("completions_path")) c.http.completions_path = e["completions_path"].get<std::string>();
      if (e.contains("send_top_k")) c.http.send_top_k = e["send_top_k"].get<bool>();
      if (e.contains("timeout_seconds")) c.http.timeout_seconds = e["timeout_seconds"].get<int>();
    }
    if (j.contains("retry")) {
      const auto& r = j["retry"];
      detail::check_keys(r, {"max_attempts", "initial_backoff_ms", "multiplier"}, "retry");
      if (r.contains("max_attempts")) c.retry.max_attempts = r["max_attempts"].get<int>();
      if (r.contains("initial_backoff_ms"))
        c.retry.initial_backoff = std::chrono::milliseconds(r["initial_backoff_ms"].get<long>());
      if (r.contains("multiplier")) c.retry.multiplier = r["multiplier"].get<double>();
    }
    if (j.contains("models")) {
      detail::check_keys(j["models"], {"generator"}, "models");
      if (j["models"].contains("generator")) c.generator_model = j["models"]["generator"].get<std::string>();
    }
    if (j.contains("params")) {
      const auto& p = j["params"];
      detail::check_keys(p, {"scrub", "feedback", "inference"}, "params");
      if (p.contains("scrub")) c.scrub_params = detail::merge_params(c.scrub_params, p["scrub"], "params.scrub");
      if (p.contains("feedback"))
        c.feedback_params = detail::merge_params(c.feedback_params, p["feedback"], "params.feedback");
      if (p.contains("inference"))
        c.eval_params = detail::merge_params(c.eval_params, p["inference"], "params.inference");
    }
    if (j.contains("filter")) {
      detail::check_keys(j["filter"], {"min_words", "max_words"}, "filter");
      c.filter.min_words = j["filter"].value("min_words", c.filter.min_words);
      c.filter.max_words = j["filter"].value("max_words", c.filter.max_words);
    }
    if (j.contains("split")) {
      detail::check_keys(j["split"], {"test_size"}, "split");
      c.split.test_size = j["split"].value("test_size", c.split.test_size);
    }
    if (j.contains("retries")) {
      detail::check_keys(j["retries"], {"scrub", "parse"}, "retries");
      c.scrub_retries = j["retries"].value("scrub", c.scrub_retries);
      c.parse_retries = j["retries"].value("parse", c.parse_retries);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.split.seed = c.seed;
  return c;
}

inline PipelineConfig load_config(const std::optional<fs::path>& path) {
  if (!path) return {};
  json j;
  try {
    j = json::parse(util::read_file(*path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path->string() + " is not valid JSON: " + e.what());
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j, path->parent_path().empty() ? fs::path(".") : path->parent_path());
}

inline std::unique_ptr<gateway::Gateway> make_gateway(const PipelineConfig& c) {
  std::shared_ptr<gateway::Backend> backend;
  if (c.mock_script) {
    backend = gateway::MockBackend::from_script(*c.mock_script);
  } else {
    auto http = gateway::HttpEndpointConfig::from_environment(c.http);
    if (http.base_url.empty())
      throw ConfigError(std::string("no endpoint configured: set endpoint.mock_script or ") + gateway::kBaseUrlEnv);
    backend = std::make_shared<gateway::HttpBackend>(std::move(http));
  }
  gateway::GatewayOptions options;
  options.cache_dir = c.cache_dir;
  options.retry = c.retry;
  options.max_in_flight = c.max_in_flight;
  return std::make_unique<gateway::Gateway>(std::move(backend), std::move(options));
}

// ---------------------------------------------------------------------------
// Command plumbing

struct CommandResult {
  int exit_code = kExitOk;
  json summary = json::object();
  std::string report;  // human-readable lines for stdout
};

struct Exclusion {
  std::string id;
  std::string reason;
  std::string detail;
};

inline std::string exclusions_jsonl(const std::string& stage, const std::vector<Exclusion>& xs) {
  std::string out;
  for (const auto& x : xs) {
    json j{{"stage", stage}, {"id", x.id}, {"reason", x.reason}};
    if (!x.detail.empty()) j["detail"] = x.detail;
    out += j.dump() + '\n';
  }
  return out;
}

inline json reason_counts(const std::vector<Exclusion>& xs) {
  std::map<std::string, std::size_t> counts;
  for (const auto& x : xs) ++counts[x.reason];
  return counts;
}

inline fs::path sibling(const fs::path& out, std::string_view suffix) {
  return fs::path(out.string() + std::string(suffix));
}

inline fs::path lock_dir_for(const fs::path& out) {
  return out.has_parent_path() ? out.parent_path() : fs::path(".");
}

/// Writes `<out>.summary.json` and, when any exist, `<out>.excluded.jsonl`.
inline void write_stage_sidecars(const fs::path& out, const std::string& stage, const json& summary,
                                 const std::vector<Exclusion>& excluded) {
  util::write_file_atomic(sibling(out, ".summary.json"), summary.dump(2) + '\n');
  const auto log = sibling(out, ".excluded.jsonl");
  if (!excluded.empty())
    util::write_file_atomic(log, exclusions_jsonl(stage, excluded));
  else if (fs::exists(log))
    fs::remove(log);
}

inline std::string join(const std::vector<std::string>& xs, std::string_view sep) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += sep;
    out += x;
  }
  return out;
}

inline std::string params_digest(const gateway::GenerationParams& p) {
  return util::sha256_hex(gateway::params_to_json(p).dump()).substr(0, 16);
}

enum class Outcome { Accepted, Rejected, GatewayFailed };

struct Attempt {
  Outcome outcome = Outcome::Rejected;
  std::string content;  // last content seen
  std::string error;
  unsigned samples = 0;
};

/// Sends every request, then resends (with a bumped sample index) those whose
/// reply `accept` refuses, up to `retries` more times. Gateway failures end an
/// item immediately.
template <class Accept>
std::vector<Attempt> generate_with_retries(gateway::Gateway& gw, std::vector<gateway::ChatRequest> requests,
                                           unsigned retries, Accept&& accept) {
  std::vector<Attempt> out(requests.size());
  std::vector<std::size_t> pending(requests.size());
  for (std::size_t i = 0; i < pending.size(); ++i) pending[i] = i;

  for (unsigned round = 0; round <= retries && !pending.empty(); ++round) {
    std::vector<gateway::ChatRequest> batch;
    batch.reserve(pending.size());
    for (auto i : pending) {
      requests[i].sample = round;
      batch.push_back(requests[i]);
    }
    const auto results = gw.batch_complete(batch);
    std::vector<std::size_t> again;
    for (std::size_t k = 0; k < results.size(); ++k) {
      auto& a = out[pending[k]];
      a.samples = round + 1;
      if (!results[k].ok()) {
        a.outcome = Outcome::GatewayFailed;
        a.error = results[k].error;
        continue;
      }
      a.content = results[k].response->content;
      if (accept(a.content, a.error)) {
        a.outcome = Outcome::Accepted;
        a.error.clear();
      } else {
        a.outcome = Outcome::Rejected;
        again.push_back(pending[k]);
      }
    }
    pending = std::move(again);
  }
  return out;
}

inline json per_set_counts(const std::vector<corpus::Essay>& essays) {
  std::map<std::string, std::size_t> counts;
  for (const auto& e : essays) ++counts[std::to_string(e.essay_set)];
  return counts;
}

inline std::vector<corpus::Essay> read_essays(const fs::path& path) {
  return corpus::load_corpus(path, corpus::CorpusFormat::Jsonl).essays;
}

// ---------------------------------------------------------------------------
// ingest

struct IngestOptions {
  fs::path input;
  std::optional<std::string> format;  // tsv | jsonl; inferred from the extension otherwise
  fs::path out;
  bool dry_run = false;
};

inline corpus::CorpusFormat infer_format(const fs::path& p, const std::optional<std::string>& explicit_format) {
  if (explicit_format) {
    try {
      return corpus::parse_format(*explicit_format);
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
  }
  return p.extension() == ".jsonl" ? corpus::CorpusFormat::Jsonl : corpus::CorpusFormat::Tsv;
}

inline CommandResult ingest_stage(const IngestOptions& o, std::vector<corpus::Essay>* essays_out = nullptr) {
  auto loaded = corpus::load_corpus(o.input, infer_format(o.input, o.format));
  std::size_t placeholder_total = 0, essays_with = 0;
  std::map<std::string, std::size_t> by_kind;
  for (const auto& e : loaded.essays) {
    const auto spans = corpus::detect_placeholders(e.text);
    placeholder_total += spans.size();
    if (!spans.empty()) ++essays_with;
    for (const auto& s : spans) ++by_kind[s.entity_kind()];
  }
  CommandResult r;
  r.summary = {{"stage", "ingest"},
               {"essays", loaded.essays.size()},
               {"per_set", per_set_counts(loaded.essays)},
               {"placeholders", {{"total", placeholder_total}, {"essays_with", essays_with}, {"by_kind", by_kind}}},
               {"warnings", loaded.warnings}};
  std::ostringstream os;
  os << loaded.essays.size() << " essays\n";
  for (const auto& [set, n] : r.summary["per_set"].items()) os << "  set " << set << ": " << n.get<std::size_t>() << '\n';
  os << placeholder_total << " placeholders in " << essays_with << " essays\n";
  for (const auto& w : loaded.warnings) os << "warning: " << w << '\n';
  r.report = os.str();
  if (!o.dry_run) {
    corpus::write_jsonl(o.out, loaded.essays);
    write_stage_sidecars(o.out, "ingest", r.summary, {});
  }
  if (essays_out) *essays_out = std::move(loaded.essays);
  return r;
}

// ---------------------------------------------------------------------------
// scrub

struct StageOptions {
  fs::path input;
  fs::path out;
  bool dry_run = false;
};

inline CommandResult scrub_stage(const StageOptions& o, const PipelineConfig& c,
                                 std::unique_ptr<gateway::Gateway>* gw_holder = nullptr) {
  auto essays = read_essays(o.input);
  const auto tpl = promptkit::load_template(c.template_dir / promptkit::kPlaceholderTemplateFile);

  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < essays.size(); ++i)
    if (corpus::has_placeholders(essays[i].text)) targets.push_back(i);

  CommandResult r;
  if (o.dry_run) {
    r.summary = {{"stage", "scrub"}, {"input", essays.size()}, {"with_placeholders", targets.size()},
                 {"dry_run", true}};
    r.report = std::to_string(essays.size()) + " essays, " + std::to_string(targets.size()) +
               " would be sent for placeholder replacement\n";
    return r;
  }

  std::vector<gateway::ChatRequest> requests;
  for (auto i : targets)
    requests.push_back({c.generator_model, promptkit::render(tpl, {{"essay", essays[i].text}}).messages,
                        c.scrub_params});

  std::unique_ptr<gateway::Gateway> local;
  auto& gw_ptr = gw_holder ? *gw_holder : local;
  if (!gw_ptr && !targets.empty()) gw_ptr = make_gateway(c);

  std::vector<Attempt> attempts;
  if (!targets.empty())
    attempts = generate_with_retries(*gw_ptr, std::move(requests), c.scrub_retries,
                                     [](const std::string& text, std::string& why) {
                                       if (util::trim(text).empty()) {
                                         why = "empty_response";
                                         return false;
                                       }
                                       if (const auto spans = corpus::detect_placeholders(text); !spans.empty()) {
                                         why = "unresolved_placeholders";
                                         return false;
                                       }
                                       return true;
                                     });

  std::vector<Exclusion> excluded;
  std::set<std::size_t> drop;
  std::size_t gateway_failures = 0, replaced = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    auto& essay = essays[targets[k]];
    const auto& a = attempts[k];
    if (a.outcome == Outcome::Accepted) {
      essay.set_text(std::string(util::trim(a.content)));
      ++replaced;
      continue;
    }
    drop.insert(targets[k]);
    if (a.outcome == Outcome::GatewayFailed) {
      ++gateway_failures;
      excluded.push_back({essay.id, "gateway_error", a.error});
    } else {
      std::string detail = "still present after " + std::to_string(a.samples) + " attempts";
      if (a.error == "unresolved_placeholders") {
        std::vector<std::string> raws;
        for (const auto& s : corpus::detect_placeholders(a.content)) raws.push_back(s.raw);
        detail += ": " + join(raws, ", ");
      } else {
        detail = "empty response after " + std::to_string(a.samples) + " attempts";
      }
      excluded.push_back({essay.id, a.error, detail});
    }
  }
  if (!targets.empty() && gateway_failures == targets.size())
    throw GatewayError("scrub: every placeholder request failed; first error: " + excluded.front().detail);

  std::vector<corpus::Essay> kept;
  for (std::size_t i = 0; i < essays.size(); ++i)
    if (!drop.count(i)) kept.push_back(std::move(essays[i]));

  r.summary = {{"stage", "scrub"},
               {"input", essays.size()},
               {"with_placeholders", targets.size()},
               {"replaced", replaced},
               {"passed_through", essays.size() - targets.size()},
               {"output", kept.size()},
               {"excluded", reason_counts(excluded)}};
  r.report = std::to_string(kept.size()) + " essays written, " + std::to_string(replaced) + " scrubbed, " +
             std::to_string(excluded.size()) + " excluded\n";
  corpus::write_jsonl(o.out, kept);
  write_stage_sidecars(o.out, "scrub", r.summary, excluded);
  if (gateway_failures > 0) r.exit_code = kExitPartial;
  return r;
}

// ---------------------------------------------------------------------------
// genfeedback

inline CommandResult genfeedback_stage(const StageOptions& o, const PipelineConfig& c,
                                       std::unique_ptr<gateway::Gateway>* gw_holder = nullptr) {
  const auto essays = read_essays(o.input);
  const auto tpl = promptkit::load_template(c.template_dir / promptkit::kFeedbackTemplateFile);

  std::vector<Exclusion> excluded;
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < essays.size(); ++i) {
    if (const auto spans = corpus::detect_placeholders(essays[i].text); !spans.empty())
      excluded.push_back({essays[i].id, "placeholder_in_input", spans.front().raw});
    else
      targets.push_back(i);
  }

  CommandResult r;
  if (o.dry_run) {
    r.summary = {{"stage", "genfeedback"}, {"input", essays.size()}, {"requests", targets.size()},
                 {"excluded", reason_counts(excluded)}, {"dry_run", true}};
    r.report = std::to_string(targets.size()) + " essays would be sent for feedback, " +
               std::to_string(excluded.size()) + " excluded\n";
    return r;
  }

  std::vector<gateway::ChatRequest> requests;
  for (auto i : targets)
    requests.push_back({c.generator_model, promptkit::render(tpl, {{"essay", essays[i].text}}).messages,
                        c.feedback_params});

  std::unique_ptr<gateway::Gateway> local;
  auto& gw_ptr = gw_holder ? *gw_holder : local;
  if (!gw_ptr && !targets.empty()) gw_ptr = make_gateway(c);

  std::vector<Attempt> attempts;
  if (!targets.empty())
    attempts = generate_with_retries(*gw_ptr, std::move(requests), c.parse_retries,
                                     [](const std::string& text, std::string& why) {
                                       try {
                                         feedback::parse_feedback(text);
                                         return true;
                                       } catch (const ParseError& e) {
                                         why = e.what();
                                         return false;
                                       }
                                     });

  std::vector<datasetio::InstructionRecord> records;
  std::vector<feedback::FeedbackDocument> docs;
  std::size_t gateway_failures = 0, items_total = 0, items_valid = 0, parse_warnings = 0;
  std::map<std::string, std::size_t> flag_counts;
  for (auto f : {feedback::ValidationFlag::QuoteNotFound, feedback::ValidationFlag::CorrectionIdentical,
                 feedback::ValidationFlag::EmptyField})
    flag_counts[std::string(feedback::to_string(f))] = 0;

  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& essay = essays[targets[k]];
    const auto& a = attempts[k];
    if (a.outcome == Outcome::GatewayFailed) {
      ++gateway_failures;
      excluded.push_back({essay.id, "gateway_error", a.error});
      continue;
    }
    if (a.outcome == Outcome::Rejected) {
      excluded.push_back({essay.id, "parse_error", a.error});
      continue;
    }
    auto doc = feedback::parse_feedback(a.content);
    const auto report = feedback::validate_feedback(essay, doc);
    items_total += doc.items.size();
    items_valid += report.valid_items;
    parse_warnings += doc.parse_warnings.size();
    for (const auto& [_, flag] : report.flagged) ++flag_counts[std::string(feedback::to_string(flag))];

    datasetio::InstructionRecord rec;
    rec.instruction = std::string(datasetio::kInstruction);
    rec.input = essay.text;
    rec.output = feedback::serialize(doc);
    rec.meta = {{"essay_id", essay.id},
                {"essay_set", std::to_string(essay.essay_set)},
                {"model", c.generator_model},
                {"params_digest", params_digest(c.feedback_params)},
                {"prompt_version", tpl.name + "@" + tpl.version}};
    records.push_back(std::move(rec));
    docs.push_back(std::move(doc));
  }
  if (!targets.empty() && gateway_failures == targets.size())
    throw GatewayError("genfeedback: every feedback request failed; first error: " + excluded.back().detail);

  const auto hist = feedback::category_histogram(docs);
  r.summary = {{"stage", "genfeedback"},
               {"input", essays.size()},
               {"emitted", records.size()},
               {"excluded", reason_counts(excluded)},
               {"category_histogram", feedback::to_json(hist)},
               {"validation",
                {{"items", items_total}, {"valid_items", items_valid}, {"flags", flag_counts},
                 {"parse_warnings", parse_warnings}}},
               {"prompt_version", tpl.name + "@" + tpl.version},
               {"model", c.generator_model}};
  r.report = std::to_string(records.size()) + " records emitted, " + std::to_string(excluded.size()) +
             " excluded; " + std::to_string(items_valid) + "/" + std::to_string(items_total) +
             " feedback items validated against their essays\n";
  datasetio::emit_jsonl(records, o.out, datasetio::EmitMode::Strict);
  util::write_file_atomic(sibling(o.out, ".histogram.json"), feedback::to_json(hist).dump(2) + '\n');
  write_stage_sidecars(o.out, "genfeedback", r.summary, excluded);
  if (gateway_failures > 0) r.exit_code = kExitPartial;
  return r;
}

// ---------------------------------------------------------------------------
// filter

enum class DataKind { Essays, Records };

inline DataKind detect_kind(const fs::path& path) {
  for (const auto& line : util::split_lines(util::read_file(path))) {
    if (util::trim(line).empty()) continue;
    try {
      return json::parse(line).contains("instruction") ? DataKind::Records : DataKind::Essays;
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": first line is not JSON: " + e.what());
    }
  }
  return DataKind::Essays;
}

inline CommandResult filter_stage(const StageOptions& o, const PipelineConfig& c) {
  c.filter.validate();
  const auto kind = detect_kind(o.input);
  std::vector<Exclusion> excluded;
  std::size_t input = 0, kept_count = 0;
  std::string payload;

  const auto note = [&](const std::string& id, corpus::DropReason why, std::size_t words) {
    excluded.push_back({id, std::string(corpus::to_string(why)), std::to_string(words) + " words"});
  };
  if (kind == DataKind::Essays) {
    auto essays = read_essays(o.input);
    input = essays.size();
    auto res = corpus::filter_by_length(std::move(essays), c.filter);
    for (const auto& d : res.dropped) note(d.item.id, d.reason, d.item.word_count);
    kept_count = res.kept.size();
    payload = corpus::to_jsonl(res.kept);
  } else {
    auto records = datasetio::read_jsonl(o.input);
    input = records.size();
    auto res = corpus::filter_by_length(std::move(records), c.filter, [](const datasetio::InstructionRecord& r) {
      return corpus::count_words(r.input);
    });
    for (const auto& d : res.dropped) note(d.item.id(), d.reason, corpus::count_words(d.item.input));
    kept_count = res.kept.size();
    payload = datasetio::to_jsonl(res.kept);
  }

  CommandResult r;
  r.summary = {{"stage", "filter"},
               {"kind", kind == DataKind::Essays ? "essays" : "records"},
               {"policy", {{"min_words", c.filter.min_words}, {"max_words", c.filter.max_words}, {"inclusive", true}}},
               {"input", input},
               {"kept", kept_count},
               {"excluded", reason_counts(excluded)}};
  r.report = std::to_string(kept_count) + " of " + std::to_string(input) + " kept within [" +
             std::to_string(c.filter.min_words) + ", " + std::to_string(c.filter.max_words) + "] words\n";
  if (!o.dry_run) {
    util::write_file_atomic(o.out, payload);
    write_stage_sidecars(o.out, "filter", r.summary, excluded);
  }
  return r;
}

// ---------------------------------------------------------------------------
// split

struct SplitOptions {
  fs::path input;
  fs::path out_dir;
  std::optional<std::size_t> test_size;
  std::optional<std::uint64_t> seed;
  bool stratify = false;
  bool dry_run = false;
};

inline CommandResult split_stage(const SplitOptions& o, const PipelineConfig& c,
                                 const std::map<std::string, std::string>& extra_prompt_versions = {}) {
  const auto records = datasetio::read_jsonl(o.input);
  datasetio::SplitSpec spec = c.split;
  if (o.test_size) spec.test_size = *o.test_size;
  if (o.seed) spec.seed = *o.seed;

  const auto parts = o.stratify ? datasetio::split_stratified(records, spec,
                                                              [](const datasetio::InstructionRecord& r) {
                                                                auto it = r.meta.find("essay_set");
                                                                return it == r.meta.end() ? std::string() : it->second;
                                                              })
                                : datasetio::split(records, spec);

  datasetio::Manifest m;
  m.prompt_versions = extra_prompt_versions;
  std::set<std::string> versions;
  for (const auto& r : records)
    if (auto it = r.meta.find("prompt_version"); it != r.meta.end()) versions.insert(it->second);
  if (!versions.empty()) m.prompt_versions["feedback"] = join({versions.begin(), versions.end()}, ",");
  m.filter = c.filter;
  m.split = spec;
  m.split_strategy = o.stratify ? "stratified_by_essay_set" : "seeded_shuffle";
  m.source_digests[o.input.filename().string()] = util::sha256_hex(util::read_file(o.input));
  m.train_count = parts.train.size();
  m.test_count = parts.test.size();

  CommandResult r;
  r.summary = {{"stage", "split"},
               {"input", records.size()},
               {"train", parts.train.size()},
               {"test", parts.test.size()},
               {"seed", spec.seed},
               {"strategy", m.split_strategy}};
  r.report = "train " + std::to_string(parts.train.size()) + ", test " + std::to_string(parts.test.size()) + '\n';
  if (!o.dry_run) {
    datasetio::emit_jsonl(parts.train, o.out_dir / "train.jsonl", datasetio::EmitMode::Lenient);
    datasetio::emit_jsonl(parts.test, o.out_dir / "test.jsonl", datasetio::EmitMode::Lenient);
    util::write_file_atomic(o.out_dir / "manifest.json", datasetio::to_json(m).dump(2) + '\n');
    util::write_file_atomic(o.out_dir / "split.summary.json", r.summary.dump(2) + '\n');
  }
  return r;
}

// ---------------------------------------------------------------------------
// stats

struct StatsOptions {
  fs::path input;
  fs::path out;  // histogram CSV
  std::string scheme = "word";
  std::size_t bucket_width = 50;
  std::optional<fs::path> merges;  // BPE merges file, registered as scheme "bpe"
  std::string field;               // text | input | output; defaults by data kind
  bool dry_run = false;
};

inline CommandResult stats_command(const StatsOptions& o) {
  auto& registry = metrics::TokenizerRegistry::global();
  if (o.merges) {
    auto bpe = std::make_shared<metrics::BpeTokenizer>(metrics::BpeTokenizer::from_merges_file(*o.merges));
    registry.add("bpe", [bpe](std::string_view text) { return (*bpe)(text); });
  }
  if (!registry.contains(o.scheme))
    throw ConfigError("unknown tokenization scheme '" + o.scheme + "'; registered: " + join(registry.names(), ", "));

  const auto kind = detect_kind(o.input);
  std::string field = o.field;
  std::vector<std::string> texts;
  if (kind == DataKind::Essays) {
    if (field.empty()) field = "text";
    if (field != "text") throw ConfigError("essay files only have the 'text' field");
    for (auto& e : read_essays(o.input)) texts.push_back(std::move(e.text));
  } else {
    if (field.empty()) field = "output";
    if (field != "input" && field != "output") throw ConfigError("record field must be 'input' or 'output'");
    for (auto& rec : datasetio::read_jsonl(o.input)) texts.push_back(field == "input" ? rec.input : rec.output);
  }
  const auto h = metrics::token_length_histogram(texts, o.scheme, o.bucket_width);

  CommandResult r;
  r.summary = {{"stage", "stats"},   {"records", h.total},        {"scheme", o.scheme},
               {"field", field},     {"bucket_width", h.bucket_width}};
  std::ostringstream os;
  os << h.total << " texts, field " << field << ", scheme " << o.scheme << '\n';
  for (const auto& [start, count] : h.counts)
    os << "  " << start << "-" << (start + h.bucket_width - 1) << ": " << count << '\n';
  r.report = os.str();
  if (!o.dry_run) {
    util::write_file_atomic(o.out, metrics::histogram_csv(h));
    util::write_file_atomic(sibling(o.out, ".summary.json"), r.summary.dump(2) + '\n');
  }
  return r;
}

// ---------------------------------------------------------------------------
// rouge / eval / compare

inline json generation_to_json(const std::string& model, const evalharness::GeneratedItem& item) {
  json j{{"model", model}, {"item_id", item.item_id}, {"text", nullptr}};
  if (item.text) j["text"] = *item.text;
  if (!item.error.empty()) j["error"] = item.error;
  return j;
}

inline std::string generations_jsonl(const evalharness::GenerationRun& run) {
  std::string out;
  for (const auto& [model, items] : run)
    for (const auto& item : items) out += generation_to_json(model, item).dump() + '\n';
  return out;
}

inline evalharness::GenerationRun read_generations(const fs::path& path) {
  evalharness::GenerationRun run;
  const auto lines = util::split_lines(util::read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      const auto j = json::parse(lines[i]);
      evalharness::GeneratedItem item;
      item.item_id = j.at("item_id").get<std::string>();
      if (!j.at("text").is_null()) item.text = j["text"].get<std::string>();
      item.error = j.value("error", "");
      run[j.at("model").get<std::string>()].push_back(std::move(item));
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  if (run.empty()) throw InputError(path.string() + " has no generations");
  return run;
}

inline std::map<std::string, std::string> references_of(const std::vector<datasetio::InstructionRecord>& records) {
  std::map<std::string, std::string> refs;
  for (std::size_t i = 0; i < records.size(); ++i) refs[evalharness::item_id_of(records[i], i)] = records[i].output;
  return refs;
}

struct RougeOptions {
  fs::path candidates;  // generations JSONL
  fs::path references;  // instruction records JSONL
  std::optional<fs::path> out;
  std::string scheme = "word";
  bool dry_run = false;
};

inline json rouge_summary(const std::vector<evalharness::ModelScore>& scores) {
  json models = json::object();
  for (const auto& s : scores)
    models[s.model] = {{"rouge1", evalharness::to_json(s.rouge.rouge1)},
                       {"rouge2", evalharness::to_json(s.rouge.rouge2)},
                       {"rougeL", evalharness::to_json(s.rouge.rougeL)},
                       {"n_pairs", s.rouge.n_pairs},
                       {"excluded", s.excluded}};
  return models;
}

inline CommandResult rouge_command(const RougeOptions& o) {
  const auto run = read_generations(o.candidates);
  const auto scores = evalharness::score_run(run, references_of(datasetio::read_jsonl(o.references)), o.scheme);
  CommandResult r;
  r.summary = {{"stage", "rouge"}, {"scheme", o.scheme}, {"models", rouge_summary(scores)}};
  r.report = evalharness::render_rouge_table(scores);
  if (o.out && !o.dry_run) {
    util::write_file_atomic(*o.out, evalharness::rouge_table_csv(scores));
    util::write_file_atomic(sibling(*o.out, ".summary.json"), r.summary.dump(2) + '\n');
  }
  return r;
}

struct EvalOptions {
  fs::path test_set;
  std::vector<std::string> models;
  fs::path out_dir;
  std::optional<fs::path> ratings;
  std::optional<std::size_t> limit;
  std::string scheme = "word";
  bool dry_run = false;
};

inline CommandResult eval_command(const EvalOptions& o, const PipelineConfig& c,
                                  std::unique_ptr<gateway::Gateway>* gw_holder = nullptr) {
  auto test = datasetio::read_jsonl(o.test_set);
  if (o.limit && *o.limit < test.size()) test.resize(*o.limit);
  if (o.models.empty()) throw ConfigError("eval needs at least one --model");
  if (test.empty()) throw InputError("test set " + o.test_set.string() + " is empty");

  CommandResult r;
  if (o.dry_run) {
    r.summary = {{"stage", "eval"}, {"items", test.size()}, {"models", o.models},
                 {"requests", test.size() * o.models.size()}, {"dry_run", true}};
    r.report = std::to_string(test.size() * o.models.size()) + " generation requests would be sent\n";
    return r;
  }

  const auto tpl = promptkit::load_template(c.template_dir / promptkit::kFeedbackTemplateFile);
  std::unique_ptr<gateway::Gateway> local;
  auto& gw_ptr = gw_holder ? *gw_holder : local;
  if (!gw_ptr) gw_ptr = make_gateway(c);

  const auto run = evalharness::run_generation(o.models, test, *gw_ptr, tpl, c.eval_params);
  const auto scores = evalharness::score_run(run, references_of(test), o.scheme);

  evalharness::EvalFragment fragment;
  for (const auto& s : scores) fragment.rouge[s.model] = s.rouge;
  std::string ratings_report;
  if (o.ratings) {
    const auto ratings = evalharness::read_ratings_jsonl(*o.ratings);
    fragment.ratings = evalharness::aggregate_ratings(ratings);
    ratings_report = evalharness::render_rating_table(fragment.ratings);
    util::write_file_atomic(o.out_dir / "ratings.csv", evalharness::rating_table_csv(fragment.ratings));
  }

  std::string items;
  std::size_t failures = 0;
  for (const auto& [model, generated] : run)
    for (std::size_t i = 0; i < generated.size(); ++i) {
      if (!generated[i].text) {
        ++failures;
        continue;
      }
      items += json{{"item_id", generated[i].item_id}, {"essay", test[i].input}, {"feedback", *generated[i].text},
                    {"model_id", model}}
                   .dump() +
               '\n';
    }

  util::write_file_atomic(o.out_dir / "generations.jsonl", generations_jsonl(run));
  util::write_file_atomic(o.out_dir / "annotation_items.jsonl", items);
  util::write_file_atomic(o.out_dir / "rouge.csv", evalharness::rouge_table_csv(scores));
  util::write_file_atomic(o.out_dir / "fragment.json", evalharness::to_json(fragment).dump(2) + '\n');

  r.summary = {{"stage", "eval"},
               {"items", test.size()},
               {"scheme", o.scheme},
               {"failures", failures},
               {"models", rouge_summary(scores)},
               {"params", gateway::params_to_json(c.eval_params)}};
  util::write_file_atomic(o.out_dir / "eval.summary.json", r.summary.dump(2) + '\n');
  r.report = evalharness::render_rouge_table(scores) + ratings_report;
  if (failures > 0) r.exit_code = kExitPartial;
  return r;
}

struct CompareOptions {
  fs::path base;
  fs::path finetuned;
  std::optional<fs::path> out;
  bool dry_run = false;
};

inline evalharness::EvalFragment read_fragment(const fs::path& path) {
  try {
    return evalharness::fragment_from_json(json::parse(util::read_file(path)));
  } catch (const json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

inline CommandResult compare_command(const CompareOptions& o) {
  const auto deltas = evalharness::compare_runs(read_fragment(o.base), read_fragment(o.finetuned));
  CommandResult r;
  json models = json::object();
  for (const auto& d : deltas) {
    json m = json::object();
    if (d.rouge_f1)
      m["rouge_f1"] = {{"rouge1", (*d.rouge_f1)[0]}, {"rouge2", (*d.rouge_f1)[1]}, {"rougeL", (*d.rouge_f1)[2]}};
    if (d.grade_hundredths) {
      json g = json::object();
      for (auto grade : evalharness::kAllGrades)
        g[std::string(evalharness::to_string(grade))] =
            static_cast<double>((*d.grade_hundredths)[evalharness::index_of(grade)]) / 100.0;
      m["grade_points"] = g;
    }
    models[d.model] = m;
  }
  r.summary = {{"stage", "compare"}, {"models", models}};
  r.report = evalharness::render_delta_table(deltas);
  if (o.out && !o.dry_run) util::write_file_atomic(*o.out, r.summary.dump(2) + '\n');
  return r;
}

// ---------------------------------------------------------------------------
// train-config

struct TrainConfigOptions {
  std::vector<std::string> models;  // defaults to the three baselines
  std::vector<std::string> sets;    // key=value overrides
  fs::path out_dir;
  bool dry_run = false;
};

inline std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& sets) {
  std::map<std::string, std::string> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ParamError("override must be key=value: " + s);
    out[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return out;
}

inline CommandResult train_config_command(const TrainConfigOptions& o) {
  const auto overrides = parse_overrides(o.sets);
  const auto& models = o.models.empty() ? datasetio::baseline_models() : o.models;
  CommandResult r;
  json files = json::object();
  for (const auto& model : models) {
    if (o.dry_run) {
      const auto cfg = datasetio::make_train_config(model, overrides);
      r.report += "would write train_config." + datasetio::config_file_stem(model) + ".txt\n";
      files[model] = "train_config." + datasetio::config_file_stem(model) + ".txt";
      continue;
    }
    const auto emitted = datasetio::emit_train_config(model, overrides, o.out_dir);
    files[model] = emitted.path.filename().string();
    r.report += emitted.path.string() + '\n';
  }
  r.summary = {{"stage", "train-config"}, {"files", files}, {"overrides", overrides}};
  if (!o.dry_run) util::write_file_atomic(o.out_dir / "train_config.summary.json", r.summary.dump(2) + '\n');
  return r;
}

// ---------------------------------------------------------------------------
// run: ingest -> scrub -> genfeedback -> filter -> split

struct RunOptions {
  fs::path corpus;
  std::optional<std::string> format;
  fs::path out_dir;
  bool filter_first = false;
  bool stratify = false;
  bool dry_run = false;
};

inline CommandResult run_pipeline(const RunOptions& o, PipelineConfig c,
                                  std::unique_ptr<gateway::Gateway>* gw_holder = nullptr) {
  if (!c.cache_dir) c.cache_dir = o.out_dir / "cache";
  const auto& d = o.out_dir;
  CommandResult r;
  json stages = json::object();
  int exit_code = kExitOk;
  const auto absorb = [&](const std::string& name, const CommandResult& s) {
    stages[name] = s.summary;
    r.report += "[" + name + "] " + s.report;
    exit_code = std::max(exit_code, s.exit_code);
  };

  if (o.dry_run) {
    absorb("ingest", ingest_stage({o.corpus, o.format, d / "essays.jsonl", true}));
    r.summary = {{"stages", stages}, {"dry_run", true}};
    r.report += "dry run: later stages depend on gateway output and were not simulated\n";
    return r;
  }

  std::unique_ptr<gateway::Gateway> local;
  auto& gw = gw_holder ? *gw_holder : local;
  absorb("ingest", ingest_stage({o.corpus, o.format, d / "essays.jsonl", false}));
  fs::path essays = d / "essays.jsonl";
  if (o.filter_first) {
    absorb("filter_essays", filter_stage({essays, d / "essays.filtered.jsonl", false}, c));
    essays = d / "essays.filtered.jsonl";
  }
  absorb("scrub", scrub_stage({essays, d / "scrubbed.jsonl", false}, c, &gw));
  absorb("genfeedback", genfeedback_stage({d / "scrubbed.jsonl", d / "records.jsonl", false}, c, &gw));
  fs::path records = d / "records.jsonl";
  if (!o.filter_first) {
    absorb("filter", filter_stage({records, d / "records.filtered.jsonl", false}, c));
    records = d / "records.filtered.jsonl";
  }
  const auto scrub_tpl = promptkit::load_template(c.template_dir / promptkit::kPlaceholderTemplateFile);
  absorb("split", split_stage({records, d / "split", std::nullopt, std::nullopt, o.stratify, false}, c,
                              {{"scrub", scrub_tpl.name + "@" + scrub_tpl.version}}));

  r.summary = {{"stages", stages}, {"filter_first", o.filter_first}};
  util::write_file_atomic(d / "run.summary.json", r.summary.dump(2) + '\n');
  r.exit_code = exit_code;
  return r;
}

// ---------------------------------------------------------------------------
// serve

struct ServeOptions {
  fs::path items;
  fs::path store;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<fs::path> ui_dir;
};

inline std::unique_ptr<evalharness::AnnotationService> make_annotation_service(const ServeOptions& o,
                                                                               const PipelineConfig& c) {
  evalharness::AnnotationOptions options;
  options.seed = c.seed;
  if (const auto rubric = c.template_dir / promptkit::kRubricFile; fs::exists(rubric))
    options.rubric_text = util::read_file(rubric);
  options.static_dir = o.ui_dir;
  return std::make_unique<evalharness::AnnotationService>(evalharness::read_annotation_items(o.items), o.store,
                                                          std::move(options));
}

}  // namespace syntaxforge::cli
