#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "syntaxforge/chat.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::gateway {

using json = nlohmann::json;

struct GenerationParams {
  double temperature = 0.3;
  double top_p = 1.0;
  std::optional<int> top_k;  // nullopt = unlimited
  std::optional<int> max_tokens;

  void validate() const {
    if (!(temperature >= 0.0)) throw ParamError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ParamError("top_p must be in (0, 1]");
    if (top_k && *top_k <= 0) throw ParamError("top_k must be positive");
    if (max_tokens && *max_tokens <= 0) throw ParamError("max_tokens must be positive");
  }

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

// Sampling settings used when running models over the test set.
inline GenerationParams inference_params() { return {0.3, 0.95, 50, std::nullopt}; }

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  GenerationParams params;
  // Resample index. Zero for the first draw; retries that need a fresh sample
  // bump it so they do not hit the cached answer of the previous draw.
  unsigned sample = 0;

  void validate() const {
    if (model.empty()) throw ParamError("chat request has an empty model");
    if (messages.empty()) throw ParamError("chat request has no messages");
    params.validate();
  }
};

enum class FinishReason { Stop, Length, Other };

inline std::string_view to_string(FinishReason r) {
  switch (r) {
    case FinishReason::Stop: return "stop";
    case FinishReason::Length: return "length";
    case FinishReason::Other: return "other";
  }
  return "other";
}

inline FinishReason parse_finish_reason(std::string_view s) {
  if (s == "stop") return FinishReason::Stop;
  if (s == "length") return FinishReason::Length;
  return FinishReason::Other;
}

struct Usage {
  long prompt_tokens = 0;
  long completion_tokens = 0;
  friend bool operator==(const Usage&, const Usage&) = default;
};

struct ChatResponse {
  std::string content;
  FinishReason finish_reason = FinishReason::Stop;
  std::optional<Usage> usage;
  bool cached = false;
  int attempts = 0;  // backend calls made for this response; 0 when served from cache
};

// ---------------------------------------------------------------------------
// Canonical serialization and cache keys

inline json params_to_json(const GenerationParams& p) {
  json j{{"temperature", p.temperature}, {"top_p", p.top_p}};
  if (p.top_k) j["top_k"] = *p.top_k;
  if (p.max_tokens) j["max_tokens"] = *p.max_tokens;
  return j;
}

inline GenerationParams params_from_json(const json& j) {
  GenerationParams p;
  p.temperature = j.value("temperature", p.temperature);
  p.top_p = j.value("top_p", p.top_p);
  if (j.contains("top_k") && !j["top_k"].is_null()) p.top_k = j["top_k"].get<int>();
  if (j.contains("max_tokens") && !j["max_tokens"].is_null())
    p.max_tokens = j["max_tokens"].get<int>();
  return p;
}

inline json messages_to_json(const std::vector<ChatMessage>& messages) {
  json arr = json::array();
  for (const auto& m : messages) arr.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  return arr;
}

/// Canonical request object: keys sorted, numbers in shortest round-trip form,
/// optional fields omitted when unset.
inline json canonical_json(const ChatRequest& r) {
  json j{{"model", r.model}, {"messages", messages_to_json(r.messages)}, {"params", params_to_json(r.params)}};
  if (r.sample != 0) j["sample"] = r.sample;
  return j;
}

inline std::string canonical_bytes(const ChatRequest& r) { return canonical_json(r).dump(); }

/// 64 hex characters.
inline std::string cache_key(const ChatRequest& r) { return util::sha256_hex(canonical_bytes(r)); }

inline json response_to_json(const ChatResponse& r) {
  json j{{"content", r.content}, {"finish_reason", to_string(r.finish_reason)}};
  if (r.usage)
    j["usage"] = {{"prompt_tokens", r.usage->prompt_tokens},
                  {"completion_tokens", r.usage->completion_tokens}};
  return j;
}

inline ChatResponse response_from_json(const json& j) {
  ChatResponse r;
  r.content = j.at("content").get<std::string>();
  r.finish_reason = parse_finish_reason(j.value("finish_reason", "stop"));
  if (j.contains("usage") && j["usage"].is_object())
    r.usage = Usage{j["usage"].value("prompt_tokens", 0L), j["usage"].value("completion_tokens", 0L)};
  return r;
}

// ---------------------------------------------------------------------------
// Backends

class Backend {
 public:
  virtual ~Backend() = default;
  // Performs one call. Throws TransportError, HttpStatusError or ProtocolError.
  virtual ChatResponse send(const ChatRequest& request) = 0;
  virtual std::string endpoint() const = 0;
};

// On-disk response cache: one `<key>.json` file per response.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::filesystem::path path_for(const std::string& key) const { return dir_ / (key + ".json"); }

  std::optional<ChatResponse> load(const std::string& key) const {
    const auto path = path_for(key);
    if (!std::filesystem::exists(path)) return std::nullopt;
    try {
      auto j = json::parse(util::read_file(path));
      return response_from_json(j.at("response"));
    } catch (const std::exception&) {
      return std::nullopt;  // unreadable entry counts as a miss and is overwritten
    }
  }

  void store(const std::string& key, const ChatRequest& request, const ChatResponse& response,
             const std::string& endpoint) const {
    json entry{{"request", canonical_json(request)},
               {"response", response_to_json(response)},
               {"timestamp", util::utc_timestamp()},
               {"endpoint", endpoint}};
    util::write_file_atomic(path_for(key), entry.dump(2) + "\n");
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{1000};
  double multiplier = 2.0;
};

struct GatewayOptions {
  std::optional<std::filesystem::path> cache_dir;  // in-memory cache only when unset
  RetryPolicy retry;
  std::size_t max_in_flight = 4;  // process-wide bound on concurrent backend calls
  std::function<void(std::chrono::milliseconds)> sleep =
      [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
};

// Either a response or the error message for one batch element.
struct BatchResult {
  std::size_t index = 0;
  std::optional<ChatResponse> response;
  std::string error;
  int attempts = 0;

  bool ok() const { return response.has_value(); }
};

class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> backend, GatewayOptions options = {})
      : backend_(std::move(backend)), options_(std::move(options)) {
    if (!backend_) throw ConfigError("gateway needs a backend");
    if (options_.max_in_flight == 0) throw ConfigError("max_in_flight must be >= 1");
    if (options_.retry.max_attempts < 1) throw ConfigError("retry max_attempts must be >= 1");
    if (options_.cache_dir) disk_cache_.emplace(*options_.cache_dir);
  }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Cache hit: stored response with cached=true and no backend call. Miss:
  /// calls the backend (with retries), stores, returns cached=false.
  /// Concurrent identical requests share one backend call.
  ChatResponse complete(const ChatRequest& request) {
    request.validate();
    const auto key = cache_key(request);

    std::shared_future<ChatResponse> pending;
    std::promise<ChatResponse> promise;
    bool owner = false;
    {
      std::unique_lock lock(mutex_);
      if (auto hit = lookup_locked(key)) return *hit;
      auto it = in_flight_.find(key);
      if (it != in_flight_.end()) {
        pending = it->second;
      } else {
        pending = promise.get_future().share();
        in_flight_.emplace(key, pending);
        owner = true;
      }
    }
    if (!owner) {
      auto shared = pending.get();
      shared.cached = true;
      shared.attempts = 0;
      return shared;
    }

    try {
      auto response = call_with_retry(request);
      {
        std::lock_guard lock(mutex_);
        memory_cache_[key] = response;
        if (disk_cache_) disk_cache_->store(key, request, response, backend_->endpoint());
        in_flight_.erase(key);
      }
      promise.set_value(response);
      return response;
    } catch (...) {
      {
        std::lock_guard lock(mutex_);
        in_flight_.erase(key);
      }
      promise.set_exception(std::current_exception());
      throw;
    }
  }

  /// Completes every request with at most `max_in_flight` workers. Results are
  /// indexed like the input; one failing item never aborts the others.
  std::vector<BatchResult> batch_complete(std::span<const ChatRequest> requests,
                                          std::size_t max_in_flight) {
    if (max_in_flight == 0) throw ConfigError("max_in_flight must be >= 1");
    std::vector<BatchResult> results(requests.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < requests.size(); i = next++) {
        auto& slot = results[i];
        slot.index = i;
        try {
          slot.response = complete(requests[i]);
          slot.attempts = slot.response->attempts;
        } catch (const GatewayError& e) {
          slot.error = e.what();
          slot.attempts = e.attempts();
        } catch (const std::exception& e) {
          slot.error = e.what();
        }
      }
    };
    const auto workers = std::min(max_in_flight, requests.size());
    if (workers <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      pool.reserve(workers);
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    return results;
  }

  std::vector<BatchResult> batch_complete(std::span<const ChatRequest> requests) {
    return batch_complete(requests, options_.max_in_flight);
  }

  std::size_t backend_calls() const { return backend_calls_.load(); }
  const GatewayOptions& options() const { return options_; }
  std::string endpoint() const { return backend_->endpoint(); }

 private:
  std::optional<ChatResponse> lookup_locked(const std::string& key) {
    auto it = memory_cache_.find(key);
    std::optional<ChatResponse> hit;
    if (it != memory_cache_.end()) {
      hit = it->second;
    } else if (disk_cache_) {
      hit = disk_cache_->load(key);
      if (hit) memory_cache_[key] = *hit;
    }
    if (hit) {
      hit->cached = true;
      hit->attempts = 0;
    }
    return hit;
  }

  ChatResponse call_with_retry(const ChatRequest& request) {
    auto backoff = options_.retry.initial_backoff;
    for (int attempt = 1;; ++attempt) {
      try {
        ChatResponse response;
        {
          SlotGuard slot(*this);
          ++backend_calls_;
          response = backend_->send(request);
        }
        response.cached = false;
        response.attempts = attempt;
        return response;
      } catch (const TransportError& e) {
        if (attempt >= options_.retry.max_attempts)
          throw TransportError(std::string("transport failure after ") + std::to_string(attempt) +
                                   " attempts: " + e.what(),
                               attempt);
      } catch (const HttpStatusError& e) {
        if (!e.rate_limited() || attempt >= options_.retry.max_attempts)
          throw HttpStatusError(e.status(), e.body(), attempt);
      } catch (const ProtocolError& e) {
        throw ProtocolError(e.what(), attempt);
      }
      options_.sleep(backoff);
      backoff = std::chrono::milliseconds(
          static_cast<long long>(static_cast<double>(backoff.count()) * options_.retry.multiplier));
    }
  }

  // Counting semaphore over backend calls.
  class SlotGuard {
   public:
    explicit SlotGuard(Gateway& g) : g_(g) {
      std::unique_lock lock(g_.slot_mutex_);
      g_.slot_cv_.wait(lock, [&] { return g_.active_calls_ < g_.options_.max_in_flight; });
      ++g_.active_calls_;
    }
    ~SlotGuard() {
      {
        std::lock_guard lock(g_.slot_mutex_);
        --g_.active_calls_;
      }
      g_.slot_cv_.notify_one();
    }

   private:
    Gateway& g_;
  };

  std::shared_ptr<Backend> backend_;
  GatewayOptions options_;
  std::optional<ResponseCache> disk_cache_;

  std::mutex mutex_;
  std::unordered_map<std::string, ChatResponse> memory_cache_;
  std::unordered_map<std::string, std::shared_future<ChatResponse>> in_flight_;

  std::mutex slot_mutex_;
  std::condition_variable slot_cv_;
  std::size_t active_calls_ = 0;
  std::atomic<std::size_t> backend_calls_{0};
};

// ---------------------------------------------------------------------------
// Mock backend

// What a scripted mock does for one call.
struct MockReply {
  enum class Kind { Content, TransportFailure, RateLimited, HttpError, Malformed };
  Kind kind = Kind::Content;
  std::string content;
  FinishReason finish_reason = FinishReason::Stop;
  int status = 500;

  static MockReply ok(std::string text) { return {Kind::Content, std::move(text), FinishReason::Stop, 200}; }
  static MockReply transport() { return {Kind::TransportFailure, {}, FinishReason::Stop, 500}; }
  static MockReply rate_limited() { return {Kind::RateLimited, {}, FinishReason::Stop, 429}; }
  static MockReply malformed() { return {Kind::Malformed, {}, FinishReason::Stop, 500}; }
  static MockReply http(int status) { return {Kind::HttpError, {}, FinishReason::Stop, status}; }
};

/// Offline backend driven by a responder function or a script file. Records
/// call counts and peak concurrency for tests.
class MockBackend : public Backend {
 public:
  // Receives the request and the zero-based global call number.
  using Responder = std::function<MockReply(const ChatRequest&, std::size_t)>;

  explicit MockBackend(Responder responder, std::chrono::milliseconds latency = {})
      : responder_(std::move(responder)), latency_(latency) {}

  /// Always answers `text`.
  static std::shared_ptr<MockBackend> constant(std::string text) {
    return std::make_shared<MockBackend>(
        [text = std::move(text)](const ChatRequest&, std::size_t) { return MockReply::ok(text); });
  }

  /// Plays `schedule` in order (one entry per call), then repeats the last entry.
  static std::shared_ptr<MockBackend> sequence(std::vector<MockReply> schedule) {
    if (schedule.empty()) throw ConfigError("mock sequence must not be empty");
    return std::make_shared<MockBackend>(
        [schedule = std::move(schedule)](const ChatRequest&, std::size_t n) {
          return schedule[std::min(n, schedule.size() - 1)];
        });
  }

  static std::shared_ptr<MockBackend> from_script(const std::filesystem::path& path);
  static std::shared_ptr<MockBackend> from_script_json(const json& script);

  ChatResponse send(const ChatRequest& request) override {
    std::size_t call_no;
    {
      std::lock_guard lock(mutex_);
      call_no = calls_++;
      ++active_;
      peak_active_ = std::max(peak_active_, active_);
      call_log_.push_back(request);
    }
    struct Leave {
      MockBackend& m;
      ~Leave() {
        std::lock_guard lock(m.mutex_);
        --m.active_;
      }
    } leave{*this};
    if (latency_.count() > 0) std::this_thread::sleep_for(latency_);

    const MockReply reply = responder_(request, call_no);
    switch (reply.kind) {
      case MockReply::Kind::Content: {
        ChatResponse r;
        r.content = reply.content;
        r.finish_reason = reply.finish_reason;
        return r;
      }
      case MockReply::Kind::TransportFailure:
        throw TransportError("mock transport failure");
      case MockReply::Kind::RateLimited:
        throw HttpStatusError(429, "mock rate limit");
      case MockReply::Kind::HttpError:
        throw HttpStatusError(reply.status, "mock http error");
      case MockReply::Kind::Malformed:
        throw ProtocolError("mock malformed response body");
    }
    throw ProtocolError("unreachable mock reply kind");
  }

  std::string endpoint() const override { return "mock://"; }

  std::size_t calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
  }
  std::size_t peak_concurrency() const {
    std::lock_guard lock(mutex_);
    return peak_active_;
  }
  std::vector<ChatRequest> call_log() const {
    std::lock_guard lock(mutex_);
    return call_log_;
  }

 private:
  Responder responder_;
  std::chrono::milliseconds latency_;
  mutable std::mutex mutex_;
  std::size_t calls_ = 0;
  std::size_t active_ = 0;
  std::size_t peak_active_ = 0;
  std::vector<ChatRequest> call_log_;
};

namespace detail {

// One rule of a mock script. A rule matches when every selector present matches:
//   "digest":   cache key of the request
//   "pattern":  ECMAScript regex searched in the joined message contents
//   "contains": string or list of strings that must all occur in the contents
//   "model":    exact model id
// Actions:
//   "content":  canned reply, or "contents": list indexed by request sample (last repeats)
//   "fail":     failure schedule consumed by the first calls matching the rule,
//               entries "transport" | "rate_limit" | "malformed" | <http status>
struct MockRule {
  std::optional<std::string> digest;
  std::optional<std::regex> pattern;
  std::vector<std::string> contains;
  std::optional<std::string> model;
  std::vector<std::string> contents;
  std::vector<MockReply> failures;
  FinishReason finish_reason = FinishReason::Stop;
  std::size_t hits = 0;

  bool matches(const ChatRequest& r, const std::string& text) const {
    if (digest && cache_key(r) != *digest) return false;
    if (model && r.model != *model) return false;
    for (const auto& c : contains)
      if (text.find(c) == std::string::npos) return false;
    if (pattern && !std::regex_search(text, *pattern)) return false;
    return true;
  }
};

inline MockReply parse_failure(const json& f) {
  if (f.is_number_integer()) {
    const int status = f.get<int>();
    return status == 429 ? MockReply::rate_limited() : MockReply::http(status);
  }
  const auto s = f.get<std::string>();
  if (s == "transport") return MockReply::transport();
  if (s == "rate_limit") return MockReply::rate_limited();
  if (s == "malformed") return MockReply::malformed();
  throw ConfigError("unknown mock failure kind: " + s);
}

inline MockRule parse_rule(const json& j) {
  MockRule rule;
  if (j.contains("digest")) rule.digest = j["digest"].get<std::string>();
  if (j.contains("pattern")) rule.pattern.emplace(j["pattern"].get<std::string>());
  if (j.contains("model")) rule.model = j["model"].get<std::string>();
  if (j.contains("contains")) {
    if (j["contains"].is_string())
      rule.contains.push_back(j["contains"].get<std::string>());
    else
      rule.contains = j["contains"].get<std::vector<std::string>>();
  }
  if (j.contains("content")) rule.contents.push_back(j["content"].get<std::string>());
  if (j.contains("contents")) rule.contents = j["contents"].get<std::vector<std::string>>();
  if (j.contains("fail"))
    for (const auto& f : j["fail"]) rule.failures.push_back(parse_failure(f));
  if (j.contains("finish_reason"))
    rule.finish_reason = parse_finish_reason(j["finish_reason"].get<std::string>());
  if (rule.contents.empty() && rule.failures.empty())
    throw ConfigError("mock rule has neither content nor fail schedule");
  return rule;
}

}  // namespace detail

inline std::shared_ptr<MockBackend> MockBackend::from_script_json(const json& script) {
  auto rules = std::make_shared<std::vector<detail::MockRule>>();
  for (const auto& r : script.value("rules", json::array())) rules->push_back(detail::parse_rule(r));
  std::optional<detail::MockRule> fallback;
  if (script.contains("default")) fallback = detail::parse_rule(script["default"]);
  auto state = std::make_shared<std::mutex>();

  return std::make_shared<MockBackend>(
      [rules, fallback = std::move(fallback), state](const ChatRequest& r, std::size_t) mutable {
        std::string text;
        for (const auto& m : r.messages) {
          text += m.content;
          text += '\n';
        }
        std::lock_guard lock(*state);
        detail::MockRule* rule = nullptr;
        for (auto& candidate : *rules)
          if (candidate.matches(r, text)) {
            rule = &candidate;
            break;
          }
        if (!rule && fallback) rule = &*fallback;
        if (!rule) return MockReply::http(404);

        const std::size_t hit = rule->hits++;
        if (hit < rule->failures.size()) return rule->failures[hit];
        if (rule->contents.empty()) return rule->failures.back();
        MockReply reply = MockReply::ok(rule->contents[std::min<std::size_t>(r.sample, rule->contents.size() - 1)]);
        reply.finish_reason = rule->finish_reason;
        return reply;
      });
}

inline std::shared_ptr<MockBackend> MockBackend::from_script(const std::filesystem::path& path) {
  json script;
  try {
    script = json::parse(util::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("invalid mock script " + path.string() + ": " + e.what());
  }
  return from_script_json(script);
}

}  // namespace syntaxforge::gateway
