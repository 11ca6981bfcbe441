#pragma once

#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <string>

#include "syntaxforge/llmgateway.hpp"

namespace syntaxforge::gateway {

inline constexpr const char* kApiKeyEnv = "SYNTAXFORGE_API_KEY";
inline constexpr const char* kBaseUrlEnv = "SYNTAXFORGE_BASE_URL";

struct HttpEndpointConfig {
  std::string base_url;  // e.g. https://api.openai.com/v1
  std::string api_key;
  std::string completions_path = "/chat/completions";
  bool send_top_k = true;
  int timeout_seconds = 120;

  // Fills unset fields from SYNTAXFORGE_BASE_URL / SYNTAXFORGE_API_KEY.
  static HttpEndpointConfig from_environment() { return from_environment(HttpEndpointConfig()); }
  static HttpEndpointConfig from_environment(HttpEndpointConfig cfg) {
    if (cfg.base_url.empty())
      if (const char* v = std::getenv(kBaseUrlEnv)) cfg.base_url = v;
    if (cfg.api_key.empty())
      if (const char* v = std::getenv(kApiKeyEnv)) cfg.api_key = v;
    return cfg;
  }
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix without trailing slash
};

inline ParsedUrl split_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base URL lacks a scheme: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported URL scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) out.prefix = url.substr(path_start);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

/// Builds the wire body for a chat-completions POST.
inline json chat_completions_body(const ChatRequest& r, bool send_top_k) {
  json body{{"model", r.model},
            {"messages", messages_to_json(r.messages)},
            {"temperature", r.params.temperature},
            {"top_p", r.params.top_p}};
  if (send_top_k && r.params.top_k) body["top_k"] = *r.params.top_k;
  if (r.params.max_tokens) body["max_tokens"] = *r.params.max_tokens;
  return body;
}

/// Parses an OpenAI-style chat-completions response body.
inline ChatResponse parse_chat_completions(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ProtocolError(std::string("response is not JSON: ") + e.what());
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw ProtocolError("response has no choices");
  const auto& choice = j["choices"][0];
  if (!choice.contains("message") || !choice["message"].contains("content") ||
      !choice["message"]["content"].is_string())
    throw ProtocolError("response choice has no message content");
  ChatResponse r;
  r.content = choice["message"]["content"].get<std::string>();
  if (choice.contains("finish_reason") && choice["finish_reason"].is_string())
    r.finish_reason = parse_finish_reason(choice["finish_reason"].get<std::string>());
  if (j.contains("usage") && j["usage"].is_object())
    r.usage = Usage{j["usage"].value("prompt_tokens", 0L), j["usage"].value("completion_tokens", 0L)};
  return r;
}

// OpenAI-compatible chat-completions endpoint.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpEndpointConfig cfg) : cfg_(std::move(cfg)), url_(split_base_url(cfg_.base_url)) {
    send_top_k_ = cfg_.send_top_k;
  }

  ChatResponse send(const ChatRequest& request) override {
    auto result = post(request, send_top_k_.load());
    // Endpoints that reject top_k get it stripped from then on.
    if (result.status == 400 && send_top_k_.load() && request.params.top_k &&
        result.body.find("top_k") != std::string::npos) {
      send_top_k_ = false;
      result = post(request, false);
    }
    if (result.status < 200 || result.status >= 300) throw HttpStatusError(result.status, result.body);
    return parse_chat_completions(result.body);
  }

  std::string endpoint() const override { return cfg_.base_url + cfg_.completions_path; }
  bool sends_top_k() const { return send_top_k_.load(); }

 private:
  struct Result {
    int status;
    std::string body;
  };

  Result post(const ChatRequest& request, bool with_top_k) const {
    httplib::Client client(url_.origin);
    client.set_connection_timeout(cfg_.timeout_seconds, 0);
    client.set_read_timeout(cfg_.timeout_seconds, 0);
    client.set_write_timeout(cfg_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    const auto body = chat_completions_body(request, with_top_k).dump();
    auto res = client.Post(url_.prefix + cfg_.completions_path, headers, body, "application/json");
    if (!res) throw TransportError("request to " + endpoint() + " failed: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }

  HttpEndpointConfig cfg_;
  ParsedUrl url_;
  std::atomic<bool> send_top_k_{true};
};

}  // namespace syntaxforge::gateway
