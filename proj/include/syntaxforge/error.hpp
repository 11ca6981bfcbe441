#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace syntaxforge {

// Root of every error the library throws. The CLI maps subclasses onto exit
// codes, so new error kinds should derive from one of the families below.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or missing configuration, invalid parameter ranges.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParamError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed input data (corpus files, JSONL records, templates).
class InputError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public InputError {
 public:
  using InputError::InputError;
};

class TemplateError : public InputError {
 public:
  TemplateError(const std::string& what, std::vector<std::string> missing = {},
                std::vector<std::string> extra = {})
      : InputError(what), missing_(std::move(missing)), extra_(std::move(extra)) {}

  const std::vector<std::string>& missing() const noexcept { return missing_; }
  const std::vector<std::string>& extra() const noexcept { return extra_; }

 private:
  std::vector<std::string> missing_;
  std::vector<std::string> extra_;
};

class ParseError : public InputError {
 public:
  using InputError::InputError;
};

// Record violating a dataset invariant (strict emission).
class RecordError : public InputError {
 public:
  RecordError(std::size_t index, const std::string& reason)
      : InputError("record " + std::to_string(index) + ": " + reason), index_(index),
        reason_(reason) {}

  std::size_t index() const noexcept { return index_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t index_;
  std::string reason_;
};

// Failures talking to a model endpoint.
class GatewayError : public Error {
 public:
  GatewayError(const std::string& what, int attempts = 0)
      : Error(what), attempts_(attempts) {}

  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

class TransportError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

class HttpStatusError : public GatewayError {
 public:
  HttpStatusError(int status, const std::string& body, int attempts = 0)
      : GatewayError("HTTP status " + std::to_string(status) + ": " + body, attempts),
        status_(status), body_(body) {}

  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }
  bool rate_limited() const noexcept { return status_ == 429; }

 private:
  int status_;
  std::string body_;
};

class ProtocolError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

}  // namespace syntaxforge
