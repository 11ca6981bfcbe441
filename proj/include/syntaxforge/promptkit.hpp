#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "syntaxforge/chat.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/util.hpp"

// Prompt templates with `{{variable}}` slots.
//
// Template file layout:
//
//   # comment
//   name: syntax_feedback
//   version: 3
//   variables: essay
//   === system          (optional section)
//   ...system text...
//   === user
//   ...user message body, up to end of file...
//
// Header keys are `name`, `version` and `variables` (comma separated). When
// `version` is absent it defaults to a digest of the file content.

namespace syntaxforge::promptkit {

struct PromptTemplate {
  std::string name;
  std::string version;
  std::optional<std::string> system_text;
  std::string user_text;
  std::set<std::string> required_variables;
};

struct RenderedPrompt {
  std::vector<ChatMessage> messages;
  std::string template_name;
  std::string template_version;

  friend bool operator==(const RenderedPrompt&, const RenderedPrompt&) = default;
};

using Bindings = std::map<std::string, std::string>;

namespace detail {

inline bool is_name_start(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
inline bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9'); }

struct Slot {
  std::size_t begin;  // position of "{{"
  std::size_t end;    // one past "}}"
  std::string name;
};

inline std::vector<Slot> scan_slots(std::string_view body) {
  std::vector<Slot> slots;
  std::size_t pos = 0;
  while ((pos = body.find("{{", pos)) != std::string_view::npos) {
    std::size_t i = pos + 2;
    if (i >= body.size() || !is_name_start(body[i]))
      throw TemplateError("malformed slot at offset " + std::to_string(pos));
    while (i < body.size() && is_name_char(body[i])) ++i;
    if (body.substr(i, 2) != "}}")
      throw TemplateError("unterminated slot at offset " + std::to_string(pos));
    slots.push_back({pos, i + 2, std::string(body.substr(pos + 2, i - pos - 2))});
    pos = i + 2;
  }
  return slots;
}

inline std::string substitute(std::string_view body, const Bindings& bindings) {
  std::string out;
  out.reserve(body.size());
  std::size_t last = 0;
  for (const auto& slot : scan_slots(body)) {
    out.append(body.substr(last, slot.begin - last));
    out.append(bindings.at(slot.name));
    last = slot.end;
  }
  out.append(body.substr(last));
  return out;
}

inline std::string join(const std::vector<std::string>& xs) {
  std::string s;
  for (const auto& x : xs) s += (s.empty() ? "" : ", ") + x;
  return s;
}

}  // namespace detail

/// Variable names referenced by `{{name}}` slots.
inline std::set<std::string> extract_variables(std::string_view body) {
  std::set<std::string> names;
  for (auto& slot : detail::scan_slots(body)) names.insert(std::move(slot.name));
  return names;
}

/// Checks that declared variables and slots agree exactly.
inline void validate_template(const PromptTemplate& t) {
  auto used = extract_variables(t.user_text);
  if (t.system_text) used.merge(extract_variables(*t.system_text));
  std::vector<std::string> undeclared, unused;
  for (const auto& v : used)
    if (!t.required_variables.count(v)) undeclared.push_back(v);
  for (const auto& v : t.required_variables)
    if (!used.count(v)) unused.push_back(v);
  if (!undeclared.empty())
    throw TemplateError("template '" + t.name + "' uses undeclared variables: " +
                            detail::join(undeclared),
                        undeclared);
  if (!unused.empty())
    throw TemplateError("template '" + t.name + "' declares unused variables: " +
                            detail::join(unused),
                        {}, unused);
}

inline PromptTemplate parse_template(std::string_view content) {
  PromptTemplate t;
  bool have_version = false;
  bool have_variables = false;
  enum class Section { Header, System, User } section = Section::Header;
  std::string system, user;
  bool saw_user = false;

  const auto lines = util::split_lines(content);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    const auto trimmed = util::trim(line);
    if (trimmed == "=== system") {
      if (section != Section::Header) throw TemplateError("system section must precede user section");
      section = Section::System;
      t.system_text.emplace();
      continue;
    }
    if (trimmed == "=== user") {
      if (saw_user) throw TemplateError("duplicate user section");
      section = Section::User;
      saw_user = true;
      continue;
    }
    switch (section) {
      case Section::Header: {
        if (trimmed.empty() || trimmed.front() == '#') break;
        const auto colon = trimmed.find(':');
        if (colon == std::string_view::npos)
          throw TemplateError("bad header line " + std::to_string(i + 1) + ": " + line);
        const auto key = util::trim(trimmed.substr(0, colon));
        const auto value = util::trim(trimmed.substr(colon + 1));
        if (key == "name") {
          t.name = std::string(value);
        } else if (key == "version") {
          t.version = std::string(value);
          have_version = true;
        } else if (key == "variables") {
          have_variables = true;
          std::size_t start = 0;
          while (start <= value.size()) {
            auto comma = value.find(',', start);
            auto item = util::trim(value.substr(start, comma == std::string_view::npos
                                                           ? std::string_view::npos
                                                           : comma - start));
            if (!item.empty()) t.required_variables.emplace(item);
            if (comma == std::string_view::npos) break;
            start = comma + 1;
          }
        } else {
          throw TemplateError("unknown header key: " + std::string(key));
        }
        break;
      }
      case Section::System:
        system += line;
        system += '\n';
        break;
      case Section::User:
        user += line;
        user += '\n';
        break;
    }
  }
  if (!saw_user) throw TemplateError("template has no '=== user' section");
  if (t.name.empty()) throw TemplateError("template has no name");
  if (!have_variables) throw TemplateError("template '" + t.name + "' has no variables declaration");

  const auto strip_trailing_newlines = [](std::string& s) {
    while (!s.empty() && s.back() == '\n') s.pop_back();
  };
  strip_trailing_newlines(user);
  t.user_text = std::move(user);
  if (t.system_text) {
    strip_trailing_newlines(system);
    t.system_text = std::move(system);
  }
  if (!have_version) t.version = "sha256:" + util::sha256_hex(content).substr(0, 16);
  validate_template(t);
  return t;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
  return parse_template(util::read_file(path));
}

/// Renders a template. Bindings must cover the declared variables exactly.
/// Substitution is single pass, so bound values are copied verbatim even if
/// they contain brace sequences.
inline RenderedPrompt render(const PromptTemplate& t, const Bindings& bindings) {
  std::vector<std::string> missing, extra;
  for (const auto& v : t.required_variables)
    if (!bindings.count(v)) missing.push_back(v);
  for (const auto& [k, _] : bindings)
    if (!t.required_variables.count(k)) extra.push_back(k);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "cannot render template '" + t.name + "':";
    if (!missing.empty()) msg += " missing bindings [" + detail::join(missing) + "]";
    if (!extra.empty()) msg += " unexpected bindings [" + detail::join(extra) + "]";
    throw TemplateError(msg, missing, extra);
  }

  RenderedPrompt out;
  out.template_name = t.name;
  out.template_version = t.version;
  if (t.system_text)
    out.messages.push_back({Role::System, detail::substitute(*t.system_text, bindings)});
  out.messages.push_back({Role::User, detail::substitute(t.user_text, bindings)});
  return out;
}

// Bundled template file names.
inline constexpr std::string_view kPlaceholderTemplateFile = "placeholder_replacement.prompt";
inline constexpr std::string_view kFeedbackTemplateFile = "syntax_feedback.prompt";
inline constexpr std::string_view kRubricFile = "rating_rubric.txt";

inline std::filesystem::path default_template_dir() {
#ifdef SYNTAXFORGE_DEFAULT_TEMPLATE_DIR
  return SYNTAXFORGE_DEFAULT_TEMPLATE_DIR;
#else
  return "templates";
#endif
}

}  // namespace syntaxforge::promptkit
