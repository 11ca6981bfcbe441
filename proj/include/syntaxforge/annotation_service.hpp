#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "syntaxforge/evalharness.hpp"
#include "syntaxforge/feedback.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::evalharness {

struct AnnotationItem {
  std::string item_id;
  std::string essay;
  std::string feedback;
  std::string model_id;
};

inline std::vector<AnnotationItem> read_annotation_items(const std::filesystem::path& path) {
  std::vector<AnnotationItem> items;
  const auto lines = util::split_lines(util::read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      const auto j = json::parse(lines[i]);
      items.push_back({j.at("item_id").get<std::string>(), j.at("essay").get<std::string>(),
                       j.at("feedback").get<std::string>(), j.at("model_id").get<std::string>()});
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return items;
}

class DuplicateRating : public InputError {
 public:
  DuplicateRating(const std::string& what, RatingRecord existing)
      : InputError(what), existing_(std::move(existing)) {}
  const RatingRecord& existing() const { return existing_; }

 private:
  RatingRecord existing_;
};

/// Append-only JSONL store of accepted ratings. Existing records are loaded on
/// construction; each append is one flushed line.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    if (std::filesystem::exists(path_)) {
      for (auto& r : read_ratings_jsonl(path_)) {
        index_.emplace(key_of(r), records_.size());
        records_.push_back(std::move(r));
      }
    }
  }

  RatingRecord append(RatingRecord r) {
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key_of(r)); it != index_.end())
      throw DuplicateRating("rating already recorded for item " + r.item_id + " by " + r.rater_id,
                            records_[it->second]);
    if (r.timestamp.empty()) r.timestamp = util::utc_timestamp();
    const auto line = to_json(r).dump() + '\n';
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot open rating store " + path_.string());
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.flush();
    if (!out) throw Error("cannot write rating store " + path_.string());
    index_.emplace(key_of(r), records_.size());
    records_.push_back(r);
    return r;
  }

  std::vector<RatingRecord> records() const {
    std::lock_guard lock(mutex_);
    return records_;
  }

  std::optional<RatingRecord> find(const std::string& item, const std::string& model, const std::string& rater) const {
    std::lock_guard lock(mutex_);
    auto it = index_.find({item, model, rater});
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  using Key = std::tuple<std::string, std::string, std::string>;
  static Key key_of(const RatingRecord& r) { return {r.item_id, r.model_id, r.rater_id}; }

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::vector<RatingRecord> records_;
  std::map<Key, std::size_t> index_;
};

struct AnnotationOptions {
  std::uint64_t seed = 42;
  std::string rubric_text;
  std::optional<std::filesystem::path> static_dir;  // browser UI assets
};

/// Serves the rating API:
///   GET  /api/items/next?rater=ID
///   POST /api/ratings   {item_id, rater, grade, note}
///   GET  /api/progress
///   GET  /api/export    (JSONL, acceptance order)
/// Raters see opaque item keys; the model behind an item is never exposed.
class AnnotationService {
 public:
  AnnotationService(std::vector<AnnotationItem> items, const std::filesystem::path& store_path,
                    AnnotationOptions options = {})
      : items_(std::move(items)), store_(store_path), options_(std::move(options)) {
    if (items_.empty()) throw ParamError("annotation service needs at least one item");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const auto key = public_key(items_[i]);
      if (!by_key_.emplace(key, i).second)
        throw InputError("duplicate annotation item " + items_[i].item_id + " for model " + items_[i].model_id);
    }
    for (const auto& r : store_.records()) raters_.insert(r.rater_id);
    install_routes();
  }

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;
  ~AnnotationService() { stop(); }

  // Returns the bound port (useful with port 0).
  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    if (!server_.bind_to_port(host, port)) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
    return port;
  }

  // Blocks until stop().
  void serve() { server_.listen_after_bind(); }
  void stop() {
    if (server_.is_running()) server_.stop();
  }
  void wait_until_ready() const { server_.wait_until_ready(); }

  const AnnotationStore& store() const { return store_; }

  static std::string public_key(const AnnotationItem& item) {
    return "it-" + util::sha256_hex(item.item_id + '\x1f' + item.model_id).substr(0, 16);
  }

 private:
  std::vector<std::size_t> order_for(const std::string& rater) const {
    return util::seeded_permutation(items_.size(), options_.seed ^ util::seed_from_string(rater));
  }

  std::size_t done_count(const std::string& rater) const {
    std::size_t done = 0;
    for (const auto& item : items_)
      if (store_.find(item.item_id, item.model_id, rater)) ++done;
    return done;
  }

  static json feedback_view(const std::string& text) {
    json view{{"raw", text}, {"groups", nullptr}};
    try {
      const auto doc = feedback::parse_feedback(text);
      const auto groups = doc.grouped();
      json arr = json::array();
      for (auto c : feedback::kAllCategories) {
        json items = json::array();
        for (const auto& item : groups[feedback::index_of(c)])
          items.push_back({{"original", item.original}, {"correction", item.correction},
                           {"explanation", item.explanation}});
        arr.push_back({{"category", feedback::header_of(c)}, {"items", items}});
      }
      view["groups"] = arr;
    } catch (const ParseError&) {
    }
    return view;
  }

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void install_routes() {
    server_.Get("/api/items/next", [this](const httplib::Request& req, httplib::Response& res) {
      const auto rater = req.get_param_value("rater");
      if (rater.empty()) return reply(res, 400, {{"error", "missing rater parameter"}});
      {
        std::lock_guard lock(mutex_);
        raters_.insert(rater);
      }
      const json progress{{"done", done_count(rater)}, {"total", items_.size()}};
      for (auto idx : order_for(rater)) {
        const auto& item = items_[idx];
        if (store_.find(item.item_id, item.model_id, rater)) continue;
        return reply(res, 200,
                     {{"done", false},
                      {"item_id", public_key(item)},
                      {"essay", item.essay},
                      {"feedback", feedback_view(item.feedback)},
                      {"rubric_text", options_.rubric_text},
                      {"progress", progress}});
      }
      reply(res, 200, {{"done", true}, {"progress", progress}});
    });

    server_.Post("/api/ratings", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error&) {
        return reply(res, 400, {{"error", "request body is not JSON"}});
      }
      if (!body.is_object() || !body.contains("item_id") || !body["item_id"].is_string() ||
          !body.contains("rater") || !body["rater"].is_string() || body["rater"].get<std::string>().empty())
        return reply(res, 400, {{"error", "item_id and rater are required strings"}});
      const auto grade_text = body.value("grade", json()).is_string() ? body["grade"].get<std::string>() : "";
      const auto grade = parse_grade(grade_text);
      if (!grade || grade_text.size() != 1 || grade_text[0] < 'A' || grade_text[0] > 'E')
        return reply(res, 400, {{"error", "grade must be one of A, B, C, D, E"}});
      auto it = by_key_.find(body["item_id"].get<std::string>());
      if (it == by_key_.end()) return reply(res, 404, {{"error", "unknown item"}});

      const auto& item = items_[it->second];
      RatingRecord r;
      r.item_id = item.item_id;
      r.model_id = item.model_id;
      r.rater_id = body["rater"].get<std::string>();
      r.grade = *grade;
      if (body.contains("note") && body["note"].is_string()) r.note = body["note"].get<std::string>();
      try {
        auto stored = store_.append(std::move(r));
        {
          std::lock_guard lock(mutex_);
          raters_.insert(stored.rater_id);
        }
        reply(res, 201, {{"item_id", it->first}, {"grade", to_string(stored.grade)}, {"timestamp", stored.timestamp}});
      } catch (const DuplicateRating& e) {
        reply(res, 409, {{"error", "item already rated by this rater"}, {"grade", to_string(e.existing().grade)}});
      }
    });

    server_.Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
      std::set<std::string> raters;
      {
        std::lock_guard lock(mutex_);
        raters = raters_;
      }
      json per_rater = json::object();
      for (const auto& rater : raters) per_rater[rater] = {{"done", done_count(rater)}, {"total", items_.size()}};
      reply(res, 200, {{"total", items_.size()}, {"ratings", store_.records().size()}, {"raters", per_rater}});
    });

    server_.Get("/api/export", [this](const httplib::Request&, httplib::Response& res) {
      std::string out;
      for (const auto& r : store_.records()) out += to_json(r).dump() + '\n';
      res.status = 200;
      res.set_content(out, "application/x-ndjson");
    });

    if (options_.static_dir) server_.set_mount_point("/", options_.static_dir->string());
  }

  std::vector<AnnotationItem> items_;
  std::map<std::string, std::size_t> by_key_;
  AnnotationStore store_;
  AnnotationOptions options_;
  httplib::Server server_;
  std::mutex mutex_;
  std::set<std::string> raters_;
};

}  // namespace syntaxforge::evalharness
