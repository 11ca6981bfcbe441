#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "syntaxforge/datasetio.hpp"
#include "syntaxforge/error.hpp"
#include "syntaxforge/llmgateway.hpp"
#include "syntaxforge/metrics.hpp"
#include "syntaxforge/promptkit.hpp"
#include "syntaxforge/util.hpp"

namespace syntaxforge::evalharness {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Ratings

enum class RatingGrade { A, B, C, D, E };

inline constexpr std::array<RatingGrade, 5> kAllGrades = {RatingGrade::A, RatingGrade::B, RatingGrade::C,
                                                          RatingGrade::D, RatingGrade::E};

constexpr std::size_t index_of(RatingGrade g) { return static_cast<std::size_t>(g); }

inline std::string_view to_string(RatingGrade g) {
  static constexpr std::string_view names[] = {"A", "B", "C", "D", "E"};
  return names[index_of(g)];
}

inline std::optional<RatingGrade> parse_grade(std::string_view s) {
  if (s.size() != 1) return std::nullopt;
  const char c = s[0] >= 'a' && s[0] <= 'e' ? static_cast<char>(s[0] - 'a' + 'A') : s[0];
  if (c < 'A' || c > 'E') return std::nullopt;
  return static_cast<RatingGrade>(c - 'A');
}

struct RatingRecord {
  std::string item_id;
  std::string model_id;
  std::string rater_id;
  RatingGrade grade = RatingGrade::A;
  std::optional<std::string> note;
  std::string timestamp;  // ISO-8601 UTC

  auto key() const { return std::tie(item_id, model_id, rater_id); }
  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

inline json to_json(const RatingRecord& r) {
  json j{{"item_id", r.item_id},
         {"model_id", r.model_id},
         {"rater_id", r.rater_id},
         {"grade", to_string(r.grade)},
         {"timestamp", r.timestamp}};
  j["note"] = r.note ? json(*r.note) : json(nullptr);
  return j;
}

inline RatingRecord rating_from_json(const json& j) {
  RatingRecord r;
  r.item_id = j.at("item_id").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.rater_id = j.at("rater_id").get<std::string>();
  const auto grade = parse_grade(j.at("grade").get<std::string>());
  if (!grade) throw SchemaError("grade outside A-E: " + j.at("grade").dump());
  r.grade = *grade;
  if (j.contains("note") && j["note"].is_string()) r.note = j["note"].get<std::string>();
  r.timestamp = j.value("timestamp", "");
  return r;
}

inline std::vector<RatingRecord> read_ratings_jsonl(const std::filesystem::path& path) {
  std::vector<RatingRecord> out;
  const auto lines = util::split_lines(util::read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      out.push_back(rating_from_json(json::parse(lines[i])));
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

/// Per-grade counts; percentages are derived from counts in exact integer
/// hundredths, rounding half up.
struct RatingDistribution {
  std::string model_id;
  std::array<std::size_t, 5> counts{};
  std::size_t total = 0;

  // round(100 * count / total, 2) as an integer number of hundredths.
  long hundredths(RatingGrade g) const {
    if (total == 0) return 0;
    const auto c = static_cast<long long>(counts[index_of(g)]);
    const auto n = static_cast<long long>(total);
    return static_cast<long>((20000 * c + n) / (2 * n));
  }

  double percentage(RatingGrade g) const { return static_cast<double>(hundredths(g)) / 100.0; }

  std::string percentage_text(RatingGrade g) const { return util::format_fixed(percentage(g), 2); }

  void add(RatingGrade g) {
    ++counts[index_of(g)];
    ++total;
  }
};

/// Pools every rater's records per model. With `per_rater`, distributions are
/// keyed "model/rater" instead.
inline std::map<std::string, RatingDistribution> aggregate_ratings(const std::vector<RatingRecord>& ratings,
                                                                   bool per_rater = false) {
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  std::map<std::string, RatingDistribution> out;
  for (const auto& r : ratings) {
    if (!seen.emplace(r.item_id, r.model_id, r.rater_id).second)
      throw InputError("duplicate rating for item " + r.item_id + ", model " + r.model_id + ", rater " +
                       r.rater_id);
    const auto key = per_rater ? r.model_id + "/" + r.rater_id : r.model_id;
    auto& d = out[key];
    d.model_id = key;
    d.add(r.grade);
  }
  return out;
}

struct Agreement {
  double observed = 0.0;  // share of co-rated pairs with equal grades
  double kappa = 0.0;     // Cohen's kappa; mean over rater pairs when there are more than two raters
  std::size_t co_rated = 0;
  std::size_t rater_pairs = 0;
};

/// Agreement between raters on (item, model) units rated by both. For more
/// than two raters, observed agreement pools every rater pair and kappa is the
/// mean pairwise Cohen's kappa.
inline Agreement inter_rater_agreement(const std::vector<RatingRecord>& ratings) {
  std::map<std::string, std::map<std::pair<std::string, std::string>, RatingGrade>> by_rater;
  for (const auto& r : ratings) by_rater[r.rater_id][{r.item_id, r.model_id}] = r.grade;

  Agreement out;
  std::size_t agreeing = 0;
  double kappa_sum = 0.0;
  for (auto a = by_rater.begin(); a != by_rater.end(); ++a) {
    for (auto b = std::next(a); b != by_rater.end(); ++b) {
      std::array<double, 5> ma{}, mb{};
      std::size_t n = 0, same = 0;
      for (const auto& [unit, ga] : a->second) {
        auto it = b->second.find(unit);
        if (it == b->second.end()) continue;
        ++n;
        ++ma[index_of(ga)];
        ++mb[index_of(it->second)];
        if (ga == it->second) ++same;
      }
      if (n == 0) continue;
      const double po = static_cast<double>(same) / static_cast<double>(n);
      double pe = 0.0;
      for (std::size_t g = 0; g < 5; ++g) pe += (ma[g] / n) * (mb[g] / n);
      kappa_sum += pe >= 1.0 ? 1.0 : (po - pe) / (1.0 - pe);
      ++out.rater_pairs;
      out.co_rated += n;
      agreeing += same;
    }
  }
  if (out.co_rated == 0) throw InputError("no item was rated by two raters");
  out.observed = static_cast<double>(agreeing) / static_cast<double>(out.co_rated);
  out.kappa = kappa_sum / static_cast<double>(out.rater_pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Generation and scoring

struct GeneratedItem {
  std::string item_id;
  std::optional<std::string> text;  // nullopt on failure
  std::string error;
};

// model id -> one entry per test item, in test-set order
using GenerationRun = std::map<std::string, std::vector<GeneratedItem>>;

inline std::string item_id_of(const datasetio::InstructionRecord& r, std::size_t index) {
  auto id = r.id();
  return id.empty() ? "item-" + std::to_string(index) : id;
}

/// Asks every model for feedback on every test essay through `gw`.
/// Per-item failures are recorded; a model that fails on every item throws.
inline GenerationRun run_generation(const std::vector<std::string>& models,
                                    const std::vector<datasetio::InstructionRecord>& test_set,
                                    gateway::Gateway& gw, const promptkit::PromptTemplate& feedback_template,
                                    const gateway::GenerationParams& params = gateway::inference_params()) {
  if (models.empty()) throw ParamError("run_generation needs at least one model");
  if (test_set.empty()) throw ParamError("run_generation needs a non-empty test set");
  params.validate();

  std::vector<std::vector<ChatMessage>> prompts;
  prompts.reserve(test_set.size());
  for (const auto& r : test_set) prompts.push_back(promptkit::render(feedback_template, {{"essay", r.input}}).messages);

  GenerationRun run;
  for (const auto& model : models) {
    std::vector<gateway::ChatRequest> requests;
    requests.reserve(test_set.size());
    for (const auto& messages : prompts) requests.push_back({model, messages, params});
    const auto results = gw.batch_complete(requests);

    auto& out = run[model];
    std::size_t failures = 0;
    std::string last_error;
    for (std::size_t i = 0; i < results.size(); ++i) {
      GeneratedItem item{item_id_of(test_set[i], i), std::nullopt, {}};
      if (results[i].ok()) {
        item.text = results[i].response->content;
      } else {
        item.error = results[i].error;
        last_error = item.error;
        ++failures;
      }
      out.push_back(std::move(item));
    }
    if (failures == results.size())
      throw GatewayError("model " + model + " at " + gw.endpoint() + " failed on all " +
                         std::to_string(failures) + " items: " + last_error);
  }
  return run;
}

struct ModelScore {
  std::string model;
  metrics::CorpusRouge rouge;
  std::size_t excluded = 0;  // generation failures left out of the means
};

/// Corpus ROUGE per model against reference feedback keyed by item id.
inline std::vector<ModelScore> score_run(const GenerationRun& run,
                                         const std::map<std::string, std::string>& references,
                                         const std::string& scheme = "word") {
  std::vector<std::string> missing;
  for (const auto& [model, items] : run)
    for (const auto& item : items)
      if (item.text && !references.count(item.item_id)) missing.push_back(item.item_id);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw InputError("no reference for items: " + ids);
  }

  std::vector<ModelScore> out;
  for (const auto& [model, items] : run) {
    std::vector<std::pair<std::string, std::string>> pairs;
    ModelScore score{model, {}, 0};
    for (const auto& item : items) {
      if (!item.text) {
        ++score.excluded;
        continue;
      }
      pairs.emplace_back(*item.text, references.at(item.item_id));
    }
    if (pairs.empty()) throw InputError("model " + model + " has no successful generations to score");
    score.rouge = metrics::corpus_rouge(pairs, scheme);
    out.push_back(std::move(score));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

/// One line per model: "<model>: r1 / r2 / rL" (F1, three decimals).
inline std::string render_rouge_table(const std::vector<ModelScore>& rows) {
  std::string out;
  for (const auto& r : rows)
    out += r.model + ": " + util::format_fixed(r.rouge.rouge1.f1, 3) + " / " +
           util::format_fixed(r.rouge.rouge2.f1, 3) + " / " + util::format_fixed(r.rouge.rougeL.f1, 3) + '\n';
  return out;
}

inline std::string rouge_table_csv(const std::vector<ModelScore>& rows) {
  std::string out = metrics::rouge_csv_header();
  for (const auto& r : rows) out += metrics::rouge_csv_row(r.model, r.rouge);
  return out;
}

inline std::string rating_table_csv(const std::map<std::string, RatingDistribution>& dists) {
  std::string out = "model,total,A_count,B_count,C_count,D_count,E_count,A_pct,B_pct,C_pct,D_pct,E_pct\n";
  for (const auto& [model, d] : dists) {
    out += model + ',' + std::to_string(d.total);
    for (auto g : kAllGrades) out += ',' + std::to_string(d.counts[index_of(g)]);
    for (auto g : kAllGrades) out += ',' + d.percentage_text(g);
    out += '\n';
  }
  return out;
}

/// Grade rows by model columns, percentages with two decimals.
inline std::string render_rating_table(const std::map<std::string, RatingDistribution>& dists) {
  std::string out = "grade";
  for (const auto& [model, _] : dists) out += '\t' + model;
  out += '\n';
  for (auto g : kAllGrades) {
    out += std::string(to_string(g));
    for (const auto& [_, d] : dists) out += '\t' + d.percentage_text(g);
    out += '\n';
  }
  return out;
}

// Scores and ratings for one side (base or fine-tuned) of a comparison, keyed
// by model family so both sides line up.
struct EvalFragment {
  std::map<std::string, metrics::CorpusRouge> rouge;
  std::map<std::string, RatingDistribution> ratings;
};

struct ModelDelta {
  std::string model;
  std::optional<std::array<double, 3>> rouge_f1;      // ROUGE-1, ROUGE-2, ROUGE-L
  std::optional<std::array<long, 5>> grade_hundredths;  // A..E, percentage points x 100
};

/// Fine-tuned minus base, per model.
inline std::vector<ModelDelta> compare_runs(const EvalFragment& base, const EvalFragment& finetuned) {
  const auto check_same_models = [](const auto& a, const auto& b, const char* what) {
    for (const auto& [m, _] : a)
      if (!b.count(m)) throw InputError(std::string(what) + ": model " + m + " missing from fine-tuned side");
    for (const auto& [m, _] : b)
      if (!a.count(m)) throw InputError(std::string(what) + ": model " + m + " missing from base side");
  };
  check_same_models(base.rouge, finetuned.rouge, "rouge");
  check_same_models(base.ratings, finetuned.ratings, "ratings");

  std::map<std::string, ModelDelta> deltas;
  for (const auto& [model, b] : base.rouge) {
    const auto& f = finetuned.rouge.at(model);
    auto& d = deltas[model];
    d.model = model;
    d.rouge_f1 = {f.rouge1.f1 - b.rouge1.f1, f.rouge2.f1 - b.rouge2.f1, f.rougeL.f1 - b.rougeL.f1};
  }
  for (const auto& [model, b] : base.ratings) {
    const auto& f = finetuned.ratings.at(model);
    auto& d = deltas[model];
    d.model = model;
    std::array<long, 5> h{};
    for (auto g : kAllGrades) h[index_of(g)] = f.hundredths(g) - b.hundredths(g);
    d.grade_hundredths = h;
  }
  std::vector<ModelDelta> out;
  for (auto& [_, d] : deltas) out.push_back(std::move(d));
  return out;
}

inline std::string render_delta_table(const std::vector<ModelDelta>& deltas) {
  const auto signed_fixed = [](double v, int decimals) {
    auto s = util::format_fixed(v, decimals);
    if (s == "-0.000" || s == "-0.00") s.erase(0, 1);
    return (s.front() == '-' ? "" : "+") + s;
  };
  std::string out = "model,d_rouge1_f1,d_rouge2_f1,d_rougeL_f1,d_A,d_B,d_C,d_D,d_E\n";
  for (const auto& d : deltas) {
    out += d.model;
    for (int k = 0; k < 3; ++k) out += ',' + (d.rouge_f1 ? signed_fixed((*d.rouge_f1)[k], 3) : std::string());
    for (int k = 0; k < 5; ++k)
      out += ',' + (d.grade_hundredths ? signed_fixed(static_cast<double>((*d.grade_hundredths)[k]) / 100.0, 2)
                                       : std::string());
    out += '\n';
  }
  return out;
}

// Fragment JSON: {"rouge": {model: {...}}, "ratings": {model: {"counts": {...}}}}
inline json to_json(const metrics::RougeScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline metrics::RougeScore rouge_from_json(const json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

inline json to_json(const EvalFragment& f) {
  json j{{"rouge", json::object()}, {"ratings", json::object()}};
  for (const auto& [m, r] : f.rouge)
    j["rouge"][m] = {{"n_pairs", r.n_pairs}, {"scheme", r.scheme}, {"rouge1", to_json(r.rouge1)},
                     {"rouge2", to_json(r.rouge2)}, {"rougeL", to_json(r.rougeL)}};
  for (const auto& [m, d] : f.ratings) {
    json counts, pct;
    for (auto g : kAllGrades) {
      counts[std::string(to_string(g))] = d.counts[index_of(g)];
      pct[std::string(to_string(g))] = d.percentage(g);
    }
    j["ratings"][m] = {{"total", d.total}, {"counts", counts}, {"percentages", pct}};
  }
  return j;
}

inline EvalFragment fragment_from_json(const json& j) {
  EvalFragment f;
  const json rouge = j.contains("rouge") && j["rouge"].is_object() ? j["rouge"] : json::object();
  const json ratings = j.contains("ratings") && j["ratings"].is_object() ? j["ratings"] : json::object();
  for (const auto& [m, r] : rouge.items()) {
    metrics::CorpusRouge c;
    c.n_pairs = r.value("n_pairs", std::size_t{0});
    c.scheme = r.value("scheme", "word");
    c.rouge1 = rouge_from_json(r.at("rouge1"));
    c.rouge2 = rouge_from_json(r.at("rouge2"));
    c.rougeL = rouge_from_json(r.at("rougeL"));
    f.rouge[m] = c;
  }
  for (const auto& [m, r] : ratings.items()) {
    RatingDistribution d;
    d.model_id = m;
    for (auto g : kAllGrades) {
      d.counts[index_of(g)] = r.at("counts").value(std::string(to_string(g)), std::size_t{0});
      d.total += d.counts[index_of(g)];
    }
    f.ratings[m] = d;
  }
  return f;
}

}  // namespace syntaxforge::evalharness
