#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <set>

#include "eval_support.hpp"
#include "syntaxforge/cli.hpp"
#include "test_support.hpp"

using namespace syntaxforge;
using namespace syntaxforge::cli;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args) {
  const auto cmd = std::string(SYNTAXFORGE_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (const auto n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

PipelineConfig fixture_config() { return load_config(testsupport::fixture("pipeline_config.json")); }

std::unique_ptr<gateway::Gateway> scripted_gateway(const fs::path& cache,
                                                   std::shared_ptr<gateway::MockBackend>* backend_out = nullptr) {
  auto backend = gateway::MockBackend::from_script(testsupport::fixture("mock_pipeline.json"));
  if (backend_out) *backend_out = backend;
  auto options = testsupport::quick_options();
  options.cache_dir = cache;
  return std::make_unique<gateway::Gateway>(backend, options);
}

// Relative path -> content for every regular file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = testsupport::slurp(e.path());
  return out;
}

std::vector<nlohmann::json> jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  for (const auto& line : util::split_lines(testsupport::slurp(p)))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST(ExitCodes, MapErrorFamilies) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(ParamError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(SchemaError("x")), kExitInput);
  EXPECT_EQ(exit_code_for(ParseError("x")), kExitInput);
  EXPECT_EQ(exit_code_for(TransportError("x")), kExitGateway);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kExitFailure);
}

TEST(Config, UnknownKeysAndRelativePaths) {
  EXPECT_THROW(config_from_json(nlohmann::json{{"seeds", 1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"endpoint", {{"url", "x"}}}}), ConfigError);
  const auto c = fixture_config();
  ASSERT_TRUE(c.mock_script);
  EXPECT_EQ(*c.mock_script, testsupport::fixture("mock_pipeline.json"));
  EXPECT_EQ(c.split.test_size, 3u);
  EXPECT_EQ(c.split.seed, 42u);
  EXPECT_EQ(c.retry.initial_backoff.count(), 0);
  EXPECT_DOUBLE_EQ(c.feedback_params.temperature, 0.3);
  const auto defaults = load_config(std::nullopt);
  EXPECT_EQ(defaults.filter.min_words, 100u);
  EXPECT_EQ(defaults.filter.max_words, 700u);
  TempDir dir;
  testsupport::spit(dir / "bad.json", "{not json");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
}

TEST(Binary, IngestReportsCount) {
  TempDir dir;
  testsupport::spit(dir / "c.tsv", "essay_id\tessay_set\tessay\n1\t1\ta b\n2\t2\tc d e\n");
  const auto r = run_cli("ingest " + q(dir / "c.tsv") + " -o " + q(dir / "e.jsonl"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("2 essays"), std::string::npos) << r.out;
  EXPECT_EQ(testsupport::count_lines(dir / "e.jsonl"), 2u);
  EXPECT_TRUE(fs::exists(dir / "e.jsonl.summary.json"));
}

TEST(Binary, MissingColumnExitsInputError) {
  TempDir dir;
  testsupport::spit(dir / "c.tsv", "essay_id\tessay\n1\ta b\n");
  const auto r = run_cli("ingest " + q(dir / "c.tsv") + " -o " + q(dir / "e.jsonl"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("essay_set"), std::string::npos);
}

TEST(Binary, DryRunWritesNothing) {
  TempDir dir;
  const auto r = run_cli("--dry-run --config " + q(testsupport::fixture("pipeline_config.json")) + " run " +
                         q(testsupport::fixture("asap_sample.tsv")) + " -o " + q(dir / "out"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_FALSE(fs::exists(dir / "out"));
  EXPECT_TRUE(fs::is_empty(dir.path()));
}

TEST(Binary, HelpListsExitCodes) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"0", "2", "3", "4", "5", "partial"}) EXPECT_NE(r.out.find(s), std::string::npos) << s;
  EXPECT_EQ(run_cli("filter").code, 2);
}

TEST(Binary, FullRunIsRepeatable) {
  TempDir dir;
  const auto args = "--config " + q(testsupport::fixture("pipeline_config.json")) + " run " +
                    q(testsupport::fixture("asap_sample.tsv")) + " -o " + q(dir / "out");
  const auto first = run_cli(args);
  ASSERT_EQ(first.code, 0) << first.out;
  auto before = tree(dir / "out");
  const auto second = run_cli(args);
  ASSERT_EQ(second.code, 0) << second.out;
  EXPECT_EQ(tree(dir / "out"), before);
  EXPECT_EQ(testsupport::count_lines(dir / "out" / "split" / "test.jsonl"), 3u);
}

TEST(Binary, LockConflictIsReported) {
  TempDir dir;
  fs::create_directories(dir / "out");
  util::DirectoryLock held(dir / "out");
  const auto r = run_cli("train-config -o " + q(dir / "out"));
  EXPECT_NE(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("lock"), std::string::npos) << r.out;
}

TEST(Stages, ScrubPassesCleanEssaysThroughUnchanged) {
  TempDir dir;
  std::vector<corpus::Essay> essays = {{"1", 1, "Clean text here."}, {"2", 2, "Another one."}};
  corpus::write_jsonl(dir / "in.jsonl", essays);
  // No placeholders, so no gateway is needed.
  auto c = PipelineConfig{};
  const auto r = scrub_stage({dir / "in.jsonl", dir / "out.jsonl", false}, c);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(testsupport::slurp(dir / "out.jsonl"), testsupport::slurp(dir / "in.jsonl"));
  EXPECT_EQ(r.summary["passed_through"], 2);
}

TEST(Stages, UnresolvedPlaceholderIsExcludedWithReason) {
  TempDir dir;
  corpus::write_jsonl(dir / "in.jsonl", std::vector<corpus::Essay>{{"7", 1, "Hello @PERSON1 and friends."}});
  std::unique_ptr<gateway::Gateway> gw = std::make_unique<gateway::Gateway>(
      gateway::MockBackend::constant("Hello @PERSON1 and friends."), testsupport::quick_options());
  const auto r = scrub_stage({dir / "in.jsonl", dir / "out.jsonl", false}, PipelineConfig{}, &gw);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(testsupport::count_lines(dir / "out.jsonl"), 0u);
  const auto log = jsonl(dir / "out.jsonl.excluded.jsonl");
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0]["reason"], "unresolved_placeholders");
  EXPECT_EQ(log[0]["stage"], "scrub");
  EXPECT_EQ(log[0]["id"], "7");
}

TEST(Stages, AllGatewayFailuresRaise) {
  TempDir dir;
  corpus::write_jsonl(dir / "in.jsonl", std::vector<corpus::Essay>{{"7", 1, "Hello @PERSON1."}});
  std::unique_ptr<gateway::Gateway> gw = std::make_unique<gateway::Gateway>(
      gateway::MockBackend::sequence({gateway::MockReply::http(500)}), testsupport::quick_options());
  EXPECT_THROW(scrub_stage({dir / "in.jsonl", dir / "out.jsonl", false}, PipelineConfig{}, &gw), GatewayError);
}

TEST(Stages, HeaderlessFeedbackIsParseError) {
  TempDir dir;
  corpus::write_jsonl(dir / "in.jsonl", std::vector<corpus::Essay>{{"9", 1, testsupport::words(120)}});
  std::unique_ptr<gateway::Gateway> gw = std::make_unique<gateway::Gateway>(
      gateway::MockBackend::constant("This essay is quite good overall."), testsupport::quick_options());
  const auto r = genfeedback_stage({dir / "in.jsonl", dir / "rec.jsonl", false}, PipelineConfig{}, &gw);
  EXPECT_EQ(testsupport::count_lines(dir / "rec.jsonl"), 0u);
  const auto log = jsonl(dir / "rec.jsonl.excluded.jsonl");
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0]["reason"], "parse_error");
  EXPECT_EQ(r.summary["excluded"]["parse_error"], 1);
}

TEST(Pipeline, FixtureCountsPerStage) {
  TempDir dir;
  std::unique_ptr<gateway::Gateway> gw = scripted_gateway(dir / "cache");
  const auto r = run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "out", false, false, false},
                              fixture_config(), &gw);
  EXPECT_EQ(r.exit_code, 0) << r.report;
  const auto& s = r.summary["stages"];
  EXPECT_EQ(s["ingest"]["essays"], 20);
  EXPECT_EQ(s["scrub"]["output"], 19);
  EXPECT_EQ(s["scrub"]["excluded"]["unresolved_placeholders"], 1);
  EXPECT_EQ(s["genfeedback"]["emitted"], 18);
  EXPECT_EQ(s["genfeedback"]["excluded"]["parse_error"], 1);
  EXPECT_EQ(testsupport::count_lines(dir / "out" / "records.filtered.jsonl"), 15u);
  EXPECT_EQ(testsupport::count_lines(dir / "out" / "split" / "train.jsonl"), 12u);
  EXPECT_EQ(testsupport::count_lines(dir / "out" / "split" / "test.jsonl"), 3u);
}

TEST(Pipeline, EveryEssayIsKeptOrLoggedExactlyOnce) {
  TempDir dir;
  std::unique_ptr<gateway::Gateway> gw = scripted_gateway(dir / "cache");
  run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "out", false, false, false},
               fixture_config(), &gw);
  std::multiset<std::string> seen;
  for (const auto* log : {"scrubbed.jsonl.excluded.jsonl", "records.jsonl.excluded.jsonl",
                          "records.filtered.jsonl.excluded.jsonl"})
    if (fs::exists(dir / "out" / log))
      for (const auto& line : jsonl(dir / "out" / log)) seen.insert(line["id"].get<std::string>());
  for (const auto& r : datasetio::read_jsonl(dir / "out" / "records.filtered.jsonl")) seen.insert(r.id());
  const auto corpus = corpus::load_corpus(testsupport::fixture("asap_sample.tsv"), corpus::CorpusFormat::Tsv);
  ASSERT_EQ(seen.size(), corpus.essays.size());
  for (const auto& e : corpus.essays) EXPECT_EQ(seen.count(e.id), 1u) << e.id;
}

TEST(Pipeline, WarmCacheReplaysWithoutBackendCalls) {
  TempDir dir;
  std::shared_ptr<gateway::MockBackend> cold_backend, warm_backend;
  std::unique_ptr<gateway::Gateway> cold = scripted_gateway(dir / "cache", &cold_backend);
  run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "a", false, false, false},
               fixture_config(), &cold);
  EXPECT_GT(cold_backend->calls(), 0u);

  std::unique_ptr<gateway::Gateway> warm = scripted_gateway(dir / "cache", &warm_backend);
  run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "b", false, false, false},
               fixture_config(), &warm);
  EXPECT_EQ(warm_backend->calls(), 0u);
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
}

TEST(Pipeline, EmittedRecordsMeetDatasetInvariants) {
  TempDir dir;
  std::unique_ptr<gateway::Gateway> gw = scripted_gateway(dir / "cache");
  run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "out", false, false, false},
               fixture_config(), &gw);
  for (const auto* side : {"train.jsonl", "test.jsonl"}) {
    for (const auto& r : datasetio::read_jsonl(dir / "out" / "split" / side)) {
      EXPECT_TRUE(corpus::detect_placeholders(r.input).empty());
      const auto words = corpus::count_words(r.input);
      EXPECT_GE(words, 100u);
      EXPECT_LE(words, 700u);
      const auto doc = feedback::parse_feedback(r.output);
      EXPECT_TRUE(doc.parse_warnings.empty()) << r.id();
      EXPECT_EQ(feedback::serialize(doc), r.output);
      EXPECT_EQ(r.instruction, datasetio::kInstruction);
      EXPECT_EQ(r.meta.at("model"), "gpt-3.5-turbo-0125");
    }
  }
  const auto manifest = nlohmann::json::parse(testsupport::slurp(dir / "out" / "split" / "manifest.json"));
  EXPECT_EQ(manifest["counts"]["train"], 12);
  EXPECT_EQ(manifest["prompt_versions"]["scrub"], "placeholder_replacement@1");
}

TEST(Pipeline, FilterFirstWritesFilteredEssays) {
  TempDir dir;
  std::unique_ptr<gateway::Gateway> gw = scripted_gateway(dir / "cache");
  const auto r = run_pipeline({testsupport::fixture("asap_sample.tsv"), std::nullopt, dir / "out", true, false, false},
                              fixture_config(), &gw);
  EXPECT_TRUE(fs::exists(dir / "out" / "essays.filtered.jsonl"));
  EXPECT_FALSE(fs::exists(dir / "out" / "records.filtered.jsonl"));
  EXPECT_EQ(r.summary["stages"]["filter_essays"]["excluded"]["too_short"], 2);
  EXPECT_EQ(r.summary["stages"]["filter_essays"]["excluded"]["too_long"], 1);
}

TEST(SplitStage, FullScaleContract) {
  TempDir dir;
  std::vector<datasetio::InstructionRecord> records;
  for (std::size_t i = 0; i < 8320; ++i) {
    auto r = testsupport::eval_record(i);
    r.input += " " + testsupport::words(100);
    records.push_back(std::move(r));
  }
  datasetio::emit_jsonl(records, dir / "all.jsonl");
  auto c = PipelineConfig{};
  const auto r = split_stage({dir / "all.jsonl", dir / "split", std::nullopt, std::nullopt, false, false}, c, {});
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(testsupport::count_lines(dir / "split" / "train.jsonl"), 8020u);
  EXPECT_EQ(testsupport::count_lines(dir / "split" / "test.jsonl"), 300u);
}

TEST(StatsCommand, CountsSumToRecords) {
  TempDir dir;
  datasetio::emit_jsonl(testsupport::eval_records(25), dir / "r.jsonl");
  const auto r = stats_command({dir / "r.jsonl", dir / "h.csv", "word", 5, std::nullopt, "", false});
  std::size_t sum = 0;
  for (const auto& line : util::split_lines(testsupport::slurp(dir / "h.csv"))) {
    if (line.empty() || line.rfind("bucket", 0) == 0) continue;
    sum += std::stoul(line.substr(line.find(',') + 1));
  }
  EXPECT_EQ(sum, 25u);
  EXPECT_EQ(r.summary["records"], 25);
}

TEST(TrainConfigCommand, WritesGoldenFiles) {
  TempDir dir;
  const auto r = train_config_command({{}, {}, dir.path(), false});
  EXPECT_EQ(r.exit_code, 0);
  for (const auto& model : datasetio::baseline_models()) {
    const auto name = "train_config." + datasetio::config_file_stem(model) + ".txt";
    EXPECT_EQ(testsupport::slurp(dir / name), testsupport::slurp(testsupport::fixture("golden") / name));
  }
  EXPECT_THROW(train_config_command({{}, {"epochs"}, dir.path(), false}), ConfigError);
}

TEST(EvalCommand, EchoMockEndToEnd) {
  TempDir dir;
  const auto records = testsupport::eval_records(20);
  datasetio::emit_jsonl(records, dir / "test.jsonl");
  std::unique_ptr<gateway::Gateway> gw =
      std::make_unique<gateway::Gateway>(testsupport::echo_backend(records), testsupport::quick_options());
  const auto r = eval_command({dir / "test.jsonl", {"base", "tuned"}, dir / "eval", std::nullopt, std::nullopt, "word", false},
                              PipelineConfig{}, &gw);
  EXPECT_EQ(r.exit_code, 0) << r.report;
  for (const auto* f : {"generations.jsonl", "annotation_items.jsonl", "rouge.csv", "fragment.json", "eval.summary.json"})
    EXPECT_TRUE(fs::exists(dir / "eval" / f)) << f;
  const auto c = compare_command({dir / "eval" / "fragment.json", dir / "eval" / "fragment.json", std::nullopt, false});
  EXPECT_NE(c.report.find("+0.000"), std::string::npos) << c.report;
  EXPECT_EQ(c.report.find("-0.0"), std::string::npos) << c.report;

  const auto rescore = rouge_command({dir / "eval" / "generations.jsonl", dir / "test.jsonl", std::nullopt, "word", false});
  EXPECT_EQ(rescore.summary["models"]["base"]["rouge1"]["f1"], 1.0) << rescore.summary.dump();
}
