// syntaxforge: build and evaluate an essay -> syntax-feedback instruction dataset.

#include <CLI11.hpp>

#include <csignal>
#include <iostream>
#include <optional>

#include "syntaxforge/cli.hpp"

namespace {

namespace cli = syntaxforge::cli;
namespace fs = std::filesystem;

syntaxforge::evalharness::AnnotationService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int emit(const cli::CommandResult& r, bool json_output) {
  if (json_output)
    std::cout << r.summary.dump(2) << '\n';
  else
    std::cout << r.report;
  return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Build, filter, split and evaluate an essay syntax-feedback instruction dataset."};
  app.footer(std::string(cli::kExitCodeHelp));
  app.require_subcommand(1);

  std::optional<fs::path> config_path;
  bool dry_run = false;
  bool json_output = false;
  app.add_option("--config", config_path, "JSON pipeline configuration file")->check(CLI::ExistingFile);
  app.add_flag("--dry-run", dry_run, "validate inputs and report without writing any file");
  app.add_flag("--json", json_output, "print the machine-readable summary instead of the text report");

  // ingest
  cli::IngestOptions ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "load a TSV or JSONL essay corpus and write essays JSONL");
  ingest_cmd->add_option("input", ingest.input, "corpus file")->required();
  ingest_cmd->add_option("--format", ingest.format, "tsv or jsonl (default: from extension)");
  ingest_cmd->add_option("-o,--out", ingest.out, "essays JSONL to write")->required();

  // scrub / genfeedback / filter
  cli::StageOptions scrub, genfeedback, filter;
  auto* scrub_cmd = app.add_subcommand("scrub", "replace anonymization placeholders through the gateway");
  scrub_cmd->add_option("input", scrub.input, "essays JSONL")->required();
  scrub_cmd->add_option("-o,--out", scrub.out, "scrubbed essays JSONL")->required();

  auto* gen_cmd = app.add_subcommand("genfeedback", "generate syntax feedback records for essays");
  gen_cmd->add_option("input", genfeedback.input, "scrubbed essays JSONL")->required();
  gen_cmd->add_option("-o,--out", genfeedback.out, "instruction records JSONL")->required();

  auto* filter_cmd = app.add_subcommand("filter", "keep essays or records inside the word-count window");
  filter_cmd->add_option("input", filter.input, "essays or records JSONL")->required();
  filter_cmd->add_option("-o,--out", filter.out, "filtered JSONL")->required();
  std::optional<std::size_t> min_words, max_words;
  filter_cmd->add_option("--min-words", min_words, "inclusive lower bound (default 100)");
  filter_cmd->add_option("--max-words", max_words, "inclusive upper bound (default 700)");

  // split
  cli::SplitOptions split;
  auto* split_cmd = app.add_subcommand("split", "seeded train/test split of instruction records");
  split_cmd->add_option("input", split.input, "records JSONL")->required();
  split_cmd->add_option("-o,--out", split.out_dir, "output directory")->required();
  split_cmd->add_option("--test-size", split.test_size, "number of test records (default 300)");
  split_cmd->add_option("--seed", split.seed, "shuffle seed (default: config seed, 42)");
  split_cmd->add_flag("--stratify", split.stratify, "keep essay_set proportions in the test split");

  // stats
  cli::StatsOptions stats;
  auto* stats_cmd = app.add_subcommand("stats", "token-length histogram CSV");
  stats_cmd->add_option("input", stats.input, "essays or records JSONL")->required();
  stats_cmd->add_option("-o,--out", stats.out, "histogram CSV")->required();
  stats_cmd->add_option("--scheme", stats.scheme, "tokenization scheme: word, whitespace, bpe")->capture_default_str();
  stats_cmd->add_option("--bucket-width", stats.bucket_width, "histogram bucket width")->capture_default_str();
  stats_cmd->add_option("--merges", stats.merges, "BPE merges file; registers scheme 'bpe'")->check(CLI::ExistingFile);
  stats_cmd->add_option("--field", stats.field, "record field: input or output (default output)");

  // rouge
  cli::RougeOptions rouge;
  auto* rouge_cmd = app.add_subcommand("rouge", "score generations against reference feedback");
  rouge_cmd->add_option("candidates", rouge.candidates, "generations JSONL")->required();
  rouge_cmd->add_option("references", rouge.references, "reference records JSONL")->required();
  rouge_cmd->add_option("-o,--out", rouge.out, "ROUGE CSV");
  rouge_cmd->add_option("--scheme", rouge.scheme, "tokenization scheme")->capture_default_str();

  // eval
  cli::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "generate feedback with each model over the test set and score it");
  eval_cmd->add_option("test", eval.test_set, "test records JSONL")->required();
  eval_cmd->add_option("-m,--model", eval.models, "model id (repeatable)")->required();
  eval_cmd->add_option("-o,--out", eval.out_dir, "output directory")->required();
  eval_cmd->add_option("--ratings", eval.ratings, "ratings JSONL to aggregate")->check(CLI::ExistingFile);
  eval_cmd->add_option("--limit", eval.limit, "score only the first N test items");
  eval_cmd->add_option("--scheme", eval.scheme, "tokenization scheme")->capture_default_str();

  // compare
  cli::CompareOptions compare;
  auto* compare_cmd = app.add_subcommand("compare", "fine-tuned minus base deltas from two eval fragments");
  compare_cmd->add_option("base", compare.base, "base fragment.json")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("finetuned", compare.finetuned, "fine-tuned fragment.json")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("-o,--out", compare.out, "delta JSON");

  // train-config
  cli::TrainConfigOptions train;
  auto* train_cmd = app.add_subcommand("train-config", "write LoRA training configs for the baseline models");
  train_cmd->add_option("-m,--model", train.models, "base model id (repeatable; default: the three baselines)");
  train_cmd->add_option("--set", train.sets, "override key=value (repeatable)");
  train_cmd->add_option("-o,--out", train.out_dir, "output directory")->required();

  // serve
  cli::ServeOptions serve;
  auto* serve_cmd = app.add_subcommand("serve", "run the rating HTTP API");
  serve_cmd->add_option("items", serve.items, "annotation items JSONL")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--store", serve.store, "ratings JSONL store")->required();
  serve_cmd->add_option("--host", serve.host)->capture_default_str();
  serve_cmd->add_option("--port", serve.port)->capture_default_str();
  serve_cmd->add_option("--ui-dir", serve.ui_dir, "static UI directory")->check(CLI::ExistingDirectory);

  // run
  cli::RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "ingest, scrub, genfeedback, filter and split in one go");
  run_cmd->add_option("corpus", run.corpus, "corpus file")->required();
  run_cmd->add_option("--format", run.format, "tsv or jsonl (default: from extension)");
  run_cmd->add_option("-o,--out", run.out_dir, "output directory")->required();
  run_cmd->add_flag("--filter-first", run.filter_first, "apply the length filter to raw essays before scrubbing");
  run_cmd->add_flag("--stratify", run.stratify, "stratify the split by essay_set");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitConfig;
  }

  try {
    auto config = cli::load_config(config_path);
    if (filter_cmd->parsed()) {
      if (min_words) config.filter.min_words = *min_words;
      if (max_words) config.filter.max_words = *max_words;
    }
    config.validate();

    const auto locked = [&](const fs::path& dir, auto&& body) {
      if (dry_run) return body();
      syntaxforge::util::DirectoryLock lock(dir);
      return body();
    };

    if (ingest_cmd->parsed()) {
      ingest.dry_run = dry_run;
      return emit(locked(cli::lock_dir_for(ingest.out), [&] { return cli::ingest_stage(ingest); }), json_output);
    }
    if (scrub_cmd->parsed()) {
      scrub.dry_run = dry_run;
      return emit(locked(cli::lock_dir_for(scrub.out), [&] { return cli::scrub_stage(scrub, config); }), json_output);
    }
    if (gen_cmd->parsed()) {
      genfeedback.dry_run = dry_run;
      return emit(locked(cli::lock_dir_for(genfeedback.out),
                         [&] { return cli::genfeedback_stage(genfeedback, config); }),
                  json_output);
    }
    if (filter_cmd->parsed()) {
      filter.dry_run = dry_run;
      return emit(locked(cli::lock_dir_for(filter.out), [&] { return cli::filter_stage(filter, config); }),
                  json_output);
    }
    if (split_cmd->parsed()) {
      split.dry_run = dry_run;
      return emit(locked(split.out_dir, [&] { return cli::split_stage(split, config); }), json_output);
    }
    if (stats_cmd->parsed()) {
      stats.dry_run = dry_run;
      return emit(locked(cli::lock_dir_for(stats.out), [&] { return cli::stats_command(stats); }), json_output);
    }
    if (rouge_cmd->parsed()) {
      rouge.dry_run = dry_run;
      if (!rouge.out) return emit(cli::rouge_command(rouge), json_output);
      return emit(locked(cli::lock_dir_for(*rouge.out), [&] { return cli::rouge_command(rouge); }), json_output);
    }
    if (eval_cmd->parsed()) {
      eval.dry_run = dry_run;
      return emit(locked(eval.out_dir, [&] { return cli::eval_command(eval, config); }), json_output);
    }
    if (compare_cmd->parsed()) {
      compare.dry_run = dry_run;
      if (!compare.out) return emit(cli::compare_command(compare), json_output);
      return emit(locked(cli::lock_dir_for(*compare.out), [&] { return cli::compare_command(compare); }),
                  json_output);
    }
    if (train_cmd->parsed()) {
      train.dry_run = dry_run;
      return emit(locked(train.out_dir, [&] { return cli::train_config_command(train); }), json_output);
    }
    if (run_cmd->parsed()) {
      run.dry_run = dry_run;
      return emit(locked(run.out_dir, [&] { return cli::run_pipeline(run, config); }), json_output);
    }
    if (serve_cmd->parsed()) {
      if (dry_run) {
        const auto items = syntaxforge::evalharness::read_annotation_items(serve.items);
        std::cout << items.size() << " items; would listen on " << serve.host << ':' << serve.port << '\n';
        return cli::kExitOk;
      }
      auto service = cli::make_annotation_service(serve, config);
      const int port = service->bind(serve.host, serve.port);
      g_service = service.get();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on http://" << serve.host << ':' << port << '\n';
      service->serve();
      g_service = nullptr;
      return cli::kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return cli::kExitFailure;
}
