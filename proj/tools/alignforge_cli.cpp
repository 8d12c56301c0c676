#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "alignforge/common.hpp"
#include "alignforge/pipeline.hpp"

namespace pl = alignforge::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"alignforge: emotion-aware alignment pipeline for medical dialogue models"};
  app.require_subcommand(1);

  std::string config_path = "configs/desk.json";
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "Pipeline configuration file");
  app.add_option("--set", overrides, "Override a config field, e.g. --set train.sft.epochs=2")
      ->take_all()
      ->allow_extra_args(false);

  auto* synth = app.add_subcommand("synthesize", "Write the templated synthetic corpus to the raw paths");
  std::size_t train_count = 200, test_count = 50, pretrain_count = 1000;
  synth->add_option("--train", train_count, "Training dialogues")->capture_default_str();
  synth->add_option("--test", test_count, "Test dialogues")->capture_default_str();
  synth->add_option("--pretrain", pretrain_count, "Pretraining dialogues (needs paths.raw_pretrain)")
      ->capture_default_str();

  auto* ingest = app.add_subcommand("ingest", "Validate raw dialogues and copy them into the work directory");

  auto* rewrite = app.add_subcommand("rewrite", "Rewrite the ER or EQ+SR training subset");
  std::string subset;
  rewrite->add_option("subset", subset, "er | eqsr")->required()->check(CLI::IsMember({"er", "eqsr"}));

  auto* train = app.add_subcommand("train", "Train a plan from the base model");
  std::string train_plan;
  train->add_option("plan", train_plan, "Plan name")->required();

  auto* generate = app.add_subcommand("generate", "Generate one response per test question");
  std::string gen_plan, checkpoint, test_set;
  generate->add_option("plan", gen_plan, "Plan name")->required();
  generate->add_option("--checkpoint", checkpoint, "Checkpoint (default: the plan's final checkpoint)");
  generate->add_option("--test-set", test_set, "EQ+SR-format test set (default: data/test_eqsr.jsonl)");

  auto* score = app.add_subcommand("score", "Score responses and write the report");
  std::vector<std::string> score_methods;
  score->add_option("methods", score_methods, "Plans to score (default: eval.methods)");

  auto* report = app.add_subcommand("report", "Re-render the report from report.json");
  auto* run_all = app.add_subcommand("run-all", "Run every step for the configured plans");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? pl::kExitOk : pl::kExitUsage;
  }

  return pl::run_command(
      [&]() -> int {
        const auto config = pl::load_config(config_path, overrides);
        if (synth->parsed()) {
          return pl::cmd_synthesize(config, train_count, test_count, pretrain_count, std::cout);
        }
        if (ingest->parsed()) return pl::cmd_ingest(config, std::cout);
        if (rewrite->parsed()) {
          return pl::cmd_rewrite(config, alignforge::rewriter::parse_kind(subset), std::cout, std::cerr);
        }
        if (train->parsed()) return pl::cmd_train(config, train_plan, std::cout, std::cerr);
        if (generate->parsed()) {
          std::optional<std::filesystem::path> ckpt, tests;
          if (!checkpoint.empty()) ckpt = checkpoint;
          if (!test_set.empty()) tests = test_set;
          return pl::cmd_generate(config, gen_plan, std::cout, std::cerr, ckpt, tests);
        }
        if (score->parsed()) return pl::cmd_score(config, score_methods, std::cout, std::cerr);
        if (report->parsed()) return pl::cmd_report(config, std::cout);
        if (run_all->parsed()) return pl::cmd_run_all(config, std::cout, std::cerr);
        return pl::kExitUsage;
      },
      std::cerr);
}
