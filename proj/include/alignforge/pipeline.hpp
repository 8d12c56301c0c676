#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "alignforge/chat_client.hpp"
#include "alignforge/corpus.hpp"
#include "alignforge/eval.hpp"
#include "alignforge/rewriter.hpp"
#include "alignforge/tinylm.hpp"
#include "alignforge/trainer.hpp"

namespace alignforge::pipeline {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitBackend = 3;

struct RewriteSettings {
  std::string backend = "mock";  // mock | network
  std::size_t concurrency = 4;
  int max_retries = 2;
  double er_fraction = corpus::kDefaultErFraction;
  double max_failure_rate = 0.05;
  double backoff_base_seconds = 1.0;
  double backoff_cap_seconds = 30.0;
  chat::GenerationParams generation;
  std::optional<std::string> er_template;
  std::optional<std::string> eqsr_template;
};

struct GenerateSettings {
  int max_new = 200;
  double temperature = 0.0;
  std::string baseline_instruction = std::string(trainer::kDefaultBaselineInstruction);
};

struct EvalSettings {
  std::string judge_backend = "mock";  // mock | network
  std::vector<std::string> methods;
  std::vector<std::string> preference_methods;
  std::vector<eval::PreferenceDimension> preference_dimensions = {
      eval::PreferenceDimension::knowledgeable, eval::PreferenceDimension::emotional};
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path raw_train;
  std::filesystem::path raw_test;
  std::optional<std::filesystem::path> raw_pretrain;  // base-model corpus; train split when unset
  std::filesystem::path work_dir;
  RewriteSettings rewrite;
  tinylm::LMConfig model;
  trainer::TrainConfig pretrain;  // base model: SFT from random init on the pretraining corpus
  std::string instruction = std::string(trainer::kDefaultTaskInstruction);
  trainer::TrainConfig sft;
  trainer::TrainConfig dpo;
  trainer::TrainConfig kto;
  GenerateSettings generate;
  EvalSettings eval;
  std::vector<std::string> plans;  // trained and generated by run-all
  nlohmann::json snapshot;         // effective configuration after overrides
};

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and stored as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Relative paths resolve against base_dir. Throws UsageError on bad fields.
PipelineConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
PipelineConfig load_config(const std::filesystem::path& path,
                           const std::vector<std::string>& overrides = {});

/// Plan names accepted by cmd_train, in canonical order.
const std::vector<std::string>& plan_names();
/// Stages of a plan as (dataset, method); empty for base and prompt.
std::vector<std::pair<std::string, trainer::Method>> plan_stages(std::string_view plan);

// Tokenized training records. Completions end with EOS; records are fitted
// to the context window.
std::vector<trainer::SequenceExample> make_sft_data(
    const std::vector<std::pair<std::string, std::string>>& prompt_completion,
    std::string_view instruction, int context_len);
std::vector<trainer::PreferenceExample> make_dpo_data(const std::vector<corpus::PreferencePair>& pairs,
                                                      std::string_view instruction, int context_len);
std::vector<trainer::KTOTokenExample> make_kto_data(const std::vector<corpus::KTOExample>& examples,
                                                    std::string_view instruction, int context_len);

// Work-directory layout.
struct WorkPaths {
  std::filesystem::path root;
  std::filesystem::path train() const { return root / "data" / "train.jsonl"; }
  std::filesystem::path test() const { return root / "data" / "test.jsonl"; }
  std::filesystem::path er() const { return root / "data" / "er.jsonl"; }
  std::filesystem::path eqsr() const { return root / "data" / "eqsr.jsonl"; }
  std::filesystem::path test_eqsr() const { return root / "data" / "test_eqsr.jsonl"; }
  std::filesystem::path pretrain() const { return root / "data" / "pretrain.jsonl"; }
  std::filesystem::path failures(std::string_view subset) const {
    return root / "data" / (std::string(subset) + "_failures.jsonl");
  }
  std::filesystem::path init_checkpoint() const { return root / "models" / "init.ckpt"; }
  std::filesystem::path pretrain_dir() const { return root / "models" / "pretrain"; }
  std::filesystem::path base_checkpoint() const { return pretrain_dir() / "final.ckpt"; }
  std::filesystem::path run_dir(std::string_view plan) const { return root / "runs" / std::string(plan); }
  std::filesystem::path responses(std::string_view plan) const {
    return root / "responses" / (std::string(plan) + ".jsonl");
  }
  std::filesystem::path scores_dir() const { return root / "scores"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

/// Client for the configured backend ("mock" or "network").
std::unique_ptr<chat::ChatClient> make_rewrite_client(const PipelineConfig& config);
std::unique_ptr<chat::ChatClient> make_judge_client(const PipelineConfig& config);

// Commands. Each returns a process exit code; failures throw the library's
// error types, which run_command maps to exit codes.
/// Writes the templated corpus to the raw paths; the pretraining corpus only
/// when paths.raw_pretrain is set.
int cmd_synthesize(const PipelineConfig& config, std::size_t train_count, std::size_t test_count,
                   std::size_t pretrain_count, std::ostream& out);
int cmd_ingest(const PipelineConfig& config, std::ostream& out);
int cmd_rewrite(const PipelineConfig& config, rewriter::Kind subset, std::ostream& out, std::ostream& err);
int cmd_train(const PipelineConfig& config, std::string_view plan, std::ostream& out, std::ostream& err);
int cmd_generate(const PipelineConfig& config, std::string_view plan, std::ostream& out, std::ostream& err,
                 const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                 const std::optional<std::filesystem::path>& test_set = std::nullopt);
int cmd_score(const PipelineConfig& config, const std::vector<std::string>& methods, std::ostream& out,
              std::ostream& err);
int cmd_report(const PipelineConfig& config, std::ostream& out);
/// ingest, rewrite er/eqsr, train and generate every configured plan, score, report.
int cmd_run_all(const PipelineConfig& config, std::ostream& out, std::ostream& err);

/// Runs fn and maps exceptions to exit codes with a message on err.
int run_command(const std::function<int()>& fn, std::ostream& err);

}  // namespace alignforge::pipeline
