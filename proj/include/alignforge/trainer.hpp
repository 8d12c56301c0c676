#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "alignforge/objectives.hpp"
#include "alignforge/tinylm.hpp"

namespace alignforge::trainer {

using objectives::KTOTokenExample;
using objectives::PreferenceExample;
using objectives::SequenceExample;
using tinylm::LMParams;

/// A stage aborted (non-finite loss, mismatched data).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { sft, dpo, kto };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

struct TrainConfig {
  Method method = Method::sft;
  int epochs = 1;
  int batch_size = 8;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  objectives::DPOConfig dpo;
  objectives::KTOConfig kto;
  int eval_every = 25;
  /// Records used for eval entries; 0 means the whole dataset.
  int eval_size = 64;
  int parallelism = 1;

  void validate() const;
};

/// Adam with bias correction over flat buffers. `step` is 1-based.
struct AdamState {
  LMParams m;
  LMParams v;
  int step = 0;
};

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, int step, double lr, double beta1, double beta2, double eps);

AdamState make_adam_state(const LMParams& like);
void adam_step(LMParams& params, const LMParams& grads, AdamState& state, const TrainConfig& config);

/// Scales grads in place so their global norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(LMParams& grads, double max_norm);

using StageData = std::variant<std::vector<SequenceExample>, std::vector<PreferenceExample>,
                               std::vector<KTOTokenExample>>;

Method method_for(const StageData& data);

struct RunRecord {
  int stage = 0;
  int step = 0;
  double loss = 0.0;  // on the fixed eval subset
  std::map<std::string, double> diagnostics;  // includes mean batch loss as "train_loss"
  double timestamp = 0.0;  // seconds since the Unix epoch
  std::string checkpoint;  // set on the stage's final record
};

struct StageResult {
  LMParams params;
  std::vector<RunRecord> records;
};

using RecordSink = std::function<void(const RunRecord&)>;

/// Runs config.epochs seeded passes of Adam over `data`. DPO and KTO use a
/// frozen copy of `start` as the reference model. Eval records are taken
/// before the first update, every eval_every steps, and after the last one.
StageResult train_stage(const LMParams& start, const StageData& data, const TrainConfig& config,
                        int stage_index = 0, const RecordSink& sink = {});

/// Loss and diagnostics of `params` on the first eval_size records.
RunRecord evaluate(const LMParams& params, const LMParams& reference, const StageData& data,
                   const TrainConfig& config);

struct Stage {
  std::string dataset_id;
  TrainConfig config;
};

struct StagePlan {
  std::string name;
  std::vector<Stage> stages;
  std::filesystem::path initial_checkpoint;
  std::filesystem::path output_dir;
};

struct ResolvedData {
  StageData data;
  std::string sha256;  // content hash recorded in the manifest
};

using DataResolver = std::function<ResolvedData(const std::string& dataset_id, Method method)>;

struct PlanResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path manifest;
  std::vector<RunRecord> records;
};

/// Executes stages in order. Writes per stage `stage<i>_<method>.ckpt` (and
/// `stage<i>_reference.ckpt` for dpo/kto), then `final.ckpt`, `manifest.json`
/// and `log.jsonl` into output_dir. A failing stage leaves earlier files.
PlanResult run_plan(const StagePlan& plan, const DataResolver& resolve,
                    const RecordSink& sink = {});

inline constexpr std::string_view kDefaultTaskInstruction =
    "Answer the patient's medical question.";

inline constexpr std::string_view kDefaultBaselineInstruction =
    "You are a compassionate doctor. Answer the patient's question with medical knowledge "
    "while comforting their negative emotions.";

/// Model prompt text: instruction line then the question. An empty
/// instruction yields the question alone.
std::string render_prompt(std::string_view instruction, std::string_view question);

/// Samples from unchanged params with `instruction` placed before the question.
std::string prompt_baseline(const LMParams& params, std::string_view question,
                            std::string_view instruction = kDefaultBaselineInstruction,
                            const tinylm::SampleOptions& options = {});

/// Decoded text of a sampled completion (specials removed).
std::string generate(const LMParams& params, std::string_view prompt,
                     const tinylm::SampleOptions& options, bool* truncated = nullptr);

}  // namespace alignforge::trainer
