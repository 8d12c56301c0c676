#include "alignforge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::trainer {

using nlohmann::json;
using tinylm::Matrix;

std::string_view to_string(Method method) {
  switch (method) {
    case Method::sft: return "sft";
    case Method::dpo: return "dpo";
    case Method::kto: return "kto";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  if (name == "sft") return Method::sft;
  if (name == "dpo") return Method::dpo;
  if (name == "kto") return Method::kto;
  throw UsageError("unknown training method '" + std::string(name) + "' (expected sft, dpo or kto)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw UsageError("epochs must be at least 1");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("learning_rate must be a finite non-negative number");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw UsageError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw UsageError("adam_eps must be positive");
  if (!(grad_clip_norm > 0.0)) throw UsageError("grad_clip_norm must be positive");
  if (eval_every < 1) throw UsageError("eval_every must be at least 1");
  if (eval_size < 0) throw UsageError("eval_size must be non-negative");
  if (parallelism < 1) throw UsageError("parallelism must be at least 1");
  if (method == Method::dpo && !(dpo.beta > 0.0)) throw UsageError("dpo beta must be positive");
  if (method == Method::kto &&
      !(kto.beta > 0.0 && kto.lambda_d > 0.0 && kto.lambda_u > 0.0)) {
    throw UsageError("kto beta and lambdas must be positive");
  }
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, int step, double lr, double beta1, double beta2, double eps) {
  const double c1 = 1.0 - std::pow(beta1, step);
  const double c2 = 1.0 - std::pow(beta2, step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

AdamState make_adam_state(const LMParams& like) {
  return {tinylm::zeros_like(like), tinylm::zeros_like(like), 0};
}

void adam_step(LMParams& params, const LMParams& grads, AdamState& state, const TrainConfig& config) {
  ++state.step;
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t t = 0; t < p.size(); ++t) {
    const auto n = static_cast<std::size_t>(p[t]->size());
    adam_update({p[t]->data(), n}, {g[t]->data(), n}, {m[t]->data(), n}, {v[t]->data(), n},
                state.step, config.learning_rate, config.adam_beta1, config.adam_beta2,
                config.adam_eps);
  }
}

double clip_gradients(LMParams& grads, double max_norm) {
  const double norm = tinylm::global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Matrix* m : grads.tensors()) *m *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Stage loop

Method method_for(const StageData& data) {
  switch (data.index()) {
    case 0: return Method::sft;
    case 1: return Method::dpo;
    default: return Method::kto;
  }
}

namespace {

double now_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

std::size_t data_size(const StageData& data) {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

template <typename T>
std::vector<T> gather(const std::vector<T>& items, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

// Computes the stage objective on a subset of records. Reference log-probs
// for DPO come from a cache filled once at stage start.
class Objective {
 public:
  Objective(const LMParams& reference, const StageData& data, const TrainConfig& config)
      : reference_(reference), data_(data), config_(config) {
    if (const auto* pairs = std::get_if<std::vector<PreferenceExample>>(&data_)) {
      ref_cache_ = objectives::reference_logprobs(reference_, *pairs, config_.parallelism);
    }
  }

  objectives::LossOutput operator()(const LMParams& params, std::span<const std::size_t> idx,
                                    bool with_grads) const {
    objectives::LossOptions opts{with_grads, config_.parallelism};
    switch (data_.index()) {
      case 0: {
        const auto batch = gather(std::get<0>(data_), idx);
        return objectives::sft_loss(params, batch, opts);
      }
      case 1: {
        const auto batch = gather(std::get<1>(data_), idx);
        const auto ref = gather(ref_cache_, idx);
        return objectives::dpo_loss(params, ref, batch, config_.dpo, opts);
      }
      default: {
        const auto batch = gather(std::get<2>(data_), idx);
        return objectives::kto_loss(params, reference_, batch, config_.kto, opts);
      }
    }
  }

 private:
  const LMParams& reference_;
  const StageData& data_;
  const TrainConfig& config_;
  std::vector<objectives::ReferenceLogProbs> ref_cache_;
};

std::vector<std::size_t> eval_indices(const StageData& data, const TrainConfig& config) {
  std::size_t n = data_size(data);
  if (config.eval_size > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(config.eval_size));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

RunRecord eval_record(const Objective& objective, const LMParams& params,
                      std::span<const std::size_t> idx, int stage, int step) {
  const auto out = objective(params, idx, false);
  RunRecord r;
  r.stage = stage;
  r.step = step;
  r.loss = out.value;
  r.diagnostics = out.diagnostics;
  r.timestamp = now_seconds();
  return r;
}

void check_data(const StageData& data, const TrainConfig& config) {
  if (method_for(data) != config.method) {
    throw TrainingError("dataset format is " + std::string(to_string(method_for(data))) +
                        " but the stage method is " + std::string(to_string(config.method)));
  }
  const std::size_t n = data_size(data);
  if (n == 0) throw TrainingError("training dataset is empty");
  if (config.method == Method::kto && n < 2) throw TrainingError("kto needs at least 2 records");
}

}  // namespace

RunRecord evaluate(const LMParams& params, const LMParams& reference, const StageData& data,
                   const TrainConfig& config) {
  check_data(data, config);
  const Objective objective(reference, data, config);
  const auto idx = eval_indices(data, config);
  return eval_record(objective, params, idx, 0, 0);
}

StageResult train_stage(const LMParams& start, const StageData& data, const TrainConfig& config,
                        int stage_index, const RecordSink& sink) {
  config.validate();
  check_data(data, config);
  if (start.config.vocab_size < 4) throw UsageError("invalid start params");

  StageResult result;
  result.params = start;
  const LMParams reference = start;
  const Objective objective(reference, data, config);
  const auto eval_idx = eval_indices(data, config);
  AdamState adam = make_adam_state(start);

  double train_sum = 0.0;
  int train_count = 0;
  auto emit = [&](int step) {
    RunRecord r = eval_record(objective, result.params, eval_idx, stage_index, step);
    if (!std::isfinite(r.loss)) {
      throw TrainingError("non-finite eval loss at step " + std::to_string(step));
    }
    if (train_count > 0) r.diagnostics["train_loss"] = train_sum / train_count;
    train_sum = 0.0;
    train_count = 0;
    if (sink) sink(r);
    result.records.push_back(std::move(r));
  };

  emit(0);
  const std::size_t n = data_size(data);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      // z0 needs a mismatched partner inside the batch.
      if (config.method == Method::kto && end - begin < 2) continue;
      ++step;
      auto out = objective(result.params, std::span(order).subspan(begin, end - begin), true);
      if (!std::isfinite(out.value)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " of stage " +
                            std::to_string(stage_index));
      }
      train_sum += out.value;
      ++train_count;
      clip_gradients(out.gradients, config.grad_clip_norm);
      adam_step(result.params, out.gradients, adam, config);
      if (step % config.eval_every == 0) emit(step);
    }
  }
  if (result.records.back().step != step) emit(step);
  return result;
}

// ---------------------------------------------------------------------------
// Plans

namespace {

json config_json(const TrainConfig& c) {
  json j = {{"method", to_string(c.method)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"grad_clip_norm", c.grad_clip_norm},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"eval_size", c.eval_size}};
  if (c.method == Method::dpo) j["dpo"] = {{"beta", c.dpo.beta}};
  if (c.method == Method::kto) {
    j["kto"] = {{"beta", c.kto.beta}, {"lambda_d", c.kto.lambda_d}, {"lambda_u", c.kto.lambda_u}};
  }
  return j;
}

json record_json(const RunRecord& r) {
  json j = {{"stage", r.stage}, {"step", r.step}, {"loss", r.loss},
            {"diagnostics", r.diagnostics}, {"timestamp", r.timestamp}};
  if (!r.checkpoint.empty()) j["checkpoint"] = r.checkpoint;
  return j;
}

}  // namespace

PlanResult run_plan(const StagePlan& plan, const DataResolver& resolve, const RecordSink& sink) {
  for (const auto& stage : plan.stages) stage.config.validate();
  LMParams params = tinylm::load_checkpoint(plan.initial_checkpoint);
  std::filesystem::create_directories(plan.output_dir);

  PlanResult result;
  result.manifest = plan.output_dir / "manifest.json";
  const auto log_path = plan.output_dir / "log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());

  json manifest = {{"plan", plan.name},
                   {"initial_checkpoint_sha256", sha256_file(plan.initial_checkpoint)},
                   {"stages", json::array()}};
  auto write_manifest = [&] { write_file(result.manifest, manifest.dump(2) + "\n"); };

  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const auto& stage = plan.stages[i];
    const std::string tag = "stage" + std::to_string(i) + "_" + std::string(to_string(stage.config.method));
    const ResolvedData resolved = resolve(stage.dataset_id, stage.config.method);

    json entry = {{"index", i},
                  {"dataset", stage.dataset_id},
                  {"dataset_sha256", resolved.sha256},
                  {"method", to_string(stage.config.method)},
                  {"seed", stage.config.seed},
                  {"config", config_json(stage.config)}};
    entry["config_sha256"] = sha256_hex(entry["config"].dump());
    if (stage.config.method != Method::sft) {
      const std::string ref_name = "stage" + std::to_string(i) + "_reference.ckpt";
      tinylm::save_checkpoint(params, plan.output_dir / ref_name);
      entry["reference_checkpoint"] = ref_name;
      entry["reference_sha256"] = sha256_file(plan.output_dir / ref_name);
    }

    auto stage_sink = [&](const RunRecord& r) {
      log << record_json(r).dump() << "\n";
      log.flush();
      if (sink) sink(r);
    };
    StageResult out = train_stage(params, resolved.data, stage.config, static_cast<int>(i), stage_sink);
    params = std::move(out.params);

    const std::string ckpt = tag + ".ckpt";
    tinylm::save_checkpoint(params, plan.output_dir / ckpt);
    out.records.back().checkpoint = ckpt;
    entry["checkpoint"] = ckpt;
    entry["checkpoint_sha256"] = sha256_file(plan.output_dir / ckpt);
    entry["steps"] = out.records.back().step;
    entry["final_eval"] = {{"loss", out.records.back().loss},
                           {"diagnostics", out.records.back().diagnostics}};
    entry["final_eval"]["diagnostics"].erase("train_loss");
    entry["initial_eval"] = {{"loss", out.records.front().loss},
                             {"diagnostics", out.records.front().diagnostics}};
    manifest["stages"].push_back(std::move(entry));
    for (auto& r : out.records) result.records.push_back(std::move(r));
    write_manifest();
  }

  result.final_checkpoint = plan.output_dir / "final.ckpt";
  tinylm::save_checkpoint(params, result.final_checkpoint);
  manifest["final_checkpoint"] = "final.ckpt";
  manifest["final_sha256"] = sha256_file(result.final_checkpoint);
  write_manifest();
  return result;
}

// ---------------------------------------------------------------------------
// Generation

std::string render_prompt(std::string_view instruction, std::string_view question) {
  if (instruction.empty()) return std::string(question);
  return std::string(instruction) + "\n" + std::string(question);
}

std::string generate(const LMParams& params, std::string_view prompt,
                     const tinylm::SampleOptions& options, bool* truncated) {
  tinylm::Tokens tokens = tinylm::encode(prompt);
  const int ctx = params.config.context_len;
  // Leave room for the reply: at most half the window, at least one token.
  const int reserve = std::max(1, std::min(options.max_new, ctx / 2));
  const auto limit = static_cast<std::size_t>(std::max(0, ctx - 2 - reserve));
  const bool cut = tokens.size() > limit;
  if (cut) tokens.erase(tokens.begin(), tokens.end() - static_cast<long>(limit));
  if (truncated) *truncated = cut;
  const auto out = tinylm::sample(params, tokens, options);
  return tinylm::decode(out, params.config.vocab_size);
}

std::string prompt_baseline(const LMParams& params, std::string_view question,
                            std::string_view instruction, const tinylm::SampleOptions& options) {
  return generate(params, render_prompt(instruction, question), options);
}

}  // namespace alignforge::trainer
