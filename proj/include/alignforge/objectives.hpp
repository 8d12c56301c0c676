#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alignforge/tinylm.hpp"

namespace alignforge::objectives {

using tinylm::LMParams;
using tinylm::Tokens;

/// Tokenized (prompt, completion) record.
struct SequenceExample {
  Tokens prompt;
  Tokens completion;
};

struct PreferenceExample {
  Tokens prompt;
  Tokens chosen;
  Tokens rejected;
};

struct KTOTokenExample {
  Tokens prompt;
  Tokens completion;
  bool desirable = false;
};

struct DPOConfig {
  double beta = 0.1;
};

struct KTOConfig {
  double beta = 0.1;
  double lambda_d = 1.0;
  double lambda_u = 1.0;
};

struct LossOptions {
  bool compute_gradients = true;
  /// Worker threads for per-example work. Per-example gradients are reduced
  /// in index order, so results do not depend on this value.
  int parallelism = 1;
};

struct LossOutput {
  double value = 0.0;
  LMParams gradients;  // empty tensors when gradients were not requested
  std::map<std::string, double> diagnostics;
};

// ---------------------------------------------------------------------------
// Scalar forms

double log_sigmoid(double x);
double sigmoid(double x);

/// -log σ(β (chosen_logratio - rejected_logratio)) for one pair.
double dpo_pair_loss(double chosen_logratio, double rejected_logratio, double beta);

/// Prospect-theoretic value of one completion given its reward and the KL
/// reference point z0.
double kto_value(double reward, double z0, bool desirable, const KTOConfig& config);

/// Mean of λ_y - v over a batch of precomputed rewards.
double kto_loss_from_rewards(std::span<const double> rewards, std::span<const bool> desirable,
                             double z0, const KTOConfig& config);

/// Log-probability source used by the z0 estimator: (prompt, completion) -> log P.
using LogProbFn = std::function<double(const Tokens&, const Tokens&)>;

/// z0 estimate: mean reward of each prompt paired with the next record's
/// completion (cyclic shift), clamped below at zero. Requires >= 2 records.
double estimate_z0(const LogProbFn& policy, const LogProbFn& reference,
                   std::span<const KTOTokenExample> batch, int context_len);

// ---------------------------------------------------------------------------
// Losses over the model

/// Mean per-token negative log-likelihood of the completions. Diagnostics:
/// "raw_sum" (the undivided double sum), "tokens".
LossOutput sft_loss(const LMParams& params, std::span<const SequenceExample> batch,
                    const LossOptions& options = {});

struct ReferenceLogProbs {
  double chosen = 0.0;
  double rejected = 0.0;
};

std::vector<ReferenceLogProbs> reference_logprobs(const LMParams& reference,
                                                  std::span<const PreferenceExample> pairs,
                                                  int parallelism = 1);

/// Batch-mean DPO loss. Diagnostics: "margin" (mean Δ_chosen - Δ_rejected),
/// "chosen_logratio", "rejected_logratio", "accuracy".
LossOutput dpo_loss(const LMParams& params, const LMParams& reference,
                    std::span<const PreferenceExample> pairs, const DPOConfig& config,
                    const LossOptions& options = {});
LossOutput dpo_loss(const LMParams& params, std::span<const ReferenceLogProbs> reference,
                    std::span<const PreferenceExample> pairs, const DPOConfig& config,
                    const LossOptions& options = {});

/// log π_θ(y|x) - log π_ref(y|x).
double kto_reward(const LMParams& params, const LMParams& reference, const Tokens& prompt,
                  const Tokens& completion);

double estimate_z0(const LMParams& params, const LMParams& reference,
                   std::span<const KTOTokenExample> batch);

/// Batch-mean KTO loss with z0 held constant within the step. Diagnostics:
/// "z0", "desirable_reward", "undesirable_reward".
LossOutput kto_loss(const LMParams& params, const LMParams& reference,
                    std::span<const KTOTokenExample> batch, const KTOConfig& config,
                    const LossOptions& options = {});

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradientSample {
  std::string tensor;
  long index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradientReport {
  double max_relative_error = 0.0;
  std::vector<GradientSample> samples;
};

double relative_error(double analytic, double numeric);

/// Compares analytic gradients with central differences (f(p+ε) - f(p-ε)) / 2ε
/// at `sample_count` scalar parameters drawn uniformly over all tensors.
GradientReport check_gradients(const std::function<LossOutput(const LMParams&, bool)>& loss_fn,
                               const LMParams& params, double epsilon, int sample_count,
                               std::uint64_t seed = 0);

/// Generic form over a flat parameter vector, used to self-test the harness.
GradientReport check_gradients(const std::function<double(std::span<const double>)>& f,
                               const std::function<std::vector<double>(std::span<const double>)>& grad,
                               std::vector<double> point, double epsilon, int sample_count,
                               std::uint64_t seed = 0);

}  // namespace alignforge::objectives
