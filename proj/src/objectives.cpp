#include "alignforge/objectives.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::objectives {

using tinylm::Matrix;

namespace {

// Runs fn(i) for i in [0, n) on up to `parallelism` threads. The first
// exception thrown by any task is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int parallelism, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, parallelism));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw UsageError(std::string(what) + ": batch is empty");
}

LMParams empty_like(const LMParams& p) {
  LMParams out;
  out.config = p.config;
  return out;
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double dpo_pair_loss(double chosen_logratio, double rejected_logratio, double beta) {
  return -log_sigmoid(beta * (chosen_logratio - rejected_logratio));
}

double kto_value(double reward, double z0, bool desirable, const KTOConfig& config) {
  return desirable ? config.lambda_d * sigmoid(config.beta * (reward - z0))
                   : config.lambda_u * sigmoid(config.beta * (z0 - reward));
}

double kto_loss_from_rewards(std::span<const double> rewards, std::span<const bool> desirable,
                             double z0, const KTOConfig& config) {
  if (rewards.size() != desirable.size()) throw UsageError("rewards and labels differ in length");
  require_nonempty(rewards.size(), "kto_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const double lambda = desirable[i] ? config.lambda_d : config.lambda_u;
    total += lambda - kto_value(rewards[i], z0, desirable[i], config);
  }
  return total / static_cast<double>(rewards.size());
}

double estimate_z0(const LogProbFn& policy, const LogProbFn& reference,
                   std::span<const KTOTokenExample> batch, int context_len) {
  if (batch.size() < 2) throw UsageError("estimate_z0 needs at least 2 records for mismatched pairs");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& mismatched = batch[(i + 1) % batch.size()].completion;
    const auto fitted = tinylm::fit_to_context(batch[i].prompt, mismatched, context_len);
    total += policy(fitted.prompt, fitted.completion) - reference(fitted.prompt, fitted.completion);
  }
  return std::max(0.0, total / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------

LossOutput sft_loss(const LMParams& params, std::span<const SequenceExample> batch,
                    const LossOptions& options) {
  require_nonempty(batch.size(), "sft_loss");
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    if (ex.completion.empty()) throw UsageError("sft_loss: empty completion");
    tokens += ex.completion.size();
  }
  const double scale = -1.0 / static_cast<double>(tokens);

  std::vector<double> logps(batch.size());
  std::vector<LMParams> grads(options.compute_gradients ? batch.size() : 0);
  parallel_for(batch.size(), options.parallelism, [&](std::size_t i) {
    if (options.compute_gradients) {
      grads[i] = tinylm::zeros_like(params);
      logps[i] = tinylm::sequence_logprob_backward(params, batch[i].prompt, batch[i].completion,
                                                   scale, grads[i]);
    } else {
      logps[i] = tinylm::sequence_logprob(params, batch[i].prompt, batch[i].completion);
    }
  });

  LossOutput out;
  double raw = 0.0;
  for (double lp : logps) raw -= lp;
  out.value = raw / static_cast<double>(tokens);
  out.diagnostics["raw_sum"] = raw;
  out.diagnostics["tokens"] = static_cast<double>(tokens);
  if (options.compute_gradients) {
    out.gradients = tinylm::zeros_like(params);
    for (const auto& g : grads) tinylm::add_scaled(out.gradients, g, 1.0);
  } else {
    out.gradients = empty_like(params);
  }
  return out;
}

std::vector<ReferenceLogProbs> reference_logprobs(const LMParams& reference,
                                                  std::span<const PreferenceExample> pairs,
                                                  int parallelism) {
  std::vector<ReferenceLogProbs> out(pairs.size());
  parallel_for(pairs.size(), parallelism, [&](std::size_t i) {
    out[i].chosen = tinylm::sequence_logprob(reference, pairs[i].prompt, pairs[i].chosen);
    out[i].rejected = tinylm::sequence_logprob(reference, pairs[i].prompt, pairs[i].rejected);
  });
  return out;
}

LossOutput dpo_loss(const LMParams& params, const LMParams& reference,
                    std::span<const PreferenceExample> pairs, const DPOConfig& config,
                    const LossOptions& options) {
  const auto ref = reference_logprobs(reference, pairs, options.parallelism);
  return dpo_loss(params, ref, pairs, config, options);
}

LossOutput dpo_loss(const LMParams& params, std::span<const ReferenceLogProbs> reference,
                    std::span<const PreferenceExample> pairs, const DPOConfig& config,
                    const LossOptions& options) {
  require_nonempty(pairs.size(), "dpo_loss");
  if (reference.size() != pairs.size()) throw UsageError("dpo_loss: reference size mismatch");
  if (config.beta < 0.0) throw UsageError("dpo_loss: beta must be non-negative");
  const std::size_t n = pairs.size();

  std::vector<double> chosen(n), rejected(n);
  // grads[i] holds ∇ log π(chosen) - ∇ log π(rejected) for pair i.
  std::vector<LMParams> grads(options.compute_gradients ? n : 0);
  parallel_for(n, options.parallelism, [&](std::size_t i) {
    const auto& p = pairs[i];
    if (options.compute_gradients) {
      grads[i] = tinylm::zeros_like(params);
      chosen[i] = tinylm::sequence_logprob_backward(params, p.prompt, p.chosen, 1.0, grads[i]);
      rejected[i] = tinylm::sequence_logprob_backward(params, p.prompt, p.rejected, -1.0, grads[i]);
    } else {
      chosen[i] = tinylm::sequence_logprob(params, p.prompt, p.chosen);
      rejected[i] = tinylm::sequence_logprob(params, p.prompt, p.rejected);
    }
  });

  LossOutput out;
  out.gradients = options.compute_gradients ? tinylm::zeros_like(params) : empty_like(params);
  double loss = 0.0, margin = 0.0, chosen_ratio = 0.0, rejected_ratio = 0.0, correct = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dc = chosen[i] - reference[i].chosen;
    const double dr = rejected[i] - reference[i].rejected;
    const double u = config.beta * (dc - dr);
    loss += -log_sigmoid(u);
    margin += dc - dr;
    chosen_ratio += dc;
    rejected_ratio += dr;
    if (dc - dr > 0.0) correct += 1.0;
    if (options.compute_gradients) {
      // d(-log σ(u))/du = -σ(-u)
      tinylm::add_scaled(out.gradients, grads[i], -sigmoid(-u) * config.beta * inv_n);
    }
  }
  out.value = loss * inv_n;
  out.diagnostics["margin"] = margin * inv_n;
  out.diagnostics["chosen_logratio"] = chosen_ratio * inv_n;
  out.diagnostics["rejected_logratio"] = rejected_ratio * inv_n;
  out.diagnostics["accuracy"] = correct * inv_n;
  return out;
}

double kto_reward(const LMParams& params, const LMParams& reference, const Tokens& prompt,
                  const Tokens& completion) {
  return tinylm::sequence_logprob(params, prompt, completion) -
         tinylm::sequence_logprob(reference, prompt, completion);
}

double estimate_z0(const LMParams& params, const LMParams& reference,
                   std::span<const KTOTokenExample> batch) {
  const LogProbFn policy = [&](const Tokens& x, const Tokens& y) {
    return tinylm::sequence_logprob(params, x, y);
  };
  const LogProbFn ref = [&](const Tokens& x, const Tokens& y) {
    return tinylm::sequence_logprob(reference, x, y);
  };
  return estimate_z0(policy, ref, batch, params.config.context_len);
}

LossOutput kto_loss(const LMParams& params, const LMParams& reference,
                    std::span<const KTOTokenExample> batch, const KTOConfig& config,
                    const LossOptions& options) {
  if (batch.size() < 2) throw UsageError("kto_loss needs at least 2 records");
  const std::size_t n = batch.size();
  const double z0 = estimate_z0(params, reference, batch);

  std::vector<double> rewards(n);
  std::vector<LMParams> grads(options.compute_gradients ? n : 0);
  parallel_for(n, options.parallelism, [&](std::size_t i) {
    const auto& ex = batch[i];
    double policy;
    if (options.compute_gradients) {
      grads[i] = tinylm::zeros_like(params);
      policy = tinylm::sequence_logprob_backward(params, ex.prompt, ex.completion, 1.0, grads[i]);
    } else {
      policy = tinylm::sequence_logprob(params, ex.prompt, ex.completion);
    }
    rewards[i] = policy - tinylm::sequence_logprob(reference, ex.prompt, ex.completion);
  });

  LossOutput out;
  out.gradients = options.compute_gradients ? tinylm::zeros_like(params) : empty_like(params);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0, good = 0.0, bad = 0.0;
  std::size_t n_good = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool d = batch[i].desirable;
    const double lambda = d ? config.lambda_d : config.lambda_u;
    const double v = kto_value(rewards[i], z0, d, config);
    loss += lambda - v;
    (d ? good : bad) += rewards[i];
    n_good += d ? 1 : 0;
    if (options.compute_gradients) {
      const double s = sigmoid(config.beta * (d ? rewards[i] - z0 : z0 - rewards[i]));
      const double dv_dr = (d ? 1.0 : -1.0) * lambda * config.beta * s * (1.0 - s);
      tinylm::add_scaled(out.gradients, grads[i], -dv_dr * inv_n);
    }
  }
  out.value = loss * inv_n;
  out.diagnostics["z0"] = z0;
  out.diagnostics["desirable_reward"] = n_good ? good / static_cast<double>(n_good) : 0.0;
  out.diagnostics["undesirable_reward"] = n_good < n ? bad / static_cast<double>(n - n_good) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradientReport check_gradients(const std::function<LossOutput(const LMParams&, bool)>& loss_fn,
                               const LMParams& params, double epsilon, int sample_count,
                               std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
  const LossOutput base = loss_fn(params, true);
  LMParams probe = params;

  std::vector<std::string> names;
  probe.for_each([&](const std::string& name, Matrix&) { names.push_back(name); });
  auto tensors = probe.tensors();
  const auto grads = base.gradients.tensors();
  const std::size_t total = probe.parameter_count();

  GradientReport report;
  Rng rng(mix_seed(seed, 0x6c));
  for (int s = 0; s < sample_count; ++s) {
    auto flat = static_cast<long>(rng.below(total));
    std::size_t t = 0;
    while (flat >= tensors[t]->size()) flat -= tensors[t++]->size();
    double& x = tensors[t]->data()[flat];
    const double original = x;
    x = original + epsilon;
    const double up = loss_fn(probe, false).value;
    x = original - epsilon;
    const double down = loss_fn(probe, false).value;
    x = original;

    GradientSample sample;
    sample.tensor = names[t];
    sample.index = flat;
    sample.analytic = grads[t]->data()[flat];
    sample.numeric = (up - down) / (2.0 * epsilon);
    sample.relative_error = relative_error(sample.analytic, sample.numeric);
    report.max_relative_error = std::max(report.max_relative_error, sample.relative_error);
    report.samples.push_back(std::move(sample));
  }
  return report;
}

GradientReport check_gradients(const std::function<double(std::span<const double>)>& f,
                               const std::function<std::vector<double>(std::span<const double>)>& grad,
                               std::vector<double> point, double epsilon, int sample_count,
                               std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
  if (point.empty()) return {};
  const std::vector<double> analytic = grad(point);
  GradientReport report;
  Rng rng(mix_seed(seed, 0x6c));
  for (int s = 0; s < sample_count; ++s) {
    const auto i = static_cast<std::size_t>(rng.below(point.size()));
    const double original = point[i];
    point[i] = original + epsilon;
    const double up = f(point);
    point[i] = original - epsilon;
    const double down = f(point);
    point[i] = original;
    GradientSample sample;
    sample.tensor = "x";
    sample.index = static_cast<long>(i);
    sample.analytic = analytic[i];
    sample.numeric = (up - down) / (2.0 * epsilon);
    sample.relative_error = relative_error(sample.analytic, sample.numeric);
    report.max_relative_error = std::max(report.max_relative_error, sample.relative_error);
    report.samples.push_back(std::move(sample));
  }
  return report;
}

}  // namespace alignforge::objectives
