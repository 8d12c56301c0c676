#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "alignforge/common.hpp"
#include "alignforge/objectives.hpp"
#include "alignforge/random.hpp"

using namespace alignforge;
using namespace alignforge::objectives;
using tinylm::LMConfig;
using tinylm::Matrix;
using tinylm::TokenId;

namespace {

const double kLn2 = std::numbers::ln2;

LMParams toy_params(std::uint64_t seed, double spread = 0.1, int vocab = tinylm::kDefaultVocab) {
  LMConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.context_len = 48;
  c.vocab_size = vocab;
  c.init_seed = seed;
  auto p = tinylm::init_params(c);
  Rng rng(seed + 7);
  for (Matrix* m : p.tensors()) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += spread * rng.normal();
  }
  return p;
}

Tokens words(const char* s) { return tinylm::encode(s); }

std::vector<SequenceExample> sft_batch() {
  return {{words("Cough?"), words("Rest.")}, {words("Fever"), words("Fluids now")}};
}

std::vector<PreferenceExample> dpo_batch() {
  return {{words("I'm scared."), words("Don't worry."), words("Take rest.")},
          {words("Itchy"), words("It's okay, cream."), words("Cream.")},
          {words("Pain"), words("I hear you."), words("Ibuprofen")}};
}

std::vector<KTOTokenExample> kto_batch() {
  return {{words("Anxious"), words("Rest assured."), true},
          {words("Anxious"), words("Rest."), false},
          {words("Worried"), words("You're not alone."), true},
          {words("Worried"), words("Tests."), false}};
}

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Per-token oracle: one forward call per completion position.
double brute_force_sft(const LMParams& p, const std::vector<SequenceExample>& batch) {
  const auto sp = tinylm::special_tokens(p.config.vocab_size);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    for (std::size_t t = 0; t < ex.completion.size(); ++t) {
      Tokens ctx = {sp.bos};
      ctx.insert(ctx.end(), ex.prompt.begin(), ex.prompt.end());
      ctx.push_back(sp.sep);
      ctx.insert(ctx.end(), ex.completion.begin(), ex.completion.begin() + static_cast<long>(t));
      const Matrix logits = tinylm::forward(p, ctx);
      const Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
      double z = 0.0;
      for (Eigen::Index v = 0; v < row.size(); ++v) z += std::exp(row(v));
      nll -= row(ex.completion[t]) - std::log(z);
      ++count;
    }
  }
  return nll / static_cast<double>(count);
}

}  // namespace

TEST(Scalars, SigmoidFormsAreStable) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(log_sigmoid(0.0), -kLn2, 1e-15);
  EXPECT_NEAR(log_sigmoid(-800.0), -800.0, 1e-9);
  EXPECT_EQ(log_sigmoid(800.0), -0.0);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}

TEST(Scalars, DpoPairLossClosedForms) {
  EXPECT_NEAR(dpo_pair_loss(0.0, 0.0, 0.1), kLn2, 1e-15);
  EXPECT_NEAR(dpo_pair_loss(5.0, -3.0, 0.0), kLn2, 1e-15);
  EXPECT_NEAR(dpo_pair_loss(20.0, 0.0, 0.1), 0.126928, 1e-6);
  EXPECT_NEAR(dpo_pair_loss(20.0, 0.0, 0.1), -std::log(sigma(2.0)), 1e-14);
  for (double c : {-4.0, 0.0, 13.5}) {
    EXPECT_NEAR(dpo_pair_loss(1.0 + c, -2.0 + c, 0.3), dpo_pair_loss(1.0, -2.0, 0.3), 1e-14);
  }
  // Loss falls as the chosen log-ratio rises and grows with the rejected one.
  const double h = 1e-6;
  EXPECT_LT(dpo_pair_loss(0.5 + h, 0.2, 0.1) - dpo_pair_loss(0.5 - h, 0.2, 0.1), 0.0);
  EXPECT_GT(dpo_pair_loss(0.5, 0.2 + h, 0.1) - dpo_pair_loss(0.5, 0.2 - h, 0.1), 0.0);
}

TEST(Scalars, KtoValueBranches) {
  KTOConfig c;
  EXPECT_DOUBLE_EQ(kto_value(1.5, 1.5, true, c), 0.5);
  c.lambda_u = 2.0;
  EXPECT_DOUBLE_EQ(kto_value(1.5, 1.5, false, c), 1.0);
  c = KTOConfig{};
  EXPECT_NEAR(kto_value(2.0 / c.beta, 0.0, true, c), 0.880797, 1e-6);
  EXPECT_NEAR(kto_value(0.3, 0.1, false, c), sigma(c.beta * (0.1 - 0.3)), 1e-15);
  for (double r : {-50.0, -1.0, 0.0, 1.0, 50.0}) {
    for (bool d : {true, false}) {
      const double v = kto_value(r, 0.2, d, c);
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Scalars, KtoLossFromRewards) {
  KTOConfig c;
  const std::vector<double> saturated = {10.0 / c.beta, 10.0 / c.beta};
  const bool all_good[] = {true, true};
  EXPECT_NEAR(kto_loss_from_rewards(saturated, all_good, 0.0, c), 1.0 - sigma(10.0), 1e-15);
  EXPECT_NEAR(kto_loss_from_rewards(saturated, all_good, 0.0, c), 4.54e-5, 1e-7);

  // Mixed batch of four, each term written out.
  c = {0.5, 1.0, 2.0};
  const std::vector<double> r = {2.0, -1.0, 0.5, 3.0};
  const bool d[] = {true, false, true, false};
  const double z0 = 0.4;
  const double expected = ((1.0 - sigma(0.5 * (2.0 - 0.4))) + (2.0 - 2.0 * sigma(0.5 * (0.4 + 1.0))) +
                           (1.0 - sigma(0.5 * (0.5 - 0.4))) + (2.0 - 2.0 * sigma(0.5 * (0.4 - 3.0)))) /
                          4.0;
  EXPECT_NEAR(kto_loss_from_rewards(r, d, z0, c), expected, 1e-15);
}

TEST(EstimateZ0, CyclicShiftMeanClampedAtZero) {
  std::vector<KTOTokenExample> batch = {{{1}, {11}, true}, {{2}, {12}, false}, {{3}, {13}, true}};
  // Mismatched pairs are (1,12), (2,13), (3,11).
  std::map<std::pair<TokenId, TokenId>, double> reward = {{{1, 12}, 0.3}, {{2, 13}, -0.1}, {{3, 11}, 0.7}};
  const LogProbFn policy = [&](const Tokens& x, const Tokens& y) { return reward.at({x[0], y[0]}) - 2.0; };
  const LogProbFn reference = [](const Tokens&, const Tokens&) { return -2.0; };
  EXPECT_NEAR(estimate_z0(policy, reference, batch, 64), (0.3 - 0.1 + 0.7) / 3.0, 1e-15);

  reward = {{{1, 12}, -0.3}, {{2, 13}, 0.1}, {{3, 11}, -0.7}};
  EXPECT_EQ(estimate_z0(policy, reference, batch, 64), 0.0);

  const std::vector<KTOTokenExample> one = {batch[0]};
  EXPECT_THROW(estimate_z0(policy, reference, one, 64), UsageError);
}

TEST(EstimateZ0, IdenticalModelsGiveZero) {
  const auto p = toy_params(1);
  EXPECT_EQ(estimate_z0(p, p, kto_batch()), 0.0);
}

TEST(KtoReward, IdentityAntisymmetryAndDoubling) {
  const auto p = toy_params(2);
  const auto q = toy_params(3);
  const auto x = words("Rash?");
  const auto y = words("Cream.");
  EXPECT_EQ(kto_reward(p, p, x, y), 0.0);
  EXPECT_NEAR(kto_reward(p, q, x, y), -kto_reward(q, p, x, y), 1e-12);

  // Reference uniform over 260 ids; policy puts 2/260 on 'a' at every position.
  auto ref = toy_params(4);
  ref.head_w.setZero();
  ref.head_b.setZero();
  auto pol = ref;
  pol.head_b(0, 'a') = std::log(2.0 * 259.0 / 258.0);
  const Tokens aaaa = words("aaaa");
  EXPECT_NEAR(kto_reward(pol, ref, x, aaaa), 4.0 * kLn2, 1e-12);
}

TEST(SftLoss, UniformFourTokenVocabulary) {
  auto p = toy_params(5, 0.1, 4);
  p.head_w.setZero();
  p.head_b.setZero();
  const std::vector<SequenceExample> batch = {{Tokens{}, Tokens{0, 1, 2}}};
  const auto out = sft_loss(p, batch);
  EXPECT_NEAR(out.value, std::log(4.0), 1e-12);
  EXPECT_NEAR(out.diagnostics.at("raw_sum"), 3.0 * std::log(4.0), 1e-12);
  EXPECT_EQ(out.diagnostics.at("tokens"), 3.0);
}

TEST(SftLoss, UniformProbeIsLengthTimesLogV) {
  auto p = toy_params(5);
  p.head_w.setZero();
  p.head_b.setZero();
  const auto batch = sft_batch();
  const auto out = sft_loss(p, batch);
  const double tokens = 5.0 + 10.0;
  EXPECT_NEAR(out.diagnostics.at("raw_sum"), tokens * std::log(260.0), 1e-9);
  EXPECT_NEAR(out.value, std::log(260.0), 1e-12);
}

TEST(SftLoss, CertainModelHasZeroLoss) {
  auto p = toy_params(6);
  p.head_w.setZero();
  p.head_b.setZero();
  p.head_b(0, 'a') = 1000.0;
  const std::vector<SequenceExample> batch = {{words("q"), words("aaa")}};
  EXPECT_EQ(sft_loss(p, batch).value, 0.0);
}

TEST(SftLoss, MatchesPerTokenOracle) {
  const auto p = toy_params(7, 0.3);
  const auto batch = sft_batch();
  EXPECT_NEAR(sft_loss(p, batch).value, brute_force_sft(p, batch), 1e-12);
}

TEST(SftLoss, Errors) {
  const auto p = toy_params(1);
  EXPECT_THROW(sft_loss(p, std::vector<SequenceExample>{}), UsageError);
  EXPECT_THROW(sft_loss(p, std::vector<SequenceExample>{{words("q"), Tokens{}}}), UsageError);
}

TEST(DpoLoss, EqualsLn2AtReference) {
  const auto p = toy_params(8, 0.3);
  const auto out = dpo_loss(p, p, dpo_batch(), DPOConfig{});
  EXPECT_NEAR(out.value, kLn2, 1e-12);
  EXPECT_EQ(out.diagnostics.at("margin"), 0.0);
  const auto q = toy_params(9, 0.3);
  EXPECT_NEAR(dpo_loss(q, p, dpo_batch(), DPOConfig{0.0}).value, kLn2, 1e-15);
}

TEST(DpoLoss, MatchesScalarFormula) {
  const auto p = toy_params(10, 0.3);
  const auto r = toy_params(11, 0.3);
  const auto batch = dpo_batch();
  DPOConfig c{0.7};
  double expected = 0.0, margin = 0.0;
  for (const auto& ex : batch) {
    const double dc = tinylm::sequence_logprob(p, ex.prompt, ex.chosen) - tinylm::sequence_logprob(r, ex.prompt, ex.chosen);
    const double dr =
        tinylm::sequence_logprob(p, ex.prompt, ex.rejected) - tinylm::sequence_logprob(r, ex.prompt, ex.rejected);
    expected += -std::log(sigma(c.beta * (dc - dr)));
    margin += dc - dr;
  }
  const auto out = dpo_loss(p, r, batch, c);
  EXPECT_NEAR(out.value, expected / 3.0, 1e-12);
  EXPECT_NEAR(out.diagnostics.at("margin"), margin / 3.0, 1e-12);
}

TEST(DpoLoss, ReferenceShiftInvariance) {
  const auto p = toy_params(12, 0.3);
  const auto r = toy_params(13, 0.3);
  const auto batch = dpo_batch();
  auto ref = reference_logprobs(r, batch);
  const double base = dpo_loss(p, ref, batch, DPOConfig{}).value;
  for (auto& x : ref) {
    x.chosen += 4.25;
    x.rejected += 4.25;
  }
  EXPECT_NEAR(dpo_loss(p, ref, batch, DPOConfig{}).value, base, 1e-12);
}

TEST(DpoLoss, GradientStepRaisesMargin) {
  const auto ref = toy_params(14, 0.3);
  const auto batch = dpo_batch();
  const auto out = dpo_loss(ref, ref, batch, DPOConfig{});
  auto p = ref;
  tinylm::add_scaled(p, out.gradients, -1e-2 / tinylm::global_norm(out.gradients));
  const auto after = dpo_loss(p, ref, batch, DPOConfig{});
  EXPECT_GT(after.diagnostics.at("chosen_logratio"), 0.0);
  EXPECT_LT(after.diagnostics.at("rejected_logratio"), 0.0);
  EXPECT_LT(after.value, kLn2);
}

TEST(DpoLoss, Errors) {
  const auto p = toy_params(1);
  EXPECT_THROW(dpo_loss(p, p, std::vector<PreferenceExample>{}, DPOConfig{}), UsageError);
}

TEST(KtoLoss, EqualsHalfAtReference) {
  const auto p = toy_params(15, 0.3);
  const auto out = kto_loss(p, p, kto_batch(), KTOConfig{});
  EXPECT_NEAR(out.value, 0.5, 1e-12);
  EXPECT_EQ(out.diagnostics.at("z0"), 0.0);
}

TEST(KtoLoss, MatchesScalarFormulaAndBounds) {
  const auto p = toy_params(16, 0.3);
  const auto r = toy_params(17, 0.3);
  const auto batch = kto_batch();
  const KTOConfig c{0.5, 1.0, 1.5};
  std::vector<double> rewards;
  bool labels[4];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    rewards.push_back(kto_reward(p, r, batch[i].prompt, batch[i].completion));
    labels[i] = batch[i].desirable;
  }
  const double z0 = estimate_z0(p, r, batch);
  const auto out = kto_loss(p, r, batch, c);
  EXPECT_NEAR(out.value, kto_loss_from_rewards(rewards, labels, z0, c), 1e-12);
  EXPECT_GT(out.value, 0.0);
  EXPECT_LT(out.value, 1.5);
}

TEST(KtoLoss, Errors) {
  const auto p = toy_params(1);
  const auto batch = kto_batch();
  EXPECT_THROW(kto_loss(p, p, std::span(batch).first(1), KTOConfig{}), UsageError);
}

TEST(GradientCheck, HarnessOnQuadratic) {
  // f(x) = sum_i (i + 1) x_i^2 / 2 + x_0 x_1
  const auto f = [](std::span<const double> x) {
    double s = x[0] * x[1];
    for (std::size_t i = 0; i < x.size(); ++i) s += 0.5 * static_cast<double>(i + 1) * x[i] * x[i];
    return s;
  };
  const auto g = [](std::span<const double> x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(i + 1) * x[i];
    out[0] += x[1];
    out[1] += x[0];
    return out;
  };
  const auto report = check_gradients(f, g, {0.5, -1.25, 2.0, 3.5, -0.75}, 1e-5, 50);
  EXPECT_EQ(report.samples.size(), 50u);
  EXPECT_LT(report.max_relative_error, 1e-9);
  // A wrong gradient is caught.
  const auto bad = [&](std::span<const double> x) {
    auto out = g(x);
    out[2] *= 1.01;
    return out;
  };
  EXPECT_GT(check_gradients(f, bad, {0.5, -1.25, 2.0, 3.5, -0.75}, 1e-5, 50).max_relative_error, 1e-3);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(GradientCheck, SftDpoKtoOnToyModel) {
  const auto p = toy_params(18, 0.2);
  const auto r = toy_params(19, 0.2);
  const auto sft = sft_batch();
  const auto dpo = dpo_batch();
  const auto kto = kto_batch();
  const auto sft_fn = [&](const LMParams& x, bool g) { return sft_loss(x, sft, {g, 1}); };
  const auto dpo_fn = [&](const LMParams& x, bool g) { return dpo_loss(x, r, dpo, DPOConfig{0.5}, {g, 1}); };
  const auto kto_fn = [&](const LMParams& x, bool g) { return kto_loss(x, r, kto, KTOConfig{0.5, 1.0, 1.3}, {g, 1}); };
  // z0 is a constant within a step, so finite differences hold it fixed too.
  const double z0 = estimate_z0(p, r, kto);
  const auto kto_fixed = [&](const LMParams& x, bool g) {
    auto out = kto_fn(x, g);
    if (!g) {
      std::vector<double> rewards;
      bool labels[4];
      for (std::size_t i = 0; i < kto.size(); ++i) {
        rewards.push_back(kto_reward(x, r, kto[i].prompt, kto[i].completion));
        labels[i] = kto[i].desirable;
      }
      out.value = kto_loss_from_rewards(rewards, labels, z0, KTOConfig{0.5, 1.0, 1.3});
    }
    return out;
  };
  EXPECT_LT(check_gradients(sft_fn, p, 1e-5, 150, 1).max_relative_error, 1e-4);
  EXPECT_LT(check_gradients(dpo_fn, p, 1e-5, 150, 2).max_relative_error, 1e-4);
  EXPECT_LT(check_gradients(kto_fixed, p, 1e-5, 150, 3).max_relative_error, 1e-4);
}

TEST(Parallelism, ResultsIndependentOfThreadCount) {
  const auto p = toy_params(20, 0.2);
  const auto r = toy_params(21, 0.2);
  const auto a = dpo_loss(p, r, dpo_batch(), DPOConfig{}, {true, 1});
  const auto b = dpo_loss(p, r, dpo_batch(), DPOConfig{}, {true, 3});
  EXPECT_EQ(a.value, b.value);
  EXPECT_TRUE(a.gradients == b.gradients);
  const auto c = kto_loss(p, r, kto_batch(), KTOConfig{}, {true, 1});
  const auto d = kto_loss(p, r, kto_batch(), KTOConfig{}, {true, 4});
  EXPECT_EQ(c.value, d.value);
  EXPECT_TRUE(c.gradients == d.gradients);
  const auto e = sft_loss(p, sft_batch(), {true, 1});
  const auto f = sft_loss(p, sft_batch(), {true, 2});
  EXPECT_TRUE(e.gradients == f.gradients);
}
