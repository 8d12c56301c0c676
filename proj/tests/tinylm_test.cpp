#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"
#include "alignforge/tinylm.hpp"
#include "test_util.hpp"

using namespace alignforge;
using namespace alignforge::tinylm;
using alignforge::testing::TempDir;

namespace {

LMConfig toy_config(int layers = 2, std::uint64_t seed = 1) {
  LMConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.context_len = 40;
  c.init_seed = seed;
  return c;
}

// Random init uses std 0.02, which leaves logits nearly flat; widen them so
// the oracles compare non-trivial distributions.
LMParams toy_params(int layers = 2, std::uint64_t seed = 1) {
  auto p = init_params(toy_config(layers, seed));
  Rng rng(seed + 100);
  for (Matrix* m : p.tensors()) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += 0.3 * rng.normal();
  }
  return p;
}

Tokens random_tokens(Rng& rng, std::size_t n) {
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(kByteVocab));
  return t;
}

double log_softmax_at(const Eigen::RowVectorXd& row, TokenId y) {
  const double m = row.maxCoeff();
  return row(y) - m - std::log((row.array() - m).exp().sum());
}

// Chain rule evaluated with one forward call per completion position.
double brute_force_logprob(const LMParams& p, const Tokens& prompt, const Tokens& completion) {
  const auto sp = special_tokens(p.config.vocab_size);
  double total = 0.0;
  for (std::size_t t = 0; t < completion.size(); ++t) {
    Tokens ctx = {sp.bos};
    ctx.insert(ctx.end(), prompt.begin(), prompt.end());
    ctx.push_back(sp.sep);
    ctx.insert(ctx.end(), completion.begin(), completion.begin() + static_cast<long>(t));
    const Matrix logits = forward(p, ctx);
    total += log_softmax_at(logits.row(logits.rows() - 1), completion[t]);
  }
  return total;
}

}  // namespace

TEST(Tokenizer, RoundTripAndByteLengths) {
  EXPECT_EQ(decode(encode("chest pain")), "chest pain");
  EXPECT_TRUE(encode("").empty());
  EXPECT_EQ(encode("\xc3\xa9").size(), 2u);
  const std::string mixed = "naïve café ✓ 頭痛 \x01\x7f";
  EXPECT_EQ(decode(encode(mixed)), mixed);
  for (TokenId t : encode(mixed)) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, kByteVocab);
  }
}

TEST(Tokenizer, DecodeDropsSpecialsAndRejectsOutOfRange) {
  const auto sp = special_tokens(kDefaultVocab);
  Tokens t = {sp.bos, 'h', 'i', sp.sep, sp.pad, sp.eos};
  EXPECT_EQ(decode(t), "hi");
  EXPECT_THROW(decode(Tokens{kDefaultVocab}), UsageError);
  EXPECT_THROW(decode(Tokens{-1}), UsageError);
}

TEST(LMConfig, Validation) {
  EXPECT_NO_THROW(LMConfig{}.validate());
  auto c = toy_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  c = toy_config();
  c.context_len = 1;
  EXPECT_THROW(c.validate(), UsageError);
  c = toy_config();
  c.d_ff = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Forward, ShapesFiniteAndDeterministic) {
  const auto p = toy_params();
  Rng rng(2);
  const auto toks = random_tokens(rng, 12);
  const Matrix a = forward(p, toks);
  EXPECT_EQ(a.rows(), 12);
  EXPECT_EQ(a.cols(), kDefaultVocab);
  EXPECT_TRUE(a.allFinite());
  EXPECT_TRUE(a == forward(p, toks));
}

TEST(Forward, OverLengthInputThrows) {
  const auto p = toy_params();
  Rng rng(2);
  EXPECT_NO_THROW(forward(p, random_tokens(rng, 40)));
  EXPECT_THROW(forward(p, random_tokens(rng, 41)), UsageError);
}

TEST(Forward, Causality) {
  const auto p = toy_params(3);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto toks = random_tokens(rng, 20);
    const Matrix before = forward(p, toks);
    const auto k = static_cast<Eigen::Index>(rng.below(20));
    for (auto i = k; i < 20; ++i) toks[static_cast<std::size_t>(i)] = static_cast<TokenId>(rng.below(kByteVocab));
    const Matrix after = forward(p, toks);
    for (Eigen::Index t = 0; t < k; ++t) {
      EXPECT_TRUE(before.row(t) == after.row(t)) << "position " << t << " changed by edit at " << k;
    }
  }
}

TEST(Forward, ZeroLayerReducesToEmbeddingNormHead) {
  const auto p = toy_params(0, 3);
  const Tokens toks = {17, 200};
  const Matrix logits = forward(p, toks);
  for (Eigen::Index t = 0; t < 2; ++t) {
    const Eigen::RowVectorXd x = p.tok_emb.row(toks[static_cast<std::size_t>(t)]) + p.pos_emb.row(t);
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const Eigen::RowVectorXd xhat = (x.array() - mu) / std::sqrt(var + 1e-5);
    const Eigen::RowVectorXd h =
        xhat.cwiseProduct(Eigen::RowVectorXd(p.lnf_gain.row(0))) + Eigen::RowVectorXd(p.lnf_bias.row(0));
    const Eigen::RowVectorXd expected = h * p.head_w + Eigen::RowVectorXd(p.head_b.row(0));
    EXPECT_LT((logits.row(t) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
  // Without layers, position 1 ignores the token at position 0.
  const Matrix other = forward(p, Tokens{99, 200});
  EXPECT_TRUE(other.row(1) == logits.row(1));
}

TEST(Forward, SoftmaxNormalizes) {
  const auto p = toy_params();
  Rng rng(8);
  const Matrix logits = forward(p, random_tokens(rng, 25));
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    const double lse = m + std::log((logits.row(t).array() - m).exp().sum());
    const double total = (logits.row(t).array() - lse).exp().sum();
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(SequenceLogprob, EmptyCompletionIsZero) {
  const auto p = toy_params();
  EXPECT_EQ(sequence_logprob(p, encode("question"), Tokens{}), 0.0);
}

TEST(SequenceLogprob, UniformLogitsGiveLengthTimesLogV) {
  auto p = toy_params();
  p.head_w.setZero();
  p.head_b.setZero();
  const double lp = sequence_logprob(p, encode("q"), encode("ab"));
  EXPECT_NEAR(lp, 2.0 * std::log(1.0 / 260.0), 1e-12);
  EXPECT_NEAR(lp, -11.1214, 1e-4);
}

TEST(SequenceLogprob, MatchesChainRuleOracle) {
  const auto p = toy_params(3, 11);
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.below(8));
    const auto completion = random_tokens(rng, 4);
    const double lp = sequence_logprob(p, prompt, completion);
    EXPECT_LE(lp, 0.0);
    EXPECT_NEAR(lp, brute_force_logprob(p, prompt, completion), 1e-10);
  }
  EXPECT_NEAR(sequence_logprob(p, Tokens{}, encode("ok")), brute_force_logprob(p, Tokens{}, encode("ok")),
              1e-10);
}

TEST(SequenceLogprob, TokenLogprobsSumAndSplitAdditively) {
  const auto p = toy_params(2, 21);
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_tokens(rng, 5);
    const auto a = random_tokens(rng, 1 + rng.below(6));
    const auto b = random_tokens(rng, 1 + rng.below(6));
    Tokens ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    const auto per_token = token_logprobs(p, prompt, ab);
    ASSERT_EQ(per_token.size(), ab.size());
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < ab.size(); ++i) (i < a.size() ? head : tail) += per_token[i];
    const double whole = sequence_logprob(p, prompt, ab);
    EXPECT_NEAR(whole, head + tail, 1e-10);
    EXPECT_NEAR(head, sequence_logprob(p, prompt, a), 1e-10);
    EXPECT_NEAR(whole, sequence_logprob(p, prompt, a) + tail, 1e-10);
  }
}

TEST(SequenceLogprob, BackwardReturnsSameValue) {
  const auto p = toy_params();
  auto grads = zeros_like(p);
  const auto prompt = encode("Why?");
  const auto completion = encode("Rest.");
  EXPECT_EQ(sequence_logprob_backward(p, prompt, completion, 1.0, grads), sequence_logprob(p, prompt, completion));
  EXPECT_GT(global_norm(grads), 0.0);
  EXPECT_TRUE(grads.all_finite());
}

TEST(FitToContext, DropsPromptFromLeftThenCompletion) {
  const Tokens prompt = encode("0123456789");
  const Tokens completion = encode("abcdef");
  auto fit = fit_to_context(prompt, completion, 12);
  EXPECT_TRUE(fit.truncated);
  EXPECT_EQ(fit.prompt.size() + fit.completion.size() + 1, 12u);
  EXPECT_EQ(decode(fit.prompt), "56789");
  EXPECT_EQ(decode(fit.completion), "abcdef");

  fit = fit_to_context(prompt, completion, 5);
  EXPECT_TRUE(fit.prompt.empty());
  EXPECT_EQ(decode(fit.completion), "abcd");

  fit = fit_to_context(prompt, completion, 40);
  EXPECT_FALSE(fit.truncated);
  EXPECT_EQ(fit.prompt, prompt);
}

TEST(Sample, GreedyDeterministicAndMaxNewZero) {
  const auto p = toy_params();
  SampleOptions o;
  o.max_new = 10;
  o.temperature = 0.0;
  const auto a = sample(p, encode("hi"), o);
  EXPECT_EQ(a, sample(p, encode("hi"), o));
  EXPECT_LE(a.size(), 10u);
  o.max_new = 0;
  EXPECT_TRUE(sample(p, encode("hi"), o).empty());
}

TEST(Sample, SeededTemperatureSampling) {
  const auto p = toy_params();
  SampleOptions o;
  o.max_new = 12;
  o.temperature = 1.0;
  o.seed = 3;
  const auto a = sample(p, encode("hi"), o);
  EXPECT_EQ(a, sample(p, encode("hi"), o));
  bool differs = false;
  for (std::uint64_t s = 4; s < 10 && !differs; ++s) {
    o.seed = s;
    differs = sample(p, encode("hi"), o) != a;
  }
  EXPECT_TRUE(differs);
}

TEST(Sample, ForcedEosEndsImmediately) {
  auto p = toy_params();
  const auto sp = special_tokens(p.config.vocab_size);
  p.head_w.setZero();
  p.head_b.setZero();
  p.head_b(0, sp.eos) = 50.0;
  SampleOptions o;
  o.max_new = 8;
  const auto out = sample(p, encode("anything"), o);
  EXPECT_EQ(out, Tokens{sp.eos});
  EXPECT_EQ(decode(out), "");
}

TEST(Sample, GreedyTiesPickLowestId) {
  auto p = toy_params();
  p.head_w.setZero();
  p.head_b.setZero();
  SampleOptions o;
  o.max_new = 3;
  EXPECT_EQ(sample(p, encode("x"), o), (Tokens{0, 0, 0}));
}

TEST(Sample, GreedyMatchesTeacherForcedArgmax) {
  const auto p = toy_params(2, 31);
  const auto sp = special_tokens(p.config.vocab_size);
  const auto prompt = encode("abc");
  SampleOptions o;
  o.max_new = 15;
  const auto out = sample(p, prompt, o);
  Tokens seq = {sp.bos};
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(sp.sep);
  for (TokenId t : out) {
    const Matrix logits = forward(p, seq);
    Eigen::Index best;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    EXPECT_EQ(t, static_cast<TokenId>(best));
    seq.push_back(t);
  }
}

TEST(Sample, StopsWhenContextFull) {
  auto p = toy_params();
  p.head_w.setZero();
  p.head_b.setZero();
  p.head_b(0, 'a') = 50.0;
  SampleOptions o;
  o.max_new = 100;
  const auto prompt = encode("0123456789");
  const auto out = sample(p, prompt, o);
  EXPECT_EQ(out.size(), static_cast<std::size_t>(40 - 2 - 10 + 1));
  EXPECT_THROW(sample(p, Tokens(39, 'x'), o), UsageError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto p = toy_params(2, 41);
  save_checkpoint(p, dir / "m.ckpt");
  const auto q = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(q.config, p.config);
  EXPECT_TRUE(q == p);
  const auto pt = p.tensors();
  const auto qt = q.tensors();
  ASSERT_EQ(pt.size(), qt.size());
  for (std::size_t i = 0; i < pt.size(); ++i) {
    ASSERT_EQ(pt[i]->size(), qt[i]->size());
    EXPECT_EQ(std::memcmp(pt[i]->data(), qt[i]->data(), sizeof(double) * static_cast<std::size_t>(pt[i]->size())), 0);
  }
  Rng rng(1);
  const auto toks = random_tokens(rng, 30);
  EXPECT_TRUE(forward(p, toks) == forward(q, toks));
  EXPECT_EQ(serialize_checkpoint(q), read_file(dir / "m.ckpt"));
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const auto bytes = serialize_checkpoint(toy_params());
  for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(std::string_view(bytes).substr(0, cut));
      FAIL() << "expected CheckpointError at " << cut;
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find("corrupt checkpoint"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, FlippedByteFailsChecksum) {
  auto bytes = serialize_checkpoint(toy_params());
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, VersionMismatchIsDescriptive) {
  auto bytes = serialize_checkpoint(toy_params());
  bytes[8] = static_cast<char>(kCheckpointVersion + 1);
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
}

TEST(Params, InitIsSeededAndFinite) {
  const auto a = init_params(toy_config(2, 5));
  EXPECT_TRUE(a == init_params(toy_config(2, 5)));
  EXPECT_FALSE(a == init_params(toy_config(2, 6)));
  EXPECT_TRUE(a.all_finite());
  EXPECT_EQ(a.lnf_gain.sum(), 16.0);
  EXPECT_EQ(a.head_b.cwiseAbs().sum(), 0.0);
}
