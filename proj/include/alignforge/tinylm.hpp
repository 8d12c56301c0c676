#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace alignforge::tinylm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

// Byte-level tokenizer: ids 0-255 are bytes, the last four ids of the
// vocabulary are BOS, EOS, PAD, SEP.
inline constexpr int kByteVocab = 256;
inline constexpr int kDefaultVocab = 260;

struct SpecialTokens {
  TokenId bos, eos, pad, sep;
};

constexpr SpecialTokens special_tokens(int vocab_size) {
  return {vocab_size - 4, vocab_size - 3, vocab_size - 2, vocab_size - 1};
}

Tokens encode(std::string_view text);
/// Specials are dropped; ids outside [0, vocab_size) throw UsageError.
std::string decode(std::span<const TokenId> tokens, int vocab_size = kDefaultVocab);

struct LMConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int context_len = 256;
  int vocab_size = kDefaultVocab;
  std::uint64_t init_seed = 0;

  void validate() const;
  bool operator==(const LMConfig&) const = default;
};

// Keys carry no bias: it shifts every score in a row equally and softmax
// cancels it, so its gradient is identically zero.
struct LayerParams {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, bq, wk, wv, bv, wo, bo;
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1, w2, b2;
};

/// All learnable tensors. Row vectors (biases, norms) are 1 x n matrices.
/// The same type holds gradients and optimizer moments.
struct LMParams {
  LMConfig config;
  Matrix tok_emb;  // V x d
  Matrix pos_emb;  // context x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;
  Matrix head_w;  // d x V
  Matrix head_b;  // 1 x V

  // Visits (name, tensor) in a fixed order shared by checkpoints and optimizers.
  void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();
  bool operator==(const LMParams& other) const;
};

/// Seeded Gaussian init (std 0.02) for weights and embeddings; norm gains 1,
/// biases 0.
LMParams init_params(const LMConfig& config);
LMParams zeros_like(const LMParams& params);
/// acc += scale * g, tensor by tensor.
void add_scaled(LMParams& acc, const LMParams& g, double scale);
double global_norm(const LMParams& g);

/// Logits for every position (length x V). Position t depends only on
/// tokens[0..t].
Matrix forward(const LMParams& params, std::span<const TokenId> tokens);

/// Forward pass that keeps activations for backward().
class ForwardPass {
 public:
  ForwardPass(const LMParams& params, std::span<const TokenId> tokens);
  ~ForwardPass();
  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;
  const Matrix& logits() const { return logits_; }
  /// grads += d(sum(dlogits .* logits)) / d(params)
  void backward(const Matrix& dlogits, LMParams& grads) const;

  struct LayerCache;
  struct NormCache {
    Matrix xhat;
    Eigen::VectorXd rstd;
  };

 private:
  const LMParams& params_;
  Tokens tokens_;
  std::vector<LayerCache> layers_;
  NormCache final_norm_;
  Matrix final_out_;
  Matrix logits_;
};

/// Model input for a (prompt, completion) pair: BOS prompt SEP completion,
/// with the last completion token omitted since nothing is predicted after it.
Tokens conditioning_sequence(std::span<const TokenId> prompt, std::span<const TokenId> completion,
                             int vocab_size);

/// Σ_t log P(completion_t | prompt, completion_<t). Zero for empty completions.
double sequence_logprob(const LMParams& params, std::span<const TokenId> prompt,
                        std::span<const TokenId> completion);

/// Same value; also accumulates scale * d(logprob)/d(params) into grads.
double sequence_logprob_backward(const LMParams& params, std::span<const TokenId> prompt,
                                 std::span<const TokenId> completion, double scale,
                                 LMParams& grads);

/// Per-position log P of each completion token (length = completion size).
std::vector<double> token_logprobs(const LMParams& params, std::span<const TokenId> prompt,
                                   std::span<const TokenId> completion);

/// Drops prompt tokens from the left (then completion tokens from the right)
/// until the conditioning sequence fits the context window.
struct FittedPair {
  Tokens prompt;
  Tokens completion;
  bool truncated = false;
};
FittedPair fit_to_context(std::span<const TokenId> prompt, std::span<const TokenId> completion,
                          int context_len);

struct SampleOptions {
  int max_new = 128;
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

/// Autoregressive sampling after BOS prompt SEP. Temperature 0 is argmax with
/// ties to the lowest id. The returned tokens include a terminating EOS when
/// one was produced. Stops early when the context window is full.
Tokens sample(const LMParams& params, std::span<const TokenId> prompt, const SampleOptions& options);

// Checkpoint container: magic, version, config, named f64 tensors, SHA-256.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const LMParams& params, const std::filesystem::path& path);
LMParams load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const LMParams& params);
LMParams deserialize_checkpoint(std::string_view bytes);

}  // namespace alignforge::tinylm
