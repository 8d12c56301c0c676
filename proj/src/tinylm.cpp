#include "alignforge/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::tinylm {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kInitStd = 0.02;

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer

Tokens encode(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string decode(std::span<const TokenId> tokens, int vocab_size) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw UsageError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
    }
    if (t < kByteVocab && t < vocab_size - 4) out.push_back(static_cast<char>(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

void LMConfig::validate() const {
  if (n_layers < 0) throw UsageError("n_layers must be non-negative");
  if (n_heads <= 0 || d_model <= 0 || d_ff <= 0) {
    throw UsageError("n_heads, d_model and d_ff must be positive");
  }
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
  if (context_len < 2) throw UsageError("context_len must be at least 2");
  if (vocab_size < 4) throw UsageError("vocab_size must hold the four special tokens");
}

void LMParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.wq", l.wq);
    fn(p + "attn.bq", l.bq);
    fn(p + "attn.wk", l.wk);
    fn(p + "attn.wv", l.wv);
    fn(p + "attn.bv", l.bv);
    fn(p + "attn.wo", l.wo);
    fn(p + "attn.bo", l.bo);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "mlp.w1", l.w1);
    fn(p + "mlp.b1", l.b1);
    fn(p + "mlp.w2", l.w2);
    fn(p + "mlp.b2", l.b2);
  }
  fn("lnf.gain", lnf_gain);
  fn("lnf.bias", lnf_bias);
  fn("head.w", head_w);
  fn("head.b", head_b);
}

void LMParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<LMParams*>(this)->for_each(
      [&](const std::string& name, Matrix& m) { fn(name, m); });
}

std::vector<Matrix*> LMParams::tensors() {
  std::vector<Matrix*> out;
  for_each([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> LMParams::tensors() const {
  std::vector<const Matrix*> out;
  for_each([&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

std::size_t LMParams::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* m : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

bool LMParams::all_finite() const {
  for (const Matrix* m : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

void LMParams::set_zero() {
  for (Matrix* m : tensors()) m->setZero();
}

bool LMParams::operator==(const LMParams& other) const {
  if (!(config == other.config)) return false;
  const auto a = tensors();
  const auto b = other.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
    // Bitwise comparison so -0.0 and NaN payloads count.
    if (std::memcmp(a[i]->data(), b[i]->data(), sizeof(double) * a[i]->size()) != 0) return false;
  }
  return true;
}

namespace {

LMParams shaped(const LMConfig& c) {
  c.validate();
  LMParams p;
  p.config = c;
  const int d = c.d_model;
  p.tok_emb = Matrix::Zero(c.vocab_size, d);
  p.pos_emb = Matrix::Zero(c.context_len, d);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain = Matrix::Ones(1, d);
    l.ln1_bias = Matrix::Zero(1, d);
    l.wq = Matrix::Zero(d, d);
    l.bq = Matrix::Zero(1, d);
    l.wk = Matrix::Zero(d, d);
    l.wv = Matrix::Zero(d, d);
    l.bv = Matrix::Zero(1, d);
    l.wo = Matrix::Zero(d, d);
    l.bo = Matrix::Zero(1, d);
    l.ln2_gain = Matrix::Ones(1, d);
    l.ln2_bias = Matrix::Zero(1, d);
    l.w1 = Matrix::Zero(d, c.d_ff);
    l.b1 = Matrix::Zero(1, c.d_ff);
    l.w2 = Matrix::Zero(c.d_ff, d);
    l.b2 = Matrix::Zero(1, d);
  }
  p.lnf_gain = Matrix::Ones(1, d);
  p.lnf_bias = Matrix::Zero(1, d);
  p.head_w = Matrix::Zero(d, c.vocab_size);
  p.head_b = Matrix::Zero(1, c.vocab_size);
  return p;
}

// Embeddings and projection matrices; norms and biases are not randomized.
bool is_weight(const std::string& name) {
  if (name == "tok_emb" || name == "pos_emb") return true;
  const auto dot = name.rfind('.');
  return dot != std::string::npos && name[dot + 1] == 'w';
}

}  // namespace

LMParams init_params(const LMConfig& config) {
  LMParams p = shaped(config);
  Rng rng(mix_seed(config.init_seed, 0x1417));
  p.for_each([&](const std::string& name, Matrix& m) {
    if (!is_weight(name)) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = kInitStd * rng.normal();
  });
  return p;
}

LMParams zeros_like(const LMParams& params) {
  LMParams z = params;
  z.set_zero();
  return z;
}

void add_scaled(LMParams& acc, const LMParams& g, double scale) {
  auto a = acc.tensors();
  const auto b = g.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) *a[i] += scale * *b[i];
}

double global_norm(const LMParams& g) {
  double sq = 0.0;
  for (const Matrix* m : g.tensors()) sq += m->squaredNorm();
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

using NormCache = ForwardPass::NormCache;

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache& cache) {
  const Eigen::Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  Matrix y(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mu).square().sum() / d;
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mu) * rstd;
    y.row(r) = cache.xhat.row(r).cwiseProduct(gain) + bias;
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache,
                           Matrix& dgain, Matrix& dbias) {
  dgain += dy.cwiseProduct(cache.xhat).colwise().sum();
  dbias += dy.colwise().sum();
  const double d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain);
    const double mean_dxhat = dxhat.sum() / d;
    const double mean_dxhat_xhat = dxhat.dot(cache.xhat.row(r)) / d;
    dx.row(r) = cache.rstd(r) *
                (dxhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kSqrt2OverPi * (u + kGeluC * u * u * u)));
}

double gelu_grad(double u) {
  const double th = std::tanh(kSqrt2OverPi * (u + kGeluC * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kSqrt2OverPi * (1.0 + 3.0 * kGeluC * u * u);
}

// Row-wise causal softmax of scores, in place. Entries above the diagonal
// become exactly zero.
void causal_softmax(Matrix& s) {
  const Eigen::Index n = s.rows();
  for (Eigen::Index t = 0; t < n; ++t) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= t; ++j) m = std::max(m, s(t, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j <= t; ++j) {
      s(t, j) = std::exp(s(t, j) - m);
      z += s(t, j);
    }
    for (Eigen::Index j = 0; j <= t; ++j) s(t, j) /= z;
    for (Eigen::Index j = t + 1; j < n; ++j) s(t, j) = 0.0;
  }
}

}  // namespace

struct ForwardPass::LayerCache {
  NormCache norm1;
  Matrix a;                   // LN1 output
  Matrix q, k, v;             // projections
  std::vector<Matrix> probs;  // per head, T x T
  Matrix attn;                // concatenated head outputs
  NormCache norm2;
  Matrix c;  // LN2 output
  Matrix u;  // MLP pre-activation
  Matrix g;  // gelu(u)
};

ForwardPass::ForwardPass(const LMParams& params, std::span<const TokenId> tokens)
    : params_(params), tokens_(tokens.begin(), tokens.end()) {
  const auto& cfg = params.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (n > cfg.context_len) {
    throw UsageError("sequence of length " + std::to_string(n) + " exceeds context_len " +
                     std::to_string(cfg.context_len));
  }
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const TokenId tok = tokens_[t];
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw UsageError("token id " + std::to_string(tok) + " outside vocabulary");
    }
    x.row(t) = params.tok_emb.row(tok) + params.pos_emb.row(t);
  }

  layers_.resize(params.layers.size());
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& w = params.layers[li];
    auto& c = layers_[li];
    c.a = layer_norm(x, w.ln1_gain, w.ln1_bias, c.norm1);
    c.q = (c.a * w.wq).rowwise() + w.bq.row(0);
    c.k = c.a * w.wk;
    c.v = (c.a * w.wv).rowwise() + w.bv.row(0);
    c.attn.resize(n, d);
    c.probs.resize(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Matrix s = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose() * scale;
      causal_softmax(s);
      c.attn.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
      c.probs[h] = std::move(s);
    }
    x += (c.attn * w.wo).rowwise() + w.bo.row(0);
    c.c = layer_norm(x, w.ln2_gain, w.ln2_bias, c.norm2);
    c.u = (c.c * w.w1).rowwise() + w.b1.row(0);
    c.g = c.u.unaryExpr([](double v) { return gelu(v); });
    x += (c.g * w.w2).rowwise() + w.b2.row(0);
  }
  final_out_ = layer_norm(x, params.lnf_gain, params.lnf_bias, final_norm_);
  logits_ = (final_out_ * params.head_w).rowwise() + params.head_b.row(0);
}

ForwardPass::~ForwardPass() = default;

void ForwardPass::backward(const Matrix& dlogits, LMParams& grads) const {
  const auto& p = params_;
  const auto& cfg = p.config;
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  grads.head_w.noalias() += final_out_.transpose() * dlogits;
  grads.head_b += dlogits.colwise().sum();
  Matrix dx = layer_norm_backward(dlogits * p.head_w.transpose(), p.lnf_gain, final_norm_,
                                  grads.lnf_gain, grads.lnf_bias);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& w = p.layers[li];
    auto& gw = grads.layers[li];
    const auto& c = layers_[li];

    // MLP branch.
    gw.w2.noalias() += c.g.transpose() * dx;
    gw.b2 += dx.colwise().sum();
    Matrix du = (dx * w.w2.transpose()).cwiseProduct(c.u.unaryExpr([](double v) { return gelu_grad(v); }));
    gw.w1.noalias() += c.c.transpose() * du;
    gw.b1 += du.colwise().sum();
    dx += layer_norm_backward(du * w.w1.transpose(), w.ln2_gain, c.norm2, gw.ln2_gain, gw.ln2_bias);

    // Attention branch.
    gw.wo.noalias() += c.attn.transpose() * dx;
    gw.bo += dx.colwise().sum();
    const Matrix dattn = dx * w.wo.transpose();
    Matrix dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Matrix& prob = c.probs[h];
      const auto dout = dattn.middleCols(h * dh, dh);
      Matrix dp = dout * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = prob.transpose() * dout;
      // Softmax Jacobian, row by row.
      const Eigen::VectorXd row_dot = prob.cwiseProduct(dp).rowwise().sum();
      Matrix ds = prob.cwiseProduct(dp.colwise() - row_dot);
      dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh) * scale;
      dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh) * scale;
    }
    gw.wq.noalias() += c.a.transpose() * dq;
    gw.bq += dq.colwise().sum();
    gw.wk.noalias() += c.a.transpose() * dk;
    gw.wv.noalias() += c.a.transpose() * dv;
    gw.bv += dv.colwise().sum();
    const Matrix da = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    dx += layer_norm_backward(da, w.ln1_gain, c.norm1, gw.ln1_gain, gw.ln1_bias);
  }

  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    grads.tok_emb.row(tokens_[t]) += dx.row(t);
    grads.pos_emb.row(t) += dx.row(t);
  }
}

Matrix forward(const LMParams& params, std::span<const TokenId> tokens) {
  return ForwardPass(params, tokens).logits();
}

// ---------------------------------------------------------------------------
// Sequence scoring

Tokens conditioning_sequence(std::span<const TokenId> prompt, std::span<const TokenId> completion,
                             int vocab_size) {
  const auto sp = special_tokens(vocab_size);
  Tokens seq;
  seq.reserve(prompt.size() + completion.size() + 2);
  seq.push_back(sp.bos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(sp.sep);
  if (!completion.empty()) seq.insert(seq.end(), completion.begin(), completion.end() - 1);
  return seq;
}

namespace {

double log_sum_exp(const Eigen::RowVectorXd& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

}  // namespace

std::vector<double> token_logprobs(const LMParams& params, std::span<const TokenId> prompt,
                                   std::span<const TokenId> completion) {
  if (completion.empty()) return {};
  const Tokens seq = conditioning_sequence(prompt, completion, params.config.vocab_size);
  const Matrix logits = forward(params, seq);
  const auto offset = static_cast<Eigen::Index>(prompt.size() + 1);
  std::vector<double> out(completion.size());
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const Eigen::RowVectorXd row = logits.row(offset + static_cast<Eigen::Index>(i));
    out[i] = row(completion[i]) - log_sum_exp(row);
  }
  return out;
}

double sequence_logprob(const LMParams& params, std::span<const TokenId> prompt,
                        std::span<const TokenId> completion) {
  double total = 0.0;
  for (double lp : token_logprobs(params, prompt, completion)) total += lp;
  return total;
}

double sequence_logprob_backward(const LMParams& params, std::span<const TokenId> prompt,
                                 std::span<const TokenId> completion, double scale,
                                 LMParams& grads) {
  if (completion.empty()) return 0.0;
  const Tokens seq = conditioning_sequence(prompt, completion, params.config.vocab_size);
  const ForwardPass pass(params, seq);
  const Matrix& logits = pass.logits();
  const auto offset = static_cast<Eigen::Index>(prompt.size() + 1);
  Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const Eigen::Index r = offset + static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd row = logits.row(r);
    const double lse = log_sum_exp(row);
    total += row(completion[i]) - lse;
    // d log softmax_y / d logits = onehot(y) - softmax
    dlogits.row(r) = -scale * (row.array() - lse).exp().matrix();
    dlogits(r, completion[i]) += scale;
  }
  pass.backward(dlogits, grads);
  return total;
}

FittedPair fit_to_context(std::span<const TokenId> prompt, std::span<const TokenId> completion,
                          int context_len) {
  FittedPair out;
  out.prompt.assign(prompt.begin(), prompt.end());
  out.completion.assign(completion.begin(), completion.end());
  // Fed length is prompt + completion + 1 (BOS, SEP, minus the final token).
  auto fed = [&] {
    return static_cast<long>(out.prompt.size() + out.completion.size()) + 1;
  };
  if (fed() > context_len && !out.prompt.empty()) {
    const long excess = std::min<long>(fed() - context_len, static_cast<long>(out.prompt.size()));
    out.prompt.erase(out.prompt.begin(), out.prompt.begin() + excess);
    out.truncated = true;
  }
  if (fed() > context_len) {
    out.completion.resize(static_cast<std::size_t>(context_len - 1 - static_cast<long>(out.prompt.size())));
    out.truncated = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

// Incremental decoder with cached keys and values; produces the same logits
// as a full forward pass up to rounding.
class Decoder {
 public:
  explicit Decoder(const LMParams& p) : p_(p) {
    const auto& c = p.config;
    keys_.assign(p.layers.size(), Matrix(c.context_len, c.d_model));
    values_.assign(p.layers.size(), Matrix(c.context_len, c.d_model));
  }

  int length() const { return pos_; }

  Eigen::RowVectorXd step(TokenId tok) {
    const auto& cfg = p_.config;
    if (pos_ >= cfg.context_len) throw UsageError("context window exhausted");
    if (tok < 0 || tok >= cfg.vocab_size) throw UsageError("token id outside vocabulary");
    const int d = cfg.d_model;
    const int dh = d / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix x = p_.tok_emb.row(tok) + p_.pos_emb.row(pos_);
    NormCache scratch;
    for (std::size_t li = 0; li < p_.layers.size(); ++li) {
      const auto& w = p_.layers[li];
      const Matrix a = layer_norm(x, w.ln1_gain, w.ln1_bias, scratch);
      const Matrix q = a * w.wq + w.bq;
      keys_[li].row(pos_) = a * w.wk;
      values_[li].row(pos_) = a * w.wv + w.bv;
      Matrix attn(1, d);
      for (int h = 0; h < cfg.n_heads; ++h) {
        Matrix s = q.middleCols(h * dh, dh) *
                   keys_[li].block(0, h * dh, pos_ + 1, dh).transpose() * scale;
        const double m = s.maxCoeff();
        s = (s.array() - m).exp().matrix();
        s /= s.sum();
        attn.middleCols(h * dh, dh) = s * values_[li].block(0, h * dh, pos_ + 1, dh);
      }
      x += attn * w.wo + w.bo;
      const Matrix c = layer_norm(x, w.ln2_gain, w.ln2_bias, scratch);
      const Matrix g = (c * w.w1 + w.b1).unaryExpr([](double v) { return gelu(v); });
      x += g * w.w2 + w.b2;
    }
    const Matrix f = layer_norm(x, p_.lnf_gain, p_.lnf_bias, scratch);
    ++pos_;
    return f * p_.head_w + p_.head_b;
  }

 private:
  const LMParams& p_;
  std::vector<Matrix> keys_, values_;
  int pos_ = 0;
};

TokenId pick_token(const Eigen::RowVectorXd& logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i) {
      if (logits(i) > logits(best)) best = i;
    }
    return static_cast<TokenId>(best);
  }
  const Eigen::RowVectorXd scaled = logits / temperature;
  const Eigen::RowVectorXd probs = (scaled.array() - scaled.maxCoeff()).exp().matrix();
  const double total = probs.sum();
  double u = rng.uniform() * total;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    u -= probs(i);
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(probs.size() - 1);
}

}  // namespace

Tokens sample(const LMParams& params, std::span<const TokenId> prompt, const SampleOptions& options) {
  if (options.temperature < 0.0) throw UsageError("temperature must be non-negative");
  const auto& cfg = params.config;
  if (static_cast<long>(prompt.size()) + 2 > cfg.context_len) {
    throw UsageError("prompt does not fit the context window");
  }
  const auto sp = special_tokens(cfg.vocab_size);
  Tokens out;
  if (options.max_new <= 0) return out;

  Decoder dec(params);
  dec.step(sp.bos);
  for (TokenId t : prompt) dec.step(t);
  Eigen::RowVectorXd logits = dec.step(sp.sep);
  Rng rng(mix_seed(options.seed, 0x5a3));
  while (static_cast<int>(out.size()) < options.max_new) {
    const TokenId next = pick_token(logits, options.temperature, rng);
    out.push_back(next);
    if (next == sp.eos || dec.length() >= cfg.context_len) break;
    if (static_cast<int>(out.size()) == options.max_new) break;
    logits = dec.step(next);
  }
  return out;
}

}  // namespace alignforge::tinylm
