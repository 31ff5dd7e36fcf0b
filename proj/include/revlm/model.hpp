#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "revlm/common.hpp"
#include "revlm/det_random.hpp"

namespace revlm {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Architecture hyperparameters of a decoder-only pre-norm transformer
/// with learned positional embeddings and tied input/output embeddings.
struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_length = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::uint64_t seed = 0;
  double init_scale = 0.02;

  void validate() const {
    if (vocab_size == 0) throw ValidationError("model config: vocab_size must be positive");
    if (context_length < 2) throw ValidationError("model config: context_length must be >= 2");
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0)
      throw ValidationError("model config: layer/head/width fields must be positive");
    if (d_model % n_heads != 0)
      throw ValidationError("model config: d_model must be divisible by n_heads");
  }

  std::size_t head_dim() const { return d_model / n_heads; }

  /// Closed-form learnable-parameter count (output projection is tied,
  /// so it contributes nothing beyond the token embedding).
  std::size_t param_count() const {
    const std::size_t d = d_model, f = d_ff;
    const std::size_t per_layer = 2 * (2 * d)        // two layer norms
                                  + (d * 3 * d + 3 * d)  // qkv projection
                                  + (d * d + d)          // attention output
                                  + (d * f + f)          // feed-forward up
                                  + (f * d + d);         // feed-forward down
    return vocab_size * d + context_length * d + n_layers * per_layer + 2 * d;
  }

  static ModelConfig tiny(std::size_t vocab, std::uint64_t seed = 1) {
    return {vocab, 64, 2, 2, 16, 64, seed};
  }

  /// GPT-2 small hyperparameters; used as a parameter-count sanity
  /// preset, not for desk-scale training.
  static ModelConfig gpt2_124m() {
    return {50257, 1024, 12, 12, 768, 3072, 0};
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"context_length", c.context_length},
                     {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                     {"d_model", c.d_model},         {"d_ff", c.d_ff},
                     {"seed", c.seed},               {"init_scale", c.init_scale}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("context_length").get_to(c.context_length);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ff").get_to(c.d_ff);
  c.seed = j.value("seed", std::uint64_t{0});
  c.init_scale = j.value("init_scale", 0.02);
}

template <class Scalar>
struct LayerParams {
  Mat<Scalar> ln1_gain, ln1_bias;      // 1 x d
  Mat<Scalar> qkv_weight;              // d x 3d
  Mat<Scalar> qkv_bias;                // 1 x 3d
  Mat<Scalar> attn_out_weight;         // d x d
  Mat<Scalar> attn_out_bias;           // 1 x d
  Mat<Scalar> ln2_gain, ln2_bias;      // 1 x d
  Mat<Scalar> ff_up_weight;            // d x d_ff
  Mat<Scalar> ff_up_bias;              // 1 x d_ff
  Mat<Scalar> ff_down_weight;          // d_ff x d
  Mat<Scalar> ff_down_bias;            // 1 x d
};

/// The learnable tensors implied by a ModelConfig. Also used as the
/// container for gradients and Adam moments (same shape family).
template <class Scalar>
struct Parameters {
  Mat<Scalar> tok_embed;               // V x d (doubles as output projection)
  Mat<Scalar> pos_embed;               // T x d
  std::vector<LayerParams<Scalar>> layers;
  Mat<Scalar> final_ln_gain, final_ln_bias;  // 1 x d
};

template <class Scalar>
std::vector<std::pair<std::string, Mat<Scalar>*>> tensor_list(Parameters<Scalar>& p) {
  std::vector<std::pair<std::string, Mat<Scalar>*>> out;
  out.emplace_back("tok_embed", &p.tok_embed);
  out.emplace_back("pos_embed", &p.pos_embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& lp = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1_gain", &lp.ln1_gain);
    out.emplace_back(pre + "ln1_bias", &lp.ln1_bias);
    out.emplace_back(pre + "qkv_weight", &lp.qkv_weight);
    out.emplace_back(pre + "qkv_bias", &lp.qkv_bias);
    out.emplace_back(pre + "attn_out_weight", &lp.attn_out_weight);
    out.emplace_back(pre + "attn_out_bias", &lp.attn_out_bias);
    out.emplace_back(pre + "ln2_gain", &lp.ln2_gain);
    out.emplace_back(pre + "ln2_bias", &lp.ln2_bias);
    out.emplace_back(pre + "ff_up_weight", &lp.ff_up_weight);
    out.emplace_back(pre + "ff_up_bias", &lp.ff_up_bias);
    out.emplace_back(pre + "ff_down_weight", &lp.ff_down_weight);
    out.emplace_back(pre + "ff_down_bias", &lp.ff_down_bias);
  }
  out.emplace_back("final_ln_gain", &p.final_ln_gain);
  out.emplace_back("final_ln_bias", &p.final_ln_bias);
  return out;
}

template <class Scalar>
std::vector<std::pair<std::string, const Mat<Scalar>*>> tensor_list(const Parameters<Scalar>& p) {
  auto mutable_list = tensor_list(const_cast<Parameters<Scalar>&>(p));
  std::vector<std::pair<std::string, const Mat<Scalar>*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, ptr] : mutable_list) out.emplace_back(name, ptr);
  return out;
}

/// Zero-valued parameter set with the shapes the config implies.
template <class Scalar>
Parameters<Scalar> shaped_zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto T = static_cast<Eigen::Index>(cfg.context_length);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto f = static_cast<Eigen::Index>(cfg.d_ff);

  Parameters<Scalar> p;
  p.tok_embed = Mat<Scalar>::Zero(V, d);
  p.pos_embed = Mat<Scalar>::Zero(T, d);
  p.layers.resize(cfg.n_layers);
  for (auto& lp : p.layers) {
    lp.ln1_gain = Mat<Scalar>::Zero(1, d);
    lp.ln1_bias = Mat<Scalar>::Zero(1, d);
    lp.qkv_weight = Mat<Scalar>::Zero(d, 3 * d);
    lp.qkv_bias = Mat<Scalar>::Zero(1, 3 * d);
    lp.attn_out_weight = Mat<Scalar>::Zero(d, d);
    lp.attn_out_bias = Mat<Scalar>::Zero(1, d);
    lp.ln2_gain = Mat<Scalar>::Zero(1, d);
    lp.ln2_bias = Mat<Scalar>::Zero(1, d);
    lp.ff_up_weight = Mat<Scalar>::Zero(d, f);
    lp.ff_up_bias = Mat<Scalar>::Zero(1, f);
    lp.ff_down_weight = Mat<Scalar>::Zero(f, d);
    lp.ff_down_bias = Mat<Scalar>::Zero(1, d);
  }
  p.final_ln_gain = Mat<Scalar>::Zero(1, d);
  p.final_ln_bias = Mat<Scalar>::Zero(1, d);
  return p;
}

template <class Scalar>
void set_zero(Parameters<Scalar>& p) {
  for (auto& [name, t] : tensor_list(p)) t->setZero();
}

template <class To, class From>
Parameters<To> cast_params(const Parameters<From>& p) {
  Parameters<To> out;
  out.layers.resize(p.layers.size());
  auto src = tensor_list(p);
  auto dst = tensor_list(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<To>();
  return out;
}

template <class Scalar>
std::size_t tensor_element_count(const Parameters<Scalar>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensor_list(p)) n += static_cast<std::size_t>(t->size());
  return n;
}

template <class Scalar>
bool all_finite(const Parameters<Scalar>& p) {
  for (const auto& [name, t] : tensor_list(p))
    if (!t->allFinite()) return false;
  return true;
}

/// Gaussian init (configurable scale, default 0.02) for embeddings and
/// projection weights; zero biases; unit layer-norm gains. The draw
/// order over tensors is fixed, so a seed fully determines the result.
template <class Scalar>
Parameters<Scalar> init_params(const ModelConfig& cfg) {
  Parameters<Scalar> p = shaped_zeros<Scalar>(cfg);
  DetRng rng(cfg.seed);
  auto fill_normal = [&](Mat<Scalar>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = static_cast<Scalar>(rng.normal() * cfg.init_scale);
  };
  fill_normal(p.tok_embed);
  fill_normal(p.pos_embed);
  for (auto& lp : p.layers) {
    lp.ln1_gain.setOnes();
    fill_normal(lp.qkv_weight);
    fill_normal(lp.attn_out_weight);
    lp.ln2_gain.setOnes();
    fill_normal(lp.ff_up_weight);
    fill_normal(lp.ff_down_weight);
  }
  p.final_ln_gain.setOnes();
  return p;
}

namespace model_detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

template <class Scalar>
Scalar gelu(Scalar x) {
  const auto k = static_cast<Scalar>(kGeluK);
  const auto c = static_cast<Scalar>(kGeluC);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + c * x * x * x)));
}

template <class Scalar>
Scalar gelu_grad(Scalar x) {
  const auto k = static_cast<Scalar>(kGeluK);
  const auto c = static_cast<Scalar>(kGeluC);
  const Scalar t = std::tanh(k * (x + c * x * x * x));
  const Scalar sech2 = Scalar(1) - t * t;
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * sech2 * k * (Scalar(1) + Scalar(3) * c * x * x);
}

template <class Scalar>
struct LayerNormCache {
  Mat<Scalar> xhat;                  // normalized rows
  std::vector<Scalar> inv_std;       // per row
};

template <class Scalar>
Mat<Scalar> layer_norm_forward(const Mat<Scalar>& x, const Mat<Scalar>& gain,
                               const Mat<Scalar>& bias, LayerNormCache<Scalar>* cache) {
  const auto n = static_cast<Scalar>(x.cols());
  Mat<Scalar> y(x.rows(), x.cols());
  if (cache) {
    cache->xhat.resize(x.rows(), x.cols());
    cache->inv_std.resize(static_cast<std::size_t>(x.rows()));
  }
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().sum() / n;
    const Scalar inv_std = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLnEps));
    const auto xhat = ((x.row(r).array() - mean) * inv_std).eval();
    y.row(r).array() = xhat * gain.row(0).array() + bias.row(0).array();
    if (cache) {
      cache->xhat.row(r).array() = xhat;
      cache->inv_std[static_cast<std::size_t>(r)] = inv_std;
    }
  }
  return y;
}

template <class Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const LayerNormCache<Scalar>& cache,
                                const Mat<Scalar>& gain, Mat<Scalar>& dgain, Mat<Scalar>& dbias) {
  const auto n = static_cast<Scalar>(dy.cols());
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const auto xhat = cache.xhat.row(r).array();
    const auto dxhat = (dy.row(r).array() * gain.row(0).array()).eval();
    dgain.row(0).array() += dy.row(r).array() * xhat;
    dbias.row(0).array() += dy.row(r).array();
    const Scalar mean_dxhat = dxhat.sum() / n;
    const Scalar mean_dxhat_xhat = (dxhat * xhat).sum() / n;
    dx.row(r).array() = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) *
                        cache.inv_std[static_cast<std::size_t>(r)];
  }
  return dx;
}

template <class Scalar>
struct BlockCache {
  Mat<Scalar> a_in;                 // block input (pre-attention residual)
  LayerNormCache<Scalar> ln1;
  Mat<Scalar> a_ln;                 // ln1 output
  Mat<Scalar> qkv;                  // T x 3d
  std::vector<Mat<Scalar>> attn_probs;  // per head, T x T
  Mat<Scalar> ctx;                  // concatenated head outputs, T x d
  Mat<Scalar> m_in;                 // pre-feed-forward residual
  LayerNormCache<Scalar> ln2;
  Mat<Scalar> m_ln;
  Mat<Scalar> ff_pre;               // T x d_ff, before activation
};

template <class Scalar>
struct FinalCache {
  Mat<Scalar> x;                    // final layer-norm input
  LayerNormCache<Scalar> ln;
  Mat<Scalar> h;                    // final hidden states
};

inline void validate_sequence(const ModelConfig& cfg, std::span<const std::uint32_t> ids) {
  if (ids.empty()) throw ValidationError("forward: empty token sequence");
  if (ids.size() > cfg.context_length)
    throw ValidationError("forward: sequence length " + std::to_string(ids.size()) +
                          " exceeds context_length " + std::to_string(cfg.context_length));
  for (std::uint32_t id : ids)
    if (id >= cfg.vocab_size)
      throw ValidationError("forward: token id " + std::to_string(id) +
                            " out of range (vocab_size " + std::to_string(cfg.vocab_size) + ")");
}

/// Causal multi-head self-attention over pre-normalized inputs.
template <class Scalar>
Mat<Scalar> attention_forward(const ModelConfig& cfg, const LayerParams<Scalar>& lp,
                              const Mat<Scalar>& a_ln, BlockCache<Scalar>* cache) {
  const auto T = a_ln.rows();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
  const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  Mat<Scalar> qkv(T, 3 * d);
  qkv.noalias() = a_ln * lp.qkv_weight;
  qkv.rowwise() += lp.qkv_bias.row(0);

  Mat<Scalar> ctx(T, d);
  if (cache) cache->attn_probs.resize(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * hd;
    auto qh = qkv.middleCols(off, hd);
    auto kh = qkv.middleCols(d + off, hd);
    auto vh = qkv.middleCols(2 * d + off, hd);

    Mat<Scalar> scores(T, T);
    scores.noalias() = qh * kh.transpose();
    scores *= scale;
    for (Eigen::Index i = 0; i < T; ++i)
      for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = neg_inf;
    for (Eigen::Index i = 0; i < T; ++i) {
      const Scalar m = scores.row(i).head(i + 1).maxCoeff();
      scores.row(i).array() = (scores.row(i).array() - m).exp();  // exp(-inf) == 0 on masked entries
      scores.row(i) /= scores.row(i).sum();
    }
    ctx.middleCols(off, hd).noalias() = scores * vh;
    if (cache) cache->attn_probs[h] = std::move(scores);
  }

  Mat<Scalar> out(T, d);
  out.noalias() = ctx * lp.attn_out_weight;
  out.rowwise() += lp.attn_out_bias.row(0);
  if (cache) {
    cache->qkv = std::move(qkv);
    cache->ctx = std::move(ctx);
  }
  return out;
}

}  // namespace model_detail

/// Forward pass over one sequence. Output at position i depends only on
/// tokens at positions <= i. When caches are supplied, every activation
/// needed for the exact backward pass is recorded.
template <class Scalar>
Mat<Scalar> forward_sequence(const ModelConfig& cfg, const Parameters<Scalar>& params,
                             std::span<const std::uint32_t> ids,
                             std::vector<model_detail::BlockCache<Scalar>>* caches = nullptr,
                             model_detail::FinalCache<Scalar>* final_cache = nullptr) {
  using namespace model_detail;
  validate_sequence(cfg, ids);
  const auto T = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);

  Mat<Scalar> x(T, d);
  for (Eigen::Index i = 0; i < T; ++i)
    x.row(i) = params.tok_embed.row(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(i)])) +
               params.pos_embed.row(i);

  if (caches) caches->assign(cfg.n_layers, BlockCache<Scalar>{});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = params.layers[l];
    BlockCache<Scalar>* bc = caches ? &(*caches)[l] : nullptr;

    if (bc) bc->a_in = x;
    Mat<Scalar> a_ln = layer_norm_forward(x, lp.ln1_gain, lp.ln1_bias, bc ? &bc->ln1 : nullptr);
    Mat<Scalar> attn = attention_forward(cfg, lp, a_ln, bc);
    if (bc) bc->a_ln = std::move(a_ln);
    x += attn;

    if (bc) bc->m_in = x;
    Mat<Scalar> m_ln = layer_norm_forward(x, lp.ln2_gain, lp.ln2_bias, bc ? &bc->ln2 : nullptr);
    Mat<Scalar> ff_pre(T, static_cast<Eigen::Index>(cfg.d_ff));
    ff_pre.noalias() = m_ln * lp.ff_up_weight;
    ff_pre.rowwise() += lp.ff_up_bias.row(0);
    Mat<Scalar> ff_act = ff_pre.unaryExpr([](Scalar v) { return gelu(v); });
    Mat<Scalar> ff(T, d);
    ff.noalias() = ff_act * lp.ff_down_weight;
    ff.rowwise() += lp.ff_down_bias.row(0);
    if (bc) {
      bc->m_ln = std::move(m_ln);
      bc->ff_pre = std::move(ff_pre);
    }
    x += ff;
  }

  if (final_cache) final_cache->x = x;
  Mat<Scalar> h = layer_norm_forward(x, params.final_ln_gain, params.final_ln_bias,
                                     final_cache ? &final_cache->ln : nullptr);
  Mat<Scalar> logits(T, static_cast<Eigen::Index>(cfg.vocab_size));
  logits.noalias() = h * params.tok_embed.transpose();
  if (final_cache) final_cache->h = std::move(h);
  return logits;
}

/// Next-token batch: inputs[b][i] predicts targets[b][i]; a target of
/// kIgnoreTarget contributes neither loss nor gradient.
struct TokenBatch {
  static constexpr std::int64_t kIgnoreTarget = -1;
  std::vector<std::vector<std::uint32_t>> inputs;
  std::vector<std::vector<std::int64_t>> targets;
};

/// Builds the standard next-token batch from fixed-length chunks:
/// inputs drop the last token, targets drop the first.
inline TokenBatch make_next_token_batch(const std::vector<std::vector<std::uint32_t>>& chunks) {
  TokenBatch batch;
  for (const auto& chunk : chunks) {
    if (chunk.size() < 2)
      throw ValidationError("next-token batch requires chunks of >= 2 tokens");
    batch.inputs.emplace_back(chunk.begin(), chunk.end() - 1);
    batch.targets.emplace_back(chunk.begin() + 1, chunk.end());
  }
  return batch;
}

/// Mean cross-entropy (nats/token) over all non-ignored positions of a
/// batch of logits, accumulated in double precision.
template <class Scalar>
double cross_entropy(const std::vector<Mat<Scalar>>& logits,
                     const std::vector<std::vector<std::int64_t>>& targets) {
  if (logits.size() != targets.size())
    throw ValidationError("cross_entropy: batch size mismatch between logits and targets");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    const auto& lg = logits[b];
    const auto& tg = targets[b];
    if (static_cast<std::size_t>(lg.rows()) != tg.size())
      throw ValidationError("cross_entropy: sequence length mismatch between logits and targets");
    for (std::size_t i = 0; i < tg.size(); ++i) {
      if (tg[i] == TokenBatch::kIgnoreTarget) continue;
      if (tg[i] < 0 || tg[i] >= lg.cols())
        throw ValidationError("cross_entropy: target id out of range");
      const auto row = lg.row(static_cast<Eigen::Index>(i));
      const double m = static_cast<double>(row.maxCoeff());
      double z = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j)
        z += std::exp(static_cast<double>(row(j)) - m);
      total += m + std::log(z) - static_cast<double>(row(static_cast<Eigen::Index>(tg[i])));
      ++count;
    }
  }
  if (count == 0) throw ValidationError("cross_entropy: no scored positions in batch");
  return total / static_cast<double>(count);
}

/// Exact analytic gradients of the batch mean cross-entropy with
/// respect to every parameter tensor. Returns the forward loss.
/// Gradients are accumulated into `grads`, which is zeroed first.
template <class Scalar>
double batch_loss_and_gradients(const ModelConfig& cfg, const Parameters<Scalar>& params,
                                const TokenBatch& batch, Parameters<Scalar>& grads) {
  using namespace model_detail;
  if (batch.inputs.empty()) throw ValidationError("backward: empty batch");
  if (batch.inputs.size() != batch.targets.size())
    throw ValidationError("backward: inputs/targets batch size mismatch");

  std::size_t total_scored = 0;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    if (batch.inputs[b].size() != batch.targets[b].size())
      throw ValidationError("backward: inputs/targets length mismatch in batch item " +
                            std::to_string(b));
    for (std::int64_t t : batch.targets[b])
      if (t != TokenBatch::kIgnoreTarget) ++total_scored;
  }
  if (total_scored == 0) throw ValidationError("backward: no scored positions in batch");
  const double inv_n = 1.0 / static_cast<double>(total_scored);

  set_zero(grads);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  double total_nll = 0.0;

  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    const auto& ids = batch.inputs[b];
    const auto& tgt = batch.targets[b];
    const auto T = static_cast<Eigen::Index>(ids.size());

    std::vector<BlockCache<Scalar>> caches;
    FinalCache<Scalar> fin;
    Mat<Scalar> logits = forward_sequence<Scalar>(cfg, params, ids, &caches, &fin);

    // d(loss)/d(logits), scaled by 1/total_scored; softmax in double.
    Mat<Scalar> dlogits = Mat<Scalar>::Zero(T, logits.cols());
    for (Eigen::Index i = 0; i < T; ++i) {
      const std::int64_t t = tgt[static_cast<std::size_t>(i)];
      if (t == TokenBatch::kIgnoreTarget) continue;
      if (t < 0 || t >= logits.cols())
        throw ValidationError("backward: target id out of range");
      const auto row = logits.row(i);
      const double m = static_cast<double>(row.maxCoeff());
      double z = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j)
        z += std::exp(static_cast<double>(row(j)) - m);
      total_nll += m + std::log(z) - static_cast<double>(row(static_cast<Eigen::Index>(t)));
      for (Eigen::Index j = 0; j < row.cols(); ++j) {
        double p = std::exp(static_cast<double>(row(j)) - m) / z;
        if (j == static_cast<Eigen::Index>(t)) p -= 1.0;
        dlogits(i, j) = static_cast<Scalar>(p * inv_n);
      }
    }

    // Tied output projection: logits = h * tok_embed^T.
    grads.tok_embed.noalias() += dlogits.transpose() * fin.h;
    Mat<Scalar> dx(T, d);
    dx.noalias() = dlogits * params.tok_embed;

    dx = layer_norm_backward(dx, fin.ln, params.final_ln_gain, grads.final_ln_gain,
                             grads.final_ln_bias);

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
      const auto& lp = params.layers[l];
      auto& gp = grads.layers[l];
      const auto& bc = caches[l];

      // Feed-forward branch: x = m_in + ff_down(gelu(ff_up(ln2(m_in)))).
      Mat<Scalar> d_ff_out = dx;  // gradient into the ff output
      gp.ff_down_bias.row(0) += d_ff_out.colwise().sum();
      Mat<Scalar> ff_act = bc.ff_pre.unaryExpr([](Scalar v) { return gelu(v); });
      gp.ff_down_weight.noalias() += ff_act.transpose() * d_ff_out;
      Mat<Scalar> d_act(T, ff_act.cols());
      d_act.noalias() = d_ff_out * lp.ff_down_weight.transpose();
      Mat<Scalar> d_pre =
          d_act.cwiseProduct(bc.ff_pre.unaryExpr([](Scalar v) { return gelu_grad(v); }));
      gp.ff_up_bias.row(0) += d_pre.colwise().sum();
      gp.ff_up_weight.noalias() += bc.m_ln.transpose() * d_pre;
      Mat<Scalar> d_m_ln(T, d);
      d_m_ln.noalias() = d_pre * lp.ff_up_weight.transpose();
      Mat<Scalar> d_m_in =
          layer_norm_backward(d_m_ln, bc.ln2, lp.ln2_gain, gp.ln2_gain, gp.ln2_bias);
      dx += d_m_in;  // residual join

      // Attention branch: x = a_in + attn_out(ctx(ln1(a_in))).
      Mat<Scalar> d_attn_out = dx;
      gp.attn_out_bias.row(0) += d_attn_out.colwise().sum();
      gp.attn_out_weight.noalias() += bc.ctx.transpose() * d_attn_out;
      Mat<Scalar> d_ctx(T, d);
      d_ctx.noalias() = d_attn_out * lp.attn_out_weight.transpose();

      const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
      const auto scale =
          static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
      Mat<Scalar> d_qkv = Mat<Scalar>::Zero(T, 3 * d);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const Mat<Scalar>& A = bc.attn_probs[h];
        auto vh = bc.qkv.middleCols(2 * d + off, hd);
        auto qh = bc.qkv.middleCols(off, hd);
        auto kh = bc.qkv.middleCols(d + off, hd);
        auto d_ctx_h = d_ctx.middleCols(off, hd);

        Mat<Scalar> dA(T, T);
        dA.noalias() = d_ctx_h * vh.transpose();
        d_qkv.middleCols(2 * d + off, hd).noalias() = A.transpose() * d_ctx_h;

        // Row-wise softmax backward; masked entries have A == 0.
        Mat<Scalar> dS(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
          const Scalar dot = A.row(i).cwiseProduct(dA.row(i)).sum();
          dS.row(i).array() = A.row(i).array() * (dA.row(i).array() - dot);
        }
        d_qkv.middleCols(off, hd).noalias() = dS * kh * scale;
        d_qkv.middleCols(d + off, hd).noalias() = dS.transpose() * qh * scale;
      }

      gp.qkv_bias.row(0) += d_qkv.colwise().sum();
      gp.qkv_weight.noalias() += bc.a_ln.transpose() * d_qkv;
      Mat<Scalar> d_a_ln(T, d);
      d_a_ln.noalias() = d_qkv * lp.qkv_weight.transpose();
      Mat<Scalar> d_a_in =
          layer_norm_backward(d_a_ln, bc.ln1, lp.ln1_gain, gp.ln1_gain, gp.ln1_bias);
      dx += d_a_in;  // residual join
    }

    // Embedding rows.
    for (Eigen::Index i = 0; i < T; ++i) {
      grads.tok_embed.row(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(i)])) +=
          dx.row(i);
      grads.pos_embed.row(i) += dx.row(i);
    }
  }

  return total_nll * inv_n;
}

}  // namespace revlm
