#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulbq/data.hpp"
#include "ulbq/ops.hpp"
#include "ulbq/optim.hpp"
#include "ulbq/qlinear.hpp"
#include "ulbq/rng.hpp"

namespace ulbq {

struct ModelConfig {
  std::size_t vocab = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t d_ff = 256;
  std::size_t context = 128;
  double norm_eps = 1e-5;

  void validate() const {
    if (vocab == 0) throw std::invalid_argument("model.vocab must be positive");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw std::invalid_argument("model.d_model (" + std::to_string(d_model) +
                                  ") must be a positive multiple of model.n_heads (" +
                                  std::to_string(n_heads) + ")");
    if (n_blocks == 0 || d_ff == 0 || context == 0)
      throw std::invalid_argument("model.n_blocks, model.d_ff and model.context must be positive");
  }
};

inline constexpr std::size_t kLinearsPerBlock = 6;
enum LinearIndex : std::size_t { kQ = 0, kK, kV, kO, kUp, kDown };
inline constexpr std::array<const char*, kLinearsPerBlock> kLinearNames{
    "q", "k", "v", "o", "mlp_up", "mlp_down"};

inline std::string linear_name(std::size_t block, std::size_t layer) {
  return "blocks." + std::to_string(block) + "." + kLinearNames.at(layer);
}

template <typename T>
struct BlockParams {
  Tensor<T> attn_norm;
  Tensor<T> mlp_norm;
  std::array<Tensor<T>, kLinearsPerBlock> linear;  // each [out, in]
};

/// Decoder-only transformer: learned token + position embeddings, pre-norm
/// blocks (RMSNorm, causal multi-head attention, SiLU MLP), no biases.
template <typename T>
struct ToyTransformer {
  ModelConfig config;
  Tensor<T> tok_emb;     // [V, d]
  Tensor<T> pos_emb;     // [context, d]
  Tensor<T> final_norm;  // [d]
  Tensor<T> lm_head;     // [V, d]
  std::vector<BlockParams<T>> blocks;

  static ToyTransformer init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_stream(seed, "init");
    std::normal_distribution<double> normal(0.0, 1.0);
    auto randn = [&](Shape shape, double stddev) {
      Array<T> v(static_cast<Eigen::Index>(shape_numel(shape)));
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(normal(rng) * stddev);
      return Tensor<T>(std::move(shape), std::move(v), true);
    };
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    const double std_in = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_blocks));
    ToyTransformer m;
    m.config = cfg;
    m.tok_emb = randn({cfg.vocab, d}, std_in);
    m.pos_emb = randn({cfg.context, d}, std_in);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      BlockParams<T> blk;
      blk.attn_norm = Tensor<T>::full({d}, T(1), true);
      blk.mlp_norm = Tensor<T>::full({d}, T(1), true);
      blk.linear[kQ] = randn({d, d}, std_in);
      blk.linear[kK] = randn({d, d}, std_in);
      blk.linear[kV] = randn({d, d}, std_in);
      blk.linear[kO] = randn({d, d}, std_out);
      blk.linear[kUp] = randn({f, d}, std_in);
      blk.linear[kDown] = randn({d, f}, std_out);
      m.blocks.push_back(std::move(blk));
    }
    m.final_norm = Tensor<T>::full({d}, T(1), true);
    m.lm_head = randn({cfg.vocab, d}, std_in);
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      out.emplace_back(p + "attn_norm", blocks[b].attn_norm);
      out.emplace_back(p + "mlp_norm", blocks[b].mlp_norm);
      for (std::size_t l = 0; l < kLinearsPerBlock; ++l)
        out.emplace_back(linear_name(b, l), blocks[b].linear[l]);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("lm_head", lm_head);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool r) const {
    for (auto t : parameters()) t.set_requires_grad(r);
  }

  /// Deep copy with a possibly different scalar type.
  template <typename U>
  ToyTransformer<U> cast() const {
    auto conv = [](const Tensor<T>& t) {
      return Tensor<U>(t.shape(), t.value().template cast<U>(), t.requires_grad());
    };
    ToyTransformer<U> m;
    m.config = config;
    m.tok_emb = conv(tok_emb);
    m.pos_emb = conv(pos_emb);
    m.final_norm = conv(final_norm);
    m.lm_head = conv(lm_head);
    for (const auto& b : blocks) {
      BlockParams<U> nb;
      nb.attn_norm = conv(b.attn_norm);
      nb.mlp_norm = conv(b.mlp_norm);
      for (std::size_t l = 0; l < kLinearsPerBlock; ++l) nb.linear[l] = conv(b.linear[l]);
      m.blocks.push_back(std::move(nb));
    }
    return m;
  }
};

/// Token + position embeddings for `batch` sequences of `seq` ids -> [batch*seq, d].
template <typename T>
Tensor<T> embed(const ToyTransformer<T>& m, std::span<const int> ids, std::size_t batch, std::size_t seq) {
  if (ids.size() != batch * seq) throw ShapeError("embed: " + std::to_string(ids.size()) + " ids for batch " +
                                                  std::to_string(batch) + " x seq " + std::to_string(seq));
  if (seq > m.config.context)
    throw ShapeError("embed: sequence length " + std::to_string(seq) + " exceeds context " +
                     std::to_string(m.config.context));
  const std::size_t d = m.config.d_model;
  std::vector<Eigen::Index> rows(seq * d);
  for (std::size_t i = 0; i < seq * d; ++i) rows[i] = static_cast<Eigen::Index>(i);
  const Tensor<T> pos = take(m.pos_emb, rows, Shape{seq, d});
  const Tensor<T> tok = reshape(embedding(m.tok_emb, ids), Shape{batch, seq, d});
  return reshape(add(tok, pos), Shape{batch * seq, d});
}

/// One transformer block on x [batch*seq, d]. `linear(layer, h)` applies the
/// block's layer-th projection, so the same code runs dense or quantized.
template <typename T, typename LinearFn>
Tensor<T> block_forward(const ModelConfig& cfg, const BlockParams<T>& blk, const Tensor<T>& x,
                        std::size_t batch, std::size_t seq, LinearFn&& linear) {
  const std::size_t d = cfg.d_model, h = cfg.n_heads, dh = d / h;
  const T eps = static_cast<T>(cfg.norm_eps);
  auto split = [&](const Tensor<T>& t) {
    return reshape(swap_axes_12(reshape(t, Shape{batch, seq, h, dh})), Shape{batch * h, seq, dh});
  };
  const Tensor<T> hn = rms_norm(x, blk.attn_norm, eps);
  const Tensor<T> q = split(linear(kQ, hn));
  const Tensor<T> k = split(linear(kK, hn));
  const Tensor<T> v = split(linear(kV, hn));
  const Tensor<T> scores = scale(matmul(q, transpose(k)), T(1) / std::sqrt(T(dh)));
  const Tensor<T> attn = matmul(softmax(causal_mask(scores)), v);
  const Tensor<T> merged =
      reshape(swap_axes_12(reshape(attn, Shape{batch, h, seq, dh})), Shape{batch * seq, d});
  const Tensor<T> x1 = add(x, linear(kO, merged));
  const Tensor<T> h2 = rms_norm(x1, blk.mlp_norm, eps);
  return add(x1, linear(kDown, silu(linear(kUp, h2))));
}

template <typename T>
auto dense_linear(const BlockParams<T>& blk) {
  return [&blk](std::size_t layer, const Tensor<T>& x) {
    return matmul(x, transpose(blk.linear[layer]));
  };
}

template <typename T>
Tensor<T> head(const ToyTransformer<T>& m, const Tensor<T>& x) {
  return matmul(rms_norm(x, m.final_norm, static_cast<T>(m.config.norm_eps)), transpose(m.lm_head));
}

/// Full-precision logits [batch*seq, V].
template <typename T>
Tensor<T> forward(const ToyTransformer<T>& m, std::span<const int> ids, std::size_t batch, std::size_t seq) {
  Tensor<T> x = embed(m, ids, batch, seq);
  for (const auto& blk : m.blocks) x = block_forward(m.config, blk, x, batch, seq, dense_linear(blk));
  return head(m, x);
}

/// Transformer whose block projections are replaced by deployed quantized
/// layers; embeddings, norms and head stay in full precision.
template <typename T>
struct QuantizedTransformer {
  ToyTransformer<T> base;
  std::vector<std::array<DeployedLinear<T>, kLinearsPerBlock>> layers;

  Tensor<T> block(std::size_t b, const Tensor<T>& x, std::size_t batch, std::size_t seq) const {
    const auto& lay = layers.at(b);
    return block_forward(base.config, base.blocks[b], x, batch, seq,
                         [&lay](std::size_t l, const Tensor<T>& h) { return lay[l].forward(h); });
  }
};

template <typename T>
Tensor<T> forward(const QuantizedTransformer<T>& m, std::span<const int> ids, std::size_t batch,
                  std::size_t seq) {
  Tensor<T> x = embed(m.base, ids, batch, seq);
  for (std::size_t b = 0; b < m.layers.size(); ++b) x = m.block(b, x, batch, seq);
  return head(m.base, x);
}

/// Wraps every block linear of `m` with an RTN (or identity) quantizer and no
/// adapter.
template <typename T>
QuantizedTransformer<T> quantize_model_rtn(const ToyTransformer<T>& m, const QuantSpec& spec,
                                           bool quant_enabled = true) {
  QuantSpec s = spec;
  s.kind = QuantizerKind::rtn;
  QuantizedTransformer<T> q;
  q.base = m;
  for (const auto& blk : m.blocks) {
    std::array<DeployedLinear<T>, kLinearsPerBlock> lay;
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l)
      lay[l] = QuantizedLinear<T>(blk.linear[l], s, 0, quant_enabled).deploy();
    q.layers.push_back(std::move(lay));
  }
  return q;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 16;
  std::size_t seq_len = 64;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::size_t warmup = 50;
  std::size_t eval_every = 250;
  std::size_t eval_batches = 8;
};

struct PretrainReport {
  std::vector<double> train_loss;                          // per step
  std::vector<std::pair<std::size_t, double>> valid_loss;  // (step, loss)
  double final_valid_loss = 0;
  std::size_t skipped_steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean cross-entropy over a fixed set of held-out batches.
template <typename T>
double heldout_loss(const ToyTransformer<T>& m, const std::vector<int>& tokens, std::size_t batches,
                    std::size_t batch, std::size_t seq_len, std::uint64_t seed) {
  Rng rng = make_stream(seed, "heldout");
  double acc = 0;
  for (std::size_t i = 0; i < batches; ++i) {
    const auto b = sample_batch(tokens, batch, seq_len, rng);
    acc += static_cast<double>(cross_entropy(forward(m, b.inputs, b.n, b.seq_len), b.targets).item());
  }
  return acc / static_cast<double>(batches);
}

template <typename T>
PretrainReport pretrain(ToyTransformer<T>& m, const TextDataset& data, const PretrainConfig& cfg,
                        std::uint64_t seed) {
  const auto train = data.split(Split::train);
  const auto valid = data.split(Split::valid);
  if (train.empty()) throw std::invalid_argument("pretrain: empty training split");
  m.set_requires_grad(true);

  // Norm gains are exempt from weight decay.
  ParamGroup<T> decay{{}, cfg.lr, cfg.weight_decay}, no_decay{{}, cfg.lr, 0.0};
  for (auto& [name, t] : m.named_parameters()) {
    if (name.find("norm") != std::string::npos) {
      no_decay.params.push_back(t);
    } else {
      decay.params.push_back(t);
    }
  }
  AdamW<T> opt({decay, no_decay});
  Rng rng = make_stream(seed, "pretrain");

  PretrainReport rep;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double lr = cfg.lr;
    if (step < cfg.warmup) {
      lr = cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    } else {
      const double progress = static_cast<double>(step - cfg.warmup) /
                              static_cast<double>(std::max<std::size_t>(1, cfg.steps - cfg.warmup));
      lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
    }
    for (auto& g : opt.groups()) g.lr = lr;

    const auto b = sample_batch(train, cfg.batch, cfg.seq_len, rng);
    opt.zero_grad();
    const Tensor<T> loss = cross_entropy(forward(m, b.inputs, b.n, b.seq_len), b.targets);
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv))
      throw DivergenceError("pretrain diverged at step " + std::to_string(step) + " (loss " +
                            std::to_string(lv) + ")");
    backward(loss);
    opt.step();
    rep.train_loss.push_back(lv);
    if (!valid.empty() && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      rep.valid_loss.emplace_back(
          step + 1, heldout_loss(m, valid, cfg.eval_batches, cfg.batch, std::min(cfg.seq_len, valid.size() - 1), seed));
    }
  }
  opt.zero_grad();
  rep.skipped_steps = opt.skipped_steps();
  if (!valid.empty())
    rep.final_valid_loss =
        heldout_loss(m, valid, cfg.eval_batches, cfg.batch, std::min(cfg.seq_len, valid.size() - 1), seed);
  return rep;
}

}  // namespace ulbq
