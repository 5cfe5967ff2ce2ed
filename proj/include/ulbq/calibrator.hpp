#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ulbq/model.hpp"
#include "ulbq/optim.hpp"
#include "ulbq/qlinear.hpp"
#include "ulbq/saliency.hpp"

namespace ulbq {

enum class RegVariant { none, naive, saliency };

inline const char* to_string(RegVariant v) {
  switch (v) {
    case RegVariant::none: return "none";
    case RegVariant::naive: return "naive";
    case RegVariant::saliency: return "saliency";
  }
  return "?";
}

inline RegVariant parse_reg_variant(const std::string& s) {
  if (s == "none") return RegVariant::none;
  if (s == "naive") return RegVariant::naive;
  if (s == "saliency") return RegVariant::saliency;
  throw std::invalid_argument("unknown variant '" + s + "' (expected none, naive, saliency)");
}

inline const char* to_string(LoraPosition p) { return p == LoraPosition::before ? "before" : "after"; }

inline LoraPosition parse_lora_position(const std::string& s) {
  if (s == "before") return LoraPosition::before;
  if (s == "after") return LoraPosition::after;
  throw std::invalid_argument("unknown lora position '" + s + "' (expected before, after)");
}

struct CalibrationConfig {
  RegVariant variant = RegVariant::none;
  LoraPosition position = LoraPosition::after;
  double coef = 1.0;       // lambda_0
  double coef_mult = 1.0;  // per-block multiplier
  std::size_t epochs = 20;
  std::size_t batch_size = 1;
  double lr_quant = 0.005;
  double lr_lora = 0.0005;
  double weight_decay = 0.1;
  std::size_t lora_rank = 8;
  QuantSpec quant{2, 0, QuantizerKind::learnable_clip};
  bool quant_enabled = true;
  double divergence_threshold = 1e6;

  void validate() const {
    if (coef < 0) throw std::invalid_argument("calibration.coef must be >= 0");
    if (!(coef_mult > 0)) throw std::invalid_argument("calibration.coef_mult must be > 0");
    if (batch_size == 0) throw std::invalid_argument("calibration.batch_size must be positive");
    quant.validate();
  }
};

/// lambda_k = lambda_0 * m^k.
inline double coefficient_schedule(double lambda0, double multiplier, std::size_t block) {
  return lambda0 * std::pow(multiplier, static_cast<double>(block));
}

class MissingSaliencyError : public std::invalid_argument {
 public:
  MissingSaliencyError()
      : std::invalid_argument(
            "variant 'saliency' needs a saliency map; run the `saliency` command first "
            "(or pass --variant none|naive)") {}
};

template <typename T>
struct BlockLoss {
  Tensor<T> total;
  Tensor<T> output;  // mean squared output error
  Tensor<T> reg;     // unscaled penalty (zero tensor when variant none)
};

/// Output-matching loss of a block plus lambda times the weight-preservation
/// penalty summed over the block's linears.
template <typename T>
BlockLoss<T> block_loss(const ModelConfig& cfg, const BlockParams<T>& blk,
                        const std::array<QuantizedLinear<T>, kLinearsPerBlock>& layers,
                        const Tensor<T>& target, const Tensor<T>& x_q, std::size_t batch,
                        std::size_t seq, T lambda, RegVariant variant, LoraPosition position,
                        const std::array<Tensor<T>, kLinearsPerBlock>* alpha = nullptr) {
  const Tensor<T> y = block_forward(cfg, blk, x_q, batch, seq,
                                    [&layers](std::size_t l, const Tensor<T>& h) { return layers[l].forward(h); });
  BlockLoss<T> out;
  out.output = mean(square(sub(y, target)));
  if (variant == RegVariant::none) {
    out.reg = Tensor<T>::scalar(T(0));
    out.total = out.output;
    return out;
  }
  if (variant == RegVariant::saliency && alpha == nullptr) throw MissingSaliencyError();
  Tensor<T> reg;
  for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
    const auto& ql = layers[l];
    const Tensor<T> a = variant == RegVariant::saliency
                            ? (*alpha)[l]
                            : Tensor<T>::full(ql.weight().shape(), T(1));
    const Tensor<T> term = saliency_regularizer(ql.weight(), ql.penalty_target(position), a);
    reg = reg.defined() ? add(reg, term) : term;
  }
  out.reg = reg;
  out.total = add(out.output, scale(reg, lambda));
  return out;
}

struct EpochRecord {
  std::size_t block = 0;
  std::size_t epoch = 0;
  double output_loss = 0;  // mean over steps
  double reg_loss = 0;     // mean over steps (unscaled)
  double lambda = 0;
  double median_total = 0;
};

struct BlockReport {
  std::size_t block = 0;
  double lambda = 0;
  bool rolled_back = false;
  std::string rollback_reason;
  std::size_t skipped_steps = 0;
  std::size_t degenerate_groups = 0;
  double initial_output_loss = 0;  // before any step, over the cached batch
  double final_output_loss = 0;    // after training, over the cached batch
  std::vector<EpochRecord> epochs;
};

struct CalibrationReport {
  std::vector<BlockReport> blocks;
  std::size_t rollbacks() const {
    return static_cast<std::size_t>(std::count_if(blocks.begin(), blocks.end(),
                                                  [](const BlockReport& b) { return b.rolled_back; }));
  }
};

template <typename T>
struct CalibrationResult {
  QuantizedTransformer<T> model;
  CalibrationReport report;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Stacks cached per-sample activations [seq, d] into a constant [k*seq, d].
template <typename T>
Tensor<T> stack_rows(const std::vector<Array<T>>& cache, std::size_t begin, std::size_t count,
                     std::size_t seq, std::size_t d) {
  Array<T> v(static_cast<Eigen::Index>(count * seq * d));
  for (std::size_t i = 0; i < count; ++i)
    v.segment(static_cast<Eigen::Index>(i * seq * d), static_cast<Eigen::Index>(seq * d)) = cache[begin + i];
  return Tensor<T>(Shape{count * seq, d}, std::move(v));
}

}  // namespace detail

/// Block-by-block calibration. Block k trains its clipping (or other
/// quantizer) parameters and LoRA pairs against the full-precision block
/// output, reading inputs produced by the already-calibrated blocks 0..k-1.
template <typename T>
CalibrationResult<T> calibrate_model(const ToyTransformer<T>& model, const TokenBatch& batch,
                                     const CalibrationConfig& cfg,
                                     const SaliencyMap<T>* saliency = nullptr) {
  cfg.validate();
  if (cfg.variant == RegVariant::saliency && saliency == nullptr) throw MissingSaliencyError();
  if (batch.n == 0) throw std::invalid_argument("calibrate_model: empty calibration batch");

  const ModelConfig& mc = model.config;
  const std::size_t n = batch.n, seq = batch.seq_len, d = mc.d_model;
  ToyTransformer<T> frozen = model.template cast<T>();
  frozen.set_requires_grad(false);

  std::vector<Array<T>> x_fp(n), x_q(n);
  for (std::size_t i = 0; i < n; ++i) {
    x_fp[i] = embed(frozen, batch.row_inputs(i), 1, seq).value();
    x_q[i] = x_fp[i];
  }

  CalibrationResult<T> result;
  result.model.base = frozen;

  for (std::size_t k = 0; k < frozen.blocks.size(); ++k) {
    const auto& blk = frozen.blocks[k];
    BlockReport rep;
    rep.block = k;
    rep.lambda = coefficient_schedule(cfg.coef, cfg.coef_mult, k);
    const T lambda = static_cast<T>(rep.lambda);

    std::vector<Array<T>> y_fp(n);
    for (std::size_t i = 0; i < n; ++i)
      y_fp[i] = block_forward(mc, blk, detail::stack_rows(x_fp, i, 1, seq, d), 1, seq, dense_linear(blk)).value();

    std::array<QuantizedLinear<T>, kLinearsPerBlock> layers;
    std::array<Tensor<T>, kLinearsPerBlock> alpha;
    ParamGroup<T> quant_group{{}, cfg.lr_quant, cfg.weight_decay};
    ParamGroup<T> lora_group{{}, cfg.lr_lora, cfg.weight_decay};
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      layers[l] = QuantizedLinear<T>(blk.linear[l], cfg.quant, cfg.lora_rank, cfg.quant_enabled);
      for (auto& p : layers[l].quant_parameters()) quant_group.params.push_back(p);
      for (auto& p : layers[l].lora_parameters()) lora_group.params.push_back(p);
      if (saliency) alpha[l] = saliency->at(linear_name(k, l));
    }
    AdamW<T> opt({quant_group, lora_group});

    std::array<std::vector<Array<T>>, kLinearsPerBlock> init_state;
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) init_state[l] = layers[l].save_state();

    auto cached_output_loss = [&]() {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto bl = block_loss<T>(mc, blk, layers, detail::stack_rows(y_fp, i, 1, seq, d),
                                      detail::stack_rows(x_q, i, 1, seq, d), 1, seq, T(0),
                                      RegVariant::none, cfg.position);
        acc += static_cast<double>(bl.output.item());
      }
      return acc / static_cast<double>(n);
    };
    rep.initial_output_loss = cached_output_loss();

    const auto* alpha_ptr = cfg.variant == RegVariant::saliency ? &alpha : nullptr;
    bool diverged = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !diverged; ++epoch) {
      EpochRecord er;
      er.block = k;
      er.epoch = epoch;
      er.lambda = rep.lambda;
      std::vector<double> totals;
      std::size_t steps = 0;
      for (std::size_t i = 0; i < n; i += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, n - i);
        opt.zero_grad();
        const auto bl = block_loss<T>(mc, blk, layers, detail::stack_rows(y_fp, i, count, seq, d),
                                      detail::stack_rows(x_q, i, count, seq, d), count, seq, lambda,
                                      cfg.variant, cfg.position, alpha_ptr);
        const double total = static_cast<double>(bl.total.item());
        if (!std::isfinite(total) || total > cfg.divergence_threshold) {
          diverged = true;
          rep.rolled_back = true;
          rep.rollback_reason = "loss " + std::to_string(total) + " at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(steps);
          break;
        }
        backward(bl.total);
        opt.step();
        er.output_loss += static_cast<double>(bl.output.item());
        er.reg_loss += static_cast<double>(bl.reg.item());
        totals.push_back(total);
        ++steps;
      }
      if (steps > 0) {
        er.output_loss /= static_cast<double>(steps);
        er.reg_loss /= static_cast<double>(steps);
        er.median_total = detail::median(totals);
        rep.epochs.push_back(er);
      }
    }
    opt.zero_grad();
    if (diverged) {
      for (std::size_t l = 0; l < kLinearsPerBlock; ++l) layers[l].restore_state(init_state[l]);
    }
    rep.skipped_steps = opt.skipped_steps();
    for (const auto& ql : layers) {
      FakeQuantStats stats;
      (void)ql.quantized_weight(&stats);
      rep.degenerate_groups += stats.degenerate_groups;
    }
    rep.final_output_loss = cached_output_loss();

    std::array<DeployedLinear<T>, kLinearsPerBlock> deployed;
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) deployed[l] = layers[l].deploy();
    result.model.layers.push_back(deployed);
    for (std::size_t i = 0; i < n; ++i) {
      x_q[i] = result.model.block(k, detail::stack_rows(x_q, i, 1, seq, d), 1, seq).value();
      x_fp[i] = y_fp[i];
    }
    result.report.blocks.push_back(std::move(rep));
  }
  return result;
}

}  // namespace ulbq
