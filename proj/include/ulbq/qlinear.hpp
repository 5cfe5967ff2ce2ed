#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ulbq/lora.hpp"
#include "ulbq/quant.hpp"

namespace ulbq {

/// 1-bit mixture-of-scales path: y = (x sign(W)^T) * mos_scale(x).
template <typename T>
struct MosState {
  Tensor<T> sign;     // [out, in], entries +-1, frozen
  Tensor<T> experts;  // [K, out]
  Tensor<T> router;   // [K, in]

  Tensor<T> forward(const Tensor<T>& x) const {
    return mul(matmul(x, transpose(sign)), mos_scale(x, experts, router));
  }

  /// Router-independent weight estimate: sign(W) scaled by the mean expert.
  Tensor<T> mean_weight() const {
    const std::size_t k = experts.dim(0), out = experts.dim(1), in = sign.dim(1);
    const Tensor<T> avg =
        reshape(matmul(Tensor<T>::full(Shape{1, k}, T(1) / T(k)), experts), Shape{out, 1});
    std::vector<Eigen::Index> rows(out * in);
    for (std::size_t r = 0; r < out; ++r)
      for (std::size_t c = 0; c < in; ++c) rows[r * in + c] = static_cast<Eigen::Index>(r);
    return mul(sign, take(avg, rows, Shape{out, in}));
  }
};

/// Two sign planes and their per-group scales.
template <typename T>
struct DualBinaryState {
  Tensor<T> b1, b2;          // [out, in], entries +-1
  Tensor<T> alpha1, alpha2;  // [groups]

  Tensor<T> weight(const GroupLayout& layout) const {
    const auto idx = layout.element_groups();
    return add(mul(take(alpha1, idx, b1.shape()), b1), mul(take(alpha2, idx, b2.shape()), b2));
  }
};

/// Inference form of a quantized layer: materialized Q_hat plus adapter.
template <typename T>
struct DeployedLinear {
  Tensor<T> qweight;              // [out, in]
  LoraPair<T> lora;
  std::optional<MosState<T>> mos;
  std::optional<DualBinaryState<T>> dual;
  std::optional<GroupParams<T>> group_params;  // set for rtn / learnable_clip
  std::optional<CodeMatrix> codes;             // set for rtn / learnable_clip
  QuantizerKind kind = QuantizerKind::rtn;
  int bits = 0;  // 0 when quantization is disabled
  std::size_t group_size = 0;

  Tensor<T> forward(const Tensor<T>& x) const {
    if (mos) {
      Tensor<T> y = mos->forward(x);
      if (lora.enabled()) y = add(y, matmul(matmul(x, transpose(lora.a)), transpose(lora.b)));
      return y;
    }
    return matmul(x, transpose(effective_weight(qweight, lora)));
  }
};

enum class LoraPosition { before, after };

/// Trainable quantized layer: frozen W, quantizer state, LoRA pair.
template <typename T>
class QuantizedLinear {
 public:
  QuantizedLinear() = default;

  /// Builds the quantizer from W and initializes LoRA (rank 0 disables it)
  /// from the SVD of the initial quantization residual.
  QuantizedLinear(const Tensor<T>& weight, const QuantSpec& spec, std::size_t lora_rank,
                  bool quant_enabled = true)
      : weight_(weight.detach()), spec_(spec), quant_enabled_(quant_enabled) {
    spec_.validate();
    if (weight_.rank() != 2) throw ShapeError("QuantizedLinear: weight must be rank 2, got " + shape_str(weight_.shape()));
    layout_ = GroupLayout(weight_.dim(0), weight_.dim(1), spec_.group_size);
    if (quant_enabled_) init_quantizer();
    if (lora_rank > 0) {
      const Matrix<T> q0 = initial_qhat_matrix();
      lora_ = init_lora_from_residual<T>(weight_.to_matrix(), q0, lora_rank);
    }
  }

  const Tensor<T>& weight() const { return weight_; }
  const QuantSpec& spec() const { return spec_; }
  const GroupLayout& layout() const { return layout_; }
  const LoraPair<T>& lora() const { return lora_; }
  LoraPair<T>& lora() { return lora_; }
  bool quant_enabled() const { return quant_enabled_; }
  const std::optional<MosState<T>>& mos() const { return mos_; }

  Tensor<T> gamma_lo() const { return gamma_lo_; }
  Tensor<T> gamma_hi() const { return gamma_hi_; }

  /// Differentiable Q_hat. For the mixture-of-scales quantizer this is the
  /// router-independent estimate used by the weight-preservation penalty.
  Tensor<T> quantized_weight(FakeQuantStats* stats = nullptr) const {
    if (!quant_enabled_) return weight_;
    switch (spec_.kind) {
      case QuantizerKind::rtn:
        return rtn_weight_;
      case QuantizerKind::learnable_clip:
        return fake_quant_learnable(weight_, gamma_lo_, gamma_hi_, layout_, spec_.bits, stats);
      case QuantizerKind::dual_binary:
        return DualBinaryState<T>{b1_, b2_, alpha1_, alpha2_}.weight(layout_);
      case QuantizerKind::mos:
        return mos_->mean_weight();
    }
    return weight_;
  }

  /// Weight the preservation penalty compares against W.
  Tensor<T> penalty_target(LoraPosition pos) const {
    const Tensor<T> q = quantized_weight();
    return pos == LoraPosition::after ? effective_weight(q, lora_) : q;
  }

  Tensor<T> forward(const Tensor<T>& x, FakeQuantStats* stats = nullptr) const {
    if (quant_enabled_ && spec_.kind == QuantizerKind::mos) {
      Tensor<T> y = mos_->forward(x);
      if (lora_.enabled()) y = add(y, matmul(matmul(x, transpose(lora_.a)), transpose(lora_.b)));
      return y;
    }
    return matmul(x, transpose(effective_weight(quantized_weight(stats), lora_)));
  }

  std::vector<Tensor<T>> quant_parameters() const {
    if (!quant_enabled_) return {};
    switch (spec_.kind) {
      case QuantizerKind::rtn: return {};
      case QuantizerKind::learnable_clip: return {gamma_lo_, gamma_hi_};
      case QuantizerKind::dual_binary: return {alpha1_, alpha2_};
      case QuantizerKind::mos: return {mos_->experts, mos_->router};
    }
    return {};
  }

  std::vector<Tensor<T>> lora_parameters() const {
    if (!lora_.enabled()) return {};
    return {lora_.a, lora_.b};
  }

  /// Snapshot of every trainable value, for rollback.
  std::vector<Array<T>> save_state() const {
    std::vector<Array<T>> s;
    for (const auto& p : quant_parameters()) s.push_back(p.value());
    for (const auto& p : lora_parameters()) s.push_back(p.value());
    return s;
  }

  void restore_state(const std::vector<Array<T>>& s) {
    std::size_t i = 0;
    for (auto p : quant_parameters()) p.mutable_value() = s.at(i++);
    for (auto p : lora_parameters()) p.mutable_value() = s.at(i++);
  }

  /// Current per-group (scale, zero) for the uniform quantizers.
  std::optional<GroupParams<T>> group_params() const {
    if (!quant_enabled_) return std::nullopt;
    if (spec_.kind == QuantizerKind::rtn) return rtn_params_;
    if (spec_.kind != QuantizerKind::learnable_clip) return std::nullopt;
    const auto p = learnable_clip_params(weight_.detach(), gamma_lo_.detach(), gamma_hi_.detach(),
                                         layout_, spec_.bits);
    return GroupParams<T>{p.scale.value(), p.zero.value()};
  }

  /// Integer codes for the uniform quantizers.
  std::optional<CodeMatrix> codes() const {
    if (!quant_enabled_) return std::nullopt;
    const Matrix<T> w = weight_.to_matrix();
    if (spec_.kind == QuantizerKind::rtn) return quantize_rtn(w, layout_, rtn_params_, spec_.bits);
    if (spec_.kind != QuantizerKind::learnable_clip) return std::nullopt;
    const auto p = learnable_clip_params(weight_.detach(), gamma_lo_.detach(), gamma_hi_.detach(),
                                         layout_, spec_.bits);
    return learnable_clip_codes(w, p, layout_, spec_.bits);
  }

  DeployedLinear<T> deploy() const {
    DeployedLinear<T> d;
    d.qweight = quantized_weight().detach();
    if (lora_.enabled()) d.lora = {lora_.a.detach(), lora_.b.detach()};
    if (quant_enabled_ && mos_) {
      d.mos = MosState<T>{mos_->sign.detach(), mos_->experts.detach(), mos_->router.detach()};
    }
    if (quant_enabled_ && spec_.kind == QuantizerKind::dual_binary)
      d.dual = DualBinaryState<T>{b1_, b2_, alpha1_.detach(), alpha2_.detach()};
    d.group_params = group_params();
    d.codes = codes();
    d.kind = spec_.kind;
    d.bits = quant_enabled_ ? spec_.bits : 0;
    d.group_size = spec_.group_size;
    return d;
  }

 private:
  void init_quantizer() {
    const Matrix<T> w = weight_.to_matrix();
    const Shape gshape{layout_.num_groups()};
    switch (spec_.kind) {
      case QuantizerKind::rtn: {
        rtn_params_ = rtn_params(w, layout_, spec_.bits);
        rtn_weight_ = Tensor<T>::from_matrix(
            dequantize(quantize_rtn(w, layout_, rtn_params_, spec_.bits), layout_, rtn_params_));
        break;
      }
      case QuantizerKind::learnable_clip:
        gamma_lo_ = Tensor<T>::full(gshape, T(spec_.clip_init), true);
        gamma_hi_ = Tensor<T>::full(gshape, T(spec_.clip_init), true);
        break;
      case QuantizerKind::dual_binary: {
        Array<T> a1(static_cast<Eigen::Index>(layout_.num_groups()));
        Array<T> a2(a1.size());
        Array<T> s1(static_cast<Eigen::Index>(layout_.numel()));
        Array<T> s2(s1.size());
        const auto idx = layout_.element_groups();
        std::vector<std::vector<std::size_t>> members(layout_.num_groups());
        for (std::size_t i = 0; i < idx.size(); ++i) members[static_cast<std::size_t>(idx[i])].push_back(i);
        for (std::size_t g = 0; g < members.size(); ++g) {
          std::vector<T> vals;
          vals.reserve(members[g].size());
          for (auto i : members[g]) vals.push_back(weight_.value()[static_cast<Eigen::Index>(i)]);
          const auto db = dual_binarize<T>(vals);
          a1[static_cast<Eigen::Index>(g)] = db.alpha1;
          a2[static_cast<Eigen::Index>(g)] = db.alpha2;
          for (std::size_t j = 0; j < members[g].size(); ++j) {
            s1[static_cast<Eigen::Index>(members[g][j])] = T(db.b1[j]);
            s2[static_cast<Eigen::Index>(members[g][j])] = T(db.b2[j]);
          }
        }
        alpha1_ = Tensor<T>(gshape, a1, true);
        alpha2_ = Tensor<T>(gshape, a2, true);
        b1_ = Tensor<T>(weight_.shape(), s1);
        b2_ = Tensor<T>(weight_.shape(), s2);
        break;
      }
      case QuantizerKind::mos: {
        const std::size_t out = layout_.rows, in = layout_.cols, k = spec_.mos_experts;
        Array<T> sgn = weight_.value().unaryExpr([](T v) { return v >= T(0) ? T(1) : T(-1); });
        const Array<T> row_scale = w.cwiseAbs().rowwise().mean().array();
        Array<T> ex(static_cast<Eigen::Index>(k * out));
        for (std::size_t e = 0; e < k; ++e) {
          // Spread the experts slightly so the router receives a gradient.
          const T f = T(1) + T(0.1) * (T(e) - T(k - 1) / T(2)) / T(k);
          ex.segment(static_cast<Eigen::Index>(e * out), static_cast<Eigen::Index>(out)) = row_scale * f;
        }
        mos_ = MosState<T>{Tensor<T>(weight_.shape(), sgn),
                           Tensor<T>(Shape{k, out}, ex, true),
                           Tensor<T>::zeros(Shape{k, in}, true)};
        break;
      }
    }
  }

  Matrix<T> initial_qhat_matrix() const { return quantized_weight().to_matrix(); }

  Tensor<T> weight_;
  QuantSpec spec_;
  GroupLayout layout_;
  bool quant_enabled_ = true;
  LoraPair<T> lora_;

  GroupParams<T> rtn_params_;
  Tensor<T> rtn_weight_;
  Tensor<T> gamma_lo_, gamma_hi_;
  Tensor<T> alpha1_, alpha2_, b1_, b2_;
  std::optional<MosState<T>> mos_;
};

}  // namespace ulbq
