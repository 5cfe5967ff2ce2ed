#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ulbq/ops.hpp"

namespace ulbq {

enum class QuantizerKind { rtn, learnable_clip, dual_binary, mos };

inline const char* to_string(QuantizerKind k) {
  switch (k) {
    case QuantizerKind::rtn: return "rtn";
    case QuantizerKind::learnable_clip: return "learnable_clip";
    case QuantizerKind::dual_binary: return "dual_binary";
    case QuantizerKind::mos: return "mos";
  }
  return "?";
}

inline QuantizerKind parse_quantizer_kind(const std::string& s) {
  if (s == "rtn") return QuantizerKind::rtn;
  if (s == "learnable_clip") return QuantizerKind::learnable_clip;
  if (s == "dual_binary") return QuantizerKind::dual_binary;
  if (s == "mos") return QuantizerKind::mos;
  throw std::invalid_argument("unknown quantizer '" + s +
                              "' (expected rtn, learnable_clip, dual_binary, mos)");
}

/// Scale assigned to a group whose range collapses to a point.
inline constexpr double kDegenerateScale = 1e-8;

struct QuantSpec {
  int bits = 2;
  std::size_t group_size = 0;  // 0 = one group per matrix
  QuantizerKind kind = QuantizerKind::rtn;
  double clip_init = 4.0;      // initial gate logit for learnable clipping
  std::size_t mos_experts = 4;

  void validate() const {
    if (bits != 1 && bits != 2 && bits != 3 && bits != 4 && bits != 8)
      throw std::invalid_argument("bits must be one of 1,2,3,4,8; got " + std::to_string(bits));
    if (kind == QuantizerKind::dual_binary && bits != 2)
      throw std::invalid_argument("dual_binary quantizer is fixed to 2 bits");
    if (kind == QuantizerKind::mos && bits != 1)
      throw std::invalid_argument("mos quantizer is fixed to 1 bit");
    if (kind == QuantizerKind::mos && mos_experts == 0)
      throw std::invalid_argument("mos quantizer needs at least one expert");
  }

  int max_code() const { return (1 << bits) - 1; }
};

/// Groups are contiguous runs of `group_size` entries along each row (the
/// input dimension); group_size 0 means the whole matrix shares one group.
struct GroupLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 0;

  GroupLayout() = default;
  GroupLayout(std::size_t r, std::size_t c, std::size_t g) : rows(r), cols(c), group_size(g) {
    if (g != 0 && c % g != 0)
      throw std::invalid_argument("group size " + std::to_string(g) +
                                  " does not divide input dimension " + std::to_string(c));
  }

  std::size_t numel() const { return rows * cols; }
  std::size_t groups_per_row() const { return group_size == 0 ? 0 : cols / group_size; }
  std::size_t num_groups() const {
    if (numel() == 0) return 0;
    return group_size == 0 ? 1 : rows * groups_per_row();
  }
  std::size_t group_of(std::size_t r, std::size_t c) const {
    return group_size == 0 ? 0 : r * groups_per_row() + c / group_size;
  }
  std::vector<Eigen::Index> element_groups() const {
    std::vector<Eigen::Index> idx(numel());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        idx[r * cols + c] = static_cast<Eigen::Index>(group_of(r, c));
    return idx;
  }
};

// ---------------------------------------------------------------------------
// Round-to-nearest

template <typename T>
T compute_scale(T w_min, T w_max, int bits) {
  if (w_max == w_min) return T(kDegenerateScale);
  return (w_max - w_min) / T((1 << bits) - 1);
}

template <typename T>
T compute_scale(std::span<const T> group, int bits) {
  if (group.empty()) throw std::invalid_argument("compute_scale: empty group");
  const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
  return compute_scale(*lo, *hi, bits);
}

template <typename T>
T compute_zero_point(T w_min, T s) {
  return -round_half_away(w_min / s);
}

template <typename T>
struct GroupParams {
  Array<T> scale;
  Array<T> zero;
};

template <typename T>
std::pair<Array<T>, Array<T>> group_min_max(const Matrix<T>& w, const GroupLayout& layout) {
  const auto g = static_cast<Eigen::Index>(layout.num_groups());
  Array<T> lo = Array<T>::Constant(g, std::numeric_limits<T>::infinity());
  Array<T> hi = Array<T>::Constant(g, -std::numeric_limits<T>::infinity());
  for (std::size_t r = 0; r < layout.rows; ++r)
    for (std::size_t c = 0; c < layout.cols; ++c) {
      const auto k = static_cast<Eigen::Index>(layout.group_of(r, c));
      const T v = w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      lo[k] = std::min(lo[k], v);
      hi[k] = std::max(hi[k], v);
    }
  return {lo, hi};
}

template <typename T>
GroupParams<T> rtn_params(const Matrix<T>& w, const GroupLayout& layout, int bits) {
  auto [lo, hi] = group_min_max(w, layout);
  GroupParams<T> p{Array<T>(lo.size()), Array<T>(lo.size())};
  for (Eigen::Index k = 0; k < lo.size(); ++k) {
    p.scale[k] = compute_scale(lo[k], hi[k], bits);
    p.zero[k] = compute_zero_point(lo[k], p.scale[k]);
  }
  return p;
}

using CodeMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Integer code before clamping; useful for telling in-range entries apart.
template <typename T>
T unclamped_code(T w, T s, T z) {
  return round_half_away(w / s) + z;
}

template <typename T>
CodeMatrix quantize_rtn(const Matrix<T>& w, const GroupLayout& layout,
                        const GroupParams<T>& p, int bits) {
  const T qmax = T((1 << bits) - 1);
  CodeMatrix codes(w.rows(), w.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      const auto k = static_cast<Eigen::Index>(layout.group_of(r, c));
      const T q = std::clamp(unclamped_code(w(r, c), p.scale[k], p.zero[k]), T(0), qmax);
      codes(r, c) = static_cast<std::uint8_t>(q);
    }
  return codes;
}

template <typename T>
Matrix<T> dequantize(const CodeMatrix& codes, const GroupLayout& layout,
                     const GroupParams<T>& p) {
  Matrix<T> w(codes.rows(), codes.cols());
  for (Eigen::Index r = 0; r < codes.rows(); ++r)
    for (Eigen::Index c = 0; c < codes.cols(); ++c) {
      const auto k = static_cast<Eigen::Index>(layout.group_of(r, c));
      w(r, c) = (T(codes(r, c)) - p.zero[k]) * p.scale[k];
    }
  return w;
}

/// dequantize(quantize(w)) with min/max-derived group parameters.
template <typename T>
Matrix<T> fake_quant_rtn(const Matrix<T>& w, const GroupLayout& layout, int bits) {
  const auto p = rtn_params(w, layout, bits);
  return dequantize(quantize_rtn(w, layout, p, bits), layout, p);
}

// ---------------------------------------------------------------------------
// Learnable clipping

struct FakeQuantStats {
  std::size_t degenerate_groups = 0;
};

/// Per-group clipping range and affine parameters of the learnable quantizer,
/// all as graph tensors of shape [groups].
template <typename T>
struct ClipParams {
  Tensor<T> lo, hi, scale, zero;
};

/// lo = W_min * sigmoid(gamma_lo), hi = W_max * sigmoid(gamma_hi); scale and
/// zero point follow from (lo, hi) as in plain RTN.
template <typename T>
ClipParams<T> learnable_clip_params(const Tensor<T>& w, const Tensor<T>& gamma_lo,
                                    const Tensor<T>& gamma_hi, const GroupLayout& layout, int bits) {
  if (w.rank() != 2 || w.dim(0) != layout.rows || w.dim(1) != layout.cols)
    throw_shape_error("fake_quant_learnable", w.shape(), Shape{layout.rows, layout.cols});
  const Shape gshape{layout.num_groups()};
  if (gamma_lo.shape() != gshape) throw_shape_error("fake_quant_learnable", gamma_lo.shape(), gshape);
  if (gamma_hi.shape() != gshape) throw_shape_error("fake_quant_learnable", gamma_hi.shape(), gshape);
  const T qmax = T((1 << bits) - 1);
  auto [wmin, wmax] = group_min_max<T>(w.to_matrix(), layout);
  ClipParams<T> p;
  p.lo = mul(Tensor<T>(gshape, wmin), sigmoid(gamma_lo));
  p.hi = mul(Tensor<T>(gshape, wmax), sigmoid(gamma_hi));
  p.scale = clamp_min(scale(sub(p.hi, p.lo), T(1) / qmax), T(kDegenerateScale));
  p.zero = -ste_round(div(p.lo, p.scale));
  return p;
}

/// Integer codes the learnable quantizer assigns, computed with the same
/// floating-point steps as its forward pass.
template <typename T>
CodeMatrix learnable_clip_codes(const Matrix<T>& w, const ClipParams<T>& p, const GroupLayout& layout,
                                int bits) {
  const T qmax = T((1 << bits) - 1);
  CodeMatrix codes(w.rows(), w.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      const auto k = static_cast<Eigen::Index>(layout.group_of(r, c));
      const T lo = p.lo.value()[k], hi = p.hi.value()[k];
      const T x = w(r, c) < lo ? lo : (w(r, c) > hi ? hi : w(r, c));
      const T q = round_half_away(x / p.scale.value()[k]) + p.zero.value()[k];
      codes(r, c) = static_cast<std::uint8_t>(q < T(0) ? T(0) : (q > qmax ? qmax : q));
    }
  return codes;
}

/// Differentiable fake quantization with logistic-gated clipping: RTN on
/// clamp(W, lo, hi) with rounding through the straight-through estimator.
/// Gradients reach gamma through lo, hi, scale and zero point.
template <typename T>
Tensor<T> fake_quant_learnable(const Tensor<T>& w, const Tensor<T>& gamma_lo,
                               const Tensor<T>& gamma_hi, const GroupLayout& layout,
                               int bits, FakeQuantStats* stats = nullptr) {
  const T qmax = T((1 << bits) - 1);
  const ClipParams<T> p = learnable_clip_params(w, gamma_lo, gamma_hi, layout, bits);
  if (stats) {
    for (Eigen::Index k = 0; k < p.scale.value().size(); ++k)
      if (!(p.hi.value()[k] - p.lo.value()[k] > T(kDegenerateScale) * qmax)) ++stats->degenerate_groups;
  }
  const auto idx = layout.element_groups();
  const Shape ws = w.shape();
  const Tensor<T> s_e = take(p.scale, idx, ws);
  const Tensor<T> z_e = take(p.zero, idx, ws);
  const Tensor<T> clipped = clamp(w, take(p.lo, idx, ws), take(p.hi, idx, ws));
  const Tensor<T> q = clamp(add(ste_round(div(clipped, s_e)), z_e), T(0), qmax);
  return mul(sub(q, z_e), s_e);
}

// ---------------------------------------------------------------------------
// Dual binarization: w ~ alpha1 * b1 + alpha2 * b2, b in {-1, +1}

template <typename T>
struct DualBinary {
  std::vector<std::int8_t> b1, b2;
  T alpha1 = 0, alpha2 = 0;
  Array<T> reconstruction;
  T mse = 0;
  int iterations = 0;
};

namespace detail {

template <typename T>
void dual_assign(std::span<const T> w, T a1, T a2, std::vector<std::int8_t>& b1,
                 std::vector<std::int8_t>& b2) {
  static constexpr std::array<std::array<std::int8_t, 2>, 4> kSigns{
      {{{1, 1}}, {{1, -1}}, {{-1, 1}}, {{-1, -1}}}};
  for (std::size_t i = 0; i < w.size(); ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (const auto& sg : kSigns) {
      const T e = w[i] - a1 * sg[0] - a2 * sg[1];
      if (e * e < best) {
        best = e * e;
        b1[i] = sg[0];
        b2[i] = sg[1];
      }
    }
  }
}

/// Least-squares alphas for fixed sign patterns (2x2 normal equations).
template <typename T>
std::pair<T, T> dual_alphas(std::span<const T> w, const std::vector<std::int8_t>& b1,
                            const std::vector<std::int8_t>& b2) {
  const T n = T(w.size());
  T c = 0, r1 = 0, r2 = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    c += T(b1[i] * b2[i]);
    r1 += T(b1[i]) * w[i];
    r2 += T(b2[i]) * w[i];
  }
  const T det = n * n - c * c;
  if (std::abs(det) < T(0.5)) {
    // b2 = +-b1: only the combined coefficient is identifiable.
    return {r1 / n, T(0)};
  }
  return {(n * r1 - c * r2) / det, (n * r2 - c * r1) / det};
}

template <typename T>
T dual_mse(std::span<const T> w, T a1, T a2, const std::vector<std::int8_t>& b1,
           const std::vector<std::int8_t>& b2) {
  T acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const T e = w[i] - a1 * b1[i] - a2 * b2[i];
    acc += e * e;
  }
  return acc / T(w.size());
}

template <typename T>
DualBinary<T> dual_refine(std::span<const T> w, T a1, T a2, int max_iter) {
  DualBinary<T> r;
  r.b1.assign(w.size(), 1);
  r.b2.assign(w.size(), 1);
  dual_assign(w, a1, a2, r.b1, r.b2);
  for (int it = 0; it < max_iter; ++it) {
    r.iterations = it + 1;
    std::tie(a1, a2) = dual_alphas(w, r.b1, r.b2);
    auto nb1 = r.b1, nb2 = r.b2;
    dual_assign(w, a1, a2, nb1, nb2);
    const bool fixpoint = nb1 == r.b1 && nb2 == r.b2;
    r.b1 = std::move(nb1);
    r.b2 = std::move(nb2);
    if (fixpoint) break;
  }
  std::tie(r.alpha1, r.alpha2) = dual_alphas(w, r.b1, r.b2);
  r.mse = dual_mse(w, r.alpha1, r.alpha2, r.b1, r.b2);
  return r;
}

}  // namespace detail

/// Best scales over sign plans that split the sorted weights into four
/// contiguous runs mapped to the levels -a1-a2 <= -a1+a2 <= a1-a2 <= a1+a2.
/// Any nearest-level assignment has this form, so searching every split is
/// exact; groups longer than `max_cuts` search a quantile subset of splits.
template <typename T>
std::pair<T, T> dual_partition_start(std::span<const T> w, std::size_t max_cuts = 64) {
  const std::size_t n = w.size();
  std::vector<T> v(w.begin(), w.end());
  std::sort(v.begin(), v.end());
  std::vector<T> prefix(n + 1, T(0));
  T sumsq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    prefix[i + 1] = prefix[i] + v[i];
    sumsq += v[i] * v[i];
  }
  std::vector<std::size_t> cuts;
  if (n <= max_cuts) {
    for (std::size_t i = 0; i <= n; ++i) cuts.push_back(i);
  } else {
    for (std::size_t i = 0; i <= max_cuts; ++i) cuts.push_back(i * n / max_cuts);
  }
  const T nn = T(n);
  T best = std::numeric_limits<T>::infinity();
  std::pair<T, T> best_alpha{T(0), T(0)};
  for (std::size_t a = 0; a < cuts.size(); ++a)
    for (std::size_t b = a; b < cuts.size(); ++b)
      for (std::size_t c = b; c < cuts.size(); ++c) {
        const std::size_t i = cuts[a], j = cuts[b], k = cuts[c];
        const T s0 = prefix[i], s1 = prefix[j] - prefix[i], s2 = prefix[k] - prefix[j], s3 = prefix[n] - prefix[k];
        const T n03 = T(i + (n - k)), n12 = T(k - i);
        const T cross = n03 - n12;  // sum of b1 * b2
        const T r1 = -s0 - s1 + s2 + s3, r2 = -s0 + s1 - s2 + s3;
        const T det = nn * nn - cross * cross;
        T a1, a2;
        if (std::abs(det) < T(0.5)) {
          // b2 = +-b1: only a1 is identifiable.
          a1 = r1 / nn;
          a2 = T(0);
        } else {
          a1 = (nn * r1 - cross * r2) / det;
          a2 = (nn * r2 - cross * r1) / det;
        }
        const T sse = sumsq - a1 * r1 - a2 * r2;
        if (sse < best) {
          best = sse;
          best_alpha = {a1, a2};
        }
      }
  return best_alpha;
}

/// Alternating least squares from several deterministic starting points; the
/// best fixpoint (lowest MSE) wins.
template <typename T>
DualBinary<T> dual_binarize(std::span<const T> w, int max_iter = 25) {
  if (w.empty()) throw std::invalid_argument("dual_binarize: empty group");
  std::vector<T> mag(w.size());
  std::transform(w.begin(), w.end(), mag.begin(), [](T v) { return std::abs(v); });
  const T mean_abs = std::accumulate(mag.begin(), mag.end(), T(0)) / T(w.size());
  const T max_abs = *std::max_element(mag.begin(), mag.end());

  // Greedy residual start: alpha1 from |w|, alpha2 from the remaining residual.
  T resid = 0;
  for (std::size_t i = 0; i < w.size(); ++i) resid += std::abs(w[i] - (w[i] >= 0 ? mean_abs : -mean_abs));
  const std::array<std::pair<T, T>, 3> starts{{
      dual_partition_start(w),
      {mean_abs, resid / T(w.size())},
      {max_abs / 2, max_abs / 2},  // levels {-max, 0, max}
  }};

  DualBinary<T> best;
  bool have = false;
  for (const auto& [a1, a2] : starts) {
    auto cand = detail::dual_refine(w, a1, a2, max_iter);
    if (!have || cand.mse < best.mse) {
      best = std::move(cand);
      have = true;
    }
  }
  best.reconstruction.resize(static_cast<Eigen::Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i)
    best.reconstruction[static_cast<Eigen::Index>(i)] =
        best.alpha1 * best.b1[i] + best.alpha2 * best.b2[i];
  return best;
}

/// Symmetric signed RTN: s = max|w| / (2^(N-1) - 1), codes in [-2^(N-1), 2^(N-1) - 1].
template <typename T>
Array<T> symmetric_rtn(std::span<const T> w, int bits) {
  T max_abs = 0;
  for (T v : w) max_abs = std::max(max_abs, std::abs(v));
  Array<T> out = Array<T>::Zero(static_cast<Eigen::Index>(w.size()));
  if (max_abs == 0) return out;
  const T qpos = T((1 << (bits - 1)) - 1);
  const T qneg = -T(1 << (bits - 1));
  const T s = max_abs / qpos;
  for (std::size_t i = 0; i < w.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = std::clamp(round_half_away(w[i] / s), qneg, qpos) * s;
  return out;
}

// ---------------------------------------------------------------------------
// Mixture of scaling experts (1-bit path)

/// Router mixture weights softmax(x R^T): [n, in] x [K, in] -> [n, K].
template <typename T>
Tensor<T> mos_gates(const Tensor<T>& x, const Tensor<T>& router) {
  return softmax(matmul(x, transpose(router)));
}

/// Token-conditioned per-output-channel scale: gates [n, K] x experts [K, out].
template <typename T>
Tensor<T> mos_scale(const Tensor<T>& x, const Tensor<T>& experts, const Tensor<T>& router) {
  if (experts.rank() != 2 || router.rank() != 2 || experts.dim(0) != router.dim(0))
    throw_shape_error("mos_scale", experts.shape(), router.shape());
  return matmul(mos_gates(x, router), experts);
}

}  // namespace ulbq
