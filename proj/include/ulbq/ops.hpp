#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ulbq/tensor.hpp"

namespace ulbq {

namespace detail {

// Broadcast rule: equal shapes, a single-element operand, or an operand whose
// shape is a trailing suffix of the other's (leading-batch broadcast).
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (shape_numel(b) == 1 || is_suffix(b, a)) return a;
  if (shape_numel(a) == 1 || is_suffix(a, b)) return b;
  throw_shape_error(op, a, b);
}

// Expands `v` (tiling) to `n` entries.
template <typename T>
Array<T> tile(const Array<T>& v, Eigen::Index n) {
  if (v.size() == n) return v;
  Array<T> out(n);
  const Eigen::Index m = v.size();
  for (Eigen::Index i = 0; i < n; i += m) out.segment(i, m) = v;
  return out;
}

// Adjoint of tile: sums the repeated blocks back down to `m` entries.
template <typename T>
Array<T> untile(const Array<T>& g, Eigen::Index m) {
  if (g.size() == m) return g;
  Eigen::Map<const Matrix<T>> blocks(g.data(), g.size() / m, m);
  return blocks.colwise().sum().transpose().array();
}

template <typename T>
Eigen::Map<const Matrix<T>> as_matrix(const Array<T>& a, Eigen::Index rows,
                                      Eigen::Index cols) {
  return {a.data(), rows, cols};
}

template <typename T>
Eigen::Map<Matrix<T>> as_matrix(Array<T>& a, Eigen::Index rows,
                                Eigen::Index cols) {
  return {a.data(), rows, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape("add", a.shape(), b.shape());
  const auto n = static_cast<Eigen::Index>(shape_numel(out));
  Array<T> v = detail::tile(a.value(), n) + detail::tile(b.value(), n);
  const auto na = a.value().size(), nb = b.value().size();
  return make_result<T>(out, std::move(v), {a, b}, "add", [na, nb](Node<T>& o) {
    o.parents[0]->accumulate(detail::untile(o.grad, na));
    o.parents[1]->accumulate(detail::untile(o.grad, nb));
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape("sub", a.shape(), b.shape());
  const auto n = static_cast<Eigen::Index>(shape_numel(out));
  Array<T> v = detail::tile(a.value(), n) - detail::tile(b.value(), n);
  const auto na = a.value().size(), nb = b.value().size();
  return make_result<T>(out, std::move(v), {a, b}, "sub", [na, nb](Node<T>& o) {
    o.parents[0]->accumulate(detail::untile(o.grad, na));
    o.parents[1]->accumulate(detail::untile<T>(-o.grad, nb));
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape("mul", a.shape(), b.shape());
  const auto n = static_cast<Eigen::Index>(shape_numel(out));
  Array<T> v = detail::tile(a.value(), n) * detail::tile(b.value(), n);
  const auto na = a.value().size(), nb = b.value().size();
  return make_result<T>(out, std::move(v), {a, b}, "mul", [na, nb, n](Node<T>& o) {
    const auto& av = o.parents[0]->value;
    const auto& bv = o.parents[1]->value;
    if (o.parents[0]->requires_grad)
      o.parents[0]->accumulate(detail::untile<T>(o.grad * detail::tile(bv, n), na));
    if (o.parents[1]->requires_grad)
      o.parents[1]->accumulate(detail::untile<T>(o.grad * detail::tile(av, n), nb));
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape("div", a.shape(), b.shape());
  const auto n = static_cast<Eigen::Index>(shape_numel(out));
  Array<T> v = detail::tile(a.value(), n) / detail::tile(b.value(), n);
  const auto na = a.value().size(), nb = b.value().size();
  return make_result<T>(out, std::move(v), {a, b}, "div", [na, nb, n](Node<T>& o) {
    const Array<T> bt = detail::tile(o.parents[1]->value, n);
    if (o.parents[0]->requires_grad)
      o.parents[0]->accumulate(detail::untile<T>(o.grad / bt, na));
    if (o.parents[1]->requires_grad)
      o.parents[1]->accumulate(
          detail::untile<T>(-o.grad * o.value / bt, nb));
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return make_result<T>(a.shape(), a.value() * c, {a}, "scale", [c](Node<T>& o) {
    o.parents[0]->accumulate(o.grad * c);
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return make_result<T>(a.shape(), a.value() + c, {a}, "add_scalar",
                        [](Node<T>& o) { o.parents[0]->accumulate(o.grad); });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T c) { return scale(a, c); }
template <typename T> Tensor<T> operator*(T c, const Tensor<T>& a) { return scale(a, c); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T c) { return add_scalar(a, c); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return make_result<T>(a.shape(), a.value().square(), {a}, "square", [](Node<T>& o) {
    o.parents[0]->accumulate(o.grad * T(2) * o.parents[0]->value);
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return make_result<T>(a.shape(), a.value().exp(), {a}, "exp", [](Node<T>& o) {
    o.parents[0]->accumulate(o.grad * o.value);
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return make_result<T>(a.shape(), a.value().log(), {a}, "log", [](Node<T>& o) {
    o.parents[0]->accumulate(o.grad / o.parents[0]->value);
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Array<T> v = (T(1) + (-a.value()).exp()).inverse();
  return make_result<T>(a.shape(), std::move(v), {a}, "sigmoid", [](Node<T>& o) {
    o.parents[0]->accumulate(o.grad * o.value * (T(1) - o.value));
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Array<T> sig = (T(1) + (-a.value()).exp()).inverse();
  Array<T> v = a.value() * sig;
  return make_result<T>(a.shape(), std::move(v), {a}, "silu", [sig](Node<T>& o) {
    const auto& x = o.parents[0]->value;
    o.parents[0]->accumulate(o.grad * sig * (T(1) + x * (T(1) - sig)));
  });
}

/// Round half away from zero.
template <typename T>
T round_half_away(T x) {
  return std::round(x);
}

/// Rounds in the forward pass; identity Jacobian in the backward pass.
template <typename T>
Tensor<T> ste_round(const Tensor<T>& a) {
  Array<T> v = a.value().unaryExpr([](T x) { return round_half_away(x); });
  return make_result<T>(a.shape(), std::move(v), {a}, "ste_round",
                        [](Node<T>& o) { o.parents[0]->accumulate(o.grad); });
}

/// Clamp to [lo, hi] where the bounds broadcast against `x`. Gradient reaches
/// x inside the interval and the active bound outside it.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, const Tensor<T>& lo, const Tensor<T>& hi) {
  const Shape out = detail::broadcast_shape("clamp", x.shape(), lo.shape());
  if (out != x.shape()) throw_shape_error("clamp", x.shape(), lo.shape());
  if (detail::broadcast_shape("clamp", x.shape(), hi.shape()) != x.shape())
    throw_shape_error("clamp", x.shape(), hi.shape());
  const auto n = static_cast<Eigen::Index>(x.numel());
  const Array<T> lt = detail::tile(lo.value(), n);
  const Array<T> ht = detail::tile(hi.value(), n);
  // 0: inside, 1: below lo, 2: above hi
  Eigen::Array<unsigned char, Eigen::Dynamic, 1> region(n);
  Array<T> v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T xi = x.value()[i];
    if (xi < lt[i]) {
      region[i] = 1;
      v[i] = lt[i];
    } else if (xi > ht[i]) {
      region[i] = 2;
      v[i] = ht[i];
    } else {
      region[i] = 0;
      v[i] = xi;
    }
  }
  const auto nl = lo.value().size(), nh = hi.value().size();
  return make_result<T>(out, std::move(v), {x, lo, hi}, "clamp",
                        [region, nl, nh](Node<T>& o) {
    const auto n = o.grad.size();
    Array<T> gx(n), gl(n), gh(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      gx[i] = region[i] == 0 ? o.grad[i] : T(0);
      gl[i] = region[i] == 1 ? o.grad[i] : T(0);
      gh[i] = region[i] == 2 ? o.grad[i] : T(0);
    }
    o.parents[0]->accumulate(gx);
    if (o.parents[1]->requires_grad) o.parents[1]->accumulate(detail::untile(gl, nl));
    if (o.parents[2]->requires_grad) o.parents[2]->accumulate(detail::untile(gh, nh));
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return clamp(x, Tensor<T>::scalar(lo), Tensor<T>::scalar(hi));
}

/// max(x, floor) elementwise; gradient is zero where the floor is active.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
  return clamp(x, floor, std::numeric_limits<T>::infinity());
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto n = a.value().size();
  return make_result<T>(Shape{}, Array<T>::Constant(1, a.value().sum()), {a}, "sum",
                        [n](Node<T>& o) {
    o.parents[0]->accumulate(Array<T>::Constant(n, o.grad[0]));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const auto n = a.value().size();
  return make_result<T>(Shape{}, Array<T>::Constant(1, a.value().mean()), {a}, "mean",
                        [n](Node<T>& o) {
    o.parents[0]->accumulate(Array<T>::Constant(n, o.grad[0] / T(n)));
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw_shape_error("reshape", a.shape(), shape);
  return make_result<T>(std::move(shape), a.value(), {a}, "reshape",
                        [](Node<T>& o) { o.parents[0]->accumulate(o.grad); });
}

/// Swaps the last two axes; leading axes are treated as a batch.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_str(a.shape()));
  const Eigen::Index r = a.shape()[a.rank() - 2], c = a.shape().back();
  const Eigen::Index batch = r * c == 0 ? 0 : a.numel() / (r * c);
  Shape out = a.shape();
  std::swap(out[out.size() - 2], out[out.size() - 1]);
  auto swap_fn = [](const Array<T>& in, Eigen::Index batch, Eigen::Index r, Eigen::Index c) {
    Array<T> res(in.size());
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::Map<const Matrix<T>> src(in.data() + b * r * c, r, c);
      Eigen::Map<Matrix<T>> dst(res.data() + b * r * c, c, r);
      dst = src.transpose();
    }
    return res;
  };
  return make_result<T>(out, swap_fn(a.value(), batch, r, c), {a}, "transpose",
                        [swap_fn, batch, r, c](Node<T>& o) {
    o.parents[0]->accumulate(swap_fn(o.grad, batch, c, r));
  });
}

/// [a, b, c, d] -> [a, c, b, d]; used to move attention heads next to batch.
template <typename T>
Tensor<T> swap_axes_12(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("swap_axes_12: need rank 4, got " + shape_str(x.shape()));
  const auto s = x.shape();
  const Eigen::Index A = s[0], B = s[1], C = s[2], D = s[3];
  auto perm = [](const Array<T>& in, Eigen::Index A, Eigen::Index B, Eigen::Index C,
                 Eigen::Index D) {
    Array<T> out(in.size());
    for (Eigen::Index a = 0; a < A; ++a)
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index c = 0; c < C; ++c)
          out.segment(((a * C + c) * B + b) * D, D) =
              in.segment(((a * B + b) * C + c) * D, D);
    return out;
  };
  return make_result<T>(Shape{s[0], s[2], s[1], s[3]}, perm(x.value(), A, B, C, D), {x},
                        "swap_axes_12", [perm, A, B, C, D](Node<T>& o) {
    o.parents[0]->accumulate(perm(o.grad, A, C, B, D));
  });
}

// ---------------------------------------------------------------------------
// Matmul

/// [..., m, k] x [k, n] -> [..., m, n], or batched [B, m, k] x [B, k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw_shape_error("matmul", a.shape(), b.shape());
  const Eigen::Index m = a.shape()[a.rank() - 2], k = a.shape().back();
  const Eigen::Index kb = b.shape()[b.rank() - 2], n = b.shape().back();
  if (k != kb) throw_shape_error("matmul", a.shape(), b.shape());

  if (b.rank() == 2) {
    const Eigen::Index rows = k == 0 ? 0 : a.numel() / k;
    Shape out = a.shape();
    out.back() = n;
    Array<T> v(rows * n);
    detail::as_matrix(v, rows, n).noalias() =
        detail::as_matrix(a.value(), rows, k) * detail::as_matrix(b.value(), k, n);
    return make_result<T>(out, std::move(v), {a, b}, "matmul", [rows, k, n](Node<T>& o) {
      const auto G = detail::as_matrix(o.grad, rows, n);
      auto& pa = *o.parents[0];
      auto& pb = *o.parents[1];
      if (pa.requires_grad) {
        Array<T> ga(rows * k);
        detail::as_matrix(ga, rows, k).noalias() = G * detail::as_matrix(pb.value, k, n).transpose();
        pa.accumulate(ga);
      }
      if (pb.requires_grad) {
        Array<T> gb(k * n);
        detail::as_matrix(gb, k, n).noalias() = detail::as_matrix(pa.value, rows, k).transpose() * G;
        pb.accumulate(gb);
      }
    });
  }

  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw_shape_error("matmul", a.shape(), b.shape());
  }
  const Eigen::Index batch = m * k == 0 ? 0 : a.numel() / (m * k);
  Shape out = a.shape();
  out.back() = n;
  Array<T> v(batch * m * n);
  for (Eigen::Index i = 0; i < batch; ++i) {
    Eigen::Map<Matrix<T>>(v.data() + i * m * n, m, n).noalias() =
        Eigen::Map<const Matrix<T>>(a.value().data() + i * m * k, m, k) *
        Eigen::Map<const Matrix<T>>(b.value().data() + i * k * n, k, n);
  }
  return make_result<T>(out, std::move(v), {a, b}, "bmm", [batch, m, k, n](Node<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    Array<T> ga, gb;
    if (pa.requires_grad) ga.resize(batch * m * k);
    if (pb.requires_grad) gb.resize(batch * k * n);
    for (Eigen::Index i = 0; i < batch; ++i) {
      Eigen::Map<const Matrix<T>> G(o.grad.data() + i * m * n, m, n);
      if (pa.requires_grad)
        Eigen::Map<Matrix<T>>(ga.data() + i * m * k, m, k).noalias() =
            G * Eigen::Map<const Matrix<T>>(pb.value.data() + i * k * n, k, n).transpose();
      if (pb.requires_grad)
        Eigen::Map<Matrix<T>>(gb.data() + i * k * n, k, n).noalias() =
            Eigen::Map<const Matrix<T>>(pa.value.data() + i * m * k, m, k).transpose() * G;
    }
    if (pa.requires_grad) pa.accumulate(ga);
    if (pb.requires_grad) pb.accumulate(gb);
  });
}

// ---------------------------------------------------------------------------
// Last-axis ops

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const auto m = a.matrix();
  Matrix<T> s = (m.colwise() - m.rowwise().maxCoeff()).array().exp().matrix();
  s.array().colwise() /= s.rowwise().sum().array();
  Array<T> v = Eigen::Map<const Array<T>>(s.data(), s.size());
  const Eigen::Index rows = m.rows(), cols = m.cols();
  return make_result<T>(a.shape(), std::move(v), {a}, "softmax", [rows, cols](Node<T>& o) {
    const auto y = detail::as_matrix(o.value, rows, cols);
    const auto g = detail::as_matrix(o.grad, rows, cols);
    Array<T> gx(rows * cols);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (y.array() * g.array()).rowwise().sum();
    detail::as_matrix(gx, rows, cols) =
        (y.array() * (g.colwise() - dot).array()).matrix();
    o.parents[0]->accumulate(gx);
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const auto m = a.matrix();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = m.rowwise().maxCoeff();
  Matrix<T> shifted = m.colwise() - mx;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> lse =
      shifted.array().exp().rowwise().sum().log().matrix();
  shifted.colwise() -= lse;
  Array<T> v = Eigen::Map<const Array<T>>(shifted.data(), shifted.size());
  const Eigen::Index rows = m.rows(), cols = m.cols();
  return make_result<T>(a.shape(), std::move(v), {a}, "log_softmax", [rows, cols](Node<T>& o) {
    const auto y = detail::as_matrix(o.value, rows, cols);
    const auto g = detail::as_matrix(o.grad, rows, cols);
    Array<T> gx(rows * cols);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> gs = g.rowwise().sum();
    detail::as_matrix(gx, rows, cols) =
        g - (y.array().exp().colwise() * gs.array()).matrix();
    o.parents[0]->accumulate(gx);
  });
}

/// x / sqrt(mean(x^2) + eps) * weight, over the last axis.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5)) {
  if (weight.rank() != 1 || x.rank() == 0 || weight.dim(0) != x.shape().back())
    throw_shape_error("rms_norm", x.shape(), weight.shape());
  const auto m = x.matrix();
  const Eigen::Index rows = m.rows(), cols = m.cols();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> inv =
      ((m.array().square().rowwise().sum() / T(cols)) + eps).rsqrt().matrix();
  Matrix<T> normed = m.array().colwise() * inv.array();
  Matrix<T> out = normed.array().rowwise() * weight.value().transpose();
  Array<T> v = Eigen::Map<const Array<T>>(out.data(), out.size());
  return make_result<T>(x.shape(), std::move(v), {x, weight}, "rms_norm",
                        [rows, cols, inv, normed](Node<T>& o) {
    const auto g = detail::as_matrix(o.grad, rows, cols);
    auto& px = *o.parents[0];
    auto& pw = *o.parents[1];
    if (pw.requires_grad) {
      pw.accumulate((g.array() * normed.array()).colwise().sum().transpose());
    }
    if (px.requires_grad) {
      // d/dx of x*inv*w: inv*(gw - normed*mean(gw*normed))
      const Matrix<T> gw = g.array().rowwise() * pw.value.transpose();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dot =
          (gw.array() * normed.array()).rowwise().sum() / T(cols);
      Array<T> gx(rows * cols);
      detail::as_matrix(gx, rows, cols) =
          ((gw - (normed.array().colwise() * dot.array()).matrix()).array().colwise() *
           inv.array()).matrix();
      px.accumulate(gx);
    }
  });
}

/// Adds -inf above the diagonal of each trailing [t, t] slice.
template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  if (scores.rank() < 2 || scores.shape().back() != scores.shape()[scores.rank() - 2])
    throw ShapeError("causal_mask: need trailing square slices, got " + shape_str(scores.shape()));
  const Eigen::Index t = scores.shape().back();
  Array<T> v = scores.value();
  const Eigen::Index slices = t == 0 ? 0 : v.size() / (t * t);
  for (Eigen::Index s = 0; s < slices; ++s)
    for (Eigen::Index i = 0; i < t; ++i)
      for (Eigen::Index j = i + 1; j < t; ++j)
        v[s * t * t + i * t + j] = -std::numeric_limits<T>::infinity();
  return make_result<T>(scores.shape(), std::move(v), {scores}, "causal_mask",
                        [slices, t](Node<T>& o) {
    Array<T> g = o.grad;
    for (Eigen::Index s = 0; s < slices; ++s)
      for (Eigen::Index i = 0; i < t; ++i)
        for (Eigen::Index j = i + 1; j < t; ++j) g[s * t * t + i * t + j] = T(0);
    o.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Indexing

/// out[i] = v[index[i]], shaped `shape`; backward scatter-adds.
template <typename T>
Tensor<T> take(const Tensor<T>& v, std::span<const Eigen::Index> index, Shape shape) {
  if (shape_numel(shape) != index.size())
    throw ShapeError("take: " + std::to_string(index.size()) + " indices for shape " +
                     shape_str(shape));
  Array<T> out(static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= v.value().size())
      throw std::out_of_range("take: index " + std::to_string(index[i]) + " outside " +
                              shape_str(v.shape()));
    out[static_cast<Eigen::Index>(i)] = v.value()[index[i]];
  }
  std::vector<Eigen::Index> idx(index.begin(), index.end());
  const auto nv = v.value().size();
  return make_result<T>(std::move(shape), std::move(out), {v}, "take",
                        [idx = std::move(idx), nv](Node<T>& o) {
    Array<T> g = Array<T>::Zero(nv);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[static_cast<Eigen::Index>(i)];
    o.parents[0]->accumulate(g);
  });
}

/// Rows of `table` [V, d] selected by `ids` -> [n, d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const Eigen::Index V = table.dim(0), d = table.dim(1);
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  Array<T> v(n * d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab " + std::to_string(V));
    v.segment(i * d, d) = table.value().segment(id * d, d);
  }
  std::vector<int> keep(ids.begin(), ids.end());
  return make_result<T>(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(d)},
                        std::move(v), {table}, "embedding",
                        [keep = std::move(keep), V, d](Node<T>& o) {
    Array<T> g = Array<T>::Zero(V * d);
    for (std::size_t i = 0; i < keep.size(); ++i)
      g.segment(keep[i] * d, d) += o.grad.segment(static_cast<Eigen::Index>(i) * d, d);
    o.parents[0]->accumulate(g);
  });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  const auto m = logits.matrix();
  const Eigen::Index rows = m.rows(), cols = m.cols();
  if (static_cast<std::size_t>(rows) != targets.size())
    throw_shape_error("cross_entropy", logits.shape(),
                      Shape{targets.size()});
  const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = m.rowwise().maxCoeff();
  Matrix<T> probs = (m.colwise() - mx).array().exp().matrix();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> z = probs.rowwise().sum();
  probs.array().colwise() /= z.array();
  T loss = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= cols) throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside " + std::to_string(cols) + " classes");
    loss -= m(i, t) - mx[i] - std::log(z[i]);
  }
  loss /= T(rows);
  std::vector<int> keep(targets.begin(), targets.end());
  return make_result<T>(Shape{}, Array<T>::Constant(1, loss), {logits}, "cross_entropy",
                        [probs = std::move(probs), keep = std::move(keep), rows, cols](Node<T>& o) {
    Array<T> g(rows * cols);
    auto gm = detail::as_matrix(g, rows, cols);
    gm = probs;
    for (Eigen::Index i = 0; i < rows; ++i) gm(i, keep[static_cast<std::size_t>(i)]) -= T(1);
    gm *= o.grad[0] / T(rows);
    o.parents[0]->accumulate(g);
  });
}

}  // namespace ulbq
