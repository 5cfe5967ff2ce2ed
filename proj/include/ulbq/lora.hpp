#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ulbq/ops.hpp"

namespace ulbq {

/// Thin SVD, A = U * diag(S) * V^T with S sorted descending.
template <typename T>
struct Svd {
  Matrix<T> U;
  Array<T> S;
  Matrix<T> V;
  int sweeps = 0;
};

/// One-sided (Hestenes) Jacobi SVD. Columns are orthogonalized pairwise until
/// every normalized inner product falls below `tol`.
template <typename T>
Svd<T> jacobi_svd(const Matrix<T>& a, T tol = T(1e-10), int max_sweeps = 100) {
  const bool wide = a.rows() < a.cols();
  Matrix<T> u = wide ? Matrix<T>(a.transpose()) : a;
  const Eigen::Index m = u.rows(), n = u.cols();
  Matrix<T> v = Matrix<T>::Identity(n, n);

  Svd<T> out;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    T off = 0;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const T alpha = u.col(p).squaredNorm();
        const T beta = u.col(q).squaredNorm();
        const T gamma = u.col(p).dot(u.col(q));
        if (alpha == T(0) || beta == T(0) || gamma == T(0)) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        const T zeta = (beta - alpha) / (T(2) * gamma);
        const T t = (zeta >= 0 ? T(1) : T(-1)) / (std::abs(zeta) + std::sqrt(T(1) + zeta * zeta));
        const T c = T(1) / std::sqrt(T(1) + t * t);
        const T s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const T up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const T vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    out.sweeps = sweep + 1;
    if (off <= tol) break;
  }

  Array<T> sv(n);
  for (Eigen::Index j = 0; j < n; ++j) sv[j] = u.col(j).norm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return sv[x] > sv[y]; });

  Matrix<T> uu(m, n), vv(n, n);
  Array<T> ss(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index k = order[static_cast<std::size_t>(j)];
    ss[j] = sv[k];
    vv.col(j) = v.col(k);
    if (sv[k] > T(0)) {
      uu.col(j) = u.col(k) / sv[k];
    } else {
      uu.col(j).setZero();
    }
  }
  if (wide) {
    out.U = vv;
    out.V = uu;
  } else {
    out.U = uu;
    out.V = vv;
  }
  out.S = ss;
  return out;
}

/// Low-rank adapter: delta W = B * A with A [r, in] and B [out, r].
template <typename T>
struct LoraPair {
  Tensor<T> a;
  Tensor<T> b;

  std::size_t rank() const { return a.defined() ? a.dim(0) : 0; }
  bool enabled() const { return a.defined() && b.defined(); }

  Tensor<T> delta() const { return matmul(b, a); }
};

template <typename T>
void check_lora_shapes(std::size_t out, std::size_t in, const LoraPair<T>& lora) {
  const auto& as = lora.a.shape();
  const auto& bs = lora.b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != in || bs[0] != out || as[0] != bs[1])
    throw ShapeError("lora: A " + shape_str(as) + " and B " + shape_str(bs) +
                     " do not compose to [" + std::to_string(out) + ", " + std::to_string(in) + "]");
  if (as[0] > std::min(in, out))
    throw ShapeError("lora: rank " + std::to_string(as[0]) + " exceeds min(in, out) = " +
                     std::to_string(std::min(in, out)));
}

/// W_eff = Q_hat + B A.
template <typename T>
Tensor<T> effective_weight(const Tensor<T>& q_hat, const LoraPair<T>& lora) {
  if (!lora.enabled()) return q_hat;
  if (q_hat.rank() != 2) throw ShapeError("effective_weight: Q_hat must be rank 2, got " + shape_str(q_hat.shape()));
  check_lora_shapes(q_hat.dim(0), q_hat.dim(1), lora);
  return add(q_hat, lora.delta());
}

/// Best rank-r factorization of the residual W - Q_hat, split symmetrically:
/// B = U_r sqrt(S_r), A = sqrt(S_r) V_r^T.
template <typename T>
LoraPair<T> init_lora_from_residual(const Matrix<T>& w, const Matrix<T>& q_hat, std::size_t rank,
                                    bool requires_grad = true) {
  if (w.rows() != q_hat.rows() || w.cols() != q_hat.cols())
    throw_shape_error("init_lora_from_residual",
                      Shape{static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols())},
                      Shape{static_cast<std::size_t>(q_hat.rows()), static_cast<std::size_t>(q_hat.cols())});
  const auto r = static_cast<Eigen::Index>(rank);
  if (rank == 0 || r > std::min(w.rows(), w.cols()))
    throw std::invalid_argument("init_lora_from_residual: rank " + std::to_string(rank) +
                                " outside [1, " + std::to_string(std::min(w.rows(), w.cols())) + "]");
  const auto svd = jacobi_svd<T>(w - q_hat);
  const Array<T> root = svd.S.head(r).sqrt();
  Matrix<T> b = svd.U.leftCols(r) * root.matrix().asDiagonal();
  Matrix<T> a = root.matrix().asDiagonal() * svd.V.leftCols(r).transpose();
  return {Tensor<T>::from_matrix(a, requires_grad), Tensor<T>::from_matrix(b, requires_grad)};
}

}  // namespace ulbq
