#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ulbq/model.hpp"

namespace ulbq {

struct SaliencyMeta {
  std::string dataset;
  std::size_t samples = 0;  // samples that contributed
  std::size_t dropped = 0;  // samples discarded for non-finite gradients
  std::size_t seq_len = 0;
  std::string normalization = "mean1";
};

/// Per-weight importance for every quantizable matrix, keyed by layer name.
template <typename T>
struct SaliencyMap {
  std::map<std::string, Tensor<T>> alpha;
  SaliencyMeta meta;

  const Tensor<T>& at(const std::string& layer) const {
    auto it = alpha.find(layer);
    if (it == alpha.end()) throw std::out_of_range("saliency map has no entry for '" + layer + "'");
    return it->second;
  }
};

class SaliencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean over samples of squared per-sample gradients. `loss_for_sample(i)`
/// must build a fresh graph over `params`. Samples whose loss or gradient is
/// non-finite are dropped and counted in `dropped`.
template <typename T, typename LossFn>
std::vector<Array<T>> mean_squared_gradients(std::span<const Tensor<T>> params, std::size_t samples,
                                             LossFn&& loss_for_sample, std::size_t* dropped = nullptr) {
  std::vector<Array<T>> acc;
  for (const auto& p : params) acc.push_back(Array<T>::Zero(p.value().size()));
  std::size_t kept = 0, bad = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    for (auto p : params) p.zero_grad();
    const Tensor<T> loss = loss_for_sample(i);
    bool ok = std::isfinite(static_cast<double>(loss.item()));
    if (ok) {
      backward(loss);
      for (const auto& p : params)
        if (p.has_grad() && !p.grad().isFinite().all()) ok = false;
    }
    if (!ok) {
      ++bad;
      continue;
    }
    ++kept;
    for (std::size_t j = 0; j < params.size(); ++j)
      if (params[j].has_grad()) acc[j] += params[j].grad().square();
  }
  for (auto p : params) p.zero_grad();
  if (dropped) *dropped = bad;
  if (kept == 0)
    throw SaliencyError("saliency: all " + std::to_string(samples) +
                        " samples produced non-finite gradients");
  for (auto& a : acc) a /= T(kept);
  return acc;
}

/// Rescales to mean 1; an all-zero map is left as is.
template <typename T>
void normalize_mean_one(Array<T>& a) {
  const T m = a.mean();
  if (m > T(0)) a /= m;
}

/// Squared-gradient saliency of every block linear under next-token
/// cross-entropy, one sample at a time. `loss_scale` multiplies the loss
/// (raw saliency then scales by its square; the normalized map does not).
template <typename T>
SaliencyMap<T> compute_saliency(const ToyTransformer<T>& model, const TokenBatch& batch,
                                const std::string& dataset_id = "", T loss_scale = T(1)) {
  if (batch.n == 0) throw std::invalid_argument("compute_saliency: empty calibration batch");
  ToyTransformer<T> m = model.template cast<T>();
  m.set_requires_grad(false);
  std::vector<Tensor<T>> params;
  std::vector<std::string> names;
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      m.blocks[b].linear[l].set_requires_grad(true);
      params.push_back(m.blocks[b].linear[l]);
      names.push_back(linear_name(b, l));
    }

  std::size_t dropped = 0;
  auto raw = mean_squared_gradients<T>(
      params, batch.n,
      [&](std::size_t i) {
        const auto in = batch.row_inputs(i);
        const auto tg = batch.row_targets(i);
        return scale(cross_entropy(forward(m, in, 1, batch.seq_len), tg), loss_scale);
      },
      &dropped);

  SaliencyMap<T> out;
  for (std::size_t j = 0; j < params.size(); ++j) {
    normalize_mean_one(raw[j]);
    out.alpha.emplace(names[j], Tensor<T>(params[j].shape(), std::move(raw[j])));
  }
  out.meta.dataset = dataset_id;
  out.meta.samples = batch.n - dropped;
  out.meta.dropped = dropped;
  out.meta.seq_len = batch.seq_len;
  return out;
}

/// sum_i alpha_i (w_i - target_i)^2; differentiable through `target`.
template <typename T>
Tensor<T> saliency_regularizer(const Tensor<T>& w, const Tensor<T>& target, const Tensor<T>& alpha) {
  if (w.shape() != target.shape()) throw_shape_error("saliency_regularizer", w.shape(), target.shape());
  if (w.shape() != alpha.shape()) throw_shape_error("saliency_regularizer", w.shape(), alpha.shape());
  return sum(mul(alpha, square(sub(w, target))));
}

}  // namespace ulbq
