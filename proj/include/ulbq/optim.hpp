#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ulbq/tensor.hpp"

namespace ulbq {

template <typename T>
struct ParamGroup {
  std::vector<Tensor<T>> params;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay and bias-corrected moments. A group whose
/// gradients contain NaN/Inf is skipped for that step as a whole.
template <typename T>
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup<T>> groups, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_) {
      std::vector<Moments> state;
      for (const auto& p : g.params) {
        state.push_back({Array<T>::Zero(p.value().size()),
                         Array<T>::Zero(p.value().size()), 0});
      }
      state_.push_back(std::move(state));
    }
  }

  void step() {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& group = groups_[gi];
      bool finite = true;
      for (const auto& p : group.params) {
        if (p.has_grad() && !p.grad().isFinite().all()) finite = false;
      }
      if (!finite) {
        ++skipped_;
        continue;
      }
      const T lr = static_cast<T>(group.lr);
      const T wd = static_cast<T>(group.weight_decay);
      for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
        auto& p = group.params[pi];
        if (!p.has_grad()) continue;
        auto& s = state_[gi][pi];
        ++s.step;
        const auto& g = p.grad();
        s.m = T(beta1_) * s.m + T(1 - beta1_) * g;
        s.v = T(beta2_) * s.v + T(1 - beta2_) * g.square();
        const T bc1 = T(1 - std::pow(beta1_, static_cast<double>(s.step)));
        const T bc2 = T(1 - std::pow(beta2_, static_cast<double>(s.step)));
        auto& w = p.mutable_value();
        w -= lr * wd * w;
        w -= lr * (s.m / bc1) / ((s.v / bc2).sqrt() + T(eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  std::size_t skipped_steps() const { return skipped_; }
  std::size_t step_count(std::size_t group, std::size_t param) const {
    return state_.at(group).at(param).step;
  }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }
  std::vector<ParamGroup<T>>& groups() { return groups_; }

 private:
  struct Moments {
    Array<T> m, v;
    std::size_t step;
  };

  std::vector<ParamGroup<T>> groups_;
  std::vector<std::vector<Moments>> state_;
  double beta1_, beta2_, eps_;
  std::size_t skipped_ = 0;
};

}  // namespace ulbq
