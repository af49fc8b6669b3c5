#pragma once

// Bias-corrected Adam. Betas/epsilon defaults are the usual ones; they are
// project decisions, not values inherited from elsewhere.

#include <cmath>
#include <string>
#include <vector>

#include "lsnerf/tensor.hpp"

namespace lsnerf {

template <typename T>
struct AdamState {
  std::vector<T> m;  // first moment, zero-initialized
  std::vector<T> v;  // second moment, zero-initialized
  int64_t t = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, T lr) {
  if (!param.has_grad())
    throw std::logic_error("adam_step: parameter has no gradient");
  const int64_t n = param.numel();
  if (state.m.empty()) state.m.assign(n, T(0));
  if (state.v.empty()) state.v.assign(n, T(0));
  if (static_cast<int64_t>(state.m.size()) != n)
    throw std::invalid_argument("adam_step: state size mismatch");
  state.t += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T corr1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(state.t)));
  const T corr2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(state.t)));
  T* theta = param.ptr();
  const std::vector<T>& g = param.grad();
  for (int64_t i = 0; i < n; ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
    const T mhat = state.m[i] / corr1;
    const T vhat = state.v[i] / corr2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// Named parameter list shared by the field and the autoencoder; the
// optimizer and the checkpoint format both walk it in order.
template <typename T>
struct ParamSet {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }
  void zero_grad() {
    for (auto& [name, t] : items) t.zero_grad();
  }
  int64_t numel() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

template <typename T>
class Adam {
 public:
  explicit Adam(ParamSet<T>& params) : params_(&params), states_(params.items.size()) {}

  // Parameters that received no gradient this step count as zero-gradient
  // (and are left unchanged by the bias-corrected update).
  void step(T lr) {
    for (size_t i = 0; i < params_->items.size(); ++i) {
      params_->items[i].second.grad();  // allocate zeros if absent
      adam_step(params_->items[i].second, states_[i], lr);
    }
  }
  void zero_grad() { params_->zero_grad(); }

  std::vector<AdamState<T>>& states() { return states_; }
  const std::vector<AdamState<T>>& states() const { return states_; }

 private:
  ParamSet<T>* params_;
  std::vector<AdamState<T>> states_;
};

}  // namespace lsnerf
