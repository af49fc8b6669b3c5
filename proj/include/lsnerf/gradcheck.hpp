#pragma once

// Central finite-difference verification of reverse-mode gradients.
//
// Errors are normalized by the largest gradient magnitude across the
// checked parameters, so near-zero components do not blow up the ratio:
//   err_i = |ad_i - fd_i| / max(||ad||_inf, ||fd||_inf, tiny)

#include <cmath>
#include <functional>
#include <vector>

#include "lsnerf/tensor.hpp"

namespace lsnerf {

// f: builds and returns the scalar loss from the current parameter values.
// Any stochastic choices inside f must be frozen by the caller.
template <typename T, typename F>
double grad_check(F&& f, std::vector<Tensor<T>> params, T h) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f();
  loss.backward();

  std::vector<std::vector<double>> analytic(params.size());
  for (size_t pi = 0; pi < params.size(); ++pi) {
    analytic[pi].resize(params[pi].numel());
    const auto& g = params[pi].grad();
    for (int64_t i = 0; i < params[pi].numel(); ++i)
      analytic[pi][i] = static_cast<double>(g[i]);
  }

  std::vector<std::vector<double>> numeric(params.size());
  {
    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      numeric[pi].resize(params[pi].numel());
      T* data = params[pi].ptr();
      for (int64_t i = 0; i < params[pi].numel(); ++i) {
        const T saved = data[i];
        data[i] = saved + h;
        const double fp = static_cast<double>(f().item());
        data[i] = saved - h;
        const double fm = static_cast<double>(f().item());
        data[i] = saved;
        numeric[pi][i] = (fp - fm) / (2.0 * static_cast<double>(h));
      }
    }
  }

  double gmax = 1e-12;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (size_t i = 0; i < analytic[pi].size(); ++i)
      gmax = std::max({gmax, std::abs(analytic[pi][i]), std::abs(numeric[pi][i])});

  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (size_t i = 0; i < analytic[pi].size(); ++i)
      worst = std::max(worst, std::abs(analytic[pi][i] - numeric[pi][i]) / gmax);
  return worst;
}

template <typename T, typename F>
double grad_check(F&& f, Tensor<T> param, T h) {
  return grad_check(std::forward<F>(f), std::vector<Tensor<T>>{param}, h);
}

}  // namespace lsnerf
