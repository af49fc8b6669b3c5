#pragma once

// Shared test helpers: an analytic field stand-in with query counting.

#include <array>
#include <functional>
#include <vector>

#include "lsnerf/field.hpp"

namespace lsnerf_test {

using lsnerf::FieldBatchOut;
using lsnerf::FieldEval;
using lsnerf::Tensor;
using lsnerf::Vec3;

// Analytic stand-in for the neural field: sigma/colour/latent as functions
// of position, latent dimension n. Counts queries like the real field.
template <typename T>
struct AnalyticSource {
  std::function<double(const Vec3&)> sigma_fn;
  std::function<std::array<double, 3>(const Vec3&)> color_fn = [](const Vec3&) {
    return std::array<double, 3>{0, 0, 0};
  };
  std::function<std::vector<double>(const Vec3&)> latent_fn;
  int n = 2;
  mutable uint64_t queries = 0;

  FieldBatchOut<T> eval_batch(const std::vector<T>& pos, const std::vector<T>&,
                              FieldEval mode) const {
    const int m = static_cast<int>(pos.size() / 3);
    queries += m;
    std::vector<T> sg(m), col, lat;
    if (mode == FieldEval::kColor || mode == FieldEval::kFull) col.resize(m * 3);
    if (mode == FieldEval::kLatent || mode == FieldEval::kFull) lat.resize(m * n);
    for (int i = 0; i < m; ++i) {
      const Vec3 p{static_cast<double>(pos[i * 3]), static_cast<double>(pos[i * 3 + 1]),
                   static_cast<double>(pos[i * 3 + 2])};
      sg[i] = static_cast<T>(sigma_fn(p));
      if (!col.empty()) {
        const auto c = color_fn(p);
        for (int ch = 0; ch < 3; ++ch) col[i * 3 + ch] = static_cast<T>(c[ch]);
      }
      if (!lat.empty()) {
        const auto z = latent_fn(p);
        for (int ch = 0; ch < n; ++ch) lat[i * n + ch] = static_cast<T>(z[ch]);
      }
    }
    FieldBatchOut<T> out;
    out.sigma = Tensor<T>::from({m, 1}, std::move(sg));
    if (!col.empty()) out.color = Tensor<T>::from({m, 3}, std::move(col));
    if (!lat.empty()) out.latent = Tensor<T>::from({m, n}, std::move(lat));
    return out;
  }
};

}  // namespace lsnerf_test
