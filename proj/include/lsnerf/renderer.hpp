#pragma once

// Ray generation, stratified sampling, and quadrature volume rendering of
// colour, latent features, and expected depth:
//
//   value(p) = sum_k w_k f_k,   w_k = T_k (1 - exp(-sigma_k delta_k)),
//   T_k = exp(-sum_{j<k} sigma_j delta_j)
//
// Expected depth is the weight-averaged sample distance, normalized by
// accumulated opacity. The colour and latent paths use the same weights.

#include <cmath>
#include <span>

#include "lsnerf/camera.hpp"
#include "lsnerf/field.hpp"
#include "lsnerf/image.hpp"
#include "lsnerf/ops.hpp"
#include "lsnerf/parallel.hpp"
#include "lsnerf/rng.hpp"

namespace lsnerf {

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
  double t_min = 0, t_max = 1;

  Vec3 at(double t) const { return origin + direction * t; }
  void validate() const {
    if (!(t_min < t_max)) throw std::invalid_argument("Ray: t_min must be < t_max");
    if (std::abs(direction.norm() - 1.0) > 1e-6)
      throw std::invalid_argument("Ray: direction must be unit length");
  }
};

// Ray through pixel (row, col); the in-pixel offset defaults to the center.
inline Ray generate_ray(const Camera& cam, int row, int col, double near, double far,
                        double jitter_u = 0.5, double jitter_v = 0.5) {
  if (row < 0 || row >= cam.height || col < 0 || col >= cam.width)
    throw std::invalid_argument("generate_ray: pixel outside image bounds");
  Ray r;
  r.origin = cam.position();
  r.direction = cam.ray_direction(col + jitter_u, row + jitter_v);
  r.t_min = near;
  r.t_max = far;
  return r;
}

// One draw per stratum; with no rng, stratum midpoints (deterministic mode).
template <typename T>
std::vector<T> sample_stratified(const Ray& ray, int n, Pcg32* rng) {
  if (n < 1) throw std::invalid_argument("sample_stratified: need at least one sample");
  const double step = (ray.t_max - ray.t_min) / n;
  std::vector<T> t(n);
  for (int k = 0; k < n; ++k) {
    const double u = rng ? rng->next_double() : 0.5;
    t[k] = static_cast<T>(ray.t_min + (k + u) * step);
  }
  return t;
}

enum class RenderMode { kColor, kLatent, kDepth };

struct RenderOptions {
  double near = 0.1, far = 10.0;
  int samples_per_ray = 128;
  bool deterministic = true;  // midpoint sampling, no pixel jitter
  uint64_t seed = 0;
  uint64_t frame = 0;
  float background = 0.f;      // composited behind colour renders
  float mask_threshold = 0.5f; // opacity needed for a valid depth pixel
  int threads = 1;
};

template <typename T>
struct RenderBatchOut {
  Tensor<T> weights;  // [R x N]
  Tensor<T> value;    // [R x C], composited colour or latent features
  Tensor<T> depth;    // [R x 1], opacity-normalized expected distance
  Tensor<T> opacity;  // [R x 1]
  std::vector<T> t_samples;  // [R*N] sample distances
  std::vector<T> deltas;     // [R*N] interval lengths
};

// Compositing core over precomputed sample positions. Source must provide
// eval_batch(positions, dirs, FieldEval) — the neural field does; tests use
// analytic stand-ins.
template <typename T, typename Source>
RenderBatchOut<T> render_batch_at(std::span<const Ray> rays, std::vector<T> t_samples,
                                  const Source& src, int n, RenderMode mode,
                                  float background = 0.f) {
  const int r_count = static_cast<int>(rays.size());
  if (t_samples.size() != static_cast<size_t>(r_count) * n)
    throw std::invalid_argument("render_batch_at: sample count mismatch");
  RenderBatchOut<T> out;
  out.t_samples = std::move(t_samples);
  out.deltas.resize(out.t_samples.size());
  std::vector<T> positions(out.t_samples.size() * 3);
  std::vector<T> dirs(out.t_samples.size() * 3);

  for (int r = 0; r < r_count; ++r) {
    const Ray& ray = rays[r];
    // Each sample represents its stratum, so intervals tile [t_min, t_max]
    // exactly; piecewise-constant media aligned to the strata composite
    // with zero quadrature error.
    const T delta = static_cast<T>((ray.t_max - ray.t_min) / n);
    for (int k = 0; k < n; ++k) {
      const size_t idx = static_cast<size_t>(r) * n + k;
      out.deltas[idx] = delta;
      const Vec3 p = ray.at(static_cast<double>(out.t_samples[idx]));
      positions[idx * 3 + 0] = static_cast<T>(p.x);
      positions[idx * 3 + 1] = static_cast<T>(p.y);
      positions[idx * 3 + 2] = static_cast<T>(p.z);
      dirs[idx * 3 + 0] = static_cast<T>(ray.direction.x);
      dirs[idx * 3 + 1] = static_cast<T>(ray.direction.y);
      dirs[idx * 3 + 2] = static_cast<T>(ray.direction.z);
    }
  }

  const FieldEval ev = mode == RenderMode::kColor   ? FieldEval::kColor
                       : mode == RenderMode::kLatent ? FieldEval::kLatent
                                                     : FieldEval::kDensity;
  auto fo = src.eval_batch(positions, dirs, ev);

  out.weights = transmittance_weights(fo.sigma, out.deltas, r_count, n);
  out.opacity = rowsum(out.weights);
  const Tensor<T> tvals = Tensor<T>::from({r_count * n, 1}, out.t_samples);
  out.depth = div(composite(out.weights, tvals), clamp_min(out.opacity, static_cast<T>(1e-6)));
  if (mode != RenderMode::kDepth) {
    out.value = composite(out.weights, mode == RenderMode::kColor ? fo.color : fo.latent);
    if (mode == RenderMode::kColor && background != 0.f)
      out.value = add_scaled_complement(out.value, out.opacity, static_cast<T>(background));
  }
  return out;
}

// Stratified samples drawn from one sequential stream (training batches).
template <typename T, typename Source>
RenderBatchOut<T> render_batch(std::span<const Ray> rays, const Source& src, int n,
                               RenderMode mode, Pcg32* rng, float background = 0.f) {
  std::vector<T> ts(rays.size() * n);
  for (size_t r = 0; r < rays.size(); ++r) {
    auto s = sample_stratified<T>(rays[r], n, rng);
    std::copy(s.begin(), s.end(), ts.begin() + r * n);
  }
  return render_batch_at<T>(rays, std::move(ts), src, n, mode, background);
}

template <typename T>
struct RayRender {
  std::vector<T> value;
  T depth = T(0);
  T opacity = T(0);
};

// Single-ray feature rendering: value = volume-rendered latent vector.
template <typename T, typename Source>
RayRender<T> render_feature(const Ray& ray, const Source& src, int n, Pcg32* rng = nullptr) {
  ray.validate();
  NoGradGuard ng;
  auto b = render_batch<T>(std::span<const Ray>(&ray, 1), src, n, RenderMode::kLatent, rng);
  return {b.value.data(), b.depth.data()[0], b.opacity.data()[0]};
}

template <typename T, typename Source>
RayRender<T> render_color(const Ray& ray, const Source& src, int n, Pcg32* rng = nullptr,
                          float background = 0.f) {
  ray.validate();
  NoGradGuard ng;
  auto b = render_batch<T>(std::span<const Ray>(&ray, 1), src, n, RenderMode::kColor, rng,
                           background);
  return {b.value.data(), b.depth.data()[0], b.opacity.data()[0]};
}

namespace detail {

// Renders by row chunks. Pixel jitter and strata come from per-pixel RNG
// streams keyed on (seed, frame, row, col), so the output is independent of
// chunking and thread count.
template <typename T, typename Source, typename Sink>
void render_image_grid(const Camera& cam, const Source& src, RenderMode mode,
                       const RenderOptions& opt, Sink&& sink) {
  const int w = cam.width, h = cam.height;
  const int n = opt.samples_per_ray;
  const int rows_per_chunk = std::max(1, 4096 / std::max(1, w));
  const int chunks = (h + rows_per_chunk - 1) / rows_per_chunk;

  parallel_for(0, chunks, opt.threads, [&](int chunk) {
    NoGradGuard ng;
    const int row0 = chunk * rows_per_chunk;
    const int row1 = std::min(h, row0 + rows_per_chunk);
    std::vector<Ray> rays;
    rays.reserve(static_cast<size_t>(row1 - row0) * w);
    std::vector<T> ts(static_cast<size_t>(row1 - row0) * w * n);
    for (int row = row0; row < row1; ++row)
      for (int col = 0; col < w; ++col) {
        Ray ray;
        if (opt.deterministic) {
          ray = generate_ray(cam, row, col, opt.near, opt.far);
        } else {
          Pcg32 rng = pixel_rng(opt.seed, opt.frame, row, col);
          const double ju = rng.next_double(), jv = rng.next_double();
          ray = generate_ray(cam, row, col, opt.near, opt.far, ju, jv);
          auto s = sample_stratified<T>(ray, n, &rng);
          std::copy(s.begin(), s.end(),
                    ts.begin() + (static_cast<size_t>(row - row0) * w + col) * n);
        }
        rays.push_back(ray);
      }
    if (opt.deterministic) {
      for (size_t i = 0; i < rays.size(); ++i) {
        auto s = sample_stratified<T>(rays[i], n, nullptr);
        std::copy(s.begin(), s.end(), ts.begin() + i * n);
      }
    }
    auto b = render_batch_at<T>(rays, std::move(ts), src, n, mode, opt.background);
    sink(row0, row1, b);
  });
}

}  // namespace detail

// Full-resolution colour render plus expected-depth map.
template <typename T, typename Source>
std::pair<Image, DepthMap> render_rgb_image(const Camera& cam, const Source& src,
                                            const RenderOptions& opt) {
  Image img(cam.width, cam.height, 3);
  DepthMap dm(cam.width, cam.height);
  auto store = [&](int row0, int row1, const RenderBatchOut<T>& b) {
    const int w = cam.width;
    for (int r = row0; r < row1; ++r)
      for (int c = 0; c < w; ++c) {
        const size_t i = static_cast<size_t>(r - row0) * w + c;
        for (int ch = 0; ch < 3; ++ch)
          img.at(ch, r, c) = static_cast<float>(b.value.data()[i * 3 + ch]);
        dm.at(r, c) = static_cast<float>(b.depth.data()[i]);
        dm.valid[static_cast<size_t>(r) * w + c] =
            b.opacity.data()[i] >= static_cast<T>(opt.mask_threshold) ? 1 : 0;
      }
  };
  detail::render_image_grid<T>(cam, src, RenderMode::kColor, opt, store);
  return {std::move(img), std::move(dm)};
}

// Latent feature map: one ray per latent pixel, i.e. (W/8)*(H/8) rays, with
// the depth map at latent resolution.
template <typename T, typename Source>
std::pair<LatentImage, DepthMap> render_latent_image(const Camera& cam, const Source& src,
                                                     int latent_channels,
                                                     const RenderOptions& opt) {
  if (cam.width % 8 || cam.height % 8)
    throw std::invalid_argument("render_latent_image: target size must be a multiple of 8");
  const Camera lcam = cam.scaled(1.0 / 8.0);
  LatentImage li(lcam.width, lcam.height, latent_channels);
  DepthMap dm(lcam.width, lcam.height);
  auto store = [&](int row0, int row1, const RenderBatchOut<T>& b) {
    const int w = lcam.width, n = latent_channels;
    for (int r = row0; r < row1; ++r)
      for (int c = 0; c < w; ++c) {
        const size_t i = static_cast<size_t>(r - row0) * w + c;
        for (int ch = 0; ch < n; ++ch)
          li.at(ch, r, c) = static_cast<float>(b.value.data()[i * n + ch]);
        dm.at(r, c) = static_cast<float>(b.depth.data()[i]);
        dm.valid[static_cast<size_t>(r) * w + c] =
            b.opacity.data()[i] >= static_cast<T>(opt.mask_threshold) ? 1 : 0;
      }
  };
  detail::render_image_grid<T>(lcam, src, RenderMode::kLatent, opt, store);
  return {std::move(li), std::move(dm)};
}

}  // namespace lsnerf
