#pragma once

// Reference-based image metrics (MSE, PSNR), depth-based reprojection and
// the reprojective colour-consistency score, spiral evaluation paths, and
// render-time benchmarking with field-query instrumentation.

#include <chrono>
#include <cmath>
#include <limits>
#include <span>

#include <json.hpp>

#include "lsnerf/autoencoder.hpp"
#include "lsnerf/camera.hpp"
#include "lsnerf/image.hpp"
#include "lsnerf/renderer.hpp"

namespace lsnerf {

inline double mse_images(const Image& a, const Image& b) {
  if (!a.same_size(b)) throw std::invalid_argument("mse: image shape mismatch");
  double acc = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// 10 log10(peak^2 / mse); identical images return +infinity. Reports cap
// the sentinel at 99 dB (see capped_db).
inline double psnr_from_mse(double mse, double peak = 1.0) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  if (peak <= 0) throw std::invalid_argument("psnr: peak must be positive");
  return psnr_from_mse(mse_images(a, b), peak);
}

inline double capped_db(double db) { return std::min(db, 99.0); }

// ---------------------------------------------------------------------------
// Depth-based reprojection (forward splat with bilinear weights).

struct Reprojection {
  Image warped;                // normalized splat
  std::vector<float> weight;   // accumulated splat weight per target pixel
  std::vector<float> depth;    // weight-averaged reprojected ray depth
  std::vector<uint8_t> mask;   // weight above threshold
  float weight_min = 0.25f;

  bool is_masked_in(int row, int col) const {
    return mask[static_cast<size_t>(row) * warped.width + col] != 0;
  }
};

inline Reprojection reproject(const Image& src, const DepthMap& src_depth,
                              const Camera& cam_src, const Camera& cam_dst,
                              float weight_min = 0.25f) {
  if (src.width != src_depth.width || src.height != src_depth.height)
    throw std::invalid_argument("reproject: image/depth size mismatch");
  const int w = cam_dst.width, h = cam_dst.height;
  Reprojection out;
  out.warped = Image(w, h, src.channels);
  out.weight.assign(static_cast<size_t>(w) * h, 0.f);
  out.depth.assign(static_cast<size_t>(w) * h, 0.f);
  out.mask.assign(static_cast<size_t>(w) * h, 0);
  out.weight_min = weight_min;

  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < src.width; ++c) {
      if (!src_depth.is_valid(r, c)) continue;
      const double d = src_depth.at(r, c);
      const Vec3 p = cam_src.position() + cam_src.ray_direction(c + 0.5, r + 0.5) * d;
      const auto proj = cam_dst.project(p);
      if (!proj) continue;
      // Bilinear splat between target pixel centers.
      const double px = proj->u - 0.5, py = proj->v - 0.5;
      const int ix = static_cast<int>(std::floor(px));
      const int iy = static_cast<int>(std::floor(py));
      const double fx = px - ix, fy = py - iy;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {ix, ix + 1, ix, ix + 1};
      const int ys[4] = {iy, iy, iy + 1, iy + 1};
      for (int k = 0; k < 4; ++k) {
        if (xs[k] < 0 || xs[k] >= w || ys[k] < 0 || ys[k] >= h || wts[k] <= 0) continue;
        const size_t idx = static_cast<size_t>(ys[k]) * w + xs[k];
        out.weight[idx] += static_cast<float>(wts[k]);
        out.depth[idx] += static_cast<float>(wts[k] * proj->ray_depth);
        for (int ch = 0; ch < src.channels; ++ch)
          out.warped.at(ch, ys[k], xs[k]) += static_cast<float>(wts[k]) * src.at(ch, r, c);
      }
    }

  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const size_t idx = static_cast<size_t>(r) * w + c;
      if (out.weight[idx] >= weight_min) {
        out.mask[idx] = 1;
        const float inv = 1.f / out.weight[idx];
        out.depth[idx] *= inv;
        for (int ch = 0; ch < src.channels; ++ch) out.warped.at(ch, r, c) *= inv;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Reprojective colour consistency.

struct RccFrame {
  Image image;
  DepthMap depth;
  Camera camera;
};

struct RccOptions {
  bool occlusion_mask = true;   // forward-consistency depth check
  double depth_rel_tol = 0.10;  // |warped - own| <= max(abs, rel * own)
  double depth_abs_tol = 0.05;
  float weight_min = 0.25f;
};

struct RccResult {
  bool defined = false;
  double db = 0;          // +inf sentinel for perfectly consistent sequences
  double mean_mse = 0;
  double coverage = 0;    // fraction of pixels contributing, over all pairs
  int pairs_used = 0;
};

// Mean masked MSE between each frame and the depth-reprojection of its
// predecessor, across adjacent pairs; a single PSNR of that mean.
inline RccResult rcc(std::span<const RccFrame> frames, const RccOptions& opt = {}) {
  if (frames.size() < 2) throw std::invalid_argument("rcc: need at least two frames");
  RccResult res;
  double mse_sum = 0;
  size_t px_used = 0, px_total = 0;
  for (size_t i = 0; i + 1 < frames.size(); ++i) {
    const RccFrame& a = frames[i];
    const RccFrame& b = frames[i + 1];
    if (!a.image.same_size(b.image))
      throw std::invalid_argument("rcc: frame size mismatch");
    const Reprojection rp = reproject(a.image, a.depth, a.camera, b.camera, opt.weight_min);
    double acc = 0;
    size_t n = 0;
    for (int r = 0; r < b.image.height; ++r)
      for (int c = 0; c < b.image.width; ++c) {
        ++px_total;
        const size_t idx = static_cast<size_t>(r) * b.image.width + c;
        if (!rp.mask[idx]) continue;
        if (opt.occlusion_mask) {
          if (!b.depth.is_valid(r, c)) continue;
          const double own = b.depth.at(r, c);
          if (std::abs(rp.depth[idx] - own) >
              std::max(opt.depth_abs_tol, opt.depth_rel_tol * own))
            continue;
        }
        for (int ch = 0; ch < b.image.channels; ++ch) {
          const double d = static_cast<double>(rp.warped.at(ch, r, c)) -
                           static_cast<double>(b.image.at(ch, r, c));
          acc += d * d;
        }
        ++n;
      }
    if (n == 0) continue;  // pair with no overlap contributes nothing
    mse_sum += acc / (static_cast<double>(n) * b.image.channels);
    px_used += n;
    ++res.pairs_used;
  }
  if (res.pairs_used == 0) {
    res.defined = false;  // all-empty masks: undefined, reported as such
    return res;
  }
  res.defined = true;
  res.mean_mse = mse_sum / res.pairs_used;
  res.db = psnr_from_mse(res.mean_mse);
  res.coverage = px_total ? static_cast<double>(px_used) / px_total : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// Spiral evaluation path.

namespace detail {

// Point minimizing the summed squared distance to all optical axes.
inline Vec3 axes_convergence_point(std::span<const Camera> cams) {
  double a[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  double b[3] = {0, 0, 0};
  for (const Camera& c : cams) {
    const Vec3 f = c.camera_to_world.transform_dir({0, 0, -1});
    const Vec3 p = c.position();
    // I - f f^T
    const double m[9] = {1 - f.x * f.x, -f.x * f.y,    -f.x * f.z,
                         -f.y * f.x,    1 - f.y * f.y, -f.y * f.z,
                         -f.z * f.x,    -f.z * f.y,    1 - f.z * f.z};
    for (int i = 0; i < 9; ++i) a[i] += m[i];
    b[0] += m[0] * p.x + m[1] * p.y + m[2] * p.z;
    b[1] += m[3] * p.x + m[4] * p.y + m[5] * p.z;
    b[2] += m[6] * p.x + m[7] * p.y + m[8] * p.z;
  }
  // Cramer's rule; fall back to the centroid for degenerate bundles.
  const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) -
                     a[1] * (a[3] * a[8] - a[5] * a[6]) +
                     a[2] * (a[3] * a[7] - a[4] * a[6]);
  if (std::abs(det) < 1e-9) {
    Vec3 centroid{0, 0, 0};
    for (const Camera& c : cams) centroid += c.position();
    return centroid / static_cast<double>(cams.size());
  }
  auto solve = [&](int col) {
    double mm[9];
    std::copy(a, a + 9, mm);
    mm[col] = b[0];
    mm[col + 3] = b[1];
    mm[col + 6] = b[2];
    return (mm[0] * (mm[4] * mm[8] - mm[5] * mm[7]) -
            mm[1] * (mm[3] * mm[8] - mm[5] * mm[6]) +
            mm[2] * (mm[3] * mm[7] - mm[4] * mm[6])) / det;
  };
  return {solve(0), solve(1), solve(2)};
}

}  // namespace detail

// Closed spiral of poses around the mean camera; radii follow the spread of
// the input positions. frames == 1 degenerates to the mean pose.
inline std::vector<Camera> spiral_path(std::span<const Camera> cams, int frames) {
  if (cams.empty()) throw std::invalid_argument("spiral_path: need at least one camera");
  if (frames < 1) return {};

  Vec3 mean_pos{0, 0, 0};
  std::vector<Mat3> rots;
  for (const Camera& c : cams) {
    mean_pos += c.position();
    rots.push_back(c.camera_to_world.rotation());
  }
  mean_pos = mean_pos / static_cast<double>(cams.size());
  std::vector<double> wts(cams.size(), 1.0 / cams.size());
  const Mat3 mean_rot = rotation_average(rots.begin(), rots.end(), wts.data());
  const Vec3 target = detail::axes_convergence_point(cams);

  // Position spread in the mean camera frame sets the spiral radii.
  Vec3 radius{0, 0, 0};
  for (const Camera& c : cams) {
    const Vec3 d = mean_rot.transposed() * (c.position() - mean_pos);
    radius.x += d.x * d.x;
    radius.y += d.y * d.y;
    radius.z += d.z * d.z;
  }
  radius = {std::sqrt(radius.x / cams.size()), std::sqrt(radius.y / cams.size()),
            std::sqrt(radius.z / cams.size())};

  std::vector<Camera> path;
  path.reserve(frames);
  for (int k = 0; k < frames; ++k) {
    Camera c = cams[0];
    if (frames == 1) {
      c.camera_to_world = look_at(mean_pos, target, {0, 1, 0});
    } else {
      const double th = 2.0 * M_PI * k / frames;
      const Vec3 offset{radius.x * std::cos(th), radius.y * std::sin(th),
                        0.5 * radius.z * std::sin(2 * th)};
      const Vec3 eye = mean_pos + mean_rot * offset;
      c.camera_to_world = look_at(eye, target, {0, 1, 0});
    }
    path.push_back(c);
  }
  return path;
}

// ---------------------------------------------------------------------------
// Rendering-time benchmark (RGB path vs latent+decode path).

struct BenchReport {
  uint32_t version = 1;
  int frames = 0;
  int samples_per_ray = 0;
  int width = 0, height = 0;
  double rgb_seconds = 0;
  double latent_seconds = 0;   // field rendering portion of the latent path
  double decode_seconds = 0;   // decoder portion
  uint64_t rgb_queries = 0;
  uint64_t latent_queries = 0;
  double speedup = 0;          // rgb_seconds / (latent_seconds + decode_seconds)
  double decoder_time_share = 0;

  nlohmann::json to_json() const {
    return {{"version", version},
            {"frames", frames},
            {"samples_per_ray", samples_per_ray},
            {"width", width},
            {"height", height},
            {"rgb_seconds", rgb_seconds},
            {"latent_seconds", latent_seconds},
            {"decode_seconds", decode_seconds},
            {"rgb_queries", rgb_queries},
            {"latent_queries", latent_queries},
            {"speedup", speedup},
            {"decoder_time_share", decoder_time_share}};
  }
  static BenchReport from_json(const nlohmann::json& j) {
    BenchReport r;
    r.version = j.at("version");
    r.frames = j.at("frames");
    r.samples_per_ray = j.at("samples_per_ray");
    r.width = j.at("width");
    r.height = j.at("height");
    r.rgb_seconds = j.at("rgb_seconds");
    r.latent_seconds = j.at("latent_seconds");
    r.decode_seconds = j.at("decode_seconds");
    r.rgb_queries = j.at("rgb_queries");
    r.latent_queries = j.at("latent_queries");
    r.speedup = j.at("speedup");
    r.decoder_time_share = j.at("decoder_time_share");
    return r;
  }
};

// Times the full-resolution RGB path against the latent+decode path over a
// camera path with frozen models. The RGB baseline evaluates only the
// sigma/colour heads. A warm-up frame is rendered and discarded; model
// loading and file output are outside the timed region.
template <typename T>
BenchReport bench(const Field<T>& field, const Autoencoder<T>& ae,
                  std::span<const Camera> path, const RenderOptions& opt) {
  using clock = std::chrono::steady_clock;
  BenchReport rep;
  rep.frames = static_cast<int>(path.size());
  rep.samples_per_ray = opt.samples_per_ray;
  if (path.empty()) return rep;
  rep.width = path[0].width;
  rep.height = path[0].height;

  render_rgb_image<T>(path[0], field, opt);  // warm-up, discarded
  field.reset_query_count();
  auto t0 = clock::now();
  for (const Camera& cam : path) render_rgb_image<T>(cam, field, opt);
  rep.rgb_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  rep.rgb_queries = field.query_count();

  render_latent_image<T>(path[0], field, ae.latent_channels(), opt);  // warm-up
  field.reset_query_count();
  double field_s = 0, decode_s = 0;
  for (const Camera& cam : path) {
    auto t1 = clock::now();
    auto [li, dm] = render_latent_image<T>(cam, field, ae.latent_channels(), opt);
    auto t2 = clock::now();
    ae.decode_image(li);
    auto t3 = clock::now();
    field_s += std::chrono::duration<double>(t2 - t1).count();
    decode_s += std::chrono::duration<double>(t3 - t2).count();
  }
  rep.latent_seconds = field_s;
  rep.decode_seconds = decode_s;
  rep.latent_queries = field.query_count();
  const double latent_total = field_s + decode_s;
  rep.speedup = latent_total > 0 ? rep.rgb_seconds / latent_total : 0;
  rep.decoder_time_share = latent_total > 0 ? decode_s / latent_total : 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Structured metric reports: a version header line, then one JSON record
// per metric.

struct MetricReport {
  struct Record {
    std::string metric;
    double value;
    std::string frame_range;
    double coverage;  // mask coverage fraction; 1 for full-frame metrics
  };
  std::vector<Record> records;

  void add(const std::string& metric, double value, const std::string& frame_range,
           double coverage = 1.0) {
    records.push_back({metric, value, frame_range, coverage});
  }
  void dump(std::ostream& os) const {
    os << nlohmann::json{{"version", 1}, {"type", "metric_report"}}.dump() << "\n";
    for (const auto& r : records) {
      nlohmann::json j{{"metric", r.metric}, {"frame_range", r.frame_range},
                       {"coverage", r.coverage}};
      if (std::isinf(r.value))
        j["value"] = "inf";
      else
        j["value"] = r.value;
      os << j.dump() << "\n";
    }
  }
};

}  // namespace lsnerf
