#pragma once

// Three-phase fitting:
//   A: autoencoder pretraining on reconstruction MSE
//   B: joint field + decoder optimization of
//        L = L_rgb + lambda_d L_depth + lambda_gr L_distortion + L_patch
//   C: decoder distillation against real images and RGB renders from
//      cameras interpolated between training-pose triplets
//
// The patch loss trains only the latent head and the decoder: the field's
// gradient barrier keeps density and colour parameters untouched, which is
// asserted (exact zeros) every iteration.

#include <fstream>
#include <span>

#include <json.hpp>

#include "lsnerf/autoencoder.hpp"
#include "lsnerf/field.hpp"
#include "lsnerf/metrics.hpp"
#include "lsnerf/renderer.hpp"
#include "lsnerf/sceneio.hpp"

namespace lsnerf {

struct TrainConfig {
  // Loss weights.
  float lambda_d = 0.1f;
  float lambda_gr = 5e-4f;
  float gamma = 0.7f;
  float lp_weight = 1.0f;  // 0 ablates the latent/patch path entirely

  // Phase A.
  int a_iterations = 3000;
  float a_lr = 4e-4f;
  int a_lr_halve_every = 500;
  int a_patch = 512;  // RGB pixels, clamped to the image size
  int a_batch = 5;

  // Phase B.
  int b_iterations = 20000;
  int b_rays_rgb = 4096;
  int b_rays_depth = 4096;  // separate draw from the colour rays
  int b_latent_patch = 32;  // latent pixels per side
  float b_field_lr = 1e-2f;
  float b_lr_decay_tau = 1e4f;  // lr * 10^(-t/tau)
  float b_ae_lr = 1e-4f;
  int b_samples = 128;  // per-ray quadrature samples

  // Phase C.
  int c_iterations = 10000;
  float c_lr = 1e-4f;
  int c_lr_halve_every = 2500;
  int c_batch_real = 1;
  int c_batch_render = 2;
  int c_render_set = 512;  // |render set| from interpolated cameras

  int eval_samples = 128;  // quadrature samples for evaluation renders

  uint64_t seed = 7;
  int log_every = 50;
  int threads = 1;
  float background = 0.f;

  nlohmann::json to_json() const {
    return {{"lambda_d", lambda_d}, {"lambda_gr", lambda_gr}, {"gamma", gamma},
            {"lp_weight", lp_weight},
            {"a_iterations", a_iterations}, {"a_lr", a_lr},
            {"a_lr_halve_every", a_lr_halve_every}, {"a_patch", a_patch},
            {"a_batch", a_batch},
            {"b_iterations", b_iterations}, {"b_rays_rgb", b_rays_rgb},
            {"b_rays_depth", b_rays_depth}, {"b_latent_patch", b_latent_patch},
            {"b_field_lr", b_field_lr}, {"b_lr_decay_tau", b_lr_decay_tau},
            {"b_ae_lr", b_ae_lr}, {"b_samples", b_samples},
            {"c_iterations", c_iterations}, {"c_lr", c_lr},
            {"c_lr_halve_every", c_lr_halve_every}, {"c_batch_real", c_batch_real},
            {"c_batch_render", c_batch_render}, {"c_render_set", c_render_set},
            {"eval_samples", eval_samples}, {"seed", seed},
            {"log_every", log_every}, {"threads", threads},
            {"background", background}};
  }
};

struct PresetBundle {
  FieldConfig field;
  AEConfig ae;
  TrainConfig train;
};

// Appendix-scale hyperparameters (hour-scale on real hardware).
inline PresetBundle preset_paper() {
  PresetBundle p;
  p.field.latent_dim = 32;
  p.field.trunk_width = 64;
  p.field.trunk_depth = 2;
  p.field.fourier_pos_levels = 6;
  p.field.fourier_dir_levels = 2;
  p.ae.latent_channels = 32;
  p.ae.encoder_widths = {32, 128, 128, 256, 256};
  p.ae.decoder_widths = {256, 256, 128, 128, 32};
  // TrainConfig defaults above are the appendix values.
  return p;
}

// CPU-minutes configuration: smaller widths, counts, and images.
inline PresetBundle preset_desk() {
  PresetBundle p;
  p.field.latent_dim = 32;
  p.field.trunk_width = 48;
  p.field.trunk_depth = 2;
  p.field.fourier_pos_levels = 5;
  p.field.fourier_dir_levels = 1;
  p.field.color_hidden = 24;
  p.field.latent_hidden = 32;
  p.field.aabb_min = {-4, -2.5, -4};
  p.field.aabb_max = {4, 3, 4};
  p.ae.latent_channels = 32;
  p.ae.encoder_widths = {8, 16, 16, 24, 24};
  p.ae.decoder_widths = {24, 24, 16, 16, 8};

  TrainConfig& t = p.train;
  t.a_iterations = 400;
  t.a_lr = 1e-3f;
  t.a_lr_halve_every = 150;
  t.a_patch = 64;
  t.a_batch = 2;
  t.b_iterations = 2000;
  t.b_rays_rgb = 384;
  t.b_rays_depth = 192;
  t.b_latent_patch = 4;
  t.b_field_lr = 3e-3f;
  t.b_lr_decay_tau = 8000.f;
  t.b_ae_lr = 2e-4f;
  t.b_samples = 32;
  t.c_iterations = 700;
  t.c_lr = 2e-4f;
  t.c_lr_halve_every = 250;
  t.c_render_set = 48;
  t.eval_samples = 64;
  return p;
}

// ---------------------------------------------------------------------------
// Training rays and losses.

struct TrainRay {
  Ray ray;
  std::array<float, 3> rgb{};
  float depth = 0;
  bool has_depth = false;
};

// MSE between rendered and ground-truth colours over a ray batch. The
// rendered batch is returned through out_batch for reuse (distortion loss).
template <typename T, typename Source>
Tensor<T> rgb_loss(std::span<const TrainRay> rays, const Source& src, int n,
                   Pcg32* rng, float background = 0.f,
                   RenderBatchOut<T>* out_batch = nullptr) {
  std::vector<Ray> rs(rays.size());
  std::vector<T> target(rays.size() * 3);
  for (size_t i = 0; i < rays.size(); ++i) {
    rs[i] = rays[i].ray;
    for (int c = 0; c < 3; ++c) target[i * 3 + c] = static_cast<T>(rays[i].rgb[c]);
  }
  auto batch = render_batch<T>(rs, src, n, RenderMode::kColor, rng, background);
  auto loss = mse(batch.value, Tensor<T>::from({static_cast<int>(rays.size()), 3},
                                               std::move(target)));
  if (out_batch) *out_batch = std::move(batch);
  return loss;
}

// MSE between expected depth and supervision over rays that carry depth.
// Batches with no valid depth return 0 and bump empty_counter.
template <typename T, typename Source>
Tensor<T> depth_loss(std::span<const TrainRay> rays, const Source& src, int n,
                     Pcg32* rng, int64_t* empty_counter = nullptr) {
  std::vector<Ray> rs(rays.size());
  std::vector<T> target(rays.size());
  std::vector<uint8_t> valid(rays.size());
  int n_valid = 0;
  for (size_t i = 0; i < rays.size(); ++i) {
    rs[i] = rays[i].ray;
    target[i] = static_cast<T>(rays[i].depth);
    valid[i] = rays[i].has_depth ? 1 : 0;
    n_valid += valid[i];
  }
  if (n_valid == 0) {
    if (empty_counter) ++(*empty_counter);
    return Tensor<T>::scalar(T(0));
  }
  auto batch = render_batch<T>(rs, src, n, RenderMode::kDepth, rng);
  return masked_mse(batch.depth, target, valid);
}

// Distortion penalty on a rendered batch: sample positions normalized into
// [0,1] per ray before the double-sum form.
template <typename T>
Tensor<T> distortion_loss(const RenderBatchOut<T>& batch, std::span<const Ray> rays) {
  const int r_count = static_cast<int>(rays.size());
  const int n = batch.weights.dim(1);
  std::vector<T> s(batch.t_samples.size()), d(batch.t_samples.size());
  for (int r = 0; r < r_count; ++r) {
    const double range = rays[r].t_max - rays[r].t_min;
    for (int k = 0; k < n; ++k) {
      const size_t idx = static_cast<size_t>(r) * n + k;
      s[idx] = static_cast<T>((batch.t_samples[idx] - rays[r].t_min) / range);
      d[idx] = static_cast<T>(batch.deltas[idx] / range);
    }
  }
  return distortion_mean(batch.weights, s, d);
}

// MSE between an RGB patch and the decoded latent render of its footprint.
// Offsets are in latent pixels; the matching RGB offset is 8x that, so the
// patch is always aligned to the latent grid.
template <typename T>
Tensor<T> patch_loss(const Image& image, const Camera& cam, const Field<T>& field,
                     const Autoencoder<T>& decoder, int lat_row0, int lat_col0,
                     int lat_size, int n_samples, double near, double far,
                     Pcg32* rng, float background = 0.f) {
  if (cam.width % 8 || cam.height % 8)
    throw std::invalid_argument("patch_loss: camera size must be a multiple of 8");
  const Camera lcam = cam.scaled(1.0 / 8.0);
  if (lat_row0 < 0 || lat_col0 < 0 || lat_row0 + lat_size > lcam.height ||
      lat_col0 + lat_size > lcam.width)
    throw std::invalid_argument("patch_loss: patch outside the latent grid");

  std::vector<Ray> rays;
  rays.reserve(static_cast<size_t>(lat_size) * lat_size);
  for (int r = 0; r < lat_size; ++r)
    for (int c = 0; c < lat_size; ++c)
      rays.push_back(generate_ray(lcam, lat_row0 + r, lat_col0 + c, near, far));

  auto batch = render_batch<T>(rays, field, n_samples, RenderMode::kLatent, rng,
                               background);
  auto latent_patch = rows_to_chw(batch.value, lat_size, lat_size);
  auto decoded = decoder.decode(latent_patch);

  const int ps = lat_size * 8;
  std::vector<T> target(static_cast<size_t>(3) * ps * ps);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < ps; ++r)
      for (int c = 0; c < ps; ++c)
        target[(static_cast<size_t>(ch) * ps + r) * ps + c] =
            static_cast<T>(image.at(ch, lat_row0 * 8 + r, lat_col0 * 8 + c));
  return mse(decoded, Tensor<T>::from({3, ps, ps}, std::move(target)));
}

// RGB-pixel variant; offsets must land on the 8-pixel latent grid.
template <typename T>
Tensor<T> patch_loss_rgb(const Image& image, const Camera& cam, const Field<T>& field,
                         const Autoencoder<T>& decoder, int rgb_row0, int rgb_col0,
                         int rgb_size, int n_samples, double near, double far,
                         Pcg32* rng) {
  if (rgb_row0 % 8 || rgb_col0 % 8 || rgb_size % 8)
    throw std::invalid_argument("patch_loss: patch not aligned to the latent grid");
  return patch_loss(image, cam, field, decoder, rgb_row0 / 8, rgb_col0 / 8,
                    rgb_size / 8, n_samples, near, far, rng);
}

// ---------------------------------------------------------------------------
// Camera interpolation for the distillation render set.

// Deterministic core: barycentric position, iterative weighted rotation
// averaging for orientation, intrinsics copied from the first camera.
inline Camera interpolate_camera_triplet(const Camera& a, const Camera& b,
                                         const Camera& c, double w0, double w1,
                                         double w2) {
  Camera out = a;
  const Vec3 pos = a.position() * w0 + b.position() * w1 + c.position() * w2;
  const Mat3 rots[3] = {a.camera_to_world.rotation(), b.camera_to_world.rotation(),
                        c.camera_to_world.rotation()};
  const double w[3] = {w0, w1, w2};
  const Mat3 rot = rotation_average(rots, rots + 3, w);
  out.camera_to_world = Mat4::from_rt(rot, pos);
  return out;
}

// Uniform triplet, uniform barycentric weights on the simplex.
inline Camera sample_interpolated_camera(std::span<const Camera> cams, Pcg32& rng) {
  if (cams.size() < 3)
    throw std::invalid_argument("sample_interpolated_camera: need at least 3 cameras");
  uint32_t i = rng.next_below(static_cast<uint32_t>(cams.size()));
  uint32_t j = rng.next_below(static_cast<uint32_t>(cams.size()));
  while (j == i) j = rng.next_below(static_cast<uint32_t>(cams.size()));
  uint32_t k = rng.next_below(static_cast<uint32_t>(cams.size()));
  while (k == i || k == j) k = rng.next_below(static_cast<uint32_t>(cams.size()));
  double u = rng.next_double(), v = rng.next_double();
  if (u > v) std::swap(u, v);
  return interpolate_camera_triplet(cams[i], cams[j], cams[k], u, v - u, 1.0 - v);
}

// Full-set mean of MSE(image, decode(latent)): the delta(S) of the
// distillation objective.
template <typename T>
Tensor<T> delta_mean(const Autoencoder<T>& decoder,
                     std::span<const LatentImage> latents,
                     std::span<const Image> images) {
  if (latents.size() != images.size() || latents.empty())
    throw std::invalid_argument("delta_mean: need matching non-empty sets");
  Tensor<T> acc;
  for (size_t i = 0; i < latents.size(); ++i) {
    std::vector<T> lv(latents[i].values.begin(), latents[i].values.end());
    auto lt = Tensor<T>::from({latents[i].channels, latents[i].height, latents[i].width},
                              std::move(lv));
    auto loss = mse(decoder.decode(lt), image_tensor<T>(images[i]));
    acc = acc.defined() ? add(acc, loss) : loss;
  }
  return scale(acc, T(1) / static_cast<T>(latents.size()));
}

// ---------------------------------------------------------------------------
// Trainer.

struct LogRecord {
  std::string phase;
  int64_t iter = 0;
  double loss_r = 0, loss_d = 0, loss_gr = 0, loss_p = 0, total = 0;
  double lr_field = 0, lr_ae = 0;
  double wall_s = 0;
  double lp_sigma_grad = 0, lp_color_grad = 0;  // must be exactly 0
  int64_t depth_empty_batches = 0;

  nlohmann::json to_json() const {
    return {{"phase", phase}, {"iter", iter}, {"loss_r", loss_r}, {"loss_d", loss_d},
            {"loss_gr", loss_gr}, {"loss_p", loss_p}, {"total", total},
            {"lr_field", lr_field}, {"lr_ae", lr_ae}, {"wall_s", wall_s},
            {"lp_sigma_grad", lp_sigma_grad}, {"lp_color_grad", lp_color_grad},
            {"depth_empty_batches", depth_empty_batches}};
  }
};

template <typename T = float>
class Trainer {
 public:
  Trainer(const PosedDataset& ds, const FieldConfig& fc, const AEConfig& ac,
          const TrainConfig& tc, std::string out_dir = "")
      : ds_(&ds),
        tc_(tc),
        field_(fc, tc.seed),
        ae_(ac, tc.seed + 1),
        field_opt_(field_.params()),
        enc_opt_(ae_.encoder_params()),
        dec_opt_(ae_.decoder_params()),
        rng_rays_(tc.seed, 11),
        rng_patch_(tc.seed, 12),
        rng_cameras_(tc.seed, 13),
        out_dir_(std::move(out_dir)) {
    train_idx_ = ds_->split_indices("train");
    if (train_idx_.empty()) throw std::invalid_argument("trainer: dataset has no train frames");
  }

  Field<T>& field() { return field_; }
  Autoencoder<T>& ae() { return ae_; }
  const std::vector<LogRecord>& log() const { return log_; }
  const std::string& phase() const { return phase_; }
  int64_t iteration() const { return iter_; }

  // --- Phase A: autoencoder reconstruction pretraining -----------------
  void run_phase_a() {
    if (phase_rank(phase_) > 1) return;  // already past A
    const auto t0 = std::chrono::steady_clock::now();
    if (phase_ != "A") iter_ = 0;
    phase_ = "A";
    for (int64_t t = iter_; t < tc_.a_iterations; ++t) {
      iter_ = t;
      const float lr = tc_.a_lr * std::pow(0.5f, static_cast<float>(t / tc_.a_lr_halve_every));
      enc_opt_.zero_grad();
      dec_opt_.zero_grad();
      Tensor<T> loss;
      for (int b = 0; b < tc_.a_batch; ++b) {
        const auto& frame = ds_->frames[pick_train_frame()];
        auto patch = sample_patch_tensor(frame.image);
        auto l = mse(ae_.reconstruct(patch), patch);
        loss = loss.defined() ? add(loss, l) : l;
      }
      loss = scale(loss, T(1) / tc_.a_batch);
      loss.backward();
      enc_opt_.step(lr);
      dec_opt_.step(lr);
      if (t % tc_.log_every == 0 || t + 1 == tc_.a_iterations) {
        LogRecord rec;
        rec.phase = "A";
        rec.iter = t;
        rec.total = loss.item();
        rec.lr_ae = lr;
        rec.wall_s = seconds_since(t0);
        push_log(rec);
      }
    }
    phase_ = "A";
    iter_ = tc_.a_iterations;
  }

  // --- Phase B: joint field + decoder optimization ----------------------
  void run_phase_b() {
    if (phase_rank(phase_) > 2) return;
    const auto t0 = std::chrono::steady_clock::now();
    if (phase_ != "B") iter_ = 0;
    phase_ = "B";
    for (int64_t t = iter_; t < tc_.b_iterations; ++t) {
      iter_ = t;
      const float lr_field =
          tc_.b_field_lr *
          std::pow(10.f, -static_cast<float>(t) / tc_.b_lr_decay_tau);

      field_.params().zero_grad();
      ae_.decoder_params().zero_grad();

      // Patch loss first: backward it alone, then assert the gradient
      // barrier (density/colour parameter gradients exactly zero).
      Tensor<T> lp;
      double lp_sigma_grad = 0, lp_color_grad = 0;
      if (tc_.lp_weight > 0) {
        const auto& frame = ds_->frames[pick_train_frame()];
        const Camera& cam = frame.camera;
        const int lsize = std::min(tc_.b_latent_patch, std::min(cam.width, cam.height) / 8);
        const int lr0 = static_cast<int>(rng_patch_.next_below(cam.height / 8 - lsize + 1));
        const int lc0 = static_cast<int>(rng_patch_.next_below(cam.width / 8 - lsize + 1));
        lp = patch_loss(frame.image, cam, field_, ae_, lr0, lc0, lsize, tc_.b_samples,
                        ds_->near, ds_->far, &rng_patch_, tc_.background);
        if (tc_.lp_weight != 1.0f) lp = scale(lp, static_cast<T>(tc_.lp_weight));
        lp.backward();
        for (size_t i = 0; i < field_.latent_group_begin(); ++i) {
          const auto& p = field_.params().items[i].second;
          if (!p.has_grad()) continue;
          double mx = 0;
          for (T g : p.grad()) mx = std::max(mx, std::abs(static_cast<double>(g)));
          if (i < field_.color_group_begin())
            lp_sigma_grad = std::max(lp_sigma_grad, mx);
          else
            lp_color_grad = std::max(lp_color_grad, mx);
        }
        if (lp_sigma_grad != 0.0 || lp_color_grad != 0.0)
          throw std::logic_error("phase B: patch loss leaked gradient into the field");
      }

      // Colour rays (+ distortion on the same batch). Zero-weighted terms
      // are skipped entirely, so their ray draws and compute disappear and
      // an ablated run follows the same RNG stream as a plain-RGB run.
      auto rays_rgb = sample_train_rays(tc_.b_rays_rgb, false);
      RenderBatchOut<T> batch;
      auto lr_loss = rgb_loss<T>(rays_rgb, field_, tc_.b_samples, &rng_rays_,
                                 tc_.background, &batch);
      auto rest = lr_loss;
      Tensor<T> lgr, ld;
      if (tc_.lambda_gr > 0) {
        std::vector<Ray> raw_rays(rays_rgb.size());
        for (size_t i = 0; i < rays_rgb.size(); ++i) raw_rays[i] = rays_rgb[i].ray;
        lgr = distortion_loss(batch, raw_rays);
        rest = add(rest, scale(lgr, static_cast<T>(tc_.lambda_gr)));
      }
      if (tc_.lambda_d > 0) {
        auto rays_d = sample_train_rays(tc_.b_rays_depth, true);
        ld = depth_loss<T>(rays_d, field_, tc_.b_samples, &rng_rays_,
                           &depth_empty_batches_);
        rest = add(rest, scale(ld, static_cast<T>(tc_.lambda_d)));
      }
      rest.backward();

      const double total = rest.item() + (lp.defined() ? lp.item() : 0.0);
      if (!std::isfinite(total)) abort_diverged("B", t);

      field_opt_.step(lr_field);
      dec_opt_.step(tc_.b_ae_lr);

      if (t % tc_.log_every == 0 || t + 1 == tc_.b_iterations) {
        LogRecord rec;
        rec.phase = "B";
        rec.iter = t;
        rec.loss_r = lr_loss.item();
        rec.loss_d = ld.defined() ? ld.item() : 0.0;
        rec.loss_gr = lgr.defined() ? lgr.item() : 0.0;
        rec.loss_p = lp.defined() ? lp.item() : 0.0;
        rec.total = total;
        rec.lr_field = lr_field;
        rec.lr_ae = tc_.b_ae_lr;
        rec.wall_s = seconds_since(t0);
        rec.lp_sigma_grad = lp_sigma_grad;
        rec.lp_color_grad = lp_color_grad;
        rec.depth_empty_batches = depth_empty_batches_;
        push_log(rec);
      }
    }
    phase_ = "B";
    iter_ = tc_.b_iterations;
  }

  // --- Phase C: decoder distillation ------------------------------------
  void run_phase_c() {
    if (phase_ == "C" && iter_ >= tc_.c_iterations) return;
    const auto t0 = std::chrono::steady_clock::now();
    if (phase_ != "C") iter_ = 0;
    phase_ = "C";

    // The render set is rebuilt deterministically from a fixed stream, so a
    // mid-phase resume sees the identical set.
    build_distillation_sets();
    const uint64_t field_params_sum = field_checksum();

    for (int64_t t = iter_; t < tc_.c_iterations; ++t) {
      iter_ = t;
      const float lr = tc_.c_lr * std::pow(0.5f, static_cast<float>(t / tc_.c_lr_halve_every));
      dec_opt_.zero_grad();

      Tensor<T> loss;
      if (tc_.gamma > 0) {
        Tensor<T> real;
        for (int b = 0; b < tc_.c_batch_real; ++b) {
          const uint32_t pick = rng_cameras_.next_below(static_cast<uint32_t>(real_latents_.size()));
          auto l = decode_mse(real_latents_[pick], real_images_[pick]);
          real = real.defined() ? add(real, l) : l;
        }
        loss = scale(real, static_cast<T>(tc_.gamma / tc_.c_batch_real));
      }
      if (tc_.gamma < 1) {
        Tensor<T> rend;
        for (int b = 0; b < tc_.c_batch_render; ++b) {
          const uint32_t pick = rng_cameras_.next_below(static_cast<uint32_t>(render_latents_.size()));
          auto l = decode_mse(render_latents_[pick], render_images_[pick]);
          rend = rend.defined() ? add(rend, l) : l;
        }
        rend = scale(rend, static_cast<T>((1.0f - tc_.gamma) / tc_.c_batch_render));
        loss = loss.defined() ? add(loss, rend) : rend;
      }
      loss.backward();
      dec_opt_.step(lr);

      if (t % tc_.log_every == 0 || t + 1 == tc_.c_iterations) {
        LogRecord rec;
        rec.phase = "C";
        rec.iter = t;
        rec.total = loss.item();
        rec.lr_ae = lr;
        rec.wall_s = seconds_since(t0);
        push_log(rec);
      }
    }
    if (field_checksum() != field_params_sum)
      throw std::logic_error("phase C modified field parameters");
    phase_ = "C";
    iter_ = tc_.c_iterations;
  }

  // --- Evaluation --------------------------------------------------------
  double eval_rgb_psnr(const std::string& split) const {
    return eval_psnr(split, false);
  }
  double eval_decoded_psnr(const std::string& split) const {
    return eval_psnr(split, true);
  }

  Image render_decoded(const Camera& cam) const {
    auto [li, dm] = render_latent_image<T>(cam, field_, ae_.latent_channels(),
                                           render_options());
    return ae_.decode_image(li);
  }

  RenderOptions render_options() const {
    RenderOptions opt;
    opt.near = ds_->near;
    opt.far = ds_->far;
    opt.samples_per_ray = tc_.eval_samples;
    opt.deterministic = true;
    opt.background = tc_.background;
    opt.threads = tc_.threads;
    return opt;
  }

  // --- Checkpointing -------------------------------------------------------
  Checkpoint checkpoint() const {
    Checkpoint cp;
    cp.phase = phase_;
    cp.iteration = iter_;
    cp.field_config = field_.config();
    cp.ae_config = ae_.config();
    cp.field_params = snapshot_params(field_.params());
    cp.encoder_params = snapshot_params(ae_.encoder_params());
    cp.decoder_params = snapshot_params(ae_.decoder_params());
    cp.field_opt = snapshot_optim(field_opt_);
    cp.encoder_opt = snapshot_optim(enc_opt_);
    cp.decoder_opt = snapshot_optim(dec_opt_);
    cp.rng_streams = {rng_rays_.state(), rng_rays_.inc(), rng_patch_.state(),
                      rng_patch_.inc(), rng_cameras_.state(), rng_cameras_.inc()};
    return cp;
  }

  void restore(const Checkpoint& cp) {
    phase_ = cp.phase;
    iter_ = cp.iteration;
    restore_params(field_.params(), cp.field_params);
    restore_params(ae_.encoder_params(), cp.encoder_params);
    restore_params(ae_.decoder_params(), cp.decoder_params);
    restore_optim(field_opt_, cp.field_opt);
    restore_optim(enc_opt_, cp.encoder_opt);
    restore_optim(dec_opt_, cp.decoder_opt);
    rng_rays_.set_state(cp.rng_streams[0], cp.rng_streams[1]);
    rng_patch_.set_state(cp.rng_streams[2], cp.rng_streams[3]);
    rng_cameras_.set_state(cp.rng_streams[4], cp.rng_streams[5]);
  }

  void write_log(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write log: " + path);
    os << nlohmann::json{{"version", 1}, {"type", "training_log"}}.dump() << "\n";
    for (const auto& rec : log_) os << rec.to_json().dump() << "\n";
  }

 private:
  static int phase_rank(const std::string& p) {
    if (p == "init") return 0;
    if (p == "A") return 1;
    if (p == "B") return 2;
    return 3;
  }
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  int pick_train_frame() {
    return train_idx_[rng_patch_.next_below(static_cast<uint32_t>(train_idx_.size()))];
  }

  Tensor<T> sample_patch_tensor(const Image& img) {
    int ps = std::min({tc_.a_patch, img.width, img.height});
    ps = std::max(8, (ps / 8) * 8);
    const int r0 = static_cast<int>(rng_patch_.next_below(img.height - ps + 1));
    const int c0 = static_cast<int>(rng_patch_.next_below(img.width - ps + 1));
    std::vector<T> v(static_cast<size_t>(3) * ps * ps);
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < ps; ++r)
        for (int c = 0; c < ps; ++c)
          v[(static_cast<size_t>(ch) * ps + r) * ps + c] =
              static_cast<T>(img.at(ch, r0 + r, c0 + c));
    return Tensor<T>::from({3, ps, ps}, std::move(v));
  }

  std::vector<TrainRay> sample_train_rays(int count, bool need_depth) {
    std::vector<TrainRay> rays;
    rays.reserve(count);
    int guard = 0;
    while (static_cast<int>(rays.size()) < count) {
      const auto& frame = ds_->frames[train_idx_[rng_rays_.next_below(
          static_cast<uint32_t>(train_idx_.size()))]];
      const int row = static_cast<int>(rng_rays_.next_below(frame.camera.height));
      const int col = static_cast<int>(rng_rays_.next_below(frame.camera.width));
      TrainRay tr;
      tr.has_depth = frame.depth && frame.depth->is_valid(row, col);
      if (need_depth && !tr.has_depth && ++guard < count * 100) continue;
      tr.ray = generate_ray(frame.camera, row, col, ds_->near, ds_->far);
      for (int c = 0; c < 3; ++c) tr.rgb[c] = frame.image.at(c, row, col);
      if (tr.has_depth) tr.depth = frame.depth->at(row, col);
      rays.push_back(tr);
    }
    return rays;
  }

  void build_distillation_sets() {
    NoGradGuard ng;
    RenderOptions opt = render_options();
    opt.samples_per_ray = tc_.b_samples;
    real_latents_.clear();
    real_images_.clear();
    render_latents_.clear();
    render_images_.clear();
    for (int idx : train_idx_) {
      const auto& f = ds_->frames[idx];
      auto [li, dm] = render_latent_image<T>(f.camera, field_, ae_.latent_channels(), opt);
      real_latents_.push_back(std::move(li));
      real_images_.push_back(f.image);
    }
    if (tc_.gamma >= 1.0f) return;  // render set unused
    std::vector<Camera> train_cams;
    for (int idx : train_idx_) train_cams.push_back(ds_->frames[idx].camera);
    Pcg32 set_rng(tc_.seed, 0xC0);  // fixed stream: the set is resume-stable
    for (int i = 0; i < tc_.c_render_set; ++i) {
      const Camera cam = sample_interpolated_camera(train_cams, set_rng);
      auto [img, dm] = render_rgb_image<T>(cam, field_, opt);
      auto [li, ldm] = render_latent_image<T>(cam, field_, ae_.latent_channels(), opt);
      render_images_.push_back(std::move(img));
      render_latents_.push_back(std::move(li));
    }
  }

  Tensor<T> decode_mse(const LatentImage& li, const Image& img) {
    std::vector<T> lv(li.values.begin(), li.values.end());
    auto lt = Tensor<T>::from({li.channels, li.height, li.width}, std::move(lv));
    return mse(ae_.decode(lt), image_tensor<T>(img));
  }

  double eval_psnr(const std::string& split, bool decoded) const {
    NoGradGuard ng;
    const auto idx = ds_->split_indices(split);
    if (idx.empty()) throw std::invalid_argument("eval: no frames in split " + split);
    double acc = 0;
    for (int i : idx) {
      const auto& f = ds_->frames[i];
      Image rendered;
      if (decoded) {
        rendered = render_decoded(f.camera);
      } else {
        auto [img, dm] = render_rgb_image<T>(f.camera, field_, render_options());
        rendered = std::move(img);
      }
      acc += capped_db(psnr(rendered, f.image));
    }
    return acc / idx.size();
  }

  uint64_t field_checksum() const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : field_.params().items)
      for (T v : t.data()) {
        uint32_t bits;
        static_assert(sizeof(T) == 4, "checksum assumes 32-bit scalars");
        std::memcpy(&bits, &v, 4);
        h = (h ^ bits) * 1099511628211ULL;
      }
    return h;
  }

  [[noreturn]] void abort_diverged(const std::string& phase, int64_t t) {
    std::string snap;
    if (!out_dir_.empty()) {
      snap = out_dir_ + "/diverged.lsnf";
      save_checkpoint(snap, checkpoint());
    }
    throw std::runtime_error("phase " + phase + " diverged (non-finite loss) at iteration " +
                             std::to_string(t) +
                             (snap.empty() ? "" : "; snapshot written to " + snap));
  }

  void push_log(const LogRecord& rec) { log_.push_back(rec); }

  const PosedDataset* ds_;
  TrainConfig tc_;
  Field<T> field_;
  Autoencoder<T> ae_;
  Adam<T> field_opt_, enc_opt_, dec_opt_;
  Pcg32 rng_rays_, rng_patch_, rng_cameras_;
  std::string out_dir_;
  std::vector<int> train_idx_;
  std::string phase_ = "init";
  int64_t iter_ = 0;
  int64_t depth_empty_batches_ = 0;
  std::vector<LogRecord> log_;
  std::vector<LatentImage> real_latents_, render_latents_;
  std::vector<Image> real_images_, render_images_;
};

}  // namespace lsnerf
