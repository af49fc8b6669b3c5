#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "lsnerf/pipeline.hpp"
#include "lsnerf/gradcheck.hpp"
#include "test_support.hpp"

using namespace lsnerf;
using lsnerf_test::AnalyticSource;

namespace {

// Micro configuration: 16x16 images, tiny networks, seconds-scale phases.
SceneSpec micro_scene() {
  SceneSpec s = default_scene_spec();
  s.width = s.height = 16;
  s.views = 6;
  s.test_views = 2;
  return s;
}

FieldConfig micro_field() {
  FieldConfig fc;
  fc.latent_dim = 4;
  fc.trunk_width = 16;
  fc.trunk_depth = 1;
  fc.color_hidden = 8;
  fc.latent_hidden = 8;
  fc.fourier_pos_levels = 3;
  fc.fourier_dir_levels = 1;
  fc.aabb_min = {-4, -2.5, -4};
  fc.aabb_max = {4, 3, 4};
  return fc;
}

AEConfig micro_ae() {
  AEConfig ac;
  ac.latent_channels = 4;
  ac.encoder_widths = {4, 6, 6, 8, 8};
  ac.decoder_widths = {8, 8, 6, 6, 4};
  return ac;
}

TrainConfig micro_train() {
  TrainConfig tc;
  tc.a_iterations = 12;
  tc.a_lr = 1e-3f;
  tc.a_lr_halve_every = 8;
  tc.a_patch = 16;
  tc.a_batch = 2;
  tc.b_iterations = 10;
  tc.b_rays_rgb = 24;
  tc.b_rays_depth = 12;
  tc.b_latent_patch = 2;
  tc.b_field_lr = 2e-3f;
  tc.b_lr_decay_tau = 1e4f;
  tc.b_ae_lr = 1e-4f;
  tc.b_samples = 8;
  tc.c_iterations = 8;
  tc.c_lr = 1e-4f;
  tc.c_lr_halve_every = 4;
  tc.c_render_set = 4;
  tc.eval_samples = 8;
  tc.log_every = 1;
  tc.seed = 7;
  return tc;
}

Camera axis_camera(int res, double f) {
  Camera cam;
  cam.width = cam.height = res;
  cam.fx = cam.fy = f;
  cam.cx = cam.cy = res / 2.0;
  return cam;
}

}  // namespace

TEST_CASE("preset hyperparameters") {
  const PresetBundle p = preset_paper();
  CHECK(p.train.lambda_d == 0.1f);
  CHECK(p.train.gamma == 0.7f);
  CHECK(p.train.lambda_gr == 5e-4f);
  CHECK(p.train.a_iterations == 3000);
  CHECK(p.train.b_iterations == 20000);
  CHECK(p.train.b_rays_rgb == 4096);
  CHECK(p.train.b_rays_depth == 4096);
  CHECK(p.train.b_latent_patch == 32);
  CHECK(p.train.c_iterations == 10000);
  CHECK(p.train.c_render_set == 512);
  CHECK(p.train.c_batch_real + p.train.c_batch_render == 3);
  CHECK(p.ae.encoder_widths == std::array<int, 5>{32, 128, 128, 256, 256});
  CHECK(p.ae.decoder_widths == std::array<int, 5>{256, 256, 128, 128, 32});
  CHECK(p.field.latent_dim == 32);

  const PresetBundle d = preset_desk();
  CHECK(d.train.b_iterations < p.train.b_iterations);
  CHECK(d.train.to_json().contains("lambda_d"));
}

TEST_CASE("rgb_loss values") {
  AnalyticSource<float> src;
  src.sigma_fn = [](const Vec3& p) { return p.z < -1.0 ? 1e4 : 0.0; };
  src.color_fn = [](const Vec3&) { return std::array<double, 3>{0.5, 0.5, 0.5}; };
  const Camera cam = axis_camera(4, 4);
  std::vector<TrainRay> rays;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      TrainRay tr;
      tr.ray = generate_ray(cam, r, c, 0.5, 4.0);
      tr.rgb = {0.f, 0.f, 0.f};
      rays.push_back(tr);
    }

  SECTION("constant gray against black is 0.25") {
    auto loss = rgb_loss<float>(rays, src, 64, nullptr);
    CHECK_THAT(loss.item(), Catch::Matchers::WithinAbs(0.25, 1e-4));
  }
  SECTION("exact reproduction is zero") {
    auto batch = render_batch<float>(
        [&] {
          std::vector<Ray> rs;
          for (auto& tr : rays) rs.push_back(tr.ray);
          return rs;
        }(),
        src, 64, RenderMode::kColor, nullptr);
    for (size_t i = 0; i < rays.size(); ++i)
      for (int c = 0; c < 3; ++c) rays[i].rgb[c] = batch.value.data()[i * 3 + c];
    auto loss = rgb_loss<float>(rays, src, 64, nullptr);
    CHECK(loss.item() == 0.f);
  }
}

TEST_CASE("rgb_loss trains sigma and colour but never the latent head") {
  SceneSpec spec = micro_scene();
  auto ds = generate_synthetic_scene(spec);
  Field<float> field(micro_field(), 3);
  std::vector<TrainRay> rays;
  const auto& f0 = ds.frames[0];
  for (int i = 0; i < 8; ++i) {
    TrainRay tr;
    tr.ray = generate_ray(f0.camera, i, i, ds.near, ds.far);
    for (int c = 0; c < 3; ++c) tr.rgb[c] = f0.image.at(c, i, i);
    rays.push_back(tr);
  }
  field.params().zero_grad();
  auto loss = rgb_loss<float>(rays, field, 8, nullptr);
  loss.backward();

  double head_grads = 0;
  for (size_t i = 0; i < field.latent_group_begin(); ++i) {
    const auto& t = field.params().items[i].second;
    if (!t.has_grad()) continue;
    for (float g : t.grad()) head_grads += std::abs(g);
  }
  CHECK(head_grads > 0);
  for (size_t i = field.latent_group_begin(); i < field.params().items.size(); ++i) {
    const auto& t = field.params().items[i].second;
    if (!t.has_grad()) continue;
    for (float g : t.grad()) CHECK(g == 0.f);
  }

  // Finite difference on a latent-head weight: exactly flat.
  auto& zw = field.params().items[field.latent_group_begin()].second;
  const float before = loss.item();
  zw.data()[0] += 0.5f;
  auto loss2 = rgb_loss<float>(rays, field, 8, nullptr);
  CHECK(loss2.item() == before);
}

TEST_CASE("depth_loss") {
  AnalyticSource<float> src;
  src.sigma_fn = [](const Vec3& p) { return p.z < -2.0 ? 1e4 : 0.0; };
  const Camera cam = axis_camera(4, 8);

  SECTION("matching supervision gives (near) zero") {
    std::vector<TrainRay> rays;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        TrainRay tr;
        tr.ray = generate_ray(cam, r, c, 0.5, 6.0);
        tr.has_depth = true;
        // Exact ray distance to the plane z = -2.
        const Vec3 d = cam.ray_direction(c + 0.5, r + 0.5);
        tr.depth = static_cast<float>(-2.0 / d.z);
        rays.push_back(tr);
      }
    auto loss = depth_loss<float>(rays, src, 512, nullptr);
    CHECK(loss.item() < 1e-4f);
  }
  SECTION("all-invalid batch returns 0 and bumps the counter") {
    std::vector<TrainRay> rays(3);
    for (auto& tr : rays) {
      tr.ray = generate_ray(cam, 0, 0, 0.5, 6.0);
      tr.has_depth = false;
    }
    int64_t counter = 0;
    auto loss = depth_loss<float>(rays, src, 8, nullptr, &counter);
    CHECK(loss.item() == 0.f);
    CHECK(counter == 1);
  }
}

TEST_CASE("depth supervision drives sigma to an opaque plane at the right depth") {
  // A single wall at ray depth 2; the field starts diffuse and must firm up.
  FieldConfig fc = micro_field();
  fc.aabb_min = {-2, -2, -5};
  fc.aabb_max = {2, 2, 1};
  Field<float> field(fc, 5);
  Adam<float> opt(field.params());
  const Camera cam = axis_camera(8, 16);

  Pcg32 rng(3);
  float final_loss = 1;
  for (int step = 0; step < 300; ++step) {
    std::vector<TrainRay> rays;
    for (int i = 0; i < 48; ++i) {
      const int r = static_cast<int>(rng.next_below(8));
      const int c = static_cast<int>(rng.next_below(8));
      TrainRay tr;
      tr.ray = generate_ray(cam, r, c, 0.5, 4.0);
      tr.has_depth = true;
      tr.depth = 2.0f;
      rays.push_back(tr);
    }
    opt.zero_grad();
    auto loss = depth_loss<float>(rays, field, 24, &rng);
    loss.backward();
    opt.step(3e-3f);
    final_loss = loss.item();
  }
  CHECK(final_loss < 1e-3f);
}

TEST_CASE("patch_loss") {
  SceneSpec spec = micro_scene();
  auto ds = generate_synthetic_scene(spec);
  Field<float> field(micro_field(), 4);
  Autoencoder<float> ae(micro_ae(), 4);
  const auto& frame = ds.frames[0];

  SECTION("misaligned patches are rejected") {
    CHECK_THROWS_WITH(patch_loss_rgb(frame.image, frame.camera, field, ae, 3, 0, 8, 4,
                                     ds.near, ds.far, nullptr),
                      Catch::Matchers::ContainsSubstring("aligned"));
    CHECK_NOTHROW(patch_loss_rgb(frame.image, frame.camera, field, ae, 8, 0, 8, 4,
                                 ds.near, ds.far, nullptr));
  }

  SECTION("density parameters receive exactly zero gradient; latent head a real one") {
    field.params().zero_grad();
    ae.decoder_params().zero_grad();
    auto loss = patch_loss(frame.image, frame.camera, field, ae, 0, 0, 2, 6,
                           ds.near, ds.far, nullptr);
    loss.backward();
    for (size_t i = 0; i < field.latent_group_begin(); ++i) {
      const auto& t = field.params().items[i].second;
      if (!t.has_grad()) continue;
      for (float g : t.grad()) REQUIRE(g == 0.f);
    }

    // Colour-head parameters are not even evaluated by the latent path:
    // the loss is flat under finite differences, to the last bit.
    auto& color_w = field.params().items[field.color_group_begin()].second;
    const float base = loss.item();
    const float saved = color_w.data()[0];
    color_w.data()[0] = saved + 0.25f;
    auto bumped = patch_loss(frame.image, frame.camera, field, ae, 0, 0, 2, 6,
                             ds.near, ds.far, nullptr);
    CHECK(bumped.item() == base);
    color_w.data()[0] = saved;

    // Latent-head gradient matches finite differences (frozen sampling).
    std::vector<Tensor<float>> zparams;
    for (size_t i = field.latent_group_begin(); i < field.params().items.size(); ++i)
      zparams.push_back(field.params().items[i].second);
    const double err = grad_check(
        [&] {
          return patch_loss(frame.image, frame.camera, field, ae, 0, 0, 2, 6,
                            ds.near, ds.far, nullptr);
        },
        zparams, 3e-3f);
    CHECK(err < 1e-2);
  }
}

TEST_CASE("camera triplet interpolation") {
  Camera a = axis_camera(8, 8);
  a.camera_to_world = look_at({2, 0, 0}, {0, 0, 0}, {0, 1, 0});
  Camera b = axis_camera(8, 8);
  b.camera_to_world = look_at({0, 0, 2}, {0, 0, 0}, {0, 1, 0});
  Camera c = axis_camera(8, 8);
  c.camera_to_world = look_at({0, 2, 0.1}, {0, 0, 0}, {0, 1, 0});

  SECTION("weights (1,0,0) reproduce the first camera") {
    const Camera m = interpolate_camera_triplet(a, b, c, 1, 0, 0);
    for (int i = 0; i < 16; ++i)
      CHECK_THAT(m.camera_to_world.m[i],
                 Catch::Matchers::WithinAbs(a.camera_to_world.m[i], 1e-12));
  }
  SECTION("three identical cameras reproduce that camera") {
    const Camera m = interpolate_camera_triplet(a, a, a, 1 / 3.0, 1 / 3.0, 1 / 3.0);
    for (int i = 0; i < 16; ++i)
      CHECK_THAT(m.camera_to_world.m[i],
                 Catch::Matchers::WithinAbs(a.camera_to_world.m[i], 1e-9));
  }
  SECTION("half-half between two cameras 90 degrees apart lands at 45") {
    // a looks along -x (from +x toward origin), b along -z: quaternion slerp
    // midpoint is the 45-degree yaw between them.
    const Camera m = interpolate_camera_triplet(a, b, c, 0.5, 0.5, 0.0);
    const Vec3 fwd = m.camera_to_world.transform_dir({0, 0, -1});
    const Vec3 expected = Vec3{-1, 0, -1}.normalized();
    CHECK_THAT(fwd.x, Catch::Matchers::WithinAbs(expected.x, 1e-9));
    CHECK_THAT(fwd.y, Catch::Matchers::WithinAbs(expected.y, 1e-9));
    CHECK_THAT(fwd.z, Catch::Matchers::WithinAbs(expected.z, 1e-9));
    // Midpoint of positions.
    CHECK_THAT(m.position().x, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(m.position().z, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("sampled cameras have orthonormal rotations") {
    std::vector<Camera> cams{a, b, c};
    Pcg32 rng(5);
    for (int i = 0; i < 20; ++i) {
      const Camera m = sample_interpolated_camera(cams, rng);
      CHECK(m.orthonormality_error() < 1e-9);
    }
  }
}

TEST_CASE("delta_mean is invariant to duplicated entries") {
  Autoencoder<float> ae(micro_ae(), 9);
  Pcg32 rng(10);
  std::vector<LatentImage> lats;
  std::vector<Image> imgs;
  for (int i = 0; i < 2; ++i) {
    LatentImage li(2, 2, 4);
    for (auto& v : li.values) v = static_cast<float>(rng.next_double() - 0.5);
    Image img(16, 16, 3);
    for (auto& v : img.data) v = static_cast<float>(rng.next_double());
    lats.push_back(li);
    imgs.push_back(img);
  }
  NoGradGuard ng;
  const float base = delta_mean(ae, lats, imgs).item();
  // Duplicate the whole set.
  std::vector<LatentImage> lats2 = lats;
  std::vector<Image> imgs2 = imgs;
  lats2.insert(lats2.end(), lats.begin(), lats.end());
  imgs2.insert(imgs2.end(), imgs.begin(), imgs.end());
  const float doubled = delta_mean(ae, lats2, imgs2).item();
  CHECK_THAT(doubled, Catch::Matchers::WithinRel(base, 1e-6f));
}

TEST_CASE("trainer phases run, log, and honor contracts") {
  auto ds = generate_synthetic_scene(micro_scene());
  TrainConfig tc = micro_train();
  Trainer<float> tr(ds, micro_field(), micro_ae(), tc);

  tr.run_phase_a();
  CHECK(tr.phase() == "A");
  tr.run_phase_b();
  CHECK(tr.phase() == "B");
  tr.run_phase_c();  // would throw if field parameters moved
  CHECK(tr.phase() == "C");

  bool saw_b = false;
  for (const auto& rec : tr.log())
    if (rec.phase == "B") {
      saw_b = true;
      CHECK(rec.lp_sigma_grad == 0.0);
      CHECK(rec.lp_color_grad == 0.0);
    }
  CHECK(saw_b);

  SECTION("the training log round-trips as versioned JSONL") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "lsnerf_log_test.jsonl").string();
    tr.write_log(path);
    std::ifstream is(path);
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(nlohmann::json::parse(line).at("version") == 1);
    int records = 0;
    while (std::getline(is, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("phase"));
      CHECK(j.contains("total"));
      ++records;
    }
    CHECK(records == static_cast<int>(tr.log().size()));
    fs::remove(path);
  }
}

TEST_CASE("phase A is deterministic for a fixed seed") {
  auto ds = generate_synthetic_scene(micro_scene());
  TrainConfig tc = micro_train();
  Trainer<float> t1(ds, micro_field(), micro_ae(), tc);
  Trainer<float> t2(ds, micro_field(), micro_ae(), tc);
  t1.run_phase_a();
  t2.run_phase_a();
  CHECK(t1.log().back().total == t2.log().back().total);
}

TEST_CASE("ablating the patch loss leaves the RGB branch bitwise identical") {
  auto ds = generate_synthetic_scene(micro_scene());
  TrainConfig with = micro_train();
  TrainConfig without = with;
  without.lp_weight = 0.f;

  Trainer<float> t1(ds, micro_field(), micro_ae(), with);
  Trainer<float> t2(ds, micro_field(), micro_ae(), without);
  t1.run_phase_a();
  t2.run_phase_a();
  t1.run_phase_b();
  t2.run_phase_b();

  // Trunk, sigma head, and colour head trained through identical updates.
  for (size_t i = 0; i < t1.field().latent_group_begin(); ++i) {
    const auto& p1 = t1.field().params().items[i].second;
    const auto& p2 = t2.field().params().items[i].second;
    REQUIRE(p1.data() == p2.data());
  }
  // The latent head differs (trained vs frozen).
  bool latent_differs = false;
  for (size_t i = t1.field().latent_group_begin(); i < t1.field().params().items.size(); ++i)
    latent_differs |= t1.field().params().items[i].second.data() !=
                      t2.field().params().items[i].second.data();
  CHECK(latent_differs);
}

TEST_CASE("zeroing all auxiliary weights degenerates phase B to plain RGB training") {
  auto ds = generate_synthetic_scene(micro_scene());
  TrainConfig tc = micro_train();
  tc.lambda_d = 0;
  tc.lambda_gr = 0;
  tc.lp_weight = 0;
  Trainer<float> tr(ds, micro_field(), micro_ae(), tc);
  const auto dec_before = snapshot_params(tr.ae().decoder_params());
  tr.run_phase_b();
  // Decoder and latent head untouched: only the RGB branch trains.
  CHECK(snapshot_params(tr.ae().decoder_params()) == dec_before);
  for (const auto& rec : tr.log())
    if (rec.phase == "B") {
      CHECK(rec.loss_d == 0.0);
      CHECK(rec.loss_p == 0.0);
    }
}

TEST_CASE("phase C gamma edge cases") {
  auto ds = generate_synthetic_scene(micro_scene());

  SECTION("gamma = 1 ignores the render set entirely") {
    TrainConfig tc = micro_train();
    tc.gamma = 1.0f;
    tc.c_render_set = 0;  // would fail if the render set were touched
    Trainer<float> tr(ds, micro_field(), micro_ae(), tc);
    tr.run_phase_a();
    tr.run_phase_b();
    CHECK_NOTHROW(tr.run_phase_c());
  }
  SECTION("gamma = 0 trains only against renders") {
    TrainConfig tc = micro_train();
    tc.gamma = 0.0f;
    tc.c_render_set = 3;
    Trainer<float> tr(ds, micro_field(), micro_ae(), tc);
    tr.run_phase_a();
    tr.run_phase_b();
    CHECK_NOTHROW(tr.run_phase_c());
  }
}

TEST_CASE("checkpoint resume reproduces the uninterrupted loss sequence") {
  auto ds = generate_synthetic_scene(micro_scene());
  TrainConfig full = micro_train();
  full.b_iterations = 10;

  // Uninterrupted run.
  Trainer<float> ref(ds, micro_field(), micro_ae(), full);
  ref.run_phase_a();
  ref.run_phase_b();

  // Interrupted at iteration 5.
  TrainConfig half = full;
  half.b_iterations = 5;
  Trainer<float> first(ds, micro_field(), micro_ae(), half);
  first.run_phase_a();
  first.run_phase_b();
  const Checkpoint cp = first.checkpoint();

  Trainer<float> resumed(ds, micro_field(), micro_ae(), full);
  resumed.restore(cp);
  resumed.run_phase_b();

  std::vector<double> ref_tail, res_tail;
  for (const auto& r : ref.log())
    if (r.phase == "B" && r.iter >= 5) ref_tail.push_back(r.total);
  for (const auto& r : resumed.log())
    if (r.phase == "B") res_tail.push_back(r.total);
  REQUIRE(ref_tail.size() == res_tail.size());
  for (size_t i = 0; i < ref_tail.size(); ++i) CHECK(ref_tail[i] == res_tail[i]);
}
