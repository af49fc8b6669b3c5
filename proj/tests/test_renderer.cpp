#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "lsnerf/renderer.hpp"
#include "test_support.hpp"

using namespace lsnerf;
using lsnerf_test::AnalyticSource;

namespace {

Ray x_ray(double tmin = 0.0, double tmax = 1.0) {
  return Ray{{0, 0, 0}, {1, 0, 0}, tmin, tmax};
}

// Dense Riemann evaluation of the rendering integral
//   V = int T(t) sigma(t) f(t) dt, T(t) = exp(-int_0^t sigma)
// via per-step alpha compositing at `steps` points.
std::vector<double> dense_quadrature(const Ray& ray,
                                     const std::function<double(const Vec3&)>& sigma,
                                     const std::function<std::vector<double>(const Vec3&)>& f,
                                     int dim, int steps) {
  std::vector<double> acc(dim, 0.0);
  const double dt = (ray.t_max - ray.t_min) / steps;
  double trans = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double t = ray.t_min + (i + 0.5) * dt;
    const double s = sigma(ray.at(t));
    const double a = 1.0 - std::exp(-s * dt);
    const auto v = f(ray.at(t));
    for (int c = 0; c < dim; ++c) acc[c] += trans * a * v[c];
    trans *= 1.0 - a;
  }
  return acc;
}

Camera simple_camera(int w, int h, double f = 64) {
  Camera c;
  c.width = w;
  c.height = h;
  c.fx = c.fy = f;
  c.cx = w / 2.0;
  c.cy = h / 2.0;
  return c;
}

}  // namespace

TEST_CASE("generate_ray conventions") {
  const Camera cam = simple_camera(8, 8, 32);

  SECTION("principal-point pixel looks down camera -z") {
    // cx = cy = 4.0 is the center of pixel (3,3) + 0.5 offsets... pick the
    // continuous principal point via jitter 0 on pixel (4,4).
    const Ray r = generate_ray(cam, 4, 4, 0.1, 5.0, 0.0, 0.0);
    CHECK_THAT(r.direction.x, Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(r.direction.y, Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(r.direction.z, Catch::Matchers::WithinAbs(-1.0, 1e-12));
  }
  SECTION("identity pose puts origins at the world origin") {
    const Ray r = generate_ray(cam, 2, 7, 0.1, 5.0);
    CHECK(r.origin.norm() == 0.0);
  }
  SECTION("project(point_at(d)) round-trips to the pixel") {
    Camera cam2 = simple_camera(16, 12, 40);
    cam2.camera_to_world = look_at({1, 2, 3}, {0, 0, 0}, {0, 1, 0});
    Pcg32 rng(5);
    for (int i = 0; i < 20; ++i) {
      const int row = static_cast<int>(rng.next_below(12));
      const int col = static_cast<int>(rng.next_below(16));
      const double d = 0.5 + rng.next_double() * 4.0;
      const Ray r = generate_ray(cam2, row, col, 0.1, 8.0);
      const auto pr = cam2.project(r.at(d));
      REQUIRE(pr.has_value());
      CHECK_THAT(pr->u, Catch::Matchers::WithinAbs(col + 0.5, 1e-8));
      CHECK_THAT(pr->v, Catch::Matchers::WithinAbs(row + 0.5, 1e-8));
      CHECK_THAT(pr->ray_depth, Catch::Matchers::WithinAbs(d, 1e-9));
    }
  }
  SECTION("out-of-bounds pixel is rejected") {
    CHECK_THROWS_AS(generate_ray(cam, 8, 0, 0.1, 5.0), std::invalid_argument);
  }
}

TEST_CASE("stratified sampling") {
  SECTION("deterministic midpoints, N=2 over [0,1]") {
    auto t = sample_stratified<double>(x_ray(), 2, nullptr);
    CHECK(t == std::vector<double>{0.25, 0.75});
  }
  SECTION("samples stay inside their strata") {
    Pcg32 rng(3);
    const int n = 16;
    auto t = sample_stratified<double>(x_ray(0.5, 2.5), n, &rng);
    const double step = 2.0 / n;
    for (int k = 0; k < n; ++k) {
      CHECK(t[k] >= 0.5 + k * step);
      CHECK(t[k] <= 0.5 + (k + 1) * step);
    }
  }
  SECTION("empirical mean over 1e5 draws is the interval midpoint") {
    Pcg32 rng(17);
    const int draws = 100000, n = 4;
    double acc = 0;
    for (int i = 0; i < draws; ++i) {
      auto t = sample_stratified<double>(x_ray(1.0, 3.0), n, &rng);
      for (double v : t) acc += v;
    }
    const double mean = acc / (draws * n);
    // Each sample is uniform in a stratum of width 0.5; the mean of the
    // per-draw average has std = 0.5/sqrt(12)/sqrt(draws*n).
    const double sigma3 = 3.0 * 0.5 / std::sqrt(12.0) / std::sqrt(double(draws) * n);
    CHECK_THAT(mean, Catch::Matchers::WithinAbs(2.0, sigma3));
  }
}

TEST_CASE("transmittance slab cross-check against 1e4-point quadrature") {
  // Homogeneous sigma=2 over a 0.5 slab: closed form 1 - e^{-1}.
  auto sig = [](const Vec3&) { return 2.0; };
  auto one = [](const Vec3&) { return std::vector<double>{1.0}; };
  const auto q = dense_quadrature(x_ray(0.0, 0.5), sig, one, 1, 10000);
  CHECK_THAT(q[0], Catch::Matchers::WithinAbs(1.0 - std::exp(-1.0), 1e-6));
}

TEST_CASE("render_feature") {
  AnalyticSource<double> src;
  src.n = 2;

  SECTION("zero density renders the zero vector with zero opacity") {
    src.sigma_fn = [](const Vec3&) { return 0.0; };
    src.latent_fn = [](const Vec3&) { return std::vector<double>{3.0, -1.0}; };
    auto r = render_feature<double>(x_ray(), src, 32);
    CHECK(r.value == std::vector<double>{0.0, 0.0});
    CHECK(r.opacity == 0.0);
  }
  SECTION("opaque constant-z medium converges to z0") {
    src.sigma_fn = [](const Vec3&) { return 500.0; };
    src.latent_fn = [](const Vec3&) { return std::vector<double>{0.7, -0.2}; };
    auto r = render_feature<double>(x_ray(), src, 64);
    CHECK_THAT(r.value[0], Catch::Matchers::WithinAbs(0.7, 1e-9));
    CHECK_THAT(r.value[1], Catch::Matchers::WithinAbs(-0.2, 1e-9));
    CHECK_THAT(r.opacity, Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
  SECTION("piecewise-constant profile matches dense quadrature within 1e-4 at N=512") {
    auto step8 = [](double x) { return std::floor(std::min(std::max(x, 0.0), 0.999) * 8); };
    src.sigma_fn = [&](const Vec3& p) { return 0.5 + 0.4 * step8(p.x); };
    src.latent_fn = [&](const Vec3& p) {
      const double s = step8(p.x);
      return std::vector<double>{0.1 * s, 1.0 - 0.1 * s};
    };
    auto r = render_feature<double>(x_ray(), src, 512);
    const auto q = dense_quadrature(x_ray(), src.sigma_fn, src.latent_fn, 2, 40000);
    CHECK_THAT(r.value[0], Catch::Matchers::WithinAbs(q[0], 1e-4));
    CHECK_THAT(r.value[1], Catch::Matchers::WithinAbs(q[1], 1e-4));
  }
}

TEST_CASE("render_color mirrors render_feature") {
  AnalyticSource<double> src;

  SECTION("zero density renders black with zero opacity") {
    src.sigma_fn = [](const Vec3&) { return 0.0; };
    auto r = render_color<double>(x_ray(), src, 32);
    CHECK(r.value == std::vector<double>{0.0, 0.0, 0.0});
    CHECK(r.opacity == 0.0);
  }
  SECTION("opaque constant-colour surface renders that colour") {
    src.sigma_fn = [](const Vec3& p) { return p.x > 0.4 ? 600.0 : 0.0; };
    src.color_fn = [](const Vec3&) { return std::array<double, 3>{0.2, 0.5, 0.9}; };
    auto r = render_color<double>(x_ray(), src, 128);
    CHECK_THAT(r.value[0], Catch::Matchers::WithinAbs(0.2, 1e-6));
    CHECK_THAT(r.value[1], Catch::Matchers::WithinAbs(0.5, 1e-6));
    CHECK_THAT(r.value[2], Catch::Matchers::WithinAbs(0.9, 1e-6));
  }
  SECTION("smooth profile matches dense quadrature within 1e-4 at N=512") {
    src.sigma_fn = [](const Vec3& p) { return 1.0 + 0.8 * std::sin(3 * p.x); };
    src.color_fn = [](const Vec3& p) {
      const double v = 0.5 + 0.3 * std::cos(2 * p.x);
      return std::array<double, 3>{v, v * 0.5, 1 - v};
    };
    auto colorv = [&](const Vec3& p) {
      const auto c = src.color_fn(p);
      return std::vector<double>{c[0], c[1], c[2]};
    };
    auto r = render_color<double>(x_ray(), src, 512);
    const auto q = dense_quadrature(x_ray(), src.sigma_fn, colorv, 3, 40000);
    for (int c = 0; c < 3; ++c)
      CHECK_THAT(r.value[c], Catch::Matchers::WithinAbs(q[c], 1e-4));
  }
}

TEST_CASE("quadrature error decreases monotonically in N for smooth media") {
  AnalyticSource<double> src;
  src.sigma_fn = [](const Vec3& p) { return 1.2 + 0.9 * std::sin(4 * p.x + 0.3); };
  src.n = 1;
  src.latent_fn = [](const Vec3& p) {
    return std::vector<double>{0.4 + 0.35 * std::cos(3 * p.x)};
  };
  const auto q = dense_quadrature(x_ray(), src.sigma_fn, src.latent_fn, 1, 200000);
  double prev = 1e9;
  for (int n : {16, 64, 256, 512}) {
    auto r = render_feature<double>(x_ray(), src, n);
    const double err = std::abs(r.value[0] - q[0]);
    CHECK(err < prev);
    prev = err;
  }
  CHECK(prev < 1e-4);
}

TEST_CASE("weight sums lie in [0,1] for random media and rays") {
  AnalyticSource<float> src;
  src.n = 1;
  Pcg32 rng(23);
  src.sigma_fn = [&](const Vec3& p) {
    return std::abs(std::sin(p.x * 13.7) * 3.0 + std::cos(p.y * 7.1));
  };
  src.latent_fn = [](const Vec3&) { return std::vector<double>{1.0}; };
  for (int i = 0; i < 200; ++i) {
    Ray ray;
    ray.origin = {rng.next_double() * 2 - 1, rng.next_double() * 2 - 1, rng.next_double() * 2 - 1};
    ray.direction = Vec3{rng.next_double() - 0.5, rng.next_double() - 0.5,
                         rng.next_double() - 0.5}.normalized();
    ray.t_min = 0.01 + rng.next_double();
    ray.t_max = ray.t_min + 0.5 + rng.next_double() * 3;
    auto b = render_batch<float>(std::span<const Ray>(&ray, 1), src, 24,
                                 RenderMode::kLatent, &rng);
    double s = 0;
    for (float w : b.weights.data()) {
      CHECK(w >= 0.f);
      s += w;
    }
    CHECK(s >= 0.0);
    CHECK(s <= 1.0 + 1e-6);
  }
}

TEST_CASE("colour and latent paths share identical weights") {
  AnalyticSource<double> src;
  src.sigma_fn = [](const Vec3& p) { return 0.5 + std::abs(p.x); };
  src.color_fn = [](const Vec3&) { return std::array<double, 3>{0.1, 0.2, 0.3}; };
  src.latent_fn = [](const Vec3&) { return std::vector<double>{1.0, 2.0}; };
  const Ray ray = x_ray(0.1, 2.0);
  auto bc = render_batch<double>(std::span<const Ray>(&ray, 1), src, 48,
                                 RenderMode::kColor, nullptr);
  auto bl = render_batch<double>(std::span<const Ray>(&ray, 1), src, 48,
                                 RenderMode::kLatent, nullptr);
  CHECK(bc.weights.data() == bl.weights.data());  // bitwise
}

TEST_CASE("latent image rendering") {
  AnalyticSource<float> src;
  src.n = 3;
  src.sigma_fn = [](const Vec3&) { return 0.0; };
  src.latent_fn = [](const Vec3&) { return std::vector<double>{0, 0, 0}; };

  RenderOptions opt;
  opt.near = 0.5;
  opt.far = 3.0;
  opt.samples_per_ray = 4;

  SECTION("512x512 target yields a 64x64 latent map") {
    Camera cam = simple_camera(512, 512, 256);
    cam.camera_to_world = look_at({0, 0, 4}, {0, 0, 0}, {0, 1, 0});
    auto [li, dm] = render_latent_image<float>(cam, src, 3, opt);
    CHECK(li.width == 64);
    CHECK(li.height == 64);
    CHECK(li.channels == 3);
    CHECK(dm.width == 64);
  }
  SECTION("field queries: latent render = RGB render / 64") {
    Camera cam = simple_camera(128, 128, 64);
    cam.camera_to_world = look_at({0, 0, 4}, {0, 0, 0}, {0, 1, 0});
    src.queries = 0;
    render_latent_image<float>(cam, src, 3, opt);
    const uint64_t latent_q = src.queries;
    src.queries = 0;
    render_rgb_image<float>(cam, src, opt);
    const uint64_t rgb_q = src.queries;
    CHECK(latent_q * 64 == rgb_q);
    CHECK(latent_q == 16ull * 16 * opt.samples_per_ray);
  }
  SECTION("empty scene: zero map, zero opacity everywhere") {
    Camera cam = simple_camera(32, 32, 16);
    cam.camera_to_world = look_at({0, 0, 4}, {0, 0, 0}, {0, 1, 0});
    auto [li, dm] = render_latent_image<float>(cam, src, 3, opt);
    for (float v : li.values) CHECK(v == 0.f);
    for (uint8_t v : dm.valid) CHECK(v == 0);
  }
  SECTION("non-multiple-of-8 target is a dimension error") {
    Camera cam = simple_camera(60, 64, 30);
    CHECK_THROWS_AS(render_latent_image<float>(cam, src, 3, opt), std::invalid_argument);
  }
}

TEST_CASE("rgb image rendering of an opaque plane returns its albedo") {
  AnalyticSource<float> src;
  src.sigma_fn = [](const Vec3& p) { return p.z < -2.0 ? 800.0 : 0.0; };
  src.color_fn = [](const Vec3&) { return std::array<double, 3>{0.3, 0.6, 0.8}; };

  Camera cam = simple_camera(16, 16, 8);
  cam.camera_to_world = Mat4::identity();  // at origin looking down -z
  RenderOptions opt;
  opt.near = 0.5;
  opt.far = 6.0;
  opt.samples_per_ray = 256;
  auto [img, dm] = render_rgb_image<float>(cam, src, opt);
  CHECK_THAT(img.at(0, 8, 8), Catch::Matchers::WithinAbs(0.3f, 1e-3));
  CHECK_THAT(img.at(1, 8, 8), Catch::Matchers::WithinAbs(0.6f, 1e-3));
  CHECK_THAT(img.at(2, 8, 8), Catch::Matchers::WithinAbs(0.8f, 1e-3));
  CHECK(dm.is_valid(8, 8));
  // Depth along the central ray is near the plane distance, 2/|dz|.
  CHECK_THAT(dm.at(8, 8), Catch::Matchers::WithinAbs(2.0f, 0.1f));
}
