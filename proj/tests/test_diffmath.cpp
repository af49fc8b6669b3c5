#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lsnerf/adam.hpp"
#include "lsnerf/gradcheck.hpp"
#include "lsnerf/ops.hpp"
#include "lsnerf/rng.hpp"
#include "lsnerf/tensor.hpp"

using namespace lsnerf;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Pcg32& rng, T lo = T(-1), T hi = T(1),
                        bool requires_grad = true) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = lo + static_cast<T>(rng.next_double()) * (hi - lo);
  return requires_grad ? Tensor<T>::param(shape, std::move(data))
                       : Tensor<T>::from(shape, std::move(data));
}

// Direct six-nested-loop convolution, the independent oracle for conv2d.
// Accumulation order (cin, ky, kx) matches the implementation's contract.
template <typename T>
std::vector<T> conv2d_naive(const std::vector<T>& x, int cin, int h, int w,
                            const std::vector<T>& wt, int cout, int k,
                            int stride, int pad) {
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  std::vector<T> out(static_cast<size_t>(cout) * ho * wo, T(0));
  for (int oc = 0; oc < cout; ++oc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (int c = 0; c < cin; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[(static_cast<size_t>(c) * h + iy) * w + ix] *
                     wt[((static_cast<size_t>(oc) * cin + c) * k + ky) * k + kx];
            }
        out[(static_cast<size_t>(oc) * ho + oy) * wo + ox] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("matmul basics") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, a);
  CHECK(r.data() == std::vector<double>{1, 2, 3, 4});

  auto row = Tensor<double>::from({1, 2}, {1, 2});
  auto col = Tensor<double>::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);

  CHECK_THROWS_AS(matmul(row, row), std::invalid_argument);
}

TEST_CASE("matmul gradient: d sum(a*b) / da = ones * b^T") {
  Pcg32 rng(11);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  auto loss = sum(matmul(a, b));
  loss.backward();

  // Analytic: grad_a[i,k] = sum_j b[k,j]
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double expect = 0;
      for (int j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
      CHECK_THAT(a.grad()[i * 4 + k], Catch::Matchers::WithinAbs(expect, 1e-12));
    }

  // And against central differences, h = 1e-3.
  const double err = grad_check([&] { return sum(matmul(a, b)); },
                                std::vector<Tensor<double>>{a, b}, 1e-3);
  CHECK(err < 1e-3);
}

TEST_CASE("gradient accumulation is additive across backward passes") {
  auto a = Tensor<double>::param({2}, {1, 2});
  auto loss = sum(mul(a, a));
  loss.backward();
  const auto g1 = a.grad();
  loss.backward();
  CHECK(a.grad()[0] == 2 * g1[0]);
  CHECK(a.grad()[1] == 2 * g1[1]);
}

TEST_CASE("conv2d 1x1 identity") {
  Pcg32 rng(5);
  auto x = random_tensor<double>({1, 4, 4}, rng);
  auto w = Tensor<double>::from({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w, 1, 0);
  CHECK(y.data() == x.data());
}

TEST_CASE("conv2d 3x3 box sum on ones") {
  auto x = Tensor<double>::full({1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 1);
  REQUIRE(y.shape() == Shape{1, 3, 3});
  CHECK(y.data()[4] == 9.0);  // center
  CHECK(y.data()[0] == 4.0);  // corner
  CHECK(y.data()[2] == 4.0);
  CHECK(y.data()[8] == 4.0);
}

TEST_CASE("conv2d matches naive loop oracle bit-for-bit at 64-bit") {
  Pcg32 rng(7);
  const struct { int cin, h, w, cout, k, stride, pad; } cases[] = {
      {3, 8, 8, 2, 3, 1, 1}, {2, 8, 8, 2, 5, 1, 2}, {4, 15, 15, 4, 3, 2, 1},
      {1, 5, 5, 3, 1, 1, 0}, {4, 16, 16, 2, 5, 1, 0},
  };
  for (const auto& c : cases) {
    auto x = random_tensor<double>({c.cin, c.h, c.w}, rng);
    auto w = random_tensor<double>({c.cout, c.cin, c.k, c.k}, rng);
    auto y = conv2d(x, w, c.stride, c.pad);
    auto oracle = conv2d_naive(x.data(), c.cin, c.h, c.w, w.data(), c.cout,
                               c.k, c.stride, c.pad);
    REQUIRE(y.numel() == static_cast<int64_t>(oracle.size()));
    for (size_t i = 0; i < oracle.size(); ++i) CHECK(y.data()[i] == oracle[i]);
  }
}

TEST_CASE("conv2d rejects non-integral output size") {
  auto x = Tensor<double>::zeros({1, 6, 6});
  auto w = Tensor<double>::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, 2, 0), std::invalid_argument);
}

TEST_CASE("instance_norm basics") {
  auto ones_scale = Tensor<double>::full({1}, 1.0);
  auto zero_shift = Tensor<double>::zeros({1});

  SECTION("constant channel maps to zeros") {
    auto x = Tensor<double>::full({1, 2, 2}, 3.7);
    auto y = instance_norm(x, ones_scale, zero_shift, 1e-5);
    for (double v : y.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-9));
  }

  SECTION("already-normalized channel is preserved up to eps") {
    auto x = Tensor<double>::from({1, 1, 2}, {-1, 1});
    auto y = instance_norm(x, ones_scale, zero_shift, 1e-10);
    CHECK_THAT(y.data()[0], Catch::Matchers::WithinAbs(-1.0, 1e-4));
    CHECK_THAT(y.data()[1], Catch::Matchers::WithinAbs(1.0, 1e-4));
  }

  SECTION("random input: per-channel mean ~0, variance ~1") {
    Pcg32 rng(3);
    auto x = random_tensor<double>({4, 5, 5}, rng);
    auto scale = Tensor<double>::full({4}, 1.0);
    auto shift = Tensor<double>::zeros({4});
    auto y = instance_norm(x, scale, shift, 1e-8);
    for (int c = 0; c < 4; ++c) {
      double mu = 0, var = 0;
      for (int i = 0; i < 25; ++i) mu += y.data()[c * 25 + i];
      mu /= 25;
      for (int i = 0; i < 25; ++i) {
        const double d = y.data()[c * 25 + i] - mu;
        var += d * d;
      }
      var /= 25;
      CHECK(std::abs(mu) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("instance_norm normalization invariant on random float inputs") {
  Pcg32 rng(91);
  for (int rep = 0; rep < 10; ++rep) {
    const int c = 1 + static_cast<int>(rng.next_below(4));
    const int h = 2 + static_cast<int>(rng.next_below(14));
    const int w = 2 + static_cast<int>(rng.next_below(14));
    auto x = random_tensor<float>({c, h, w}, rng, -2.0f, 2.0f, false);
    auto scale = Tensor<float>::full({c}, 1.0f);
    auto shift = Tensor<float>::zeros({c});
    auto y = instance_norm(x, scale, shift, 1e-6f);
    for (int ch = 0; ch < c; ++ch) {
      double mu = 0, var = 0;
      const int m = h * w;
      for (int i = 0; i < m; ++i) mu += y.data()[ch * m + i];
      mu /= m;
      for (int i = 0; i < m; ++i) {
        const double d = y.data()[ch * m + i] - mu;
        var += d * d;
      }
      var /= m;
      CHECK(std::abs(mu) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("elu pointwise values") {
  auto x = Tensor<double>::from({3}, {0.0, 2.0, -std::log(2.0)});
  auto y = elu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 2.0);
  CHECK_THAT(y.data()[2], Catch::Matchers::WithinAbs(-0.5, 1e-12));
}

TEST_CASE("bilinear_resize") {
  SECTION("constant image stays constant") {
    auto x = Tensor<double>::full({2, 4, 4}, 0.4);
    for (double f : {2.0, 0.5}) {
      auto y = bilinear_resize(x, f);
      for (double v : y.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.4, 1e-12));
    }
  }
  SECTION("doubling then halving a constant image is the identity") {
    auto x = Tensor<double>::full({1, 3, 3}, 1.25);
    auto y = bilinear_resize(bilinear_resize(x, 2.0), 0.5);
    REQUIRE(y.shape() == x.shape());
    for (double v : y.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.25, 1e-12));
  }
  SECTION("2x upsample of a 2x2 ramp matches the hand-evaluated taps") {
    auto x = Tensor<double>::from({1, 2, 2}, {0, 1, 2, 3});
    auto y = bilinear_resize(x, 2.0);
    REQUIRE(y.shape() == Shape{1, 4, 4});
    // Corners replicate the input corners (clamped taps).
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[3] == 1.0);
    CHECK(y.data()[12] == 2.0);
    CHECK(y.data()[15] == 3.0);
    // Interior sample at (1,1): src coords 0.25 -> 0.75*row0 + 0.25*row1.
    CHECK_THAT(y.data()[5], Catch::Matchers::WithinAbs(0.75, 1e-12));
    CHECK_THAT(y.data()[10], Catch::Matchers::WithinAbs(2.25, 1e-12));
  }
  SECTION("halving odd dimensions is rejected") {
    auto x = Tensor<double>::zeros({1, 3, 4});
    CHECK_THROWS_AS(bilinear_resize(x, 0.5), std::invalid_argument);
  }
}

TEST_CASE("adam_step") {
  SECTION("zero gradient leaves parameters unchanged for any state") {
    Pcg32 rng(17);
    auto p = random_tensor<double>({5}, rng);
    const auto before = p.data();
    AdamState<double> st;
    st.m = {0.1, -0.2, 0.3, 0.0, 0.5};  // non-fresh state
    st.m.assign(5, 0.0);
    st.v.assign(5, 0.0);
    p.grad();  // allocate zeros
    adam_step(p, st, 1e-2);
    CHECK(p.data() == before);
  }

  SECTION("first step moves by ~lr for any nonzero gradient") {
    auto p = Tensor<double>::param({1}, {0.0});
    p.grad()[0] = 123.456;
    AdamState<double> st;
    adam_step(p, st, 1e-3);
    // Bias-corrected m-hat / (sqrt(v-hat)+eps) == g/|g| up to eps.
    CHECK_THAT(std::abs(p.data()[0]), Catch::Matchers::WithinRel(1e-3, 1e-6));
  }

  SECTION("two steps with constant gradient match the scalar recurrence") {
    const double g = 0.7, lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    auto p = Tensor<double>::param({1}, {1.0});
    AdamState<double> st;
    double theta = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mhat = m / (1 - std::pow(b1, t));
      const double vhat = v / (1 - std::pow(b2, t));
      theta -= lr * mhat / (std::sqrt(vhat) + eps);

      p.zero_grad();
      p.grad()[0] = g;
      adam_step(p, st, lr);
    }
    CHECK_THAT(p.data()[0], Catch::Matchers::WithinAbs(theta, 1e-12));
  }

  SECTION("missing gradient is a usage error") {
    auto p = Tensor<double>::param({1}, {0.0});
    AdamState<double> st;
    CHECK_THROWS_AS(adam_step(p, st, 1e-3), std::logic_error);
  }
}

TEST_CASE("grad_check on sum of squares") {
  auto theta = Tensor<double>::param({2}, {1, 2});
  const double err = grad_check([&] { return sum(mul(theta, theta)); }, theta, 1e-4);
  CHECK(err < 1e-6);
  // Analytic gradient is [2, 4].
  theta.zero_grad();
  auto loss = sum(mul(theta, theta));
  loss.backward();
  CHECK_THAT(theta.grad()[0], Catch::Matchers::WithinAbs(2.0, 1e-10));
  CHECK_THAT(theta.grad()[1], Catch::Matchers::WithinAbs(4.0, 1e-10));
}

TEST_CASE("transmittance weights") {
  SECTION("zero density gives zero weights") {
    auto sigma = Tensor<double>::zeros({1, 4});
    auto w = transmittance_weights(sigma, std::vector<double>(4, 0.25), 1, 4);
    for (double v : w.data()) CHECK(v == 0.0);
  }
  SECTION("opaque first sample takes all the weight") {
    auto sigma = Tensor<double>::from({1, 3}, {1e9, 1.0, 1.0});
    auto w = transmittance_weights(sigma, std::vector<double>(3, 0.5), 1, 3);
    CHECK_THAT(w.data()[0], Catch::Matchers::WithinAbs(1.0, 1e-9));
    CHECK_THAT(w.data()[1], Catch::Matchers::WithinAbs(0.0, 1e-9));
  }
  SECTION("homogeneous slab matches the closed form") {
    auto sigma = Tensor<double>::from({1, 1}, {2.0});
    auto w = transmittance_weights(sigma, {0.5}, 1, 1);
    CHECK_THAT(w.data()[0], Catch::Matchers::WithinAbs(1.0 - std::exp(-1.0), 1e-12));
  }
  SECTION("negative density violates the contract") {
    auto sigma = Tensor<double>::from({1, 1}, {-0.1});
    CHECK_THROWS_AS(transmittance_weights(sigma, {0.5}, 1, 1), std::invalid_argument);
  }
}

TEST_CASE("64-bit kernels match central finite differences (property)") {
  Pcg32 rng(2024);
  const double h = 1e-5, tol = 1e-6;

  for (int rep = 0; rep < 4; ++rep) {
    const int m = 1 + static_cast<int>(rng.next_below(5));
    const int k = 1 + static_cast<int>(rng.next_below(5));
    const int p = 1 + static_cast<int>(rng.next_below(5));

    SECTION("matmul " + std::to_string(rep)) {}
    {
      auto a = random_tensor<double>({m, k}, rng);
      auto b = random_tensor<double>({k, p}, rng);
      auto t = random_tensor<double>({m, p}, rng, -1, 1, false);
      CHECK(grad_check([&] { return mse(matmul(a, b), t); },
                       std::vector<Tensor<double>>{a, b}, h) < tol);
    }
    {
      auto x = random_tensor<double>({2, 6, 6}, rng);
      auto w = random_tensor<double>({3, 2, 3, 3}, rng);
      CHECK(grad_check([&] { return mean(conv2d(x, w, 1, 1)); },
                       std::vector<Tensor<double>>{x, w}, h) < tol);
    }
    {
      auto x = random_tensor<double>({2, 4, 4}, rng);
      auto scale = random_tensor<double>({2}, rng, 0.5, 1.5);
      auto shift = random_tensor<double>({2}, rng);
      auto t = random_tensor<double>({2, 4, 4}, rng, -1, 1, false);
      CHECK(grad_check([&] { return mse(instance_norm(x, scale, shift, 1e-5), t); },
                       std::vector<Tensor<double>>{x, scale, shift}, h) < tol);
    }
    {
      auto x = random_tensor<double>({1, 4, 4}, rng);
      CHECK(grad_check([&] { return mean(bilinear_resize(x, 2.0)); }, x, h) < tol);
      CHECK(grad_check([&] { return mean(bilinear_resize(x, 0.5)); }, x, h) < tol);
    }
    {
      auto x = random_tensor<double>({3, 4}, rng);
      CHECK(grad_check([&] { return mean(elu(x)); }, x, h) < tol);
      CHECK(grad_check([&] { return mean(sigmoid(x)); }, x, h) < tol);
      CHECK(grad_check([&] { return mean(softplus(x)); }, x, h) < tol);
    }
    {
      // Densities bounded away from zero so sigma +/- h stays legal.
      auto sigma = random_tensor<double>({2, 5}, rng, 0.5, 2.0);
      std::vector<double> delta(10);
      for (auto& d : delta) d = 0.1 + 0.3 * rng.next_double();
      auto z = random_tensor<double>({10, 3}, rng);
      CHECK(grad_check(
                [&] {
                  auto w = transmittance_weights(sigma, delta, 2, 5);
                  return mean(composite(w, z));
                },
                std::vector<Tensor<double>>{sigma, z}, h) < tol);
    }
    {
      auto w = random_tensor<double>({2, 6}, rng, 0.0, 0.2);
      std::vector<double> s(12), d(12);
      for (int i = 0; i < 12; ++i) {
        s[i] = (i % 6 + 0.5) / 6.0;
        d[i] = 1.0 / 6.0;
      }
      CHECK(grad_check([&] { return distortion_mean(w, s, d); }, w, h) < tol);
    }
    {
      auto a = random_tensor<double>({3, 2}, rng);
      auto b = random_tensor<double>({3, 2}, rng, 1.0, 2.0);
      CHECK(grad_check([&] { return mean(div(a, b)); },
                       std::vector<Tensor<double>>{a, b}, h) < tol);
      CHECK(grad_check([&] { return mean(clamp_min(a, 0.1)); }, a, h) < tol);
      CHECK(grad_check([&] { return mean(rowsum(mul(a, a))); }, a, h) < tol);
      CHECK(grad_check([&] { return mean(concat_cols(a, b)); },
                       std::vector<Tensor<double>>{a, b}, h) < tol);
      CHECK(grad_check([&] { return mean(slice_cols(a, 0, 1)); }, a, h) < tol);
      CHECK(grad_check([&] { return mse(a, b); },
                       std::vector<Tensor<double>>{a, b}, h) < tol);
      auto bias = random_tensor<double>({2}, rng);
      CHECK(grad_check([&] { return mean(add_row_bias(a, bias)); },
                       std::vector<Tensor<double>>{a, bias}, h) < tol);
    }
  }
}

TEST_CASE("32-bit kernels match central finite differences at loose tolerance") {
  Pcg32 rng(77);
  const float h = 1e-2f;
  const double tol = 1e-3;
  {
    auto a = random_tensor<float>({4, 3}, rng);
    auto b = random_tensor<float>({3, 4}, rng);
    CHECK(grad_check([&] { return mean(matmul(a, b)); },
                     std::vector<Tensor<float>>{a, b}, h) < tol);
  }
  {
    auto x = random_tensor<float>({2, 6, 6}, rng);
    auto w = random_tensor<float>({2, 2, 3, 3}, rng);
    CHECK(grad_check([&] { return mean(conv2d(x, w, 1, 1)); },
                     std::vector<Tensor<float>>{x, w}, h) < tol);
  }
  {
    auto x = random_tensor<float>({2, 4, 4}, rng);
    auto scale = random_tensor<float>({2}, rng, 0.5f, 1.5f);
    auto shift = random_tensor<float>({2}, rng);
    CHECK(grad_check([&] { return mean(instance_norm(x, scale, shift, 1e-5f)); },
                     std::vector<Tensor<float>>{x, scale, shift}, h) < tol);
  }
  {
    auto sigma = random_tensor<float>({1, 6}, rng, 0.5f, 2.0f);
    std::vector<float> delta(6, 0.2f);
    auto z = random_tensor<float>({6, 2}, rng);
    CHECK(grad_check(
              [&] {
                auto w = transmittance_weights(sigma, delta, 1, 6);
                return mean(composite(w, z));
              },
              std::vector<Tensor<float>>{sigma, z}, h) < tol);
  }
}

TEST_CASE("no-grad mode builds no tape") {
  auto a = Tensor<double>::param({2}, {1, 2});
  NoGradGuard ng;
  auto y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("distortion_mean matches the direct double-loop oracle") {
  Pcg32 rng(31);
  const int rays = 3, n = 8;
  auto w = random_tensor<double>({rays, n}, rng, 0.0, 0.3, false);
  std::vector<double> s(rays * n), d(rays * n);
  for (int r = 0; r < rays; ++r)
    for (int i = 0; i < n; ++i) {
      s[r * n + i] = (i + 0.5) / n;
      d[r * n + i] = 1.0 / n;
    }
  const double got = distortion_mean(w, s, d).item();

  double expect = 0;
  for (int r = 0; r < rays; ++r) {
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j)
        acc += w.data()[r * n + i] * w.data()[r * n + j] *
               std::abs(s[r * n + i] - s[r * n + j]);
      acc += w.data()[r * n + i] * w.data()[r * n + i] * d[r * n + i] / 3.0;
    }
    expect += acc;
  }
  expect /= rays;
  CHECK_THAT(got, Catch::Matchers::WithinRel(expect, 1e-12));

  SECTION("all-zero weights give zero") {
    auto wz = Tensor<double>::zeros({1, 4});
    std::vector<double> s4{0.125, 0.375, 0.625, 0.875}, d4(4, 0.25);
    CHECK(distortion_mean(wz, s4, d4).item() == 0.0);
  }
  SECTION("a single massive sample leaves only the self term") {
    auto w1 = Tensor<double>::from({1, 3}, {0.0, 0.8, 0.0});
    std::vector<double> s3{1.0 / 6, 0.5, 5.0 / 6}, d3(3, 1.0 / 3);
    CHECK_THAT(distortion_mean(w1, s3, d3).item(),
               Catch::Matchers::WithinRel(0.8 * 0.8 / 3.0 / 3.0, 1e-12));
  }
}
