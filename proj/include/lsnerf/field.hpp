#pragma once

// The scene field f(x, r) = (sigma, c, z): positional/directional encodings
// feeding a shared trunk, with a density head, a colour head, and a latent
// head. The latent head reads the trunk features through a gradient
// barrier, so losses on z never reach the density or colour parameters;
// all three outputs still share the one density in rendering.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lsnerf/adam.hpp"
#include "lsnerf/geometry.hpp"
#include "lsnerf/ops.hpp"
#include "lsnerf/rng.hpp"
#include "lsnerf/tensor.hpp"

namespace lsnerf {

enum class EncodingKind { kFourier, kHashGrid };

struct FieldConfig {
  int latent_dim = 32;  // n; 4 for the small-latent variant

  EncodingKind encoding = EncodingKind::kFourier;
  int fourier_pos_levels = 6;  // L_pos
  int fourier_dir_levels = 2;  // L_dir

  // Multi-resolution hash grid (optional encoding).
  int grid_levels = 8;
  int grid_table_size = 1 << 14;
  int grid_features = 2;
  int grid_base_res = 16;
  double grid_growth = 1.45;

  int trunk_width = 64;
  int trunk_depth = 2;
  int color_hidden = 32;
  int latent_hidden = 32;
  bool latent_view_dependent = false;

  // Scene bounding box; positions are normalized into [0,1]^3 before
  // encoding, out-of-box points are clamped (and counted).
  Vec3 aabb_min{-2, -2, -2};
  Vec3 aabb_max{2, 2, 2};

  int pos_encoding_width() const {
    if (encoding == EncodingKind::kHashGrid) return grid_levels * grid_features;
    return 3 + 6 * fourier_pos_levels;
  }
  int dir_encoding_width() const { return 3 + 6 * fourier_dir_levels; }
};

// One field evaluation at a point.
template <typename T>
struct FieldOutput {
  T sigma = T(0);
  std::array<T, 3> color{T(0), T(0), T(0)};
  std::vector<T> latent;
};

enum class FieldEval { kDensity, kColor, kLatent, kFull };

template <typename T>
struct FieldBatchOut {
  Tensor<T> sigma;   // [M x 1]
  Tensor<T> color;   // [M x 3] when requested
  Tensor<T> latent;  // [M x n] when requested
};

namespace detail {

// [sin, cos](2^l pi x) for l = 0..levels-1, concatenated with x itself.
template <typename T>
void fourier_encode(const T* v, int levels, T* out) {
  out[0] = v[0];
  out[1] = v[1];
  out[2] = v[2];
  int o = 3;
  double freq = M_PI;
  for (int l = 0; l < levels; ++l) {
    for (int c = 0; c < 3; ++c) out[o + c] = static_cast<T>(std::sin(freq * v[c]));
    for (int c = 0; c < 3; ++c) out[o + 3 + c] = static_cast<T>(std::cos(freq * v[c]));
    o += 6;
    freq *= 2.0;
  }
}

}  // namespace detail

// Trainable multi-resolution hash-grid encoding: trilinear interpolation of
// per-level feature tables. positions are already normalized to [0,1]^3.
template <typename T>
Tensor<T> hashgrid_encode(const Tensor<T>& table, const std::vector<T>& positions,
                          int levels, int table_size, int features, int base_res,
                          double growth) {
  const int m = static_cast<int>(positions.size() / 3);
  const int out_w = levels * features;
  std::vector<T> out(static_cast<int64_t>(m) * out_w, T(0));
  // (corner row, weight) pairs saved for the backward scatter.
  auto rows = std::make_shared<std::vector<int64_t>>(static_cast<int64_t>(m) * levels * 8);
  auto wts = std::make_shared<std::vector<T>>(static_cast<int64_t>(m) * levels * 8);

  for (int i = 0; i < m; ++i) {
    const T* p = positions.data() + static_cast<int64_t>(i) * 3;
    for (int l = 0; l < levels; ++l) {
      const int res = static_cast<int>(std::floor(base_res * std::pow(growth, l)));
      int ix[3];
      double f[3];
      for (int c = 0; c < 3; ++c) {
        double s = static_cast<double>(p[c]) * res;
        s = std::min(std::max(s, 0.0), static_cast<double>(res));
        double fl = std::floor(s);
        if (fl >= res) fl = res - 1;  // keep the +1 corner in range
        ix[c] = static_cast<int>(fl);
        f[c] = s - fl;
      }
      const bool dense = static_cast<int64_t>(res + 1) * (res + 1) * (res + 1) <= table_size;
      for (int corner = 0; corner < 8; ++corner) {
        const int cx = ix[0] + (corner & 1);
        const int cy = ix[1] + ((corner >> 1) & 1);
        const int cz = ix[2] + ((corner >> 2) & 1);
        int64_t idx;
        if (dense) {
          idx = cx + static_cast<int64_t>(res + 1) * (cy + static_cast<int64_t>(res + 1) * cz);
        } else {
          const uint64_t h = static_cast<uint64_t>(cx) * 1u ^
                             static_cast<uint64_t>(cy) * 2654435761u ^
                             static_cast<uint64_t>(cz) * 805459861u;
          idx = static_cast<int64_t>(h % static_cast<uint64_t>(table_size));
        }
        const double w = ((corner & 1) ? f[0] : 1 - f[0]) *
                         (((corner >> 1) & 1) ? f[1] : 1 - f[1]) *
                         (((corner >> 2) & 1) ? f[2] : 1 - f[2]);
        const int64_t row = static_cast<int64_t>(l) * table_size + idx;
        const int64_t slot = (static_cast<int64_t>(i) * levels + l) * 8 + corner;
        (*rows)[slot] = row;
        (*wts)[slot] = static_cast<T>(w);
        const T* feat = table.ptr() + row * features;
        T* dst = out.data() + static_cast<int64_t>(i) * out_w + l * features;
        for (int c = 0; c < features; ++c) dst[c] += static_cast<T>(w) * feat[c];
      }
    }
  }
  auto tn = table.node();
  return make_op_output<T>(
      {m, out_w}, std::move(out), {table},
      [tn, rows, wts, m, levels, features](TensorNode<T>& o) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        const int out_w = levels * features;
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < levels; ++l) {
            const T* g = o.grad.data() + static_cast<int64_t>(i) * out_w + l * features;
            for (int corner = 0; corner < 8; ++corner) {
              const int64_t slot = (static_cast<int64_t>(i) * levels + l) * 8 + corner;
              const T w = (*wts)[slot];
              T* dst = tn->grad.data() + (*rows)[slot] * features;
              for (int c = 0; c < features; ++c) dst[c] += w * g[c];
            }
          }
      });
}

template <typename T>
struct Dense {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  static Dense init(ParamSet<T>& params, const std::string& name, int in, int out,
                    Pcg32& rng) {
    const double s = std::sqrt(6.0 / in);
    std::vector<T> w(static_cast<int64_t>(in) * out);
    for (auto& v : w) v = static_cast<T>((rng.next_double() * 2 - 1) * s);
    Dense d;
    d.weight = params.add(name + ".weight", Tensor<T>::param({in, out}, std::move(w)));
    d.bias = params.add(name + ".bias", Tensor<T>::param({out}, std::vector<T>(out, T(0))));
    return d;
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    return add_row_bias(matmul(x, weight), bias);
  }
};

template <typename T>
class Field {
 public:
  Field() = default;
  Field(FieldConfig cfg, uint64_t seed) : cfg_(cfg) { init_params(seed); }

  const FieldConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Parameter group boundaries for the stop-gradient instrumentation:
  // everything before latent_group_begin() belongs to the sigma/colour side.
  size_t latent_group_begin() const { return latent_group_begin_; }
  size_t color_group_begin() const { return color_group_begin_; }

  uint64_t query_count() const { return queries_; }
  void reset_query_count() const { queries_ = 0; }
  uint64_t clamped_count() const { return clamped_; }

  // positions/dirs: M*3 world-space values. dirs may be empty for
  // density-only evaluation (and for view-independent configurations).
  FieldBatchOut<T> eval_batch(const std::vector<T>& positions,
                              const std::vector<T>& dirs, FieldEval mode) const {
    const int m = static_cast<int>(positions.size() / 3);
    queries_ += static_cast<uint64_t>(m);

    std::vector<T> norm(positions.size());
    normalize_positions(positions, norm);
    Tensor<T> enc = encode_position_tensor(norm);

    Tensor<T> h = trunk_[0](enc);
    h = elu(h);
    for (size_t i = 1; i < trunk_.size(); ++i) h = elu(trunk_[i](h));

    FieldBatchOut<T> out;
    out.sigma = softplus(sigma_head_(h));
    // Latent rendering shares this density but never trains it: the latent
    // evaluation mode cuts sigma (and the latent head cuts the trunk) from
    // the tape, so patch losses reach only the latent head and the decoder.
    if (mode == FieldEval::kLatent) out.sigma = out.sigma.detach();

    const bool want_color = mode == FieldEval::kColor || mode == FieldEval::kFull;
    const bool want_latent = mode == FieldEval::kLatent || mode == FieldEval::kFull;

    Tensor<T> dir_enc;
    if ((want_color || (want_latent && cfg_.latent_view_dependent))) {
      if (dirs.size() != positions.size())
        throw std::invalid_argument("eval_batch: directions required for colour output");
      dir_enc = encode_direction_tensor(dirs);
    }
    if (want_color) {
      Tensor<T> ci = elu(color_hidden_(concat_cols(h, dir_enc)));
      out.color = sigmoid(color_out_(ci));
    }
    if (want_latent) {
      // Gradient barrier: latent losses must not reach the trunk.
      Tensor<T> zin = h.detach();
      if (cfg_.latent_view_dependent) zin = concat_cols(zin, dir_enc);
      Tensor<T> zi = elu(latent_hidden_(zin));
      out.latent = latent_out_(zi);
    }
    return out;
  }

  FieldOutput<T> eval(const Vec3& x, const Vec3& r) const {
    check_unit_dir(r);
    auto b = eval_batch({static_cast<T>(x.x), static_cast<T>(x.y), static_cast<T>(x.z)},
                        {static_cast<T>(r.x), static_cast<T>(r.y), static_cast<T>(r.z)},
                        FieldEval::kFull);
    FieldOutput<T> o;
    o.sigma = b.sigma.data()[0];
    o.color = {b.color.data()[0], b.color.data()[1], b.color.data()[2]};
    o.latent.assign(b.latent.data().begin(), b.latent.data().end());
    return o;
  }

  T eval_density(const Vec3& x) const {
    auto b = eval_batch({static_cast<T>(x.x), static_cast<T>(x.y), static_cast<T>(x.z)},
                        {}, FieldEval::kDensity);
    return b.sigma.data()[0];
  }

  // Encoded positional features for M points (normalized internally).
  Tensor<T> encode_position(const std::vector<T>& world_positions) const {
    std::vector<T> norm(world_positions.size());
    normalize_positions(world_positions, norm);
    return encode_position_tensor(norm);
  }

 private:
  static void check_unit_dir(const Vec3& r) {
    if (std::abs(r.norm() - 1.0) > 1e-6)
      throw std::invalid_argument("field: view direction must be unit length");
  }

  void normalize_positions(const std::vector<T>& in, std::vector<T>& out) const {
    const double lo[3] = {cfg_.aabb_min.x, cfg_.aabb_min.y, cfg_.aabb_min.z};
    const double hi[3] = {cfg_.aabb_max.x, cfg_.aabb_max.y, cfg_.aabb_max.z};
    for (size_t i = 0; i < in.size(); ++i) {
      const int c = static_cast<int>(i % 3);
      double v = (static_cast<double>(in[i]) - lo[c]) / (hi[c] - lo[c]);
      if (v < 0 || v > 1) {
        ++clamped_;
        v = std::min(std::max(v, 0.0), 1.0);
      }
      out[i] = static_cast<T>(v);
    }
  }

  Tensor<T> encode_position_tensor(const std::vector<T>& norm) const {
    const int m = static_cast<int>(norm.size() / 3);
    if (cfg_.encoding == EncodingKind::kHashGrid)
      return hashgrid_encode(grid_table_, norm, cfg_.grid_levels, cfg_.grid_table_size,
                             cfg_.grid_features, cfg_.grid_base_res, cfg_.grid_growth);
    const int w = cfg_.pos_encoding_width();
    std::vector<T> enc(static_cast<int64_t>(m) * w);
    for (int i = 0; i < m; ++i)
      detail::fourier_encode(norm.data() + static_cast<int64_t>(i) * 3,
                             cfg_.fourier_pos_levels, enc.data() + static_cast<int64_t>(i) * w);
    return Tensor<T>::from({m, w}, std::move(enc));
  }

  Tensor<T> encode_direction_tensor(const std::vector<T>& dirs) const {
    const int m = static_cast<int>(dirs.size() / 3);
    const int w = cfg_.dir_encoding_width();
    std::vector<T> enc(static_cast<int64_t>(m) * w);
    for (int i = 0; i < m; ++i)
      detail::fourier_encode(dirs.data() + static_cast<int64_t>(i) * 3,
                             cfg_.fourier_dir_levels, enc.data() + static_cast<int64_t>(i) * w);
    return Tensor<T>::from({m, w}, std::move(enc));
  }

  void init_params(uint64_t seed) {
    Pcg32 rng(seed, 0x66726c64);  // field parameter stream
    if (cfg_.encoding == EncodingKind::kHashGrid) {
      const int64_t rows = static_cast<int64_t>(cfg_.grid_levels) * cfg_.grid_table_size;
      std::vector<T> tbl(rows * cfg_.grid_features);
      for (auto& v : tbl) v = static_cast<T>((rng.next_double() * 2 - 1) * 1e-4);
      grid_table_ = params_.add("grid.table",
                                Tensor<T>::param({static_cast<int>(rows), cfg_.grid_features},
                                                 std::move(tbl)));
    }
    const int ew = cfg_.pos_encoding_width();
    trunk_.push_back(Dense<T>::init(params_, "trunk.0", ew, cfg_.trunk_width, rng));
    for (int i = 1; i < cfg_.trunk_depth; ++i)
      trunk_.push_back(Dense<T>::init(params_, "trunk." + std::to_string(i),
                                      cfg_.trunk_width, cfg_.trunk_width, rng));
    sigma_head_ = Dense<T>::init(params_, "sigma", cfg_.trunk_width, 1, rng);

    color_group_begin_ = params_.items.size();
    const int dw = cfg_.dir_encoding_width();
    color_hidden_ = Dense<T>::init(params_, "color.hidden", cfg_.trunk_width + dw,
                                   cfg_.color_hidden, rng);
    color_out_ = Dense<T>::init(params_, "color.out", cfg_.color_hidden, 3, rng);

    latent_group_begin_ = params_.items.size();
    const int zin = cfg_.trunk_width + (cfg_.latent_view_dependent ? dw : 0);
    latent_hidden_ = Dense<T>::init(params_, "latent.hidden", zin, cfg_.latent_hidden, rng);
    latent_out_ = Dense<T>::init(params_, "latent.out", cfg_.latent_hidden,
                                 cfg_.latent_dim, rng);
  }

  FieldConfig cfg_;
  ParamSet<T> params_;
  std::vector<Dense<T>> trunk_;
  Dense<T> sigma_head_, color_hidden_, color_out_, latent_hidden_, latent_out_;
  Tensor<T> grid_table_;
  size_t color_group_begin_ = 0;
  size_t latent_group_begin_ = 0;
  mutable std::atomic<uint64_t> queries_{0};
  mutable std::atomic<uint64_t> clamped_{0};
};

}  // namespace lsnerf
