#pragma once

// Dataset and artifact I/O:
//  - posed-image datasets: a JSON manifest referencing PPM images and
//    depth files, poses as row-major 4x4 camera-to-world transforms
//  - depth container: "DPTH" magic, u32 width/height/flags (little-endian),
//    row-major f32 payload, optional byte-packed validity bitmask
//    (flag bit 0; LSB-first within each byte)
//  - versioned, CRC-checked training checkpoints
//  - an analytic ray-traced scene generator (spheres + planes, Lambertian
//    shading) providing ground-truth images and exact first-hit depth
//
// All formats round-trip bitwise; every container carries a version field.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsnerf/autoencoder.hpp"
#include "lsnerf/camera.hpp"
#include "lsnerf/field.hpp"
#include "lsnerf/image.hpp"
#include "lsnerf/rng.hpp"

namespace lsnerf {

constexpr uint32_t kManifestVersion = 1;
constexpr uint32_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Small binary helpers (little-endian on every supported platform).

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

struct ByteWriter {
  std::vector<uint8_t> bytes;
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void i64(int64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void fvec(const std::vector<float>& v) {
    u64(v.size());
    raw(v.data(), v.size() * 4);
  }
};

struct ByteReader {
  const uint8_t* p;
  size_t n, pos = 0;
  ByteReader(const uint8_t* data, size_t len) : p(data), n(len) {}
  void raw(void* out, size_t k) {
    if (pos + k > n) throw std::runtime_error("checkpoint: truncated payload");
    std::memcpy(out, p + pos, k);
    pos += k;
  }
  uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
  uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
  uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
  int64_t i64() { int64_t v; raw(&v, 8); return v; }
  float f32() { float v; raw(&v, 4); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  std::string str() {
    const uint32_t len = u32();
    std::string s(len, '\0');
    raw(s.data(), len);
    return s;
  }
  std::vector<float> fvec() {
    const uint64_t len = u64();
    std::vector<float> v(len);
    raw(v.data(), len * 4);
    return v;
  }
};

inline void write_file(const std::string& path, const void* data, size_t len) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw std::runtime_error("read failed: " + path);
  return bytes;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PPM (binary P6, 8-bit) images.

inline void save_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("save_ppm: need 3 channels");
  std::ostringstream head;
  head << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::string h = head.str();
  std::vector<uint8_t> buf(h.begin(), h.end());
  buf.reserve(buf.size() + static_cast<size_t>(img.width) * img.height * 3);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::min(std::max(img.at(ch, r, c), 0.f), 1.f);
        buf.push_back(static_cast<uint8_t>(std::lround(v * 255.f)));
      }
  detail::write_file(path, buf.data(), buf.size());
}

inline Image load_ppm(const std::string& path) {
  const auto bytes = detail::read_file(path);
  std::string s(bytes.begin(), bytes.end());
  std::istringstream f(s);
  std::string magic;
  int w, h, maxv;
  f >> magic >> w >> h >> maxv;
  if (magic != "P6" || maxv != 255 || w <= 0 || h <= 0)
    throw std::runtime_error("not an 8-bit P6 PPM: " + path);
  f.get();  // single whitespace after maxval
  const size_t off = static_cast<size_t>(f.tellg());
  if (bytes.size() < off + static_cast<size_t>(w) * h * 3)
    throw std::runtime_error("truncated PPM: " + path);
  Image img(w, h, 3);
  size_t i = off;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, r, c) = static_cast<float>(bytes[i++]) / 255.f;
  return img;
}

// ---------------------------------------------------------------------------
// Depth container.

inline void save_depth(const std::string& path, const DepthMap& dm) {
  detail::ByteWriter w;
  w.raw("DPTH", 4);
  w.u32(static_cast<uint32_t>(dm.width));
  w.u32(static_cast<uint32_t>(dm.height));
  const bool has_mask = !dm.valid.empty();
  w.u32(has_mask ? 1u : 0u);
  w.raw(dm.depth.data(), dm.depth.size() * 4);
  if (has_mask) {
    const size_t n = static_cast<size_t>(dm.width) * dm.height;
    std::vector<uint8_t> packed((n + 7) / 8, 0);
    for (size_t i = 0; i < n; ++i)
      if (dm.valid[i]) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
    w.raw(packed.data(), packed.size());
  }
  detail::write_file(path, w.bytes.data(), w.bytes.size());
}

inline DepthMap load_depth(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "DPTH", 4) != 0)
    throw std::runtime_error("bad depth file magic: " + path);
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  const uint32_t w = r.u32(), h = r.u32(), flags = r.u32();
  const size_t n = static_cast<size_t>(w) * h;
  DepthMap dm(static_cast<int>(w), static_cast<int>(h));
  if (bytes.size() < 16 + n * 4) throw std::runtime_error("truncated depth file: " + path);
  r.raw(dm.depth.data(), n * 4);
  if (flags & 1u) {
    std::vector<uint8_t> packed((n + 7) / 8);
    r.raw(packed.data(), packed.size());
    for (size_t i = 0; i < n; ++i)
      dm.valid[i] = (packed[i / 8] >> (i % 8)) & 1u;
  } else {
    std::fill(dm.valid.begin(), dm.valid.end(), uint8_t(1));
  }
  return dm;
}

// ---------------------------------------------------------------------------
// Posed dataset + manifest.

struct DatasetFrame {
  std::string id;
  Camera camera;
  Image image;
  std::optional<DepthMap> depth;
  std::string split = "train";  // "train" | "test"
};

struct PosedDataset {
  std::vector<DatasetFrame> frames;
  double near = 0.1, far = 10.0;

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> idx;
    for (size_t i = 0; i < frames.size(); ++i)
      if (frames[i].split == split) idx.push_back(static_cast<int>(i));
    return idx;
  }
};

namespace detail {

inline nlohmann::json pose_json(const Mat4& m) {
  nlohmann::json a = nlohmann::json::array();
  for (double v : m.m) a.push_back(v);
  return a;
}

inline Mat4 pose_from_json(const nlohmann::json& a) {
  if (!a.is_array() || a.size() != 16)
    throw std::runtime_error("manifest: pose must be a 16-entry row-major array");
  Mat4 m;
  for (int i = 0; i < 16; ++i) m.m[i] = a[i].get<double>();
  return m;
}

}  // namespace detail

// Writes manifest + image/depth files for a dataset rooted at `dir`.
// Returns the manifest path.
inline std::string save_dataset(const std::string& dir, const PosedDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "depth");
  nlohmann::json j;
  j["version"] = kManifestVersion;
  if (!ds.frames.empty()) {
    const Camera& c = ds.frames[0].camera;
    j["intrinsics"] = {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
                       {"width", c.width}, {"height", c.height}};
  }
  j["near"] = ds.near;
  j["far"] = ds.far;
  j["frames"] = nlohmann::json::array();
  for (const auto& f : ds.frames) {
    const std::string img_rel = "images/" + f.id + ".ppm";
    save_ppm((fs::path(dir) / img_rel).string(), f.image);
    nlohmann::json jf{{"id", f.id}, {"image", img_rel}, {"split", f.split},
                      {"pose", detail::pose_json(f.camera.camera_to_world)}};
    if (f.depth) {
      const std::string dep_rel = "depth/" + f.id + ".dpth";
      save_depth((fs::path(dir) / dep_rel).string(), *f.depth);
      jf["depth"] = dep_rel;
    }
    j["frames"].push_back(jf);
  }
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(mpath);
  if (!out) throw std::runtime_error("cannot write manifest: " + mpath);
  out << j.dump(2) << "\n";
  return mpath;
}

inline PosedDataset load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest parse error in " + manifest_path + ": " + e.what());
  }
  if (j.value("version", 0u) != kManifestVersion)
    throw std::runtime_error("manifest: unsupported version in " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  PosedDataset ds;
  ds.near = j.value("near", 0.1);
  ds.far = j.value("far", 10.0);
  const auto& ji = j.at("intrinsics");
  Camera base;
  base.fx = ji.at("fx");
  base.fy = ji.at("fy");
  base.cx = ji.at("cx");
  base.cy = ji.at("cy");
  base.width = ji.at("width");
  base.height = ji.at("height");

  std::vector<std::string> seen;
  for (const auto& jf : j.at("frames")) {
    DatasetFrame f;
    f.id = jf.at("id").get<std::string>();
    for (const auto& s : seen)
      if (s == f.id) throw std::runtime_error("manifest: duplicate frame id " + f.id);
    seen.push_back(f.id);
    f.split = jf.value("split", "train");
    f.camera = base;
    f.camera.camera_to_world = detail::pose_from_json(jf.at("pose"));
    const double err = f.camera.orthonormality_error();
    if (err > 1e-6)
      throw std::runtime_error("manifest: pose rotation for frame " + f.id +
                               " is not orthonormal (error " + std::to_string(err) + ")");
    const std::string img_path = (root / jf.at("image").get<std::string>()).string();
    if (!fs::exists(img_path))
      throw std::runtime_error("manifest: missing image file " + img_path);
    f.image = load_ppm(img_path);
    if (f.image.width != base.width || f.image.height != base.height)
      throw std::runtime_error("manifest: image size mismatch for frame " + f.id);
    if (jf.contains("depth")) {
      const std::string dep_path = (root / jf.at("depth").get<std::string>()).string();
      if (!fs::exists(dep_path))
        throw std::runtime_error("manifest: missing depth file " + dep_path);
      f.depth = load_depth(dep_path);
    }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic oracle scenes: analytic sphere/plane intersections, Lambertian
// shading, and exact per-pixel first-hit depth.

struct SpherePrimitive {
  Vec3 center;
  double radius = 1.0;
  std::array<float, 3> albedo{0.8f, 0.3f, 0.3f};
  bool checker = false;
};

struct PlanePrimitive {
  Vec3 point;
  Vec3 normal{0, 1, 0};
  std::array<float, 3> albedo{0.6f, 0.6f, 0.6f};
  std::array<float, 3> albedo2{0.15f, 0.15f, 0.15f};
  bool checker = true;
  double checker_scale = 1.0;
};

struct SceneSpec {
  std::vector<SpherePrimitive> spheres;
  std::vector<PlanePrimitive> planes;
  Vec3 light_dir{-0.4, -1.0, -0.3};  // direction the light travels
  double ambient = 0.3;
  int views = 20;
  int test_views = 4;
  int width = 64, height = 64;
  double fov_deg = 50.0;
  double ring_radius = 3.4;
  double ring_height = 1.4;
  double near = 0.8, far = 7.0;
  Vec3 look_target{0, 0, 0};
  uint64_t seed = 7;
};

// Two spheres on a checkerboard ground plane; the default desk scene.
inline SceneSpec default_scene_spec() {
  SceneSpec s;
  s.spheres.push_back({{0.0, 0.0, 0.0}, 0.9, {0.85f, 0.30f, 0.25f}, false});
  s.spheres.push_back({{1.1, -0.45, 1.0}, 0.45, {0.25f, 0.45f, 0.85f}, false});
  s.planes.push_back({{0, -0.9, 0}, {0, 1, 0}, {0.75f, 0.75f, 0.70f},
                      {0.20f, 0.22f, 0.25f}, true, 0.9});
  return s;
}

namespace detail {

struct Hit {
  double t = -1;
  Vec3 normal;
  std::array<float, 3> albedo;
};

inline bool sphere_hit(const SpherePrimitive& s, const Vec3& o, const Vec3& d,
                       double tmin, double tmax, Hit& hit) {
  const Vec3 oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.dot(oc) - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return false;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t < tmin) t = -b + sq;
  if (t < tmin || t > tmax) return false;
  hit.t = t;
  const Vec3 p = o + d * t;
  hit.normal = (p - s.center) / s.radius;
  hit.albedo = s.albedo;
  if (s.checker) {
    const double u = std::atan2(hit.normal.z, hit.normal.x) * 4.0 / M_PI;
    const double v = std::acos(std::clamp(hit.normal.y, -1.0, 1.0)) * 4.0 / M_PI;
    if ((static_cast<int>(std::floor(u)) + static_cast<int>(std::floor(v))) & 1)
      hit.albedo = {1.f - s.albedo[0], 1.f - s.albedo[1], 1.f - s.albedo[2]};
  }
  return true;
}

inline bool plane_hit(const PlanePrimitive& pl, const Vec3& o, const Vec3& d,
                      double tmin, double tmax, Hit& hit) {
  const Vec3 n = pl.normal.normalized();
  const double denom = d.dot(n);
  if (std::abs(denom) < 1e-12) return false;
  const double t = (pl.point - o).dot(n) / denom;
  if (t < tmin || t > tmax) return false;
  hit.t = t;
  hit.normal = denom < 0 ? n : -n;
  const Vec3 p = o + d * t;
  // Checker in the plane's tangent frame.
  Vec3 u_axis = n.cross(Vec3{1, 0, 0});
  if (u_axis.norm() < 1e-9) u_axis = n.cross(Vec3{0, 0, 1});
  u_axis = u_axis.normalized();
  const Vec3 v_axis = n.cross(u_axis);
  hit.albedo = pl.albedo;
  if (pl.checker) {
    const double u = p.dot(u_axis) / pl.checker_scale;
    const double v = p.dot(v_axis) / pl.checker_scale;
    if ((static_cast<int>(std::floor(u)) + static_cast<int>(std::floor(v))) & 1)
      hit.albedo = pl.albedo2;
  }
  return true;
}

}  // namespace detail

// Analytic first-hit trace of a scene spec; shading is Lambertian with an
// ambient floor, view-independent by construction.
inline bool trace_scene(const SceneSpec& spec, const Vec3& origin, const Vec3& dir,
                        double tmin, double tmax, std::array<float, 3>& color,
                        double& depth) {
  detail::Hit best;
  best.t = tmax + 1;
  bool found = false;
  detail::Hit h;
  for (const auto& s : spec.spheres)
    if (detail::sphere_hit(s, origin, dir, tmin, tmax, h) && h.t < best.t) {
      best = h;
      found = true;
    }
  for (const auto& p : spec.planes)
    if (detail::plane_hit(p, origin, dir, tmin, tmax, h) && h.t < best.t) {
      best = h;
      found = true;
    }
  if (!found) return false;
  const Vec3 l = (spec.light_dir * -1.0).normalized();
  const double lambert = std::max(0.0, best.normal.dot(l));
  const double shade = spec.ambient + (1.0 - spec.ambient) * lambert;
  for (int c = 0; c < 3; ++c) color[c] = static_cast<float>(best.albedo[c] * shade);
  depth = best.t;
  return true;
}

// Ring of cameras looking at the scene center, rendered analytically with
// exact depth. Deterministic for a given spec (bitwise).
inline PosedDataset generate_synthetic_scene(const SceneSpec& spec) {
  if (spec.spheres.empty() && spec.planes.empty())
    throw std::invalid_argument("generate_synthetic_scene: need at least one primitive");
  PosedDataset ds;
  ds.near = spec.near;
  ds.far = spec.far;
  Pcg32 rng(spec.seed, 0x5ce11e);

  const int total = spec.views + spec.test_views;
  Camera base;
  base.width = spec.width;
  base.height = spec.height;
  base.fx = base.fy = (spec.width / 2.0) / std::tan(spec.fov_deg * M_PI / 360.0);
  base.cx = spec.width / 2.0;
  base.cy = spec.height / 2.0;

  for (int i = 0; i < total; ++i) {
    const double theta = 2.0 * M_PI * i / total;
    const double height = spec.ring_height + 0.25 * (rng.next_double() - 0.5);
    const double radius = spec.ring_radius * (1.0 + 0.05 * (rng.next_double() - 0.5));
    const Vec3 eye = spec.look_target +
                     Vec3{radius * std::cos(theta), height, radius * std::sin(theta)};
    DatasetFrame f;
    f.camera = base;
    f.camera.camera_to_world = look_at(eye, spec.look_target, {0, 1, 0});
    // Every (total/test_views)-th view is held out.
    const bool is_test =
        spec.test_views > 0 && (i % std::max(1, total / std::max(1, spec.test_views))) == 0 &&
        static_cast<int>(ds.split_indices("test").size()) < spec.test_views;
    f.split = is_test ? "test" : "train";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d", i);
    f.id = buf;
    f.image = Image(spec.width, spec.height, 3);
    f.depth = DepthMap(spec.width, spec.height);
    for (int r = 0; r < spec.height; ++r)
      for (int c = 0; c < spec.width; ++c) {
        const Vec3 dir = f.camera.ray_direction(c + 0.5, r + 0.5);
        std::array<float, 3> col{0, 0, 0};
        double depth = 0;
        if (trace_scene(spec, f.camera.position(), dir, spec.near, spec.far, col, depth)) {
          f.depth->at(r, c) = static_cast<float>(depth);
          f.depth->valid[static_cast<size_t>(r) * spec.width + c] = 1;
        }
        for (int ch = 0; ch < 3; ++ch) f.image.at(ch, r, c) = col[ch];
      }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  std::string phase = "init";  // init | A | B | C
  int64_t iteration = 0;
  FieldConfig field_config;
  AEConfig ae_config;
  std::vector<std::pair<std::string, std::vector<float>>> field_params;
  std::vector<std::pair<std::string, std::vector<float>>> encoder_params;
  std::vector<std::pair<std::string, std::vector<float>>> decoder_params;

  struct OptimGroup {
    std::vector<std::vector<float>> m, v;
    std::vector<int64_t> t;
  };
  OptimGroup field_opt, encoder_opt, decoder_opt;
  // Three RNG streams (rays, patches, cameras), each (state, inc).
  std::array<uint64_t, 6> rng_streams{};
};

namespace detail {

inline void write_field_config(ByteWriter& w, const FieldConfig& c) {
  w.u32(static_cast<uint32_t>(c.latent_dim));
  w.u32(c.encoding == EncodingKind::kHashGrid ? 1u : 0u);
  w.u32(static_cast<uint32_t>(c.fourier_pos_levels));
  w.u32(static_cast<uint32_t>(c.fourier_dir_levels));
  w.u32(static_cast<uint32_t>(c.grid_levels));
  w.u32(static_cast<uint32_t>(c.grid_table_size));
  w.u32(static_cast<uint32_t>(c.grid_features));
  w.u32(static_cast<uint32_t>(c.grid_base_res));
  w.f64(c.grid_growth);
  w.u32(static_cast<uint32_t>(c.trunk_width));
  w.u32(static_cast<uint32_t>(c.trunk_depth));
  w.u32(static_cast<uint32_t>(c.color_hidden));
  w.u32(static_cast<uint32_t>(c.latent_hidden));
  w.u8(c.latent_view_dependent ? 1 : 0);
  for (double v : {c.aabb_min.x, c.aabb_min.y, c.aabb_min.z,
                   c.aabb_max.x, c.aabb_max.y, c.aabb_max.z})
    w.f64(v);
}

inline FieldConfig read_field_config(ByteReader& r) {
  FieldConfig c;
  c.latent_dim = static_cast<int>(r.u32());
  c.encoding = r.u32() ? EncodingKind::kHashGrid : EncodingKind::kFourier;
  c.fourier_pos_levels = static_cast<int>(r.u32());
  c.fourier_dir_levels = static_cast<int>(r.u32());
  c.grid_levels = static_cast<int>(r.u32());
  c.grid_table_size = static_cast<int>(r.u32());
  c.grid_features = static_cast<int>(r.u32());
  c.grid_base_res = static_cast<int>(r.u32());
  c.grid_growth = r.f64();
  c.trunk_width = static_cast<int>(r.u32());
  c.trunk_depth = static_cast<int>(r.u32());
  c.color_hidden = static_cast<int>(r.u32());
  c.latent_hidden = static_cast<int>(r.u32());
  c.latent_view_dependent = r.u8() != 0;
  c.aabb_min = {r.f64(), r.f64(), r.f64()};
  c.aabb_max = {r.f64(), r.f64(), r.f64()};
  return c;
}

inline void write_ae_config(ByteWriter& w, const AEConfig& c) {
  w.u32(static_cast<uint32_t>(c.latent_channels));
  for (int v : c.encoder_widths) w.u32(static_cast<uint32_t>(v));
  for (int v : c.decoder_widths) w.u32(static_cast<uint32_t>(v));
  w.f32(c.norm_eps);
}

inline AEConfig read_ae_config(ByteReader& r) {
  AEConfig c;
  c.latent_channels = static_cast<int>(r.u32());
  for (int& v : c.encoder_widths) v = static_cast<int>(r.u32());
  for (int& v : c.decoder_widths) v = static_cast<int>(r.u32());
  c.norm_eps = r.f32();
  return c;
}

inline void write_params(ByteWriter& w,
                         const std::vector<std::pair<std::string, std::vector<float>>>& ps) {
  w.u32(static_cast<uint32_t>(ps.size()));
  for (const auto& [name, data] : ps) {
    w.str(name);
    w.fvec(data);
  }
}

inline std::vector<std::pair<std::string, std::vector<float>>> read_params(ByteReader& r) {
  std::vector<std::pair<std::string, std::vector<float>>> ps(r.u32());
  for (auto& [name, data] : ps) {
    name = r.str();
    data = r.fvec();
  }
  return ps;
}

inline void write_optim(ByteWriter& w, const Checkpoint::OptimGroup& g) {
  w.u32(static_cast<uint32_t>(g.m.size()));
  for (size_t i = 0; i < g.m.size(); ++i) {
    w.fvec(g.m[i]);
    w.fvec(g.v[i]);
    w.i64(g.t[i]);
  }
}

inline Checkpoint::OptimGroup read_optim(ByteReader& r) {
  Checkpoint::OptimGroup g;
  const uint32_t n = r.u32();
  g.m.resize(n);
  g.v.resize(n);
  g.t.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    g.m[i] = r.fvec();
    g.v[i] = r.fvec();
    g.t[i] = r.i64();
  }
  return g;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& cp) {
  detail::ByteWriter w;
  w.str(cp.phase);
  w.i64(cp.iteration);
  detail::write_field_config(w, cp.field_config);
  detail::write_ae_config(w, cp.ae_config);
  detail::write_params(w, cp.field_params);
  detail::write_params(w, cp.encoder_params);
  detail::write_params(w, cp.decoder_params);
  detail::write_optim(w, cp.field_opt);
  detail::write_optim(w, cp.encoder_opt);
  detail::write_optim(w, cp.decoder_opt);
  for (uint64_t v : cp.rng_streams) w.u64(v);

  detail::ByteWriter file;
  file.raw("LSNF", 4);
  file.u32(cp.version);
  file.u64(w.bytes.size());
  file.raw(w.bytes.data(), w.bytes.size());
  file.u32(detail::crc32(w.bytes.data(), w.bytes.size()));
  detail::write_file(path, file.bytes.data(), file.bytes.size());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "LSNF", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  detail::ByteReader head(bytes.data() + 4, bytes.size() - 4);
  const uint32_t version = head.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  const uint64_t payload_len = head.u64();
  if (bytes.size() != 16 + payload_len + 4)
    throw std::runtime_error("checkpoint: truncated file " + path);
  const uint8_t* payload = bytes.data() + 16;
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + 16 + payload_len, 4);
  if (detail::crc32(payload, payload_len) != stored_crc)
    throw std::runtime_error("checkpoint: checksum failure in " + path);

  detail::ByteReader r(payload, payload_len);
  Checkpoint cp;
  cp.version = version;
  cp.phase = r.str();
  cp.iteration = r.i64();
  cp.field_config = detail::read_field_config(r);
  cp.ae_config = detail::read_ae_config(r);
  cp.field_params = detail::read_params(r);
  cp.encoder_params = detail::read_params(r);
  cp.decoder_params = detail::read_params(r);
  cp.field_opt = detail::read_optim(r);
  cp.encoder_opt = detail::read_optim(r);
  cp.decoder_opt = detail::read_optim(r);
  for (uint64_t& v : cp.rng_streams) v = r.u64();
  return cp;
}

// Bridges between live objects and checkpoint data.

template <typename T>
std::vector<std::pair<std::string, std::vector<float>>> snapshot_params(const ParamSet<T>& ps) {
  std::vector<std::pair<std::string, std::vector<float>>> out;
  for (const auto& [name, t] : ps.items)
    out.emplace_back(name, std::vector<float>(t.data().begin(), t.data().end()));
  return out;
}

template <typename T>
void restore_params(ParamSet<T>& ps,
                    const std::vector<std::pair<std::string, std::vector<float>>>& data) {
  if (ps.items.size() != data.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (size_t i = 0; i < data.size(); ++i) {
    auto& [name, t] = ps.items[i];
    if (name != data[i].first || t.numel() != static_cast<int64_t>(data[i].second.size()))
      throw std::runtime_error("checkpoint: parameter layout mismatch at " + name);
    for (int64_t k = 0; k < t.numel(); ++k)
      t.data()[k] = static_cast<T>(data[i].second[k]);
  }
}

template <typename T>
Checkpoint::OptimGroup snapshot_optim(const Adam<T>& opt) {
  Checkpoint::OptimGroup g;
  for (const auto& st : opt.states()) {
    g.m.emplace_back(st.m.begin(), st.m.end());
    g.v.emplace_back(st.v.begin(), st.v.end());
    g.t.push_back(st.t);
  }
  return g;
}

template <typename T>
void restore_optim(Adam<T>& opt, const Checkpoint::OptimGroup& g) {
  if (opt.states().size() != g.m.size())
    throw std::runtime_error("checkpoint: optimizer state count mismatch");
  for (size_t i = 0; i < g.m.size(); ++i) {
    auto& st = opt.states()[i];
    st.m.assign(g.m[i].begin(), g.m[i].end());
    st.v.assign(g.v[i].begin(), g.v[i].end());
    st.t = g.t[i];
  }
}

}  // namespace lsnerf
