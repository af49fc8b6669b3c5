#pragma once

// Small fixed-size linear algebra for camera work: 3-vectors, 3x3 rotation
// matrices, rigid 4x4 transforms, and the SO(3) exp/log maps used for pose
// interpolation. Double precision throughout; poses are small data.

#include <array>
#include <cmath>
#include <stdexcept>

namespace lsnerf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    if (n == 0) throw std::invalid_argument("Vec3: cannot normalize zero vector");
    return *this / n;
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct Mat3 {
  // Row-major.
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }
  static Mat3 from_cols(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
    Mat3 r;
    r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
    return r;
  }

  double& operator()(int r, int c) { return m[r * 3 + c]; }
  double operator()(int r, int c) const { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  double trace() const { return m[0] + m[4] + m[8]; }

  // Max |R^T R - I| entry; 0 for an exact rotation.
  double orthonormality_error() const {
    const Mat3 e = transposed() * (*this);
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        worst = std::max(worst, std::abs(e(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
  }
};

// Axis-angle exponential (Rodrigues).
inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  Mat3 r = Mat3::identity();
  if (theta < 1e-12) return r;
  const Vec3 a = w / theta;
  const double c = std::cos(theta), s = std::sin(theta), t = 1 - c;
  r.m = {c + a.x * a.x * t,        a.x * a.y * t - a.z * s,  a.x * a.z * t + a.y * s,
         a.y * a.x * t + a.z * s,  c + a.y * a.y * t,        a.y * a.z * t - a.x * s,
         a.z * a.x * t - a.y * s,  a.z * a.y * t + a.x * s,  c + a.z * a.z * t};
  return r;
}

// Logarithm of a rotation matrix as an axis-angle vector.
inline Vec3 so3_log(const Mat3& r) {
  const double cos_theta = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta < 1e-12) return {0, 0, 0};
  if (theta > M_PI - 1e-6) {
    // Near pi: extract the axis from the symmetric part.
    Vec3 axis;
    const double xx = (r(0, 0) + 1) / 2, yy = (r(1, 1) + 1) / 2, zz = (r(2, 2) + 1) / 2;
    if (xx >= yy && xx >= zz) {
      axis.x = std::sqrt(std::max(xx, 0.0));
      axis.y = r(0, 1) / (2 * axis.x);
      axis.z = r(0, 2) / (2 * axis.x);
    } else if (yy >= zz) {
      axis.y = std::sqrt(std::max(yy, 0.0));
      axis.x = r(0, 1) / (2 * axis.y);
      axis.z = r(1, 2) / (2 * axis.y);
    } else {
      axis.z = std::sqrt(std::max(zz, 0.0));
      axis.x = r(0, 2) / (2 * axis.z);
      axis.y = r(1, 2) / (2 * axis.z);
    }
    return axis.normalized() * theta;
  }
  const double scale = theta / (2 * std::sin(theta));
  return Vec3{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)} * scale;
}

// Weighted geodesic mean of rotations, iterated until the update is tiny.
template <typename It>
Mat3 rotation_average(It first, It last, const double* weights) {
  Mat3 mean = *first;
  for (int iter = 0; iter < 32; ++iter) {
    Vec3 delta{0, 0, 0};
    int i = 0;
    for (It it = first; it != last; ++it, ++i)
      delta += weights[i] * so3_log(mean.transposed() * (*it));
    mean = mean * so3_exp(delta);
    if (delta.norm() < 1e-12) break;
  }
  return mean;
}

struct Mat4 {
  // Row-major rigid transform.
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Mat4 identity() { return Mat4{}; }
  static Mat4 from_rt(const Mat3& r, const Vec3& t) {
    Mat4 out;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out.m[i * 4 + j] = r(i, j);
    out.m[3] = t.x;
    out.m[7] = t.y;
    out.m[11] = t.z;
    return out;
  }

  double& operator()(int r, int c) { return m[r * 4 + c]; }
  double operator()(int r, int c) const { return m[r * 4 + c]; }

  Mat3 rotation() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(i, j);
    return r;
  }
  Vec3 translation() const { return {m[3], m[7], m[11]}; }

  Vec3 transform_point(const Vec3& p) const {
    return rotation() * p + translation();
  }
  Vec3 transform_dir(const Vec3& d) const { return rotation() * d; }

  // Inverse of a rigid transform.
  Mat4 inverse_rigid() const {
    const Mat3 rt = rotation().transposed();
    const Vec3 t = translation();
    return from_rt(rt, -(rt * t));
  }

  Mat4 operator*(const Mat4& o) const {
    Mat4 r;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }
};

// Camera-to-world pose with the camera at `eye` looking toward `target`;
// right-handed, camera looks down its local -z.
inline Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up_hint) {
  const Vec3 forward = (target - eye).normalized();   // world direction of -z
  Vec3 right = forward.cross(up_hint);
  if (right.norm() < 1e-9) right = forward.cross(Vec3{0, 0, 1});
  right = right.normalized();
  const Vec3 up = right.cross(forward).normalized();
  return Mat4::from_rt(Mat3::from_cols(right, up, -forward), eye);
}

}  // namespace lsnerf
