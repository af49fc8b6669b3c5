#pragma once

// Pinhole camera: intrinsics in pixels plus a rigid camera-to-world pose.
// Convention, fixed project-wide: right-handed, camera looks down its local
// -z, image y grows downward, pixel centers at integer+0.5 coordinates.

#include <cmath>
#include <optional>

#include "lsnerf/geometry.hpp"

namespace lsnerf {

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat4 camera_to_world = Mat4::identity();

  Vec3 position() const { return camera_to_world.translation(); }

  // Direction (world, unit) through continuous pixel coords (u right, v down).
  Vec3 ray_direction(double u, double v) const {
    const Vec3 d_cam{(u - cx) / fx, -(v - cy) / fy, -1.0};
    return camera_to_world.transform_dir(d_cam).normalized();
  }

  // Same camera with all pixel quantities scaled (e.g. 1/8 for latent maps).
  Camera scaled(double s) const {
    Camera c = *this;
    c.fx *= s; c.fy *= s; c.cx *= s; c.cy *= s;
    c.width = static_cast<int>(std::lround(width * s));
    c.height = static_cast<int>(std::lround(height * s));
    return c;
  }

  struct Projection {
    double u, v;       // continuous pixel coords
    double ray_depth;  // distance from the camera center (matches DepthMap units)
  };

  // Projects a world point; empty if the point is not in front of the camera.
  std::optional<Projection> project(const Vec3& p) const {
    const Vec3 pc = camera_to_world.inverse_rigid().transform_point(p);
    if (pc.z >= -1e-9) return std::nullopt;
    Projection pr;
    pr.u = cx + fx * (pc.x / -pc.z);
    pr.v = cy - fy * (pc.y / -pc.z);
    pr.ray_depth = pc.norm();
    return pr;
  }

  double orthonormality_error() const {
    return camera_to_world.rotation().orthonormality_error();
  }
};

}  // namespace lsnerf
