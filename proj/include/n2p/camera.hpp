#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "n2p/error.hpp"

namespace n2p {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics. Continuous pixel coordinates put the center of pixel
/// (col, row) at (col + 0.5, row + 0.5).
struct Intrinsics {
  int width = 0;
  int height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;

  int pixel_count() const { return width * height; }
  bool operator==(const Intrinsics&) const = default;
};

/// Which field(s) a ray is routed to.
enum class GateClass : std::uint8_t { road = 0, scene = 1, shared = 2 };

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  int frame = 0;
  int pixel = 0;  // row * width + col
  GateClass gate = GateClass::scene;
};

/// Camera-to-world pose in the OpenCV convention: camera x right, y down,
/// z forward. Columns of `rotation` are the camera axes in world coordinates.
struct CameraModel {
  Intrinsics intrinsics;
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();

  void validate() const {
    if (intrinsics.width <= 0 || intrinsics.height <= 0)
      throw ValueError("camera: image size must be positive");
    if (!(intrinsics.fx > 0) || !(intrinsics.fy > 0)) throw ValueError("camera: fx and fy must be positive");
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9)
      throw ValueError("camera: rotation is not a proper orthonormal matrix");
  }

  /// Unit world-space direction through continuous pixel coordinates (u, v).
  Vec3 direction(double u, double v) const {
    const Vec3 d((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0);
    return (rotation * d).normalized();
  }

  Ray ray_through(double u, double v) const {
    Ray r;
    r.origin = position;
    r.direction = direction(u, v);
    return r;
  }

  /// Continuous pixel coordinates of a world point, if it lies in front of
  /// the camera (on or outside the image is left to the caller).
  std::optional<Vec2> project(const Vec3& world) const {
    const Vec3 c = rotation.transpose() * (world - position);
    if (c.z() <= 1e-12) return std::nullopt;
    return Vec2(intrinsics.fx * c.x() / c.z() + intrinsics.cx, intrinsics.fy * c.y() / c.z() + intrinsics.cy);
  }

  bool in_image(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.y() >= 0.0 && uv.x() < intrinsics.width && uv.y() < intrinsics.height;
  }
};

/// Camera-to-world rotation looking along `forward` with world +z up.
inline Mat3 look_rotation(const Vec3& forward) {
  const Vec3 f = forward.normalized();
  Vec3 right = f.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) right = Vec3::UnitX();
  right.normalize();
  const Vec3 down = f.cross(right).normalized();
  Mat3 r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = f;
  return r;
}

/// One ray per pixel through the pixel center, row-major order.
inline std::vector<Ray> rays_from_camera(const CameraModel& cam, int frame = 0) {
  cam.validate();
  const auto& k = cam.intrinsics;
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(k.pixel_count()));
  for (int row = 0; row < k.height; ++row)
    for (int col = 0; col < k.width; ++col) {
      Ray r = cam.ray_through(col + 0.5, row + 0.5);
      r.frame = frame;
      r.pixel = row * k.width + col;
      rays.push_back(r);
    }
  return rays;
}

}  // namespace n2p
