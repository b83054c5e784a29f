#pragma once

// Procedural street scene: a finite ground plane at z = 0 split into road,
// sidewalk and grass strips along x, plus axis-aligned buildings on both
// sides. Frames are ray traced analytically with Lambertian shading.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "n2p/camera.hpp"
#include "n2p/config.hpp"
#include "n2p/error.hpp"
#include "n2p/frame.hpp"
#include "n2p/geometry.hpp"
#include "n2p/log.hpp"
#include "n2p/rng.hpp"

namespace n2p {

struct SceneSpec {
  std::uint64_t seed = 7;
  double x_min = -6.0;
  double x_max = 38.0;
  double road_half_width = 3.5;
  double sidewalk_width = 2.5;
  double grass_width = 4.0;
  int box_count = 8;
  double box_length_min = 3.0, box_length_max = 6.0;
  double box_depth_min = 3.0, box_depth_max = 5.0;
  double box_height_min = 3.0, box_height_max = 7.0;
  double box_setback_max = 1.0;  // gap between sidewalk edge and facade
  double ambient = 0.45;

  double ground_half_width() const { return road_half_width + sidewalk_width + grass_width; }

  void validate() const {
    if (!(x_max > x_min)) throw ValueError("scene: x_max must exceed x_min");
    if (!(road_half_width > 0) || sidewalk_width < 0 || grass_width < 0)
      throw ValueError("scene: strip widths must be nonnegative and the road positive");
    if (box_count < 0) throw ValueError("scene: box_count must be >= 0");
    if (!(box_length_min > 0) || box_length_max < box_length_min || !(box_depth_min > 0) ||
        box_depth_max < box_depth_min || !(box_height_min > 0) || box_height_max < box_height_min)
      throw ValueError("scene: box size ranges must be positive and ordered");
    if (!(ambient >= 0 && ambient <= 1)) throw ValueError("scene: ambient must be in [0, 1]");
  }

  void write(KeyValues& kv) const {
    kv.set("scene_seed", seed);
    kv.set("x_min", x_min);
    kv.set("x_max", x_max);
    kv.set("road_half_width", road_half_width);
    kv.set("sidewalk_width", sidewalk_width);
    kv.set("grass_width", grass_width);
    kv.set("box_count", box_count);
    kv.set("ambient", ambient);
  }
  static SceneSpec read(const KeyValues& kv) {
    SceneSpec s;
    s.seed = kv.get("scene_seed", s.seed);
    s.x_min = kv.get("x_min", s.x_min);
    s.x_max = kv.get("x_max", s.x_max);
    s.road_half_width = kv.get("road_half_width", s.road_half_width);
    s.sidewalk_width = kv.get("sidewalk_width", s.sidewalk_width);
    s.grass_width = kv.get("grass_width", s.grass_width);
    s.box_count = kv.get("box_count", s.box_count);
    s.ambient = kv.get("ambient", s.ambient);
    s.validate();
    return s;
  }
};

enum class Surface : std::uint8_t { road, sidewalk, grass, facade, roof };

struct Box {
  Vec3 lo, hi;
  Vec3 base;  // wall albedo
  double window_phase = 0.0;
};

struct SceneModel {
  SceneSpec spec;
  std::vector<Box> boxes;
  Vec3 light = Vec3(0.35, 0.5, 0.8).normalized();
};

struct SurfaceHit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Surface surface = Surface::road;
  int box = -1;
};

inline SceneModel build_scene(const SceneSpec& spec) {
  spec.validate();
  SceneModel s;
  s.spec = spec;
  Rng rng = Rng::stream(spec.seed, 101);
  const Vec3 palette[] = {{0.75, 0.55, 0.45}, {0.6, 0.62, 0.7}, {0.82, 0.78, 0.62}, {0.55, 0.4, 0.35}, {0.7, 0.7, 0.68}};
  const double edge = spec.road_half_width + spec.sidewalk_width;
  // Boxes alternate sides; each side fills x_min..x_max left to right.
  double cursor[2] = {spec.x_min + rng.uniform(0.0, 2.0), spec.x_min + rng.uniform(0.0, 2.0)};
  for (int i = 0; i < spec.box_count; ++i) {
    const int side = i % 2;
    Box b;
    const double len = rng.uniform(spec.box_length_min, spec.box_length_max);
    const double depth = rng.uniform(spec.box_depth_min, spec.box_depth_max);
    const double height = rng.uniform(spec.box_height_min, spec.box_height_max);
    const double gap = rng.uniform(0.0, spec.box_setback_max);
    const double x0 = cursor[side];
    cursor[side] = x0 + len + rng.uniform(0.5, 3.0);
    const double y_in = edge + gap;
    if (side == 0) {
      b.lo = Vec3(x0, y_in, 0.0);
      b.hi = Vec3(x0 + len, y_in + depth, height);
    } else {
      b.lo = Vec3(x0, -(y_in + depth), 0.0);
      b.hi = Vec3(x0 + len, -y_in, height);
    }
    b.base = palette[rng.below(std::size(palette))];
    b.window_phase = rng.uniform(0.0, 1.0);
    s.boxes.push_back(b);
  }
  return s;
}

namespace detail {

inline double hash_noise(long ix, long iy, std::uint64_t seed) {
  const auto h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ix) * 0x9e3779b97f4a7c15ULL +
                                              static_cast<std::uint64_t>(iy)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Bilinear value noise in [0, 1) at the given cell size.
inline double value_noise(double x, double y, double cell, std::uint64_t seed) {
  const double fx = x / cell, fy = y / cell;
  const long ix = static_cast<long>(std::floor(fx)), iy = static_cast<long>(std::floor(fy));
  const double ax = fx - ix, ay = fy - iy;
  const double sx = ax * ax * (3 - 2 * ax), sy = ay * ay * (3 - 2 * ay);
  const double a = hash_noise(ix, iy, seed), b = hash_noise(ix + 1, iy, seed);
  const double c = hash_noise(ix, iy + 1, seed), d = hash_noise(ix + 1, iy + 1, seed);
  return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy;
}

inline bool ray_box(const Vec3& o, const Vec3& d, const Box& b, double& t_hit, Vec3& n) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d(k)) < 1e-15) {
      if (o(k) < b.lo(k) || o(k) > b.hi(k)) return false;
      continue;
    }
    double a = (b.lo(k) - o(k)) / d(k), c = (b.hi(k) - o(k)) / d(k);
    double s = -1.0;
    if (a > c) {
      std::swap(a, c);
      s = 1.0;
    }
    if (a > t0) {
      t0 = a;
      axis = k;
      sign = s;
    }
    t1 = std::min(t1, c);
  }
  if (t0 > t1 || t0 <= 1e-9 || axis < 0) return false;
  t_hit = t0;
  n = Vec3::Zero();
  n(axis) = sign;
  return true;
}

}  // namespace detail

/// Nearest surface along o + t d, t > 0.
inline std::optional<SurfaceHit> intersect(const SceneModel& scene, const Vec3& o, const Vec3& d) {
  SurfaceHit best;
  if (d.z() < -1e-12 && o.z() > 0.0) {
    const double t = -o.z() / d.z();
    const Vec3 p = o + t * d;
    const double ay = std::abs(p.y());
    if (p.x() >= scene.spec.x_min && p.x() <= scene.spec.x_max && ay <= scene.spec.ground_half_width()) {
      best.t = t;
      best.point = Vec3(p.x(), p.y(), 0.0);
      best.normal = Vec3::UnitZ();
      best.surface = ay <= scene.spec.road_half_width ? Surface::road
                     : ay <= scene.spec.road_half_width + scene.spec.sidewalk_width ? Surface::sidewalk
                                                                                    : Surface::grass;
    }
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    double t;
    Vec3 n;
    if (detail::ray_box(o, d, scene.boxes[i], t, n) && t < best.t) {
      best.t = t;
      best.point = o + t * d;
      best.normal = n;
      best.surface = n.z() > 0.5 ? Surface::roof : Surface::facade;
      best.box = static_cast<int>(i);
    }
  }
  if (!std::isfinite(best.t)) return std::nullopt;
  return best;
}

inline Vec3 albedo(const SceneModel& scene, const SurfaceHit& h) {
  const auto& sp = scene.spec;
  const Vec3& p = h.point;
  switch (h.surface) {
    case Surface::road: {
      const double ay = std::abs(p.y());
      const bool dash = ay < 0.1 && std::fmod(p.x() - sp.x_min, 4.0) < 2.0;
      const bool edge = ay > sp.road_half_width - 0.25 && ay < sp.road_half_width - 0.1;
      if (dash || edge) return Vec3::Constant(0.92);
      const double n = detail::value_noise(p.x(), p.y(), 1.5, sp.seed + 1);
      return Vec3::Constant(0.26 + 0.08 * n);
    }
    case Surface::sidewalk: {
      const long cx = static_cast<long>(std::floor(p.x() / 0.75)), cy = static_cast<long>(std::floor(p.y() / 0.75));
      return ((cx + cy) & 1) ? Vec3(0.72, 0.7, 0.66) : Vec3(0.55, 0.54, 0.52);
    }
    case Surface::grass: {
      const double n = detail::value_noise(p.x(), p.y(), 0.8, sp.seed + 2);
      return Vec3(0.18, 0.38, 0.12) * (0.8 + 0.4 * n);
    }
    case Surface::roof: return Vec3::Constant(0.35);
    case Surface::facade: {
      const Box& b = scene.boxes[static_cast<std::size_t>(h.box)];
      const double along = std::abs(h.normal.x()) > 0.5 ? p.y() : p.x();
      const double u = std::fmod(std::abs(along) / 1.6 + b.window_phase, 1.0);
      const double v = std::fmod(p.z() / 1.4, 1.0);
      const bool window = p.z() > 0.8 && u > 0.25 && u < 0.75 && v > 0.3 && v < 0.8;
      return window ? Vec3(0.12, 0.16, 0.26) : b.base;
    }
  }
  return Vec3::Zero();
}

/// Lambertian radiance toward any viewer.
inline Vec3 shade(const SceneModel& scene, const SurfaceHit& h) {
  const double lambert = std::max(0.0, h.normal.dot(scene.light));
  const double k = scene.spec.ambient + (1.0 - scene.spec.ambient) * lambert;
  return (albedo(scene, h) * k).cwiseMin(1.0).cwiseMax(0.0);
}

inline FrameRecord raytrace_frame(const SceneModel& scene, const CameraModel& cam, int index = 0) {
  cam.validate();
  FrameRecord f;
  f.index = index;
  f.camera = cam;
  const auto n = static_cast<std::size_t>(cam.intrinsics.pixel_count());
  f.rgb.assign(3 * n, 0.f);
  f.depth.assign(n, kNoHitDepth);
  f.normal.assign(3 * n, 0.f);
  f.road_mask.assign(n, 0);
  for (const Ray& r : rays_from_camera(cam, index)) {
    const auto hit = intersect(scene, r.origin, r.direction);
    if (!hit) continue;
    const auto p = static_cast<std::size_t>(r.pixel);
    const Vec3 c = shade(scene, *hit);
    for (int k = 0; k < 3; ++k) {
      f.rgb[3 * p + k] = static_cast<float>(c(k));
      f.normal[3 * p + k] = static_cast<float>(hit->normal(k));
    }
    f.depth[p] = static_cast<float>(hit->t);
    f.road_mask[p] = hit->surface == Surface::road ? 1 : 0;
  }
  return f;
}

struct TrajectorySpec {
  int frames = 8;
  double spacing = 2.0;
  double start_x = 0.0;
  double lane_y = -1.75;
  double height = 1.6;
  double pitch_deg = 10.0;
  double heading_noise_deg = 1.5;
  Intrinsics intrinsics{64, 48, 51.2, 51.2, 32.0, 24.0};

  void validate() const {
    if (frames < 2) throw ValueError("trajectory: need at least 2 frames");
    if (spacing < 0) throw ValueError("trajectory: spacing must be >= 0");
    if (!(height > 0)) throw ValueError("trajectory: camera height must be positive");
  }

  void write(KeyValues& kv) const {
    kv.set("frames", frames);
    kv.set("spacing", spacing);
    kv.set("start_x", start_x);
    kv.set("lane_y", lane_y);
    kv.set("camera_height", height);
    kv.set("pitch_deg", pitch_deg);
    kv.set("heading_noise_deg", heading_noise_deg);
    kv.set("width", intrinsics.width);
    kv.set("height", intrinsics.height);
    kv.set("fx", intrinsics.fx);
    kv.set("fy", intrinsics.fy);
    kv.set("cx", intrinsics.cx);
    kv.set("cy", intrinsics.cy);
  }
  static TrajectorySpec read(const KeyValues& kv) {
    TrajectorySpec t;
    t.frames = kv.get("frames", t.frames);
    t.spacing = kv.get("spacing", t.spacing);
    t.start_x = kv.get("start_x", t.start_x);
    t.lane_y = kv.get("lane_y", t.lane_y);
    t.height = kv.get("camera_height", t.height);
    t.pitch_deg = kv.get("pitch_deg", t.pitch_deg);
    t.heading_noise_deg = kv.get("heading_noise_deg", t.heading_noise_deg);
    t.intrinsics.width = kv.get("width", t.intrinsics.width);
    t.intrinsics.height = kv.get("height", t.intrinsics.height);
    t.intrinsics.fx = kv.get("fx", t.intrinsics.fx);
    t.intrinsics.fy = kv.get("fy", t.intrinsics.fy);
    t.intrinsics.cx = kv.get("cx", t.intrinsics.cx);
    t.intrinsics.cy = kv.get("cy", t.intrinsics.cy);
    t.validate();
    return t;
  }
};

struct Trajectory {
  std::vector<CameraModel> cameras;
  std::vector<double> overlap;  // overlap[i]: fraction of frame i's frustum seen by frame i+1
};

/// Fraction of points sampled in a's frustum (pixel grid x depths in
/// [near, far]) that project into b's image in front of b.
inline double frustum_overlap(const CameraModel& a, const CameraModel& b, double near = 0.5, double far = 20.0,
                              int grid = 12, int depths = 10) {
  int inside = 0, total = 0;
  const auto& k = a.intrinsics;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const Vec3 d = a.direction((gx + 0.5) * k.width / grid, (gy + 0.5) * k.height / grid);
      for (int i = 0; i < depths; ++i) {
        const double t = near + (far - near) * (i + 0.5) / depths;
        const auto uv = b.project(a.position + t * d);
        ++total;
        if (uv && b.in_image(*uv)) ++inside;
      }
    }
  return static_cast<double>(inside) / total;
}

/// Straight drive along +x. Heading wobble is a function of distance
/// traveled, so zero spacing gives identical poses.
inline Trajectory make_trajectory(const TrajectorySpec& spec) {
  spec.validate();
  Trajectory tr;
  const double pitch = spec.pitch_deg * std::numbers::pi / 180.0;
  for (int i = 0; i < spec.frames; ++i) {
    const double s = i * spec.spacing;
    const double yaw = spec.heading_noise_deg * std::numbers::pi / 180.0 * std::sin(0.9 * s + 0.3 * std::sin(2.3 * s));
    const Vec3 fwd(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), -std::sin(pitch));
    CameraModel cam;
    cam.intrinsics = spec.intrinsics;
    cam.rotation = look_rotation(fwd);
    cam.position = Vec3(spec.start_x + s, spec.lane_y, spec.height);
    cam.validate();
    tr.cameras.push_back(cam);
  }
  for (int i = 0; i + 1 < spec.frames; ++i)
    tr.overlap.push_back(frustum_overlap(tr.cameras[static_cast<std::size_t>(i)], tr.cameras[static_cast<std::size_t>(i + 1)]));
  return tr;
}

/// True if the surface point is the first hit seen from the camera.
inline bool visible_from(const SceneModel& scene, const CameraModel& cam, const Vec3& x, double tol = 1e-6) {
  const Vec3 d = x - cam.position;
  const double dist = d.norm();
  if (dist < 1e-9) return false;
  const auto hit = intersect(scene, cam.position, d / dist);
  return hit && std::abs(hit->t - dist) <= tol * std::max(1.0, dist);
}

struct ProjectedPairs {
  CorrespondencePairs pairs;
  std::size_t excluded = 0;
};

/// Projects anchors into both frames; anchors behind, outside or occluded in
/// either frame are excluded.
inline ProjectedPairs project_correspondences(const SceneModel& scene, const CameraModel& a, const CameraModel& b,
                                              std::span<const Vec3> anchors, int frame_a = 0, int frame_b = 1) {
  ProjectedPairs out;
  out.pairs.frame_a = frame_a;
  out.pairs.frame_b = frame_b;
  for (const auto& x : anchors) {
    const auto ua = a.project(x), ub = b.project(x);
    if (!ua || !ub || !a.in_image(*ua) || !b.in_image(*ub) || !visible_from(scene, a, x) || !visible_from(scene, b, x)) {
      ++out.excluded;
      continue;
    }
    out.pairs.uv_a.push_back(*ua);
    out.pairs.uv_b.push_back(*ub);
  }
  return out;
}

namespace detail {

/// Samples a planar rectangle o + u e1 + v e2, u, v in [0,1], with the R2
/// low-discrepancy sequence.
template <class F>
void sample_rect(const Vec3& o, const Vec3& e1, const Vec3& e2, double density, std::uint64_t seed, F&& emit) {
  const double area = e1.cross(e2).norm();
  const auto count = static_cast<long>(std::llround(area * density));
  constexpr double g = 1.32471795724474602596;
  const double a1 = 1.0 / g, a2 = 1.0 / (g * g);
  const double off = hash_noise(static_cast<long>(seed), 17, 3);
  for (long i = 0; i < count; ++i) {
    const double u = std::fmod(off + a1 * (i + 1), 1.0);
    const double v = std::fmod(off + a2 * (i + 1), 1.0);
    emit(o + u * e1 + v * e2);
  }
}

}  // namespace detail

struct VisibilityFilter {
  std::vector<CameraModel> cameras;
  double max_range = 20.0;
};

/// Surface samples at `density` points per square meter, colored with the
/// shaded surface color. With a filter, only points inside some camera's
/// image, within max_range of it and unoccluded are kept.
inline PointCloud sample_gt_cloud(const SceneModel& scene, double density, const VisibilityFilter* filter = nullptr) {
  if (!(density > 0.0)) throw ValueError("sample_gt_cloud: density must be positive");
  PointCloud pc;
  std::uint64_t face = 0;
  auto keep = [&](const Vec3& x) {
    if (!filter) return true;
    for (const auto& cam : filter->cameras) {
      if ((x - cam.position).norm() > filter->max_range) continue;
      const auto uv = cam.project(x);
      if (uv && cam.in_image(*uv) && visible_from(scene, cam, x)) return true;
    }
    return false;
  };
  auto emit_surface = [&](const Vec3& o, const Vec3& e1, const Vec3& e2, const Vec3& normal, Surface s, int box) {
    detail::sample_rect(o, e1, e2, density, scene.spec.seed * 131 + face++, [&](const Vec3& x) {
      if (!keep(x)) return;
      SurfaceHit h;
      h.point = x;
      h.normal = normal;
      h.surface = s;
      h.box = box;
      pc.points.push_back(x);
      pc.colors.push_back(shade(scene, h));
    });
  };
  const auto& sp = scene.spec;
  const double L = sp.x_max - sp.x_min;
  const Vec3 ex(L, 0, 0);
  const double r = sp.road_half_width, w = sp.sidewalk_width, gw = sp.grass_width;
  emit_surface({sp.x_min, -r, 0}, ex, {0, 2 * r, 0}, Vec3::UnitZ(), Surface::road, -1);
  for (double sign : {1.0, -1.0}) {
    if (w > 0) emit_surface({sp.x_min, sign > 0 ? r : -r - w, 0}, ex, {0, w, 0}, Vec3::UnitZ(), Surface::sidewalk, -1);
    if (gw > 0)
      emit_surface({sp.x_min, sign > 0 ? r + w : -r - w - gw, 0}, ex, {0, gw, 0}, Vec3::UnitZ(), Surface::grass, -1);
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box& b = scene.boxes[i];
    const Vec3 s = b.hi - b.lo;
    const int bi = static_cast<int>(i);
    emit_surface({b.lo.x(), b.lo.y(), b.hi.z()}, {s.x(), 0, 0}, {0, s.y(), 0}, Vec3::UnitZ(), Surface::roof, bi);
    emit_surface(b.lo, {0, s.y(), 0}, {0, 0, s.z()}, -Vec3::UnitX(), Surface::facade, bi);
    emit_surface({b.hi.x(), b.lo.y(), b.lo.z()}, {0, s.y(), 0}, {0, 0, s.z()}, Vec3::UnitX(), Surface::facade, bi);
    emit_surface(b.lo, {s.x(), 0, 0}, {0, 0, s.z()}, -Vec3::UnitY(), Surface::facade, bi);
    emit_surface({b.lo.x(), b.hi.y(), b.lo.z()}, {s.x(), 0, 0}, {0, 0, s.z()}, Vec3::UnitY(), Surface::facade, bi);
  }
  return pc;
}

/// Audit used by tests: every box sits on the ground and clears the road.
inline bool boxes_clear_road(const SceneModel& scene) {
  for (const auto& b : scene.boxes) {
    if (b.lo.z() < 0.0) return false;
    if (b.lo.y() < scene.spec.road_half_width && b.hi.y() > -scene.spec.road_half_width) return false;
  }
  return true;
}

}  // namespace n2p
