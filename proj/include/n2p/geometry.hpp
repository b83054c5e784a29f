#pragma once

// Point clouds, rigid alignment and the Chamfer metric. All double precision.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "n2p/camera.hpp"
#include "n2p/error.hpp"
#include "n2p/log.hpp"

namespace n2p {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // empty, or one per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_colors() const { return !colors.empty(); }

  void validate() const {
    if (!colors.empty() && colors.size() != points.size())
      throw ShapeError("point cloud: " + std::to_string(colors.size()) + " colors for " +
                       std::to_string(points.size()) + " points");
    for (std::size_t i = 0; i < points.size(); ++i)
      if (!points[i].allFinite()) throw ValueError("point cloud: non-finite point " + std::to_string(i));
  }

  void append(const PointCloud& other) {
    if (!empty() && has_colors() != other.has_colors() && !other.empty())
      throw ShapeError("point cloud append: color presence differs");
    points.insert(points.end(), other.points.begin(), other.points.end());
    colors.insert(colors.end(), other.colors.begin(), other.colors.end());
  }
};

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  /// (this * other)(p) = this(other(p)).
  RigidTransform operator*(const RigidTransform& o) const { return {R * o.R, R * o.t + t}; }

  double orthogonality_error() const { return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff(); }
  bool is_proper(double tol = 1e-9) const {
    return orthogonality_error() <= tol && std::abs(R.determinant() - 1.0) <= tol;
  }
  void validate(double tol = 1e-9) const {
    if (!R.allFinite() || !t.allFinite()) throw ValueError("rigid transform: non-finite entries");
    if (!is_proper(tol)) throw ValueError("rigid transform: rotation is not in SO(3)");
  }
};

struct ExtractResult {
  PointCloud cloud;
  std::size_t dropped = 0;  // rows with nonpositive or non-finite depth
};

/// point_i = origin_i + depth_i * direction_i. colors may be empty.
inline ExtractResult extract_points(std::span<const Ray> rays, std::span<const double> depths,
                                    std::span<const Vec3> colors = {}) {
  if (rays.size() != depths.size())
    throw ShapeError("extract_points: " + std::to_string(rays.size()) + " rays, " +
                     std::to_string(depths.size()) + " depths");
  if (!colors.empty() && colors.size() != rays.size())
    throw ShapeError("extract_points: " + std::to_string(colors.size()) + " colors for " +
                     std::to_string(rays.size()) + " rays");
  ExtractResult out;
  for (std::size_t i = 0; i < rays.size(); ++i) {
    if (std::abs(rays[i].direction.norm() - 1.0) > 1e-6)
      throw ValueError("extract_points: ray " + std::to_string(i) + " direction is not unit length");
    if (!(depths[i] > 0.0) || !std::isfinite(depths[i])) {
      ++out.dropped;
      continue;
    }
    out.cloud.points.push_back(rays[i].origin + depths[i] * rays[i].direction);
    if (!colors.empty()) out.cloud.colors.push_back(colors[i]);
  }
  if (out.dropped) log::info("extract_points: dropped " + std::to_string(out.dropped) + " rows with nonpositive depth");
  return out;
}

/// Least-squares proper rotation and translation with R p_i + t ~ q_i.
inline RigidTransform kabsch(std::span<const Vec3> P, std::span<const Vec3> Q) {
  if (P.size() != Q.size()) throw ShapeError("kabsch: correspondence sets differ in length");
  if (P.size() < 3) throw DegenerateConfiguration("kabsch: need at least 3 correspondences, got " + std::to_string(P.size()));
  const double inv = 1.0 / static_cast<double>(P.size());
  Vec3 pc = Vec3::Zero(), qc = Vec3::Zero();
  for (std::size_t i = 0; i < P.size(); ++i) {
    pc += P[i];
    qc += Q[i];
  }
  pc *= inv;
  qc *= inv;
  Mat3 H = Mat3::Zero();
  for (std::size_t i = 0; i < P.size(); ++i) H += (P[i] - pc) * (Q[i] - qc).transpose();
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s(0) > 0.0) || s(1) <= 1e-12 * s(0))
    throw DegenerateConfiguration("kabsch: points are collinear or coincident");
  const Mat3 U = svd.matrixU(), V = svd.matrixV();
  Mat3 D = Mat3::Identity();
  if ((V * U.transpose()).determinant() < 0.0) D(2, 2) = -1.0;
  RigidTransform T;
  T.R = V * D * U.transpose();
  T.t = qc - T.R * pc;
  return T;
}

/// Exact nearest-neighbor queries over a dense uniform grid. Rings of cells
/// are searched outward until no unvisited cell can hold a closer point.
class NearestIndex {
 public:
  explicit NearestIndex(std::span<const Vec3> points) : pts_(points.begin(), points.end()) {
    if (pts_.empty()) throw ValueError("nearest index: empty point set");
    lo_ = hi_ = pts_[0];
    for (const auto& p : pts_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    const Vec3 ext = hi_ - lo_;
    const double target = static_cast<double>(pts_.size());
    double a = 1e-9, b = std::max(ext.maxCoeff(), 1e-9) * 2.0;
    for (int it = 0; it < 60; ++it) {
      const double m = std::sqrt(a * b);
      (cells_for(ext, m) > target ? a : b) = m;
    }
    h_ = b;
    for (int k = 0; k < 3; ++k) dims_[k] = static_cast<int>(std::floor(ext(k) / h_)) + 1;
    const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    start_.assign(ncell + 1, 0);
    std::vector<std::size_t> cell_of(pts_.size());
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      cell_of[i] = flat(cell_coord(pts_[i]));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < ncell; ++c) start_[c + 1] += start_[c];
    order_.resize(pts_.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts_.size(); ++i) order_[fill[cell_of[i]]++] = static_cast<std::uint32_t>(i);
  }

  struct Hit {
    std::size_t index = 0;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  /// Nearest stored point; ties resolve to the lowest index. `skip` excludes
  /// one stored index, for leave-one-out queries.
  Hit nearest(const Vec3& q, std::size_t skip = static_cast<std::size_t>(-1)) const {
    std::array<long, 3> c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<long>(std::floor((q(k) - lo_(k)) / h_));
    long k0 = 0;
    for (int k = 0; k < 3; ++k) k0 = std::max({k0, -c[k], c[k] - (dims_[k] - 1)});
    const long kmax = k0 + std::max({dims_[0], dims_[1], dims_[2]});
    Hit best;
    for (long ring = k0; ring <= kmax; ++ring) {
      visit_ring(c, ring, q, skip, best);
      const double bound = static_cast<double>(ring) * h_;
      if (best.sq_dist <= bound * bound) break;
    }
    return best;
  }

  std::size_t size() const { return pts_.size(); }
  const Vec3& point(std::size_t i) const { return pts_[i]; }

 private:
  static double cells_for(const Vec3& ext, double h) {
    double n = 1.0;
    for (int k = 0; k < 3; ++k) n *= std::floor(ext(k) / h) + 1.0;
    return n;
  }

  std::array<int, 3> cell_coord(const Vec3& p) const {
    std::array<int, 3> c;
    for (int k = 0; k < 3; ++k)
      c[k] = std::clamp(static_cast<int>(std::floor((p(k) - lo_(k)) / h_)), 0, dims_[k] - 1);
    return c;
  }
  std::size_t flat(const std::array<int, 3>& c) const {
    return (static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  }

  void scan_cell(long x, long y, long z, const Vec3& q, std::size_t skip, Hit& best) const {
    if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
    const std::size_t c = flat({static_cast<int>(x), static_cast<int>(y), static_cast<int>(z)});
    for (std::size_t j = start_[c]; j < start_[c + 1]; ++j) {
      const std::size_t i = order_[j];
      if (i == skip) continue;
      const double d = (pts_[i] - q).squaredNorm();
      if (d < best.sq_dist || (d == best.sq_dist && i < best.index)) best = {i, d};
    }
  }

  void visit_ring(const std::array<long, 3>& c, long r, const Vec3& q, std::size_t skip, Hit& best) const {
    const long x0 = std::max(c[0] - r, 0L), x1 = std::min(c[0] + r, static_cast<long>(dims_[0]) - 1);
    const long y0 = std::max(c[1] - r, 0L), y1 = std::min(c[1] + r, static_cast<long>(dims_[1]) - 1);
    const long z0 = std::max(c[2] - r, 0L), z1 = std::min(c[2] + r, static_cast<long>(dims_[2]) - 1);
    for (long z = z0; z <= z1; ++z)
      for (long y = y0; y <= y1; ++y) {
        const bool face = std::abs(z - c[2]) == r || std::abs(y - c[1]) == r;
        if (face) {
          for (long x = x0; x <= x1; ++x) scan_cell(x, y, z, q, skip, best);
        } else {
          if (c[0] - r >= x0) scan_cell(c[0] - r, y, z, q, skip, best);
          if (r > 0 && c[0] + r <= x1) scan_cell(c[0] + r, y, z, q, skip, best);
        }
      }
  }

  std::vector<Vec3> pts_;
  Vec3 lo_, hi_;
  double h_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<std::uint32_t> order_;
};

/// mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw ValueError("chamfer: empty point cloud");
  const NearestIndex ia(a.points), ib(b.points);
  double sa = 0.0, sb = 0.0;
  for (const auto& p : a.points) sa += ib.nearest(p).sq_dist;
  for (const auto& p : b.points) sb += ia.nearest(p).sq_dist;
  return sa / static_cast<double>(a.size()) + sb / static_cast<double>(b.size());
}

/// Mean distance from each point to its nearest other point.
inline double mean_spacing(const PointCloud& c) {
  if (c.size() < 2) throw ValueError("mean_spacing: need at least 2 points");
  const NearestIndex idx(c.points);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += std::sqrt(idx.nearest(c.points[i], i).sq_dist);
  return s / static_cast<double>(c.size());
}

/// Mean squared distance from each transformed P point to its nearest Q point.
inline double nn_residual(std::span<const Vec3> P, const NearestIndex& q_index, const RigidTransform& T) {
  double s = 0.0;
  for (const auto& p : P) s += q_index.nearest(T.apply(p)).sq_dist;
  return P.empty() ? 0.0 : s / static_cast<double>(P.size());
}

struct IcpResult {
  RigidTransform transform;
  std::vector<double> residuals;  // residuals[0] is the initial value
  int iterations = 0;
};

/// Alternates nearest-neighbor matching and kabsch. A step is accepted only
/// if it does not increase the residual, so the sequence never rises.
inline IcpResult icp_refine(std::span<const Vec3> P, std::span<const Vec3> Q, const RigidTransform& init,
                            int max_iters = 50, double tol = 1e-12) {
  if (P.empty() || Q.empty()) throw ValueError("icp_refine: empty point cloud");
  init.validate();
  const NearestIndex qi(Q);
  IcpResult out;
  out.transform = init;
  double res = nn_residual(P, qi, init);
  out.residuals.push_back(res);
  std::vector<Vec3> matched(P.size());
  for (int it = 0; it < max_iters; ++it) {
    ++out.iterations;
    for (std::size_t i = 0; i < P.size(); ++i) matched[i] = qi.point(qi.nearest(out.transform.apply(P[i])).index);
    RigidTransform next;
    try {
      next = kabsch(P, matched);
    } catch (const DegenerateConfiguration&) {
      log::warn("icp_refine: degenerate matching, stopping");
      break;
    }
    const double r = nn_residual(P, qi, next);
    if (!(r <= res)) break;
    const double gain = res - r;
    out.transform = next;
    res = r;
    out.residuals.push_back(res);
    if (gain < tol) break;
  }
  return out;
}

/// (R * road + t) followed by scene.
inline PointCloud merge_clouds(const PointCloud& road, const PointCloud& scene, const RigidTransform& T) {
  T.validate();
  road.validate();
  scene.validate();
  PointCloud out;
  out.points.reserve(road.size() + scene.size());
  for (const auto& p : road.points) out.points.push_back(T.apply(p));
  out.points.insert(out.points.end(), scene.points.begin(), scene.points.end());
  if (road.has_colors() || scene.has_colors()) {
    auto fill = [&](const PointCloud& c) {
      if (c.has_colors())
        out.colors.insert(out.colors.end(), c.colors.begin(), c.colors.end());
      else
        out.colors.insert(out.colors.end(), c.size(), Vec3::Zero());
    };
    fill(road);
    fill(scene);
  }
  return out;
}

/// Root-mean-square distance between corresponding pairs after transforming P.
inline double pair_rms(std::span<const Vec3> P, std::span<const Vec3> Q, const RigidTransform& T) {
  if (P.size() != Q.size()) throw ShapeError("pair_rms: sets differ in length");
  if (P.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += (T.apply(P[i]) - Q[i]).squaredNorm();
  return std::sqrt(s / static_cast<double>(P.size()));
}

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

}  // namespace n2p
