#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "n2p/camera.hpp"
#include "n2p/error.hpp"

namespace n2p {

/// Depth written for pixels whose ray hits nothing.
inline constexpr float kNoHitDepth = 1.0e6f;

/// Posed frame with per-pixel ground truth. Rasters are row-major float32.
struct FrameRecord {
  int index = 0;
  CameraModel camera;
  std::vector<float> rgb;     // H*W*3 in [0, 1]
  std::vector<float> depth;   // H*W, distance along the unit ray
  std::vector<float> normal;  // H*W*3, zero where nothing was hit
  std::vector<std::uint8_t> road_mask;  // H*W, 1 = road

  int width() const { return camera.intrinsics.width; }
  int height() const { return camera.intrinsics.height; }
  int pixel_count() const { return camera.intrinsics.pixel_count(); }

  Vec3 color_at(int pixel) const {
    const auto i = static_cast<std::size_t>(pixel) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  Vec3 normal_at(int pixel) const {
    const auto i = static_cast<std::size_t>(pixel) * 3;
    return {normal[i], normal[i + 1], normal[i + 2]};
  }
  bool hit(int pixel) const { return depth[static_cast<std::size_t>(pixel)] < 0.5f * kNoHitDepth; }

  /// Throws ValueError if any raster disagrees with the frame invariants.
  void audit() const {
    const auto n = static_cast<std::size_t>(pixel_count());
    if (rgb.size() != 3 * n || depth.size() != n || normal.size() != 3 * n || road_mask.size() != n)
      throw ShapeError("frame " + std::to_string(index) + ": raster sizes do not match the camera");
    for (std::size_t p = 0; p < n; ++p) {
      for (int c = 0; c < 3; ++c)
        if (!(rgb[3 * p + c] >= 0.f && rgb[3 * p + c] <= 1.f))
          throw ValueError("frame " + std::to_string(index) + ": color out of [0,1] at pixel " + std::to_string(p));
      if (!(depth[p] > 0.f)) throw ValueError("frame " + std::to_string(index) + ": nonpositive depth at pixel " + std::to_string(p));
      if (road_mask[p] > 1) throw ValueError("frame " + std::to_string(index) + ": mask not binary");
      if (hit(static_cast<int>(p))) {
        const double len = normal_at(static_cast<int>(p)).norm();
        if (std::abs(len - 1.0) > 1e-5)
          throw ValueError("frame " + std::to_string(index) + ": non-unit normal at pixel " + std::to_string(p));
      } else if (road_mask[p]) {
        throw ValueError("frame " + std::to_string(index) + ": road mask set on a sky pixel");
      }
    }
  }
};

/// Matched sub-pixel locations between two adjacent frames.
struct CorrespondencePairs {
  int frame_a = 0;
  int frame_b = 1;
  std::vector<Vec2> uv_a;
  std::vector<Vec2> uv_b;

  std::size_t size() const { return uv_a.size(); }
  bool empty() const { return uv_a.empty(); }
};

struct Dataset {
  Intrinsics intrinsics;
  std::vector<FrameRecord> frames;
  std::vector<CorrespondencePairs> pairs;

  bool empty() const { return frames.empty(); }
};

}  // namespace n2p
