#pragma once

// Ray gate: splits a frame's pixel rays into road / scene sets using a road
// mask grown by square dilation on both sides, so the two sets overlap in a
// band along their common boundary. Rays in that band (the shared set) are
// rendered by both fields and supply the correspondences used for merging.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "n2p/camera.hpp"
#include "n2p/error.hpp"
#include "n2p/log.hpp"

namespace n2p {

struct GateMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> road;  // 1 = road, row-major
  int radius = 2;

  GateMask() = default;
  GateMask(int w, int h, std::vector<std::uint8_t> bits, int k) : width(w), height(h), road(std::move(bits)), radius(k) {
    validate();
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw ValueError("gate mask: dimensions must be positive");
    if (road.size() != static_cast<std::size_t>(width) * height)
      throw ShapeError("gate mask: " + std::to_string(road.size()) + " entries for " +
                       std::to_string(width) + "x" + std::to_string(height));
    if (radius < 0) throw ValueError("gate mask: dilation radius must be >= 0");
    for (auto b : road)
      if (b > 1) throw ValueError("gate mask: entries must be 0 or 1");
  }
};

/// Binary dilation with a (2k+1) x (2k+1) square, done as two separable passes.
inline std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> bits, int width, int height, int k) {
  std::vector<std::uint8_t> tmp(bits.size(), 0), out(bits.size(), 0);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      std::uint8_t v = 0;
      for (int dc = std::max(0, c - k); dc <= std::min(width - 1, c + k) && !v; ++dc) v = bits[r * width + dc];
      tmp[r * width + c] = v;
    }
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      std::uint8_t v = 0;
      for (int dr = std::max(0, r - k); dr <= std::min(height - 1, r + k) && !v; ++dr) v = tmp[dr * width + c];
      out[r * width + c] = v;
    }
  return out;
}

/// Pixel-index sets of one frame. road and scene are the dilated classes;
/// shared is their intersection.
struct RayPartition {
  int width = 0;
  int height = 0;
  std::vector<int> road;
  std::vector<int> scene;
  std::vector<int> shared;
  std::vector<GateClass> gate;  // per pixel

  bool in_road(int pixel) const { return gate[pixel] != GateClass::scene; }
  bool in_scene(int pixel) const { return gate[pixel] != GateClass::road; }
};

inline RayPartition partition_mask(const GateMask& mask) {
  mask.validate();
  const std::size_t n = mask.road.size();
  std::vector<std::uint8_t> inverse(n);
  for (std::size_t i = 0; i < n; ++i) inverse[i] = static_cast<std::uint8_t>(1 - mask.road[i]);
  const auto road = dilate(mask.road, mask.width, mask.height, mask.radius);
  const auto scene = dilate(inverse, mask.width, mask.height, mask.radius);
  RayPartition p;
  p.width = mask.width;
  p.height = mask.height;
  p.gate.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int idx = static_cast<int>(i);
    if (road[i]) p.road.push_back(idx);
    if (scene[i]) p.scene.push_back(idx);
    if (road[i] && scene[i]) p.shared.push_back(idx);
    p.gate[i] = (road[i] && scene[i]) ? GateClass::shared : road[i] ? GateClass::road : GateClass::scene;
  }
  return p;
}

/// Partitions a frame's rays (one per pixel, row-major) and tags each ray
/// with its gate class.
inline RayPartition partition_rays(std::span<Ray> rays, const GateMask& mask) {
  if (rays.size() != mask.road.size())
    throw ShapeError("partition_rays: " + std::to_string(rays.size()) + " rays for a " +
                     std::to_string(mask.width) + "x" + std::to_string(mask.height) + " mask");
  RayPartition p = partition_mask(mask);
  for (auto& r : rays) {
    if (r.pixel < 0 || static_cast<std::size_t>(r.pixel) >= p.gate.size())
      throw ShapeError("partition_rays: ray pixel index " + std::to_string(r.pixel) + " out of range");
    r.gate = p.gate[static_cast<std::size_t>(r.pixel)];
  }
  return p;
}

enum class Branch : std::uint8_t { road = 0, scene = 1 };

inline const char* branch_name(Branch b) { return b == Branch::road ? "road" : "scene"; }

/// Binding of one ray set to the field that renders it.
template <class Field>
struct Binding {
  Branch branch;
  Field* field;
  std::vector<int> pixels;
};

template <class Field>
struct Routing {
  std::vector<Binding<Field>> bindings;
  /// Shared pixels: each is rendered by both fields and yields one
  /// (road point, scene point) correspondence pair.
  std::vector<int> correspondence_pixels;
  bool merge_available = false;
};

template <class Field>
Routing<Field> route(const RayPartition& partition, Field& road_field, Field& scene_field) {
  Routing<Field> out;
  if (partition.road.empty())
    log::warn("route: empty road set, road binding skipped");
  else
    out.bindings.push_back({Branch::road, &road_field, partition.road});
  if (partition.scene.empty())
    log::warn("route: empty scene set, scene binding skipped");
  else
    out.bindings.push_back({Branch::scene, &scene_field, partition.scene});
  out.correspondence_pixels = partition.shared;
  out.merge_available = !partition.shared.empty();
  if (!out.merge_available) log::warn("route: no shared rays, merge correspondences unavailable");
  return out;
}

}  // namespace n2p
