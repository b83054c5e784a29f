#pragma once

// Radiance field: positional encoding + MLP, and volume rendering built on
// the autodiff graph so every rendered quantity is differentiable.
//
// Architecture (density never sees the view direction):
//
//   gamma(x) -> [dense + relu] x depth -> h
//   h -> softplus(dense)            density
//   h -> normalize(dense)           normal
//   h -> relu(dense)                feature
//   [feature, gamma(d)] -> sigmoid(dense)   color
//
// The feature is therefore the penultimate activation of the color path.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/camera.hpp"
#include "n2p/error.hpp"
#include "n2p/rng.hpp"

namespace n2p {

struct FieldConfig {
  int pos_levels = 10;
  int dir_levels = 4;
  int width = 128;
  int depth = 4;
  int feature_width = 32;
  std::uint64_t seed = 0;

  int pos_dim() const { return 3 * (2 * pos_levels + 1); }
  int dir_dim() const { return 3 * (2 * dir_levels + 1); }
  bool operator==(const FieldConfig&) const = default;
};

struct RenderConfig {
  double t_near = 0.5;
  double t_far = 30.0;
  int n_samples = 64;
  bool stratified = true;

  void validate() const {
    if (!(t_near > 0.0) || !(t_near < t_far))
      throw ValueError("render config: need 0 < t_near < t_far");
    if (n_samples < 2) throw ValueError("render config: n_samples must be >= 2");
  }
};

/// Axis-aligned box mapped onto [-1, 1]^3 before encoding.
struct SceneBounds {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);

  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 half_extent() const { return 0.5 * (hi - lo); }
  bool contains(const Vec3& x) const {
    return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
  }
};

/// x followed by (sin(2^k pi x), cos(2^k pi x)) for k = 0..levels-1, each
/// block covering all components of x.
inline std::vector<double> positional_encode(std::span<const double> p, int levels) {
  const std::size_t dim = p.size();
  std::vector<double> out(dim * (2 * static_cast<std::size_t>(levels) + 1));
  std::copy(p.begin(), p.end(), out.begin());
  for (std::size_t c = 0; c < dim; ++c) {
    double s = std::sin(std::numbers::pi * p[c]);
    double co = std::cos(std::numbers::pi * p[c]);
    for (int k = 0; k < levels; ++k) {
      out[dim + (2 * k) * dim + c] = s;
      out[dim + (2 * k + 1) * dim + c] = co;
      // double-angle step to the next octave
      const double s2 = 2.0 * s * co;
      const double c2 = co * co - s * s;
      s = s2;
      co = c2;
    }
  }
  return out;
}

/// Per-sample outputs recorded on a graph.
struct FieldNodes {
  Var density;  // S x 1
  Var color;    // S x 3
  Var normal;   // S x 3, unit rows
  Var feature;  // S x F
};

/// Plain single-point evaluation result.
struct FieldOutputSample {
  Vec3 color = Vec3::Zero();
  double density = 0.0;
  Vec3 normal = Vec3::UnitZ();
  std::vector<double> feature;
  bool clamped = false;  // x was outside the scene bounds
};

template <class T>
class RadianceField {
 public:
  RadianceField() = default;
  RadianceField(const FieldConfig& cfg, const SceneBounds& bounds) : cfg_(cfg), bounds_(bounds) {
    if (cfg.width < 1 || cfg.depth < 1 || cfg.feature_width < 1 || cfg.pos_levels < 0 || cfg.dir_levels < 0)
      throw ValueError("field config: width, depth and feature width must be positive");
    Rng rng(cfg.seed);
    int in = cfg.pos_dim();
    for (int l = 0; l < cfg.depth; ++l) {
      add_layer("trunk" + std::to_string(l), cfg.width, in, std::sqrt(6.0 / in), rng);
      in = cfg.width;
    }
    add_layer("density", 1, cfg.width, std::sqrt(1.0 / cfg.width), rng);
    add_layer("normal", 3, cfg.width, std::sqrt(1.0 / cfg.width), rng);
    add_layer("feature", cfg.feature_width, cfg.width, std::sqrt(6.0 / cfg.width), rng);
    const int color_in = cfg.feature_width + cfg.dir_dim();
    add_layer("color", 3, color_in, std::sqrt(1.0 / color_in), rng);
  }

  const FieldConfig& config() const { return cfg_; }
  const SceneBounds& bounds() const { return bounds_; }
  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

  template <class U>
  RadianceField<U> cast() const {
    RadianceField<U> out;
    out.cfg_ = cfg_;
    out.bounds_ = bounds_;
    for (const auto& p : params_) out.params_.emplace_back(p.name, p.value.template cast<U>());
    return out;
  }

  /// Normalized coordinates in [-1, 1]^3; returns true if clamping occurred.
  bool normalize_point(const Vec3& x, Vec3& out) const {
    const Vec3 raw = (x - bounds_.center()).cwiseQuotient(bounds_.half_extent());
    out = raw.cwiseMax(-1.0).cwiseMin(1.0);
    return (out - raw).cwiseAbs().maxCoeff() > 0.0;
  }

  /// Records the MLP on `g` for encoded positions (S x pos_dim) and
  /// encoded directions (S x dir_dim).
  FieldNodes forward(Graph<T>& g, Var enc_pos, Var enc_dir) {
    std::size_t li = 0;
    Var h = enc_pos;
    for (int l = 0; l < cfg_.depth; ++l, li += 2) h = g.relu(g.affine(h, params_[li], params_[li + 1]));
    FieldNodes out;
    out.density = g.softplus(g.affine(h, params_[li], params_[li + 1]));
    li += 2;
    out.normal = g.normalize_rows(g.affine(h, params_[li], params_[li + 1]), T(1e-6));
    li += 2;
    out.feature = g.relu(g.affine(h, params_[li], params_[li + 1]));
    li += 2;
    const Var parts[] = {out.feature, enc_dir};
    out.color = g.sigmoid(g.affine(g.concat_cols(parts), params_[li], params_[li + 1]));
    return out;
  }

 private:
  template <class U>
  friend class RadianceField;

  void add_layer(const std::string& name, int out, int in, double bound, Rng& rng) {
    Matrix<T> w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = T(rng.uniform(-bound, bound));
    params_.emplace_back(name + ".w", std::move(w));
    params_.emplace_back(name + ".b", Matrix<T>::Zero(1, out));
  }

  FieldConfig cfg_;
  SceneBounds bounds_;
  std::vector<Parameter<T>> params_;
};

namespace detail {

template <class T>
void encode_into(Matrix<T>& dst, Eigen::Index row, std::span<const double> p, int levels) {
  const auto enc = positional_encode(p, levels);
  for (std::size_t i = 0; i < enc.size(); ++i) dst(row, static_cast<Eigen::Index>(i)) = T(enc[i]);
}

inline void check_unit(const Vec3& d) {
  if (std::abs(d.norm() - 1.0) > 1e-6)
    throw ValueError("view direction is not unit length (|d| = " + std::to_string(d.norm()) + ")");
}

/// Counter-based jitter in [0, 1): a pure function of (seed, ray key, index).
inline double jitter(std::uint64_t seed, std::uint64_t key, int i) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(key * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(i)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline std::uint64_t ray_key(const Ray& r) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(r.frame)) << 32) ^
         static_cast<std::uint32_t>(r.pixel);
}

}  // namespace detail

/// Single-point evaluation of the field.
template <class T>
FieldOutputSample field_eval(RadianceField<T>& field, const Vec3& x, const Vec3& d) {
  detail::check_unit(d);
  const auto& cfg = field.config();
  Vec3 xn;
  FieldOutputSample out;
  out.clamped = field.normalize_point(x, xn);
  Matrix<T> ep(1, cfg.pos_dim()), ed(1, cfg.dir_dim());
  detail::encode_into(ep, 0, std::span<const double>(xn.data(), 3), cfg.pos_levels);
  detail::encode_into(ed, 0, std::span<const double>(d.data(), 3), cfg.dir_levels);
  Graph<T> g;
  const auto nodes = field.forward(g, g.input(std::move(ep)), g.input(std::move(ed)));
  out.density = double(g.value(nodes.density)(0, 0));
  out.color = g.value(nodes.color).row(0).transpose().template cast<double>();
  out.normal = g.value(nodes.normal).row(0).transpose().template cast<double>();
  const auto& f = g.value(nodes.feature);
  out.feature.assign(f.data(), f.data() + f.size());
  return out;
}

/// Rendered per-ray quantities recorded on a graph.
struct RenderNodes {
  Var color;         // R x 3
  Var depth;         // R x 1
  Var normal;        // R x 3
  Var accumulation;  // R x 1
  Var feature;       // R x F
  Var weights;       // (R * n_samples) x 1
  std::size_t rays = 0;
  long clamped_samples = 0;
};

inline constexpr double kDepthEps = 1e-8;

/// Quadrature of the volume-rendering integral along each ray:
/// delta_i = t_{i+1} - t_i (last bin extends to t_far), alpha_i = 1 - exp(-sigma_i delta_i),
/// w_i = alpha_i prod_{j<i} (1 - alpha_j). Stratified jitter is a pure
/// function of (sample_seed, ray frame, ray pixel).
template <class T>
RenderNodes render_rays(Graph<T>& g, RadianceField<T>& field, std::span<const Ray> rays,
                        const RenderConfig& cfg, std::uint64_t sample_seed = 0) {
  cfg.validate();
  const auto& fc = field.config();
  const Eigen::Index n = cfg.n_samples;
  const Eigen::Index R = static_cast<Eigen::Index>(rays.size());
  const Eigen::Index S = R * n;
  Matrix<T> ep(S, fc.pos_dim()), ed(S, fc.dir_dim()), tv(S, 1), dv(S, 1);
  const double bin = (cfg.t_far - cfg.t_near) / static_cast<double>(n);
  std::vector<double> ts(static_cast<std::size_t>(n));
  RenderNodes out;
  out.rays = rays.size();
  for (Eigen::Index r = 0; r < R; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    detail::check_unit(ray.direction);
    const auto key = detail::ray_key(ray);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = cfg.stratified ? detail::jitter(sample_seed, key, static_cast<int>(i)) : 0.5;
      ts[static_cast<std::size_t>(i)] = cfg.t_near + (static_cast<double>(i) + u) * bin;
    }
    const auto denc = positional_encode(std::span<const double>(ray.direction.data(), 3), fc.dir_levels);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index s = r * n + i;
      const double t = ts[static_cast<std::size_t>(i)];
      const double next = (i + 1 < n) ? ts[static_cast<std::size_t>(i + 1)] : cfg.t_far;
      tv(s, 0) = T(t);
      dv(s, 0) = T(next - t);
      Vec3 xn;
      if (field.normalize_point(ray.origin + t * ray.direction, xn)) ++out.clamped_samples;
      detail::encode_into(ep, s, std::span<const double>(xn.data(), 3), fc.pos_levels);
      for (std::size_t c = 0; c < denc.size(); ++c) ed(s, static_cast<Eigen::Index>(c)) = T(denc[c]);
    }
  }
  const Var t_node = g.input(std::move(tv));
  const Var delta = g.input(std::move(dv));
  const FieldNodes f = field.forward(g, g.input(std::move(ep)), g.input(std::move(ed)));

  const Var tau = g.mul(f.density, delta);
  const Var transmittance = g.exp(g.linear(g.segment_exclusive_cumsum(tau, n), T(-1)));
  const Var alpha = g.linear(g.exp(g.linear(tau, T(-1))), T(-1), T(1));
  const Var w = g.mul(transmittance, alpha);
  out.weights = w;
  out.color = g.segment_sum(g.mul_col(f.color, w), n);
  out.accumulation = g.segment_sum(w, n);
  out.depth = g.div_col(g.segment_sum(g.mul(w, t_node), n), g.max_scalar(out.accumulation, T(kDepthEps)));
  out.normal = g.normalize_rows(g.segment_sum(g.mul_col(f.normal, w), n), T(1e-6));
  out.feature = g.segment_sum(g.mul_col(f.feature, w), n);
  return out;
}

struct RenderResult {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  Vec3 normal = Vec3::UnitZ();
  double accumulation = 0.0;
  std::vector<double> feature;
};

template <class T>
RenderResult extract_render(const Graph<T>& g, const RenderNodes& nodes, Eigen::Index r) {
  RenderResult res;
  res.color = g.value(nodes.color).row(r).transpose().template cast<double>();
  res.depth = double(g.value(nodes.depth)(r, 0));
  res.normal = g.value(nodes.normal).row(r).transpose().template cast<double>();
  res.accumulation = double(g.value(nodes.accumulation)(r, 0));
  const auto& f = g.value(nodes.feature);
  res.feature.resize(static_cast<std::size_t>(f.cols()));
  for (Eigen::Index k = 0; k < f.cols(); ++k) res.feature[static_cast<std::size_t>(k)] = double(f(r, k));
  return res;
}

/// Forward-only rendering of many rays, chunked to bound memory. Results
/// are in input order; per-ray errors carry the ray index.
template <class T>
std::vector<RenderResult> render_batch(RadianceField<T>& field, std::span<const Ray> rays,
                                       const RenderConfig& cfg, std::uint64_t sample_seed = 0,
                                       std::size_t chunk = 4096) {
  std::vector<RenderResult> out;
  out.reserve(rays.size());
  for (std::size_t b = 0; b < rays.size(); b += chunk) {
    const std::size_t e = std::min(rays.size(), b + chunk);
    for (std::size_t i = b; i < e; ++i) {
      try {
        detail::check_unit(rays[i].direction);
      } catch (const ValueError& err) {
        throw ValueError("ray " + std::to_string(i) + ": " + err.what());
      }
    }
    Graph<T> g;
    const auto nodes = render_rays(g, field, rays.subspan(b, e - b), cfg, sample_seed);
    for (std::size_t i = 0; i < e - b; ++i) out.push_back(extract_render(g, nodes, static_cast<Eigen::Index>(i)));
  }
  return out;
}

template <class T>
RenderResult render_ray(RadianceField<T>& field, const Ray& ray, const RenderConfig& cfg,
                        std::uint64_t sample_seed = 0) {
  return render_batch(field, std::span<const Ray>(&ray, 1), cfg, sample_seed).front();
}

}  // namespace n2p
