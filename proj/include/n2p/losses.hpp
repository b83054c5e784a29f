#pragma once

// Loss terms. Plain versions work on double matrices and validate their
// inputs; graph versions record the same formulas on an autodiff tape.
//
// Conventions: colors and normals are R x 3 row matrices, depths R x 1.
// loss_rgb and loss_depth are means over rays, loss_normal is a sum.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/config.hpp"
#include "n2p/error.hpp"
#include "n2p/log.hpp"

namespace n2p {

inline constexpr double kNormEps = 1e-8;

struct LossWeights {
  // matching cost: depth, rgb, normal
  double cost_depth = 0.1, cost_rgb = 1.0, cost_normal = 0.05;
  // spatial consistency: jsd, rgb, depth
  double sdc_jsd = 1.0, sdc_rgb = 1.0, sdc_depth = 0.1;
  // reconstruction: rgb, depth, normal
  double rec_rgb = 1.0, rec_depth = 0.1, rec_normal = 0.005;
  double beta = 0.01;
  double gamma = 0.01;
  double hard_fraction = 0.05;
  int region = 9;

  void validate() const {
    const double all[] = {cost_depth, cost_rgb, cost_normal, sdc_jsd, sdc_rgb, sdc_depth,
                          rec_rgb, rec_depth, rec_normal, beta, gamma};
    for (double w : all)
      if (!std::isfinite(w) || w < 0.0) throw ValueError("loss weights must be finite and >= 0");
    if (!(hard_fraction > 0.0 && hard_fraction <= 1.0)) throw ValueError("hard_fraction must be in (0, 1]");
    if (region < 1 || region % 2 == 0) throw ValueError("region size s must be odd and >= 1");
  }

  void write(KeyValues& kv) const {
    kv.set("lambda1", cost_depth);
    kv.set("lambda2", cost_rgb);
    kv.set("lambda3", cost_normal);
    kv.set("sdc_lambda1", sdc_jsd);
    kv.set("sdc_lambda2", sdc_rgb);
    kv.set("sdc_lambda3", sdc_depth);
    kv.set("theta1", rec_rgb);
    kv.set("theta2", rec_depth);
    kv.set("theta3", rec_normal);
    kv.set("beta", beta);
    kv.set("gamma", gamma);
    kv.set("hard_fraction", hard_fraction);
    kv.set("region", region);
  }

  static LossWeights read(const KeyValues& kv) {
    LossWeights w;
    w.cost_depth = kv.get("lambda1", w.cost_depth);
    w.cost_rgb = kv.get("lambda2", w.cost_rgb);
    w.cost_normal = kv.get("lambda3", w.cost_normal);
    w.sdc_jsd = kv.get("sdc_lambda1", w.sdc_jsd);
    w.sdc_rgb = kv.get("sdc_lambda2", w.sdc_rgb);
    w.sdc_depth = kv.get("sdc_lambda3", w.sdc_depth);
    w.rec_rgb = kv.get("theta1", w.rec_rgb);
    w.rec_depth = kv.get("theta2", w.rec_depth);
    w.rec_normal = kv.get("theta3", w.rec_normal);
    w.beta = kv.get("beta", w.beta);
    w.gamma = kv.get("gamma", w.gamma);
    w.hard_fraction = kv.get("hard_fraction", w.hard_fraction);
    w.region = kv.get("region", w.region);
    w.validate();
    return w;
  }
};

namespace detail {

inline void same_rows(const Matrix<double>& a, const Matrix<double>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

inline void check_unit_rows(const Matrix<double>& n, const char* what) {
  for (Eigen::Index r = 0; r < n.rows(); ++r)
    if (std::abs(n.row(r).norm() - 1.0) > 1e-6)
      throw ValueError(std::string(what) + ": row " + std::to_string(r) + " is not unit length");
}

}  // namespace detail

// ---- plain ------------------------------------------------------------------

/// Squared color error per ray.
inline Eigen::VectorXd rgb_per_ray(const Matrix<double>& pred, const Matrix<double>& gt) {
  detail::same_rows(pred, gt, "loss_rgb");
  return (pred - gt).rowwise().squaredNorm();
}

inline double loss_rgb(const Matrix<double>& pred, const Matrix<double>& gt) {
  const auto e = rgb_per_ray(pred, gt);
  return e.size() ? e.mean() : 0.0;
}

/// (v - min) / (max - min + eps).
inline Eigen::VectorXd maxmin_norm(const Eigen::VectorXd& v, double eps = kNormEps) {
  if (v.size() == 0) throw ShapeError("maxmin_norm: empty vector");
  const double lo = v.minCoeff(), hi = v.maxCoeff();
  return (v.array() - lo) / (hi - lo + eps);
}

inline Eigen::VectorXd depth_per_ray(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt) {
  if (pred.size() != gt.size())
    throw ShapeError("loss_depth: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  if (pred.size() == 0) return {};
  return (maxmin_norm(pred) - maxmin_norm(gt)).array().square();
}

inline double loss_depth(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt) {
  if ((gt.array() <= 0.0).any()) throw ValueError("loss_depth: depths must be positive");
  const auto e = depth_per_ray(pred, gt);
  return e.size() ? e.mean() : 0.0;
}

/// |n1 - n2|_1 + |1 - n1.n2| per ray.
inline Eigen::VectorXd normal_per_ray(const Matrix<double>& pred, const Matrix<double>& gt) {
  detail::same_rows(pred, gt, "loss_normal");
  Eigen::VectorXd out(pred.rows());
  for (Eigen::Index r = 0; r < pred.rows(); ++r)
    out(r) = (pred.row(r) - gt.row(r)).cwiseAbs().sum() + std::abs(1.0 - pred.row(r).dot(gt.row(r)));
  return out;
}

inline double loss_normal(const Matrix<double>& pred, const Matrix<double>& gt) {
  detail::check_unit_rows(pred, "loss_normal (pred)");
  detail::check_unit_rows(gt, "loss_normal (gt)");
  return normal_per_ray(pred, gt).sum();
}

/// cos_i = l1 * depth_i + l2 * rgb_i + l3 * normal_i.
inline Eigen::VectorXd matching_cost(const Eigen::VectorXd& depth, const Eigen::VectorXd& rgb,
                                     const Eigen::VectorXd& normal, const LossWeights& w) {
  if (depth.size() != rgb.size() || rgb.size() != normal.size())
    throw ShapeError("matching_cost: per-ray loss vectors differ in length");
  return w.cost_depth * depth + w.cost_rgb * rgb + w.cost_normal * normal;
}

/// Inclusive pixel rectangle.
struct Region {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  int rows() const { return row1 - row0 + 1; }
  int cols() const { return col1 - col0 + 1; }
  int size() const { return rows() * cols(); }
  bool contains(int pixel, int width) const {
    const int r = pixel / width, c = pixel % width;
    return r >= row0 && r <= row1 && c >= col0 && c <= col1;
  }
};

/// s x s window centered on a pixel, clipped to the image.
inline Region region_around(int pixel, int width, int height, int s) {
  const int r = pixel / width, c = pixel % width, h = s / 2;
  return {std::max(0, r - h), std::max(0, c - h), std::min(height - 1, r + h), std::min(width - 1, c + h)};
}

struct HardSample {
  int index = 0;  // position in the cost vector
  int pixel = 0;  // center of the proposal region
  Region region;
};

struct HardSampleSet {
  std::vector<HardSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::vector<int> indices() const {
    std::vector<int> out;
    for (const auto& s : samples) out.push_back(s.index);
    return out;
  }
};

/// Top-n costs, descending; equal costs keep the lower index first.
inline HardSampleSet select_hard(const Eigen::VectorXd& cost, int n, std::span<const int> pixels,
                                 int width, int height, int s) {
  if (n < 1) throw ValueError("select_hard: n must be >= 1");
  if (s < 1 || s % 2 == 0) throw ValueError("select_hard: s must be odd and >= 1");
  if (static_cast<std::size_t>(cost.size()) != pixels.size())
    throw ShapeError("select_hard: " + std::to_string(cost.size()) + " costs for " +
                     std::to_string(pixels.size()) + " pixels");
  const int count = static_cast<int>(cost.size());
  if (n > count) {
    log::warn("select_hard: n=" + std::to_string(n) + " exceeds batch " + std::to_string(count) + ", clamped");
    n = count;
  }
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return cost(a) > cost(b); });
  HardSampleSet out;
  for (int i = 0; i < n; ++i) {
    const int idx = order[static_cast<std::size_t>(i)];
    const int px = pixels[static_cast<std::size_t>(idx)];
    if (px < 0 || px >= width * height) throw ValueError("select_hard: pixel " + std::to_string(px) + " outside the image");
    out.samples.push_back({idx, px, region_around(px, width, height, s)});
  }
  return out;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& x) {
  if (x.size() == 0) return {};
  const Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

/// 0.5 KL(p||m) + 0.5 KL(q||m), m = (p + q) / 2.
inline double jsd(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size() || p.size() == 0) throw ShapeError("jsd: distributions differ in length");
  for (const auto* v : {&p, &q}) {
    if ((v->array() < 0.0).any() || !v->allFinite()) throw ValueError("jsd: negative or non-finite probability");
    if (std::abs(v->sum() - 1.0) > 1e-6) throw ValueError("jsd: probabilities do not sum to 1");
  }
  double acc = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double m = 0.5 * (p(k) + q(k));
    if (p(k) > 0.0) acc += 0.5 * p(k) * std::log(p(k) / m);
    if (q(k) > 0.0) acc += 0.5 * q(k) * std::log(q(k) / m);
  }
  return std::clamp(acc, 0.0, std::numbers::ln2);
}

struct LossComponents {
  double rgb = 0.0;
  double depth = 0.0;
  double normal = 0.0;
  double sdc = 0.0;
  double tic = 0.0;
};

inline double loss_rec(const LossComponents& c, const LossWeights& w) {
  return w.rec_rgb * c.rgb + w.rec_depth * c.depth + w.rec_normal * c.normal;
}

inline double loss_total(const LossComponents& c, const LossWeights& w) {
  for (double v : {c.rgb, c.depth, c.normal, c.sdc, c.tic})
    if (!std::isfinite(v)) throw NumericError("loss_total: non-finite component");
  return loss_rec(c, w) + w.beta * c.sdc + w.gamma * c.tic;
}

// ---- graph ------------------------------------------------------------------

template <class T>
Var graph_loss_rgb(Graph<T>& g, Var pred, Var gt) {
  const auto rows = g.value(pred).rows();
  if (rows == 0) return g.input(Matrix<T>::Zero(1, 1));
  return g.linear(g.sum(g.square(g.sub(pred, gt))), T(1) / T(rows));
}

/// Max-min normalized depth MSE over the given rows. gt is a constant column.
template <class T>
Var graph_loss_depth(Graph<T>& g, Var pred, const Matrix<T>& gt, const std::vector<Eigen::Index>& rows) {
  if (rows.empty()) return g.input(Matrix<T>::Zero(1, 1));
  Matrix<T> gsel(static_cast<Eigen::Index>(rows.size()), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) gsel(static_cast<Eigen::Index>(i), 0) = gt(rows[i], 0);
  const Var p = g.maxmin_norm(g.gather_rows(pred, rows), T(kNormEps));
  const Var q = g.maxmin_norm(g.input(std::move(gsel)), T(kNormEps));
  return g.mean(g.square(g.sub(p, q)));
}

/// sum_r |n1 - n2|_1 + |1 - n1.n2| over the given rows.
template <class T>
Var graph_loss_normal(Graph<T>& g, Var pred, Var gt, const std::vector<Eigen::Index>& rows) {
  if (rows.empty()) return g.input(Matrix<T>::Zero(1, 1));
  const Var p = g.gather_rows(pred, rows);
  const Var q = g.gather_rows(gt, rows);
  const Var l1 = g.sum(g.abs(g.sub(p, q)));
  const Var dot = g.abs(g.linear(g.row_sum(g.mul(p, q)), T(-1), T(1)));
  return g.add(l1, g.sum(dot));
}

/// Rendered quantities of hard rays and their neighbors, row-aligned.
template <class T>
struct SdcInputs {
  Var feature_hard, feature_nbr;  // n x F
  Var color_hard, color_nbr;      // n x 3
  Var depth_hard, depth_nbr;      // n x 1
  Matrix<T> gt_color_hard, gt_color_nbr;
  Matrix<T> gt_depth_hard, gt_depth_nbr;
  std::vector<Eigen::Index> depth_rows;  // pairs where both depths are valid
};

struct SdcParts {
  Var jsd, rgb, depth, total;
};

/// Spatial consistency over hard/neighbor pairs, averaged over pairs.
///   jsd:   JSD of softmaxed features, prediction against prediction
///   rgb:   |(c_h - c_n) - (c*_h - c*_n)|^2, predicted contrast against true contrast
///   depth: same contrast form on depths max-min normalized jointly over both sets
template <class T>
SdcParts graph_loss_sdc(Graph<T>& g, const SdcInputs<T>& in, const LossWeights& w) {
  SdcParts out;
  const auto n = g.value(in.feature_hard).rows();
  if (n == 0) {
    out.jsd = out.rgb = out.depth = out.total = g.input(Matrix<T>::Zero(1, 1));
    return out;
  }
  out.jsd = g.mean(g.jsd_rows(g.softmax_rows(in.feature_hard), g.softmax_rows(in.feature_nbr)));
  const Var gt_dc = g.input(in.gt_color_hard - in.gt_color_nbr);
  out.rgb = g.linear(g.sum(g.square(g.sub(g.sub(in.color_hard, in.color_nbr), gt_dc))), T(1) / T(n));
  if (in.depth_rows.empty()) {
    out.depth = g.input(Matrix<T>::Zero(1, 1));
  } else {
    const auto m = static_cast<Eigen::Index>(in.depth_rows.size());
    const Var ph = g.gather_rows(in.depth_hard, in.depth_rows);
    const Var pn = g.gather_rows(in.depth_nbr, in.depth_rows);
    const Var both[] = {ph, pn};
    const Var pnorm = g.maxmin_norm(g.concat_rows(both), T(kNormEps));
    Eigen::VectorXd gcat(2 * m);
    for (Eigen::Index i = 0; i < m; ++i) {
      gcat(i) = double(in.gt_depth_hard(in.depth_rows[static_cast<std::size_t>(i)], 0));
      gcat(m + i) = double(in.gt_depth_nbr(in.depth_rows[static_cast<std::size_t>(i)], 0));
    }
    const Eigen::VectorXd gn = maxmin_norm(gcat);
    Matrix<T> gdiff(m, 1);
    for (Eigen::Index i = 0; i < m; ++i) gdiff(i, 0) = T(gn(i) - gn(m + i));
    std::vector<Eigen::Index> top(static_cast<std::size_t>(m)), bottom(static_cast<std::size_t>(m));
    std::iota(top.begin(), top.end(), Eigen::Index(0));
    std::iota(bottom.begin(), bottom.end(), m);
    const Var pdiff = g.sub(g.gather_rows(pnorm, top), g.gather_rows(pnorm, bottom));
    out.depth = g.mean(g.square(g.sub(pdiff, g.input(std::move(gdiff)))));
  }
  const Var a = g.linear(out.jsd, T(w.sdc_jsd));
  const Var b = g.linear(out.rgb, T(w.sdc_rgb));
  const Var c = g.linear(out.depth, T(w.sdc_depth));
  out.total = g.add(g.add(a, b), c);
  return out;
}

/// Mean JSD between softmaxed features of corresponding rays.
template <class T>
Var graph_loss_tic(Graph<T>& g, Var feature_a, Var feature_b) {
  if (g.value(feature_a).rows() == 0) return g.input(Matrix<T>::Zero(1, 1));
  return g.mean(g.jsd_rows(g.softmax_rows(feature_a), g.softmax_rows(feature_b)));
}

}  // namespace n2p
