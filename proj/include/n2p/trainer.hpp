#pragma once

// Dual-field training loop. Every random decision draws from a stream keyed
// by (seed, purpose, step), so a step can be recomputed from the step index
// alone: runs are reproducible, resumable and ablations stay paired.
//
//   stream 1  batch pixels           stream 3  sdc neighbors
//   stream 2  stratified jitter      stream 4  tic correspondence subset

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/camera.hpp"
#include "n2p/checkpoint.hpp"
#include "n2p/config.hpp"
#include "n2p/dataset_io.hpp"
#include "n2p/error.hpp"
#include "n2p/field.hpp"
#include "n2p/frame.hpp"
#include "n2p/log.hpp"
#include "n2p/losses.hpp"
#include "n2p/lpim.hpp"
#include "n2p/optim.hpp"
#include "n2p/rng.hpp"

namespace n2p {

enum RngStream : std::uint64_t { kBatchStream = 1, kJitterStream = 2, kNeighborStream = 3, kTicStream = 4 };

struct TrainConfig {
  int iterations = 2000;
  int batch = 512;
  LossWeights weights;
  RenderConfig render;
  FieldConfig field;
  LrSchedule schedule;
  AdamConfig adam;
  double clip_norm = 0.1;
  double clip_value = 0.1;
  int anneal_horizon = 200;
  double anneal_fraction = 0.1;
  int burn_in = 200;
  int tic_pairs = 64;
  int gate_radius = 2;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 1;
  bool lpim = true;
  bool sdc = true;
  bool tic = true;

  void validate() const {
    if (iterations < 1) throw ValueError("train config: iterations must be >= 1");
    if (batch < 1) throw ValueError("train config: batch must be >= 1");
    if (anneal_horizon < 0 || burn_in < 0 || tic_pairs < 0 || gate_radius < 0 || checkpoint_every < 0)
      throw ValueError("train config: counts must be >= 0");
    if (!(anneal_fraction > 0.0 && anneal_fraction <= 1.0)) throw ValueError("train config: anneal_fraction in (0, 1]");
    if (!(clip_norm > 0.0) || !(clip_value > 0.0)) throw ValueError("train config: clip thresholds must be positive");
    weights.validate();
    render.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("iterations", iterations);
    kv.set("batch", batch);
    weights.write(kv);
    kv.set("t_near", render.t_near);
    kv.set("t_far", render.t_far);
    kv.set("n_samples", render.n_samples);
    kv.set("stratified", render.stratified);
    kv.set("pos_levels", field.pos_levels);
    kv.set("dir_levels", field.dir_levels);
    kv.set("field_width", field.width);
    kv.set("field_depth", field.depth);
    kv.set("feature_width", field.feature_width);
    kv.set("warmup_steps", schedule.warmup_steps);
    kv.set("base_lr", schedule.base_lr);
    kv.set("final_lr", schedule.final_lr);
    kv.set("lr_total_steps", schedule.total_steps);
    kv.set("adam_beta1", adam.beta1);
    kv.set("adam_beta2", adam.beta2);
    kv.set("adam_eps", adam.eps);
    kv.set("clip_norm", clip_norm);
    kv.set("clip_value", clip_value);
    kv.set("anneal_horizon", anneal_horizon);
    kv.set("anneal_fraction", anneal_fraction);
    kv.set("burn_in", burn_in);
    kv.set("tic_pairs", tic_pairs);
    kv.set("gate_radius", gate_radius);
    kv.set("checkpoint_every", checkpoint_every);
    kv.set("seed", seed);
    kv.set("lpim", lpim);
    kv.set("sdc", sdc);
    kv.set("tic", tic);
    return kv;
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.iterations = kv.get("iterations", c.iterations);
    c.batch = kv.get("batch", c.batch);
    c.weights = LossWeights::read(kv);
    c.render.t_near = kv.get("t_near", c.render.t_near);
    c.render.t_far = kv.get("t_far", c.render.t_far);
    c.render.n_samples = kv.get("n_samples", c.render.n_samples);
    c.render.stratified = kv.get("stratified", c.render.stratified);
    c.field.pos_levels = kv.get("pos_levels", c.field.pos_levels);
    c.field.dir_levels = kv.get("dir_levels", c.field.dir_levels);
    c.field.width = kv.get("field_width", c.field.width);
    c.field.depth = kv.get("field_depth", c.field.depth);
    c.field.feature_width = kv.get("feature_width", c.field.feature_width);
    c.schedule.warmup_steps = kv.get("warmup_steps", c.schedule.warmup_steps);
    c.schedule.base_lr = kv.get("base_lr", c.schedule.base_lr);
    c.schedule.final_lr = kv.get("final_lr", c.schedule.final_lr);
    c.schedule.total_steps = kv.get("lr_total_steps", static_cast<std::int64_t>(c.iterations));
    c.adam.beta1 = kv.get("adam_beta1", c.adam.beta1);
    c.adam.beta2 = kv.get("adam_beta2", c.adam.beta2);
    c.adam.eps = kv.get("adam_eps", c.adam.eps);
    c.clip_norm = kv.get("clip_norm", c.clip_norm);
    c.clip_value = kv.get("clip_value", c.clip_value);
    c.anneal_horizon = kv.get("anneal_horizon", c.anneal_horizon);
    c.anneal_fraction = kv.get("anneal_fraction", c.anneal_fraction);
    c.burn_in = kv.get("burn_in", c.burn_in);
    c.tic_pairs = kv.get("tic_pairs", c.tic_pairs);
    c.gate_radius = kv.get("gate_radius", c.gate_radius);
    c.checkpoint_every = kv.get("checkpoint_every", c.checkpoint_every);
    c.seed = kv.get("seed", c.seed);
    c.lpim = kv.get("lpim", c.lpim);
    c.sdc = kv.get("sdc", c.sdc);
    c.tic = kv.get("tic", c.tic);
    c.validate();
    return c;
  }
};

// ---- trace ------------------------------------------------------------------

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  LossComponents loss;
  double total = 0.0;
  int hard_n = 0;
};

inline const char* kTraceHeader = "step,lr,rgb,depth,normal,sdc,tic,total,hard_n";

inline std::string trace_line(const TraceRow& r) {
  auto num = [](double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  return std::to_string(r.step) + "," + num(r.lr) + "," + num(r.loss.rgb) + "," + num(r.loss.depth) + "," +
         num(r.loss.normal) + "," + num(r.loss.sdc) + "," + num(r.loss.tic) + "," + num(r.total) + "," +
         std::to_string(r.hard_n);
}

struct TrainTrace {
  std::vector<TraceRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write trace " + path);
    out << kTraceHeader << '\n';
    for (const auto& r : rows) out << trace_line(r) << '\n';
    if (!out) throw IoError("write failed: " + path);
  }

  static TrainTrace read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trace " + path);
    std::string line;
    if (!std::getline(in, line) || line != kTraceHeader) throw FormatError(path + ": bad trace header");
    TrainTrace t;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
      if (f.size() != 9) throw FormatError(path + ":" + std::to_string(line_no) + ": expected 9 columns");
      try {
        TraceRow r;
        r.step = std::stoll(f[0]);
        r.lr = std::stod(f[1]);
        r.loss = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
        r.total = std::stod(f[7]);
        r.hard_n = std::stoi(f[8]);
        t.rows.push_back(r);
      } catch (const std::logic_error&) {
        throw FormatError(path + ":" + std::to_string(line_no) + ": unparsable value");
      }
    }
    return t;
  }
};

// ---- sampling -----------------------------------------------------------------

/// Sampling interval at a step: a centered window of `fraction` of the full
/// range widening linearly to the full range at the horizon.
inline std::pair<double, double> anneal_bounds(std::int64_t step, std::int64_t horizon, double t_near, double t_far,
                                               double fraction = 0.1) {
  if (step < 0) throw ValueError("anneal_bounds: negative step");
  const double progress = horizon <= 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
  const double width = (t_far - t_near) * (fraction + (1.0 - fraction) * progress);
  const double mid = 0.5 * (t_near + t_far);
  if (progress >= 1.0) return {t_near, t_far};
  return {mid - 0.5 * width, mid + 0.5 * width};
}

/// Rays with paired ground truth. valid marks rays whose depth/normal are
/// usable (surface hit inside the far plane).
template <class T>
struct Batch {
  std::vector<Ray> rays;
  Matrix<T> color;   // R x 3
  Matrix<T> depth;   // R x 1
  Matrix<T> normal;  // R x 3
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return rays.size(); }
};

template <class T>
Batch<T> gather_batch(const Dataset& ds, std::span<const Ray> rays, double t_far) {
  Batch<T> b;
  const auto R = static_cast<Eigen::Index>(rays.size());
  b.rays.assign(rays.begin(), rays.end());
  b.color.resize(R, 3);
  b.depth.resize(R, 1);
  b.normal.resize(R, 3);
  b.valid.resize(rays.size());
  for (Eigen::Index i = 0; i < R; ++i) {
    const Ray& r = rays[static_cast<std::size_t>(i)];
    const FrameRecord& f = ds.frames[static_cast<std::size_t>(r.frame)];
    const Vec3 c = f.color_at(r.pixel), n = f.normal_at(r.pixel);
    const double d = f.depth[static_cast<std::size_t>(r.pixel)];
    for (int k = 0; k < 3; ++k) {
      b.color(i, k) = T(c(k));
      b.normal(i, k) = T(n(k));
    }
    const bool ok = f.hit(r.pixel) && d < t_far;
    b.valid[static_cast<std::size_t>(i)] = ok;
    b.depth(i, 0) = T(ok ? d : 0.0);
  }
  return b;
}

/// `batch` (frame, pixel) pairs drawn uniformly with replacement; each ray
/// is tagged with its gate class from the frame's partition.
template <class T>
Batch<T> sample_batch(const Dataset& ds, std::span<const RayPartition> partitions, int batch, Rng& rng, double t_far) {
  if (ds.empty()) throw ValueError("sample_batch: empty dataset");
  if (partitions.size() != ds.frames.size()) throw ShapeError("sample_batch: one partition per frame required");
  const auto P = static_cast<std::uint64_t>(ds.intrinsics.pixel_count());
  const auto total = P * ds.frames.size();
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const auto id = rng.below(total);
    const int frame = static_cast<int>(id / P), pixel = static_cast<int>(id % P);
    const auto& f = ds.frames[static_cast<std::size_t>(frame)];
    Ray r = f.camera.ray_through(pixel % f.width() + 0.5, pixel / f.width() + 0.5);
    r.frame = frame;
    r.pixel = pixel;
    r.gate = partitions[static_cast<std::size_t>(frame)].gate[static_cast<std::size_t>(pixel)];
    rays.push_back(r);
  }
  return gather_batch<T>(ds, rays, t_far);
}

/// Axis-aligned box around all camera centers and far-plane ray endpoints.
inline SceneBounds dataset_bounds(const Dataset& ds, double t_far, double pad = 1.0) {
  SceneBounds b{Vec3::Constant(std::numeric_limits<double>::infinity()),
                Vec3::Constant(-std::numeric_limits<double>::infinity())};
  for (const auto& f : ds.frames) {
    b.lo = b.lo.cwiseMin(f.camera.position);
    b.hi = b.hi.cwiseMax(f.camera.position);
    const auto& k = f.camera.intrinsics;
    for (double v : {0.0, double(k.height)})
      for (double u : {0.0, double(k.width)}) {
        const Vec3 p = f.camera.position + t_far * f.camera.direction(u, v);
        b.lo = b.lo.cwiseMin(p);
        b.hi = b.hi.cwiseMax(p);
      }
  }
  b.lo.array() -= pad;
  b.hi.array() += pad;
  return b;
}

inline std::vector<RayPartition> partition_dataset(const Dataset& ds, int radius) {
  std::vector<RayPartition> out;
  for (const auto& f : ds.frames) out.push_back(partition_mask(GateMask(f.width(), f.height(), f.road_mask, radius)));
  return out;
}

/// One neighbor pixel drawn uniformly from the hard sample's region,
/// restricted to pixels accepted by `in_domain`. The center always qualifies.
template <class Pred>
int draw_neighbor(const HardSample& h, int width, Pred&& in_domain, Rng& rng) {
  std::vector<int> cand;
  cand.reserve(static_cast<std::size_t>(h.region.size()));
  for (int r = h.region.row0; r <= h.region.row1; ++r)
    for (int c = h.region.col0; c <= h.region.col1; ++c)
      if (in_domain(r * width + c)) cand.push_back(r * width + c);
  if (cand.empty()) return h.pixel;
  return cand[static_cast<std::size_t>(rng.below(cand.size()))];
}

// ---- standalone consistency losses ---------------------------------------------

/// Spatial consistency for a set of hard rays of one frame, rendered with
/// `field`: one neighbor per hard ray is drawn from its region (redrawn on
/// every call through `rng`). Returns the scalar loss.
template <class T>
double loss_sdc(RadianceField<T>& field, const Dataset& ds, std::span<const Ray> hard_rays, const HardSampleSet& hard,
                const RenderConfig& cfg, const LossWeights& w, Rng& rng, std::uint64_t sample_seed = 0) {
  if (hard.empty()) {
    log::warn("loss_sdc: empty hard set");
    return 0.0;
  }
  std::vector<Ray> hr, nr;
  for (const auto& h : hard.samples) {
    const Ray& ray = hard_rays[static_cast<std::size_t>(h.index)];
    const FrameRecord& f = ds.frames[static_cast<std::size_t>(ray.frame)];
    const int px = draw_neighbor(h, f.width(), [](int) { return true; }, rng);
    Ray n = f.camera.ray_through(px % f.width() + 0.5, px / f.width() + 0.5);
    n.frame = ray.frame;
    n.pixel = px;
    hr.push_back(ray);
    nr.push_back(n);
  }
  const auto bh = gather_batch<T>(ds, hr, cfg.t_far), bn = gather_batch<T>(ds, nr, cfg.t_far);
  Graph<T> g;
  const auto a = render_rays(g, field, hr, cfg, sample_seed);
  const auto b = render_rays(g, field, nr, cfg, sample_seed);
  SdcInputs<T> in{a.feature, b.feature, a.color, b.color, a.depth, b.depth, bh.color, bn.color, bh.depth, bn.depth, {}};
  for (std::size_t i = 0; i < hr.size(); ++i)
    if (bh.valid[i] && bn.valid[i]) in.depth_rows.push_back(static_cast<Eigen::Index>(i));
  return double(g.scalar(graph_loss_sdc(g, in, w).total));
}

/// Temporal consistency between corresponding sub-pixel locations of two
/// frames, both rendered by `field`.
template <class T>
double loss_tic(RadianceField<T>& field, const Dataset& ds, const CorrespondencePairs& pairs, const RenderConfig& cfg,
                std::uint64_t sample_seed = 0) {
  if (pairs.empty()) {
    log::warn("loss_tic: no correspondences");
    return 0.0;
  }
  auto rays_for = [&](int frame, const std::vector<Vec2>& uv) {
    const FrameRecord& f = ds.frames[static_cast<std::size_t>(frame)];
    std::vector<Ray> out;
    for (const auto& p : uv) {
      Ray r = f.camera.ray_through(p.x(), p.y());
      r.frame = frame;
      r.pixel = std::clamp(static_cast<int>(p.y()), 0, f.height() - 1) * f.width() +
                std::clamp(static_cast<int>(p.x()), 0, f.width() - 1);
      out.push_back(r);
    }
    return out;
  };
  const auto ra = rays_for(pairs.frame_a, pairs.uv_a), rb = rays_for(pairs.frame_b, pairs.uv_b);
  Graph<T> g;
  const auto a = render_rays(g, field, ra, cfg, sample_seed);
  const auto b = render_rays(g, field, rb, cfg, sample_seed);
  return double(g.scalar(graph_loss_tic(g, a.feature, b.feature)));
}

// ---- trainer ------------------------------------------------------------------

/// Everything recorded for one step; kept alive so tests can differentiate it.
template <class T>
struct StepGraph {
  Graph<T> g;
  Var total;
  LossComponents loss;
  int hard_n = 0;
  std::vector<int> hard_rays;  // batch rows chosen as hard, per branch in order
  double lr = 0.0;
};

template <class T>
class Trainer {
 public:
  Trainer(const Dataset& ds, const TrainConfig& cfg) : ds_(&ds), cfg_(cfg) {
    cfg_.validate();
    if (ds.empty()) throw ValueError("trainer: empty dataset");
    for (const auto& f : ds.frames) f.audit();
    for (std::size_t i = 0; i < ds.frames.size(); ++i)
      if (ds.frames[i].index != static_cast<int>(i)) throw ValueError("trainer: frames must be indexed 0..n-1 in order");
    bounds_ = dataset_bounds(ds, cfg_.render.t_far);
    partitions_ = partition_dataset(ds, cfg_.gate_radius);
    FieldConfig fc = cfg_.field;
    const int nfields = cfg_.lpim ? 2 : 1;
    for (int b = 0; b < nfields; ++b) {
      fc.seed = splitmix64(cfg_.seed * 31 + static_cast<std::uint64_t>(b) + 11);
      fields_.emplace_back(fc, bounds_);
      adam_.emplace_back(std::span<const Parameter<T>>(fields_.back().parameters()));
    }
    for (std::size_t i = 0; i < ds.pairs.size(); ++i)
      if (!ds.pairs[i].empty()) tic_pairs_.push_back(i);
  }

  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  const SceneBounds& bounds() const { return bounds_; }
  const std::vector<RayPartition>& partitions() const { return partitions_; }
  bool lpim() const { return cfg_.lpim; }
  std::size_t field_count() const { return fields_.size(); }
  RadianceField<T>& field(Branch b) { return fields_[cfg_.lpim ? static_cast<std::size_t>(b) : 0]; }
  RadianceField<T>& field_at(std::size_t i) { return fields_[i]; }
  static const char* group_name(std::size_t i, bool lpim) { return lpim ? (i == 0 ? "road/" : "scene/") : "field/"; }

  /// Records the full loss of `step` without touching parameters.
  StepGraph<T> build(std::int64_t step) {
    StepGraph<T> sg;
    auto& g = sg.g;
    const auto& w = cfg_.weights;
    sg.lr = cfg_.schedule.at(step);
    RenderConfig rc = cfg_.render;
    std::tie(rc.t_near, rc.t_far) =
        anneal_bounds(step, cfg_.anneal_horizon, cfg_.render.t_near, cfg_.render.t_far, cfg_.anneal_fraction);
    Rng batch_rng = Rng::stream(cfg_.seed, kBatchStream, static_cast<std::uint64_t>(step));
    const Batch<T> batch = sample_batch<T>(*ds_, partitions_, cfg_.batch, batch_rng, cfg_.render.t_far);
    Rng nbr_rng = Rng::stream(cfg_.seed, kNeighborStream, static_cast<std::uint64_t>(step));
    const bool mine = cfg_.sdc && step >= cfg_.burn_in;

    struct Part {
      Var rgb, normal, sdc;
      double n_rays = 0, n_valid = 0, n_hard = 0;
    };
    // Depth is max-min normalized over the valid rays of the whole batch,
    // across both branches.
    std::vector<Var> depth_pred;
    std::vector<T> depth_gt;
    std::vector<Part> parts;
    for (std::size_t fi = 0; fi < fields_.size(); ++fi) {
      const Branch branch = static_cast<Branch>(fi);
      auto in_domain = [&](int frame, int pixel) {
        if (!cfg_.lpim) return true;
        const auto& p = partitions_[static_cast<std::size_t>(frame)];
        return branch == Branch::road ? p.in_road(pixel) : p.in_scene(pixel);
      };
      std::vector<Eigen::Index> rows;
      for (std::size_t i = 0; i < batch.size(); ++i)
        if (in_domain(batch.rays[i].frame, batch.rays[i].pixel)) rows.push_back(static_cast<Eigen::Index>(i));
      if (rows.empty()) continue;
      const auto R = static_cast<Eigen::Index>(rows.size());
      std::vector<Ray> rays;
      Matrix<T> gc(R, 3), gd(R, 1), gn(R, 3);
      std::vector<Eigen::Index> valid;
      for (Eigen::Index j = 0; j < R; ++j) {
        const auto i = static_cast<std::size_t>(rows[static_cast<std::size_t>(j)]);
        rays.push_back(batch.rays[i]);
        gc.row(j) = batch.color.row(static_cast<Eigen::Index>(i));
        gd.row(j) = batch.depth.row(static_cast<Eigen::Index>(i));
        gn.row(j) = batch.normal.row(static_cast<Eigen::Index>(i));
        if (batch.valid[i]) valid.push_back(j);
      }
      const std::uint64_t jitter_seed = jitter_seed_for(step, fi);
      auto& field = fields_[fi];
      const RenderNodes nodes = render_rays(g, field, rays, rc, jitter_seed);
      Part part;
      part.n_rays = double(R);
      part.n_valid = double(valid.size());
      part.rgb = graph_loss_rgb(g, nodes.color, g.input(gc));
      if (!valid.empty()) {
        depth_pred.push_back(g.gather_rows(nodes.depth, valid));
        for (auto v : valid) depth_gt.push_back(gd(v, 0));
      }
      part.normal = graph_loss_normal(g, nodes.normal, g.input(gn), valid);
      if (mine) {
        const HardSampleSet hard = mine_hard(g, nodes, rays, gc, gd, gn, valid);
        part.n_hard = double(hard.size());
        sg.hard_n += static_cast<int>(hard.size());
        for (const auto& h : hard.samples) sg.hard_rays.push_back(static_cast<int>(rows[static_cast<std::size_t>(h.index)]));
        std::vector<Ray> nbr;
        std::vector<Eigen::Index> hard_rows;
        for (const auto& h : hard.samples) {
          const Ray& hr = rays[static_cast<std::size_t>(h.index)];
          const FrameRecord& f = ds_->frames[static_cast<std::size_t>(hr.frame)];
          const int px = draw_neighbor(h, f.width(), [&](int p) { return in_domain(hr.frame, p); }, nbr_rng);
          Ray n = f.camera.ray_through(px % f.width() + 0.5, px / f.width() + 0.5);
          n.frame = hr.frame;
          n.pixel = px;
          nbr.push_back(n);
          hard_rows.push_back(h.index);
        }
        const Batch<T> nb = gather_batch<T>(*ds_, nbr, cfg_.render.t_far);
        const RenderNodes nn = render_rays(g, field, nbr, rc, jitter_seed);
        SdcInputs<T> in;
        in.feature_hard = g.gather_rows(nodes.feature, hard_rows);
        in.color_hard = g.gather_rows(nodes.color, hard_rows);
        in.depth_hard = g.gather_rows(nodes.depth, hard_rows);
        in.feature_nbr = nn.feature;
        in.color_nbr = nn.color;
        in.depth_nbr = nn.depth;
        const auto H = static_cast<Eigen::Index>(hard_rows.size());
        in.gt_color_hard.resize(H, 3);
        in.gt_depth_hard.resize(H, 1);
        for (Eigen::Index k = 0; k < H; ++k) {
          in.gt_color_hard.row(k) = gc.row(hard_rows[static_cast<std::size_t>(k)]);
          in.gt_depth_hard(k, 0) = gd(hard_rows[static_cast<std::size_t>(k)], 0);
        }
        in.gt_color_nbr = nb.color;
        in.gt_depth_nbr = nb.depth;
        for (Eigen::Index k = 0; k < H; ++k) {
          const auto hr = static_cast<std::size_t>(rows[static_cast<std::size_t>(hard_rows[static_cast<std::size_t>(k)])]);
          if (batch.valid[hr] && nb.valid[static_cast<std::size_t>(k)]) in.depth_rows.push_back(k);
        }
        part.sdc = graph_loss_sdc(g, in, w).total;
      }
      parts.push_back(part);
    }

    double n_rays = 0, n_hard = 0;
    for (const auto& p : parts) {
      n_rays += p.n_rays;
      n_hard += p.n_hard;
    }
    auto mix = [&](auto member, auto count, double denom) {
      Var acc = g.input(Matrix<T>::Zero(1, 1));
      for (const auto& p : parts) {
        const double c = count(p);
        if (c > 0 && denom > 0) acc = g.add(acc, g.linear(p.*member, T(c / denom)));
      }
      return acc;
    };
    const Var rgb = mix(&Part::rgb, [](const Part& p) { return p.n_rays; }, n_rays);
    Var depth = g.input(Matrix<T>::Zero(1, 1));
    if (!depth_pred.empty()) {
      const Matrix<T> gt_all = Eigen::Map<const Matrix<T>>(depth_gt.data(), static_cast<Eigen::Index>(depth_gt.size()), 1);
      std::vector<Eigen::Index> all(depth_gt.size());
      std::iota(all.begin(), all.end(), Eigen::Index(0));
      depth = graph_loss_depth(g, g.concat_rows(depth_pred), gt_all, all);
    }
    Var normal = g.input(Matrix<T>::Zero(1, 1));
    for (const auto& p : parts)
      if (p.n_valid > 0) normal = g.add(normal, p.normal);
    const Var sdc = mix(&Part::sdc, [](const Part& p) { return p.n_hard; }, n_hard);
    const Var tic = cfg_.tic ? record_tic(g, step, rc) : g.input(Matrix<T>::Zero(1, 1));

    sg.loss = {double(g.scalar(rgb)), double(g.scalar(depth)), double(g.scalar(normal)), double(g.scalar(sdc)),
               double(g.scalar(tic))};
    Var total = g.add(g.add(g.linear(rgb, T(w.rec_rgb)), g.linear(depth, T(w.rec_depth))), g.linear(normal, T(w.rec_normal)));
    total = g.add(total, g.linear(sdc, T(w.beta)));
    total = g.add(total, g.linear(tic, T(w.gamma)));
    sg.total = total;
    if (!std::isfinite(double(g.scalar(total))))
      throw NumericError("non-finite loss at step " + std::to_string(step));
    return sg;
  }

  /// One optimization step at the current step counter.
  TraceRow train_step() {
    StepGraph<T> sg = build(step_);
    for (auto& f : fields_)
      for (auto& p : f.parameters()) p.zero_grad();
    sg.g.backward(sg.total);
    for (std::size_t i = 0; i < fields_.size(); ++i) {
      auto params = fields_[i].parameters();
      for (const auto& p : params)
        if (!p.grad.allFinite()) throw NumericError("non-finite gradient in " + p.name + " at step " + std::to_string(step_));
      clip_gradients(params, cfg_.clip_norm, cfg_.clip_value);
      adam_step(params, adam_[i], sg.lr, cfg_.adam);
    }
    TraceRow row;
    row.step = step_;
    row.lr = sg.lr;
    row.loss = sg.loss;
    row.total = loss_total(sg.loss, cfg_.weights);
    row.hard_n = sg.hard_n;
    ++step_;
    return row;
  }

  /// Runs until the step counter reaches `until` (default: config.iterations).
  TrainTrace run(std::optional<std::int64_t> until = std::nullopt,
                 const std::function<void(const TraceRow&)>& on_row = nullptr) {
    const std::int64_t end = until.value_or(cfg_.iterations);
    TrainTrace trace;
    while (step_ < end) {
      trace.rows.push_back(train_step());
      if (on_row) on_row(trace.rows.back());
    }
    return trace;
  }

  Checkpoint<T> checkpoint() const {
    Checkpoint<T> c;
    c.step = step_;
    const KeyValues cfg_kv = cfg_.to_kv(), intr_kv = intrinsics_kv(ds_->intrinsics);
    for (const auto& [k, v] : cfg_kv.entries()) c.meta["config." + k] = v;
    for (const auto& [k, v] : intr_kv.entries()) c.meta["intrinsics." + k] = v;
    c.meta["bounds"] = bounds_str(bounds_);
    c.meta["lpim"] = cfg_.lpim ? "true" : "false";
    for (std::size_t i = 0; i < fields_.size(); ++i)
      c.add_group(group_name(i, cfg_.lpim), std::span<const Parameter<T>>(fields_[i].parameters()), adam_[i]);
    return c;
  }

  void restore(const Checkpoint<T>& c) {
    if (c.meta_value("lpim") != (cfg_.lpim ? "true" : "false")) throw StateError("checkpoint lpim flag differs from config");
    for (std::size_t i = 0; i < fields_.size(); ++i) c.restore_group(group_name(i, cfg_.lpim), fields_[i].parameters(), &adam_[i]);
    step_ = c.step;
  }

  static std::string bounds_str(const SceneBounds& b) {
    std::string s;
    for (int k = 0; k < 3; ++k) s += format_num(b.lo(k)) + " ";
    for (int k = 0; k < 3; ++k) s += format_num(b.hi(k)) + (k < 2 ? " " : "");
    return s;
  }
  static SceneBounds parse_bounds(const std::string& s) {
    std::istringstream in(s);
    SceneBounds b;
    for (int k = 0; k < 3; ++k) in >> b.lo(k);
    for (int k = 0; k < 3; ++k) in >> b.hi(k);
    if (!in) throw FormatError("checkpoint bounds are malformed");
    return b;
  }

 private:
  static std::string format_num(double v) {
    char buf[40];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }

  std::uint64_t jitter_seed_for(std::int64_t step, std::size_t branch) const {
    return Rng::stream(cfg_.seed, kJitterStream, static_cast<std::uint64_t>(step) * 4 + branch).next_u64();
  }

  /// Per-ray matching costs from current predictions, then top-n selection.
  HardSampleSet mine_hard(const Graph<T>& g, const RenderNodes& nodes, const std::vector<Ray>& rays, const Matrix<T>& gc,
                          const Matrix<T>& gd, const Matrix<T>& gn, const std::vector<Eigen::Index>& valid) const {
    const auto R = static_cast<Eigen::Index>(rays.size());
    const Matrix<double> pc = g.value(nodes.color).template cast<double>();
    const Matrix<double> pn = g.value(nodes.normal).template cast<double>();
    const Eigen::VectorXd rgb = rgb_per_ray(pc, gc.template cast<double>());
    Eigen::VectorXd depth = Eigen::VectorXd::Zero(R), normal = Eigen::VectorXd::Zero(R);
    if (!valid.empty()) {
      Eigen::VectorXd p(static_cast<Eigen::Index>(valid.size())), q(static_cast<Eigen::Index>(valid.size()));
      Matrix<double> np(static_cast<Eigen::Index>(valid.size()), 3), nq(static_cast<Eigen::Index>(valid.size()), 3);
      for (std::size_t k = 0; k < valid.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        p(kk) = double(g.value(nodes.depth)(valid[k], 0));
        q(kk) = double(gd(valid[k], 0));
        np.row(kk) = pn.row(valid[k]);
        nq.row(kk) = gn.row(valid[k]).template cast<double>();
      }
      const Eigen::VectorXd dv = depth_per_ray(p, q), nv = normal_per_ray(np, nq);
      for (std::size_t k = 0; k < valid.size(); ++k) {
        depth(valid[k]) = dv(static_cast<Eigen::Index>(k));
        normal(valid[k]) = nv(static_cast<Eigen::Index>(k));
      }
    }
    const Eigen::VectorXd cost = matching_cost(depth, rgb, normal, cfg_.weights);
    std::vector<int> pixels;
    for (const auto& r : rays) pixels.push_back(r.pixel);
    const int n = std::max(1, static_cast<int>(std::lround(cfg_.weights.hard_fraction * static_cast<double>(R))));
    return select_hard(cost, std::min(n, static_cast<int>(R)), pixels, ds_->intrinsics.width, ds_->intrinsics.height,
                       cfg_.weights.region);
  }

  /// TIC on one frame pair (round-robin). Each correspondence is rendered by
  /// the field owning its frame-a pixel (mask bit), in both frames.
  Var record_tic(Graph<T>& g, std::int64_t step, const RenderConfig& rc) {
    if (tic_pairs_.empty() || cfg_.tic_pairs == 0) return g.input(Matrix<T>::Zero(1, 1));
    const auto& pairs = ds_->pairs[tic_pairs_[static_cast<std::size_t>(step) % tic_pairs_.size()]];
    Rng rng = Rng::stream(cfg_.seed, kTicStream, static_cast<std::uint64_t>(step));
    std::vector<std::size_t> pick(pairs.size());
    std::iota(pick.begin(), pick.end(), std::size_t(0));
    const std::size_t m = std::min(pick.size(), static_cast<std::size_t>(cfg_.tic_pairs));
    for (std::size_t i = 0; i < m; ++i) std::swap(pick[i], pick[i + static_cast<std::size_t>(rng.below(pick.size() - i))]);
    pick.resize(m);
    std::sort(pick.begin(), pick.end());
    const FrameRecord& fa = ds_->frames[static_cast<std::size_t>(pairs.frame_a)];
    const FrameRecord& fb = ds_->frames[static_cast<std::size_t>(pairs.frame_b)];
    auto make = [](const FrameRecord& f, const Vec2& uv) {
      Ray r = f.camera.ray_through(uv.x(), uv.y());
      r.frame = f.index;
      r.pixel = std::clamp(static_cast<int>(uv.y()), 0, f.height() - 1) * f.width() +
                std::clamp(static_cast<int>(uv.x()), 0, f.width() - 1);
      return r;
    };
    Var acc = g.input(Matrix<T>::Zero(1, 1));
    for (std::size_t fi = 0; fi < fields_.size(); ++fi) {
      std::vector<Ray> ra, rb;
      for (auto i : pick) {
        const Ray a = make(fa, pairs.uv_a[i]);
        const bool road = fa.road_mask[static_cast<std::size_t>(a.pixel)] != 0;
        const std::size_t owner = cfg_.lpim ? (road ? 0 : 1) : 0;
        if (owner != fi) continue;
        ra.push_back(a);
        rb.push_back(make(fb, pairs.uv_b[i]));
      }
      if (ra.empty()) continue;
      const std::uint64_t seed = jitter_seed_for(step, 2 + fi);
      const auto na = render_rays(g, fields_[fi], ra, rc, seed);
      const auto nb = render_rays(g, fields_[fi], rb, rc, seed);
      const Var j = g.sum(g.jsd_rows(g.softmax_rows(na.feature), g.softmax_rows(nb.feature)));
      acc = g.add(acc, g.linear(j, T(1.0 / static_cast<double>(m))));
    }
    return acc;
  }

  const Dataset* ds_;
  TrainConfig cfg_;
  SceneBounds bounds_;
  std::vector<RayPartition> partitions_;
  std::vector<RadianceField<T>> fields_;
  std::vector<AdamState<T>> adam_;
  std::vector<std::size_t> tic_pairs_;
  std::int64_t step_ = 0;
};

}  // namespace n2p
