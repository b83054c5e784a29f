#pragma once

// Pipeline commands shared by the command-line tool and the acceptance run.
// Each command writes its outputs plus manifest.txt into its output directory.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "n2p/checkpoint.hpp"
#include "n2p/config.hpp"
#include "n2p/dataset_io.hpp"
#include "n2p/error.hpp"
#include "n2p/field.hpp"
#include "n2p/geometry.hpp"
#include "n2p/image_io.hpp"
#include "n2p/log.hpp"
#include "n2p/lpim.hpp"
#include "n2p/metrics.hpp"
#include "n2p/ply.hpp"
#include "n2p/rng.hpp"
#include "n2p/synthscene.hpp"
#include "n2p/trainer.hpp"

namespace n2p {

inline constexpr const char* kVersion = "0.1.0";

struct Manifest {
  std::string command;
  KeyValues config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_seconds = 0.0;

  void write(const std::string& dir) const {
    KeyValues kv;
    kv.set("command", command);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(config.hash()));
    kv.set("config_hash", std::string(hex));
    kv.set("seed", seed);
    std::string in, out;
    for (const auto& s : inputs) in += (in.empty() ? "" : ",") + s;
    for (const auto& s : outputs) out += (out.empty() ? "" : ",") + s;
    kv.set("inputs", in);
    kv.set("outputs", out);
    kv.set("version", std::string("n2p ") + kVersion);
    kv.set("wall_time_s", wall_seconds);
    kv.save((std::filesystem::path(dir) / "manifest.txt").string());
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace detail

// ---- synth ------------------------------------------------------------------

struct SynthOptions {
  SceneSpec scene;
  TrajectorySpec trajectory;
  double gt_density = 4.0;
  double max_range = 20.0;
  int correspondences_per_pair = 256;

  static SynthOptions from_kv(const KeyValues& kv) {
    SynthOptions o;
    o.scene = SceneSpec::read(kv);
    o.trajectory = TrajectorySpec::read(kv);
    o.gt_density = kv.get("gt_density", o.gt_density);
    o.max_range = kv.get("max_range", o.max_range);
    o.correspondences_per_pair = kv.get("correspondences_per_pair", o.correspondences_per_pair);
    if (!(o.gt_density > 0) || !(o.max_range > 0) || o.correspondences_per_pair < 0)
      throw ValueError("synth: gt_density and max_range must be positive");
    return o;
  }
  KeyValues to_kv() const {
    KeyValues kv;
    scene.write(kv);
    trajectory.write(kv);
    kv.set("gt_density", gt_density);
    kv.set("max_range", max_range);
    kv.set("correspondences_per_pair", correspondences_per_pair);
    return kv;
  }
};

struct SynthResult {
  SceneModel scene;
  Trajectory trajectory;
  Dataset dataset;
  PointCloud gt_cloud;
  std::size_t correspondences_excluded = 0;
};

inline SynthResult synthesize(const SynthOptions& opt) {
  SynthResult r;
  r.scene = build_scene(opt.scene);
  r.trajectory = make_trajectory(opt.trajectory);
  r.dataset.intrinsics = opt.trajectory.intrinsics;
  for (std::size_t i = 0; i < r.trajectory.cameras.size(); ++i) {
    r.dataset.frames.push_back(raytrace_frame(r.scene, r.trajectory.cameras[i], static_cast<int>(i)));
    r.dataset.frames.back().audit();
  }
  VisibilityFilter vis{r.trajectory.cameras, opt.max_range};
  r.gt_cloud = sample_gt_cloud(r.scene, opt.gt_density, &vis);
  Rng rng = Rng::stream(opt.scene.seed, 201);
  std::vector<std::size_t> order(r.gt_cloud.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  for (std::size_t f = 0; f + 1 < r.trajectory.cameras.size(); ++f) {
    const auto& a = r.trajectory.cameras[f];
    const auto& b = r.trajectory.cameras[f + 1];
    CorrespondencePairs pairs;
    pairs.frame_a = static_cast<int>(f);
    pairs.frame_b = static_cast<int>(f + 1);
    for (std::size_t k = 0; k < order.size() && static_cast<int>(pairs.size()) < opt.correspondences_per_pair; ++k) {
      const Vec3& x = r.gt_cloud.points[order[k]];
      if ((x - a.position).norm() > opt.max_range || (x - b.position).norm() > opt.max_range) continue;
      const auto pp = project_correspondences(r.scene, a, b, std::span<const Vec3>(&x, 1), pairs.frame_a, pairs.frame_b);
      r.correspondences_excluded += pp.excluded;
      if (!pp.pairs.empty()) {
        pairs.uv_a.push_back(pp.pairs.uv_a[0]);
        pairs.uv_b.push_back(pp.pairs.uv_b[0]);
      }
    }
    r.dataset.pairs.push_back(std::move(pairs));
  }
  return r;
}

inline SynthResult cmd_synth(const KeyValues& config, const std::string& out) {
  detail::Stopwatch sw;
  const SynthOptions opt = SynthOptions::from_kv(config);
  SynthResult r = synthesize(opt);
  detail::ensure_dir(out);
  write_dataset(r.dataset, out);
  write_ply(r.gt_cloud, detail::join(out, "gt_cloud.ply"));
  opt.to_kv().save(detail::join(out, "scene.txt"));
  Manifest m{"synth", opt.to_kv(), opt.scene.seed, {}, {"intrinsics.txt", "poses.txt", "correspondences.txt", "gt_cloud.ply", "scene.txt"}, 0.0};
  m.wall_seconds = sw.seconds();
  m.write(out);
  return r;
}

// ---- train ------------------------------------------------------------------

struct TrainResult {
  TrainTrace trace;
  std::string checkpoint;
  double seconds = 0.0;
};

inline std::string checkpoint_name(std::int64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "checkpoint_%06lld.bin", static_cast<long long>(step));
  return buf;
}

/// Trains on the dataset in `dataset_dir`. With `resume`, parameters, Adam
/// moments and the step counter come from that checkpoint and new trace
/// rows are appended to an existing trace.csv.
inline TrainResult cmd_train(const std::string& dataset_dir, const KeyValues& config, const std::string& out,
                             const std::optional<std::string>& resume = std::nullopt,
                             const std::function<void(const TraceRow&)>& on_row = nullptr) {
  detail::Stopwatch sw;
  const TrainConfig cfg = TrainConfig::from_kv(config);
  const Dataset ds = read_dataset(dataset_dir);
  detail::ensure_dir(out);
  Trainer<float> trainer(ds, cfg);
  TrainResult res;
  const std::string trace_path = detail::join(out, "trace.csv");
  if (resume) {
    trainer.restore(load_checkpoint<float>(*resume));
    if (std::filesystem::exists(trace_path)) {
      const TrainTrace old = TrainTrace::read_csv(trace_path);
      for (const auto& r : old.rows)
        if (r.step < trainer.step()) res.trace.rows.push_back(r);
    }
  }
  auto save = [&](const std::string& name) {
    try {
      save_checkpoint(detail::join(out, name), trainer.checkpoint());
    } catch (const Error& e) {
      throw IoError("checkpoint at step " + std::to_string(trainer.step()) + ": " + e.what());
    }
  };
  while (trainer.step() < cfg.iterations) {
    res.trace.rows.push_back(trainer.train_step());
    if (on_row) on_row(res.trace.rows.back());
    if (cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0 && trainer.step() < cfg.iterations)
      save(checkpoint_name(trainer.step()));
  }
  save("checkpoint.bin");
  res.trace.write_csv(trace_path);
  res.checkpoint = detail::join(out, "checkpoint.bin");
  res.seconds = sw.seconds();
  Manifest m{"train", cfg.to_kv(), cfg.seed, {dataset_dir}, {"checkpoint.bin", "trace.csv"}, res.seconds};
  if (resume) m.inputs.push_back(*resume);
  m.write(out);
  return res;
}

// ---- model loading ------------------------------------------------------------

struct LoadedModel {
  TrainConfig config;
  Intrinsics intrinsics;
  SceneBounds bounds;
  bool lpim = true;
  std::int64_t step = 0;
  std::vector<RadianceField<float>> fields;  // road, scene (or one field)
};

inline LoadedModel load_model(const std::string& path) {
  const auto ckpt = load_checkpoint<float>(path);
  KeyValues cfg_kv, intr_kv;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.rfind("config.", 0) == 0) cfg_kv.set(k.substr(7), v);
    if (k.rfind("intrinsics.", 0) == 0) intr_kv.set(k.substr(11), v);
  }
  LoadedModel m;
  m.config = TrainConfig::from_kv(cfg_kv);
  m.intrinsics = intrinsics_from(intr_kv);
  m.bounds = Trainer<float>::parse_bounds(ckpt.meta_value("bounds"));
  m.lpim = ckpt.meta_value("lpim") == "true";
  m.step = ckpt.step;
  const std::size_t n = m.lpim ? 2 : 1;
  for (std::size_t i = 0; i < n; ++i) {
    m.fields.emplace_back(m.config.field, m.bounds);
    ckpt.restore_group(Trainer<float>::group_name(i, m.lpim), m.fields.back().parameters(), nullptr);
  }
  return m;
}

inline RenderConfig eval_render_config(const TrainConfig& c) {
  RenderConfig rc = c.render;
  rc.stratified = false;
  return rc;
}

// ---- extract ------------------------------------------------------------------

struct ExtractOptions {
  double accum_threshold = 0.5;
  double max_range = 20.0;
};

struct ExtractOutput {
  bool lpim = true;
  PointCloud road, scene, field;   // field is used when lpim is off
  std::vector<Vec3> shared_road, shared_scene;
  std::size_t total_rays = 0;
  std::size_t filtered = 0;
};

inline void write_pairs(const std::vector<Vec3>& a, const std::vector<Vec3>& b, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (int k = 0; k < 3; ++k) out << format_double(a[i](k)) << ' ';
    for (int k = 0; k < 3; ++k) out << format_double(b[i](k)) << (k < 2 ? ' ' : '\n');
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::pair<std::vector<Vec3>, std::vector<Vec3>> read_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Vec3> a, b;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Vec3 p, q;
    if (!(ls >> p.x() >> p.y() >> p.z() >> q.x() >> q.y() >> q.z()))
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 6 numbers");
    a.push_back(p);
    b.push_back(q);
  }
  return {a, b};
}

/// Renders every training-view ray with the owning field(s) and lifts
/// accepted rays to points. Shared pixels accepted by both fields give
/// correspondence pairs.
inline ExtractOutput extract_clouds(LoadedModel& model, const Dataset& ds, const ExtractOptions& opt) {
  if (!(model.intrinsics == ds.intrinsics))
    throw ValueError("checkpoint/dataset mismatch: intrinsics differ");
  ExtractOutput out;
  out.lpim = model.lpim;
  const RenderConfig rc = eval_render_config(model.config);
  const auto partitions = partition_dataset(ds, model.config.gate_radius);
  for (std::size_t fi = 0; fi < ds.frames.size(); ++fi) {
    const auto& frame = ds.frames[fi];
    const auto rays = rays_from_camera(frame.camera, frame.index);
    out.total_rays += rays.size();
    std::vector<std::vector<RenderResult>> renders;
    for (auto& f : model.fields) renders.push_back(render_batch(f, rays, rc, 0, 1024));
    auto accept = [&](const RenderResult& r) { return r.accumulation >= opt.accum_threshold && r.depth <= opt.max_range && r.depth > 0; };
    for (std::size_t p = 0; p < rays.size(); ++p) {
      const Ray& ray = rays[p];
      if (!model.lpim) {
        const auto& r = renders[0][p];
        if (!accept(r)) {
          ++out.filtered;
          continue;
        }
        out.field.points.push_back(ray.origin + r.depth * ray.direction);
        out.field.colors.push_back(r.color.cwiseMax(0.0).cwiseMin(1.0));
        continue;
      }
      const auto& part = partitions[fi];
      const bool in_road = part.in_road(static_cast<int>(p)), in_scene = part.in_scene(static_cast<int>(p));
      const bool ok_road = in_road && accept(renders[0][p]);
      const bool ok_scene = in_scene && accept(renders[1][p]);
      if (ok_road) {
        out.road.points.push_back(ray.origin + renders[0][p].depth * ray.direction);
        out.road.colors.push_back(renders[0][p].color.cwiseMax(0.0).cwiseMin(1.0));
      }
      if (ok_scene) {
        out.scene.points.push_back(ray.origin + renders[1][p].depth * ray.direction);
        out.scene.colors.push_back(renders[1][p].color.cwiseMax(0.0).cwiseMin(1.0));
      }
      if (in_road && in_scene && ok_road && ok_scene) {
        out.shared_road.push_back(out.road.points.back());
        out.shared_scene.push_back(out.scene.points.back());
      }
      if (!ok_road && !ok_scene) ++out.filtered;
    }
  }
  return out;
}

inline ExtractOutput cmd_extract(const std::string& checkpoint, const std::string& dataset_dir, const std::string& out,
                                 const ExtractOptions& opt = {}) {
  detail::Stopwatch sw;
  LoadedModel model = load_model(checkpoint);
  const Dataset ds = read_dataset(dataset_dir);
  ExtractOutput res = extract_clouds(model, ds, opt);
  detail::ensure_dir(out);
  std::vector<std::string> outputs;
  if (res.lpim) {
    write_ply(res.road, detail::join(out, "road.ply"));
    write_ply(res.scene, detail::join(out, "scene.ply"));
    write_pairs(res.shared_road, res.shared_scene, detail::join(out, "shared_pairs.txt"));
    outputs = {"road.ply", "scene.ply", "shared_pairs.txt"};
    if (res.shared_road.empty()) log::warn("extract: no shared correspondences, merge unavailable");
  } else {
    write_ply(res.field, detail::join(out, "field.ply"));
    outputs = {"field.ply"};
  }
  KeyValues report;
  report.set("rays", res.total_rays);
  report.set("filtered", res.filtered);
  report.set("road_points", res.road.size());
  report.set("scene_points", res.scene.size());
  report.set("field_points", res.field.size());
  report.set("shared_pairs", res.shared_road.size());
  report.save(detail::join(out, "extract.txt"));
  outputs.push_back("extract.txt");
  KeyValues cfg = model.config.to_kv();
  cfg.set("accum_threshold", opt.accum_threshold);
  cfg.set("max_range", opt.max_range);
  Manifest m{"extract", cfg, model.config.seed, {checkpoint, dataset_dir}, outputs, sw.seconds()};
  m.write(out);
  return res;
}

// ---- merge ------------------------------------------------------------------

struct MergeOptions {
  bool icp = false;
  std::size_t max_pairs = 1024;  // subsample of shared pairs used for the fit
  int icp_iters = 50;
  double icp_tol = 1e-12;
};

struct MergeOutput {
  RigidTransform transform;
  PointCloud merged;
  std::size_t pairs_used = 0;
  double pair_rms = 0.0;          // over all shared pairs, after the fit
  double icp_initial = 0.0;       // nearest-neighbor residual before refinement
  double icp_final = 0.0;         // ... and after (equal to initial without --icp)
};

inline MergeOutput merge_pipeline(const PointCloud& road, const PointCloud& scene, const std::vector<Vec3>& shared_road,
                                  const std::vector<Vec3>& shared_scene, const MergeOptions& opt) {
  if (shared_road.size() != shared_scene.size()) throw ShapeError("merge: shared pair lists differ in length");
  if (shared_road.size() < 3)
    throw DegenerateConfiguration("merge: need at least 3 shared correspondences, got " + std::to_string(shared_road.size()));
  MergeOutput out;
  std::vector<Vec3> P, Q;
  const std::size_t n = shared_road.size();
  const std::size_t m = std::min(n, opt.max_pairs);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t k = (i * n) / m;  // evenly strided, deterministic
    P.push_back(shared_road[k]);
    Q.push_back(shared_scene[k]);
  }
  out.pairs_used = m;
  out.transform = kabsch(P, Q);
  const NearestIndex qi(Q);
  out.icp_initial = nn_residual(P, qi, out.transform);
  out.icp_final = out.icp_initial;
  if (opt.icp) {
    const IcpResult icp = icp_refine(P, Q, out.transform, opt.icp_iters, opt.icp_tol);
    out.transform = icp.transform;
    out.icp_final = icp.residuals.back();
  }
  out.transform.validate();
  out.pair_rms = pair_rms(shared_road, shared_scene, out.transform);
  out.merged = merge_clouds(road, scene, out.transform);
  return out;
}

inline MergeOutput cmd_merge(const std::string& road_ply, const std::string& scene_ply, const std::string& pairs_file,
                             const std::string& out, const MergeOptions& opt = {}) {
  detail::Stopwatch sw;
  const PointCloud road = read_ply(road_ply), scene = read_ply(scene_ply);
  const auto [pr, ps] = read_pairs(pairs_file);
  MergeOutput res = merge_pipeline(road, scene, pr, ps, opt);
  detail::ensure_dir(out);
  write_ply(res.merged, detail::join(out, "merged.ply"));
  KeyValues rep;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rep.set("R" + std::to_string(r) + std::to_string(c), res.transform.R(r, c));
  for (int k = 0; k < 3; ++k) rep.set("t" + std::to_string(k), res.transform.t(k));
  rep.set("pairs_used", res.pairs_used);
  rep.set("residual", res.pair_rms);
  rep.set("icp", opt.icp);
  rep.set("icp_residual_initial", res.icp_initial);
  rep.set("icp_residual_final", res.icp_final);
  rep.set("points", res.merged.size());
  rep.save(detail::join(out, "transform.txt"));
  KeyValues cfg;
  cfg.set("icp", opt.icp);
  cfg.set("max_pairs", opt.max_pairs);
  Manifest m{"merge", cfg, 0, {road_ply, scene_ply, pairs_file}, {"merged.ply", "transform.txt"}, sw.seconds()};
  m.write(out);
  return res;
}

// ---- eval ------------------------------------------------------------------

struct EvalOutput {
  double chamfer = 0.0;
  std::size_t pred_points = 0, gt_points = 0;
  std::optional<double> psnr, ssim;
};

/// Chamfer between clouds; PSNR and SSIM averaged over image pairs if given.
inline EvalOutput cmd_eval(const std::string& pred_ply, const std::string& gt_ply,
                           const std::vector<std::pair<std::string, std::string>>& images, const std::string& out) {
  detail::Stopwatch sw;
  EvalOutput res;
  const PointCloud pred = read_ply(pred_ply), gt = read_ply(gt_ply);
  if (pred.empty() || gt.empty()) throw ValueError("eval: empty point cloud");
  res.chamfer = chamfer(pred, gt);
  res.pred_points = pred.size();
  res.gt_points = gt.size();
  if (!images.empty()) {
    double ps = 0, ss = 0;
    for (const auto& [a, b] : images) {
      const Raster ra = read_pnm(a), rb = read_pnm(b);
      if (ra.width != rb.width || ra.height != rb.height || ra.channels != rb.channels)
        throw ShapeError("eval: image sizes differ: " + a + " vs " + b);
      ps += psnr(ra.data, rb.data);
      ss += ssim(ra.data, rb.data, ra.width, ra.height, ra.channels);
    }
    res.psnr = ps / static_cast<double>(images.size());
    res.ssim = ss / static_cast<double>(images.size());
  }
  detail::ensure_dir(out);
  KeyValues rep;
  rep.set("chamfer", res.chamfer);
  rep.set("pred_points", res.pred_points);
  rep.set("gt_points", res.gt_points);
  if (res.psnr) rep.set("psnr", *res.psnr);
  if (res.ssim) rep.set("ssim", *res.ssim);
  rep.save(detail::join(out, "metrics.txt"));
  std::vector<std::string> inputs{pred_ply, gt_ply};
  for (const auto& [a, b] : images) {
    inputs.push_back(a);
    inputs.push_back(b);
  }
  Manifest m{"eval", {}, 0, inputs, {"metrics.txt"}, sw.seconds()};
  m.write(out);
  return res;
}

// ---- render -----------------------------------------------------------------

struct RenderedImage {
  Raster rgb;    // 3 channels
  Raster depth;  // 1 channel
};

/// Full-frame render. With two fields each pixel takes the branch whose
/// accumulation is higher.
inline RenderedImage render_view(LoadedModel& model, const CameraModel& cam) {
  const auto rays = rays_from_camera(cam, 0);
  const RenderConfig rc = eval_render_config(model.config);
  std::vector<std::vector<RenderResult>> renders;
  for (auto& f : model.fields) renders.push_back(render_batch(f, rays, rc, 0, 1024));
  RenderedImage img;
  const int w = cam.intrinsics.width, h = cam.intrinsics.height;
  img.rgb = {w, h, 3, std::vector<float>(rays.size() * 3)};
  img.depth = {w, h, 1, std::vector<float>(rays.size())};
  for (std::size_t p = 0; p < rays.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < renders.size(); ++k)
      if (renders[k][p].accumulation > renders[best][p].accumulation) best = k;
    const auto& r = renders[best][p];
    for (int c = 0; c < 3; ++c) img.rgb.data[3 * p + c] = static_cast<float>(std::clamp(r.color(c), 0.0, 1.0));
    img.depth.data[p] = static_cast<float>(r.depth);
  }
  return img;
}

/// Renders the pose with id `frame` from a poses file (first pose if -1).
inline RenderedImage cmd_render(const std::string& checkpoint, const std::string& pose_file, int frame, const std::string& out) {
  detail::Stopwatch sw;
  LoadedModel model = load_model(checkpoint);
  std::vector<PoseEntry> poses;
  try {
    poses = read_poses(pose_file);
  } catch (const FormatError& e) {
    throw FormatError(std::string("invalid pose file: ") + e.what());
  }
  if (poses.empty()) throw FormatError("invalid pose file: " + pose_file + " has no poses");
  const PoseEntry* pose = &poses.front();
  if (frame >= 0) {
    pose = nullptr;
    for (const auto& p : poses)
      if (p.frame == frame) pose = &p;
    if (!pose) throw ValueError("pose file has no frame " + std::to_string(frame));
  }
  CameraModel cam;
  cam.intrinsics = model.intrinsics;
  cam.rotation = pose->rotation;
  cam.position = pose->position;
  RenderedImage img = render_view(model, cam);
  detail::ensure_dir(out);
  write_pnm(img.rgb, detail::join(out, "render.ppm"));
  write_pfm(img.depth, detail::join(out, "render_depth.pfm"));
  KeyValues cfg;
  cfg.set("frame", pose->frame);
  Manifest m{"render", cfg, 0, {checkpoint, pose_file}, {"render.ppm", "render_depth.pfm"}, sw.seconds()};
  m.write(out);
  return img;
}

}  // namespace n2p
