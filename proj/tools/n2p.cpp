#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "n2p/pipeline.hpp"

namespace {

using n2p::KeyValues;

KeyValues load_config(const std::string& path) { return path.empty() ? KeyValues{} : KeyValues::load(path); }

int fail(n2p::ErrorCategory c, const std::string& msg) {
  std::cerr << "error: category=" << n2p::category_name(c) << " message=" << msg << '\n';
  return n2p::exit_code(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n2p: street-scene radiance fields to point clouds"};
  app.require_subcommand(1);

  std::string config, out = ".";
  std::optional<std::uint64_t> seed;

  auto* synth = app.add_subcommand("synth", "render a synthetic street dataset");
  synth->add_option("--config", config, "key = value config file");
  synth->add_option("--seed", seed, "scene seed");
  synth->add_option("--out", out, "dataset directory")->required();

  std::string dataset, resume;
  std::optional<long long> iterations;
  bool no_lpim = false, no_sdc = false, no_tic = false;
  auto* train = app.add_subcommand("train", "train the radiance field(s)");
  train->add_option("--dataset", dataset)->required();
  train->add_option("--config", config);
  train->add_option("--seed", seed);
  train->add_option("--out", out)->required();
  train->add_option("--iterations", iterations);
  train->add_flag("--no-lpim", no_lpim, "single field");
  train->add_flag("--no-sdc", no_sdc);
  train->add_flag("--no-tic", no_tic);
  train->add_option("--resume", resume, "checkpoint to continue from");

  std::string checkpoint;
  n2p::ExtractOptions ex;
  auto* extract = app.add_subcommand("extract", "lift rendered depth to point clouds");
  extract->add_option("--checkpoint", checkpoint)->required();
  extract->add_option("--dataset", dataset)->required();
  extract->add_option("--out", out)->required();
  extract->add_option("--accum-threshold", ex.accum_threshold);
  extract->add_option("--max-range", ex.max_range);

  std::string road, scene, pairs;
  n2p::MergeOptions mo;
  auto* merge = app.add_subcommand("merge", "register and merge the branch clouds");
  merge->add_option("--road", road)->required();
  merge->add_option("--scene", scene)->required();
  merge->add_option("--pairs", pairs, "shared correspondence file")->required();
  merge->add_option("--out", out)->required();
  merge->add_flag("--icp", mo.icp, "refine with nearest-neighbor ICP");

  std::string pred, gt;
  std::vector<std::string> images;
  auto* eval = app.add_subcommand("eval", "chamfer distance and image metrics");
  eval->add_option("--pred", pred)->required();
  eval->add_option("--gt", gt)->required();
  eval->add_option("--image", images, "pred.ppm:gt.ppm, repeatable");
  eval->add_option("--out", out)->required();

  std::string pose;
  int frame = -1;
  auto* render = app.add_subcommand("render", "render a full frame from a pose");
  render->add_option("--checkpoint", checkpoint)->required();
  render->add_option("--pose", pose, "poses file")->required();
  render->add_option("--frame", frame, "frame id in the poses file");
  render->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(n2p::ErrorCategory::usage, e.what());
  }

  try {
    if (*synth) {
      KeyValues kv = load_config(config);
      if (seed) kv.set("scene_seed", *seed);
      const auto r = n2p::cmd_synth(kv, out);
      std::printf("synth: %zu frames, %zu gt points -> %s\n", r.dataset.frames.size(), r.gt_cloud.size(), out.c_str());
    } else if (*train) {
      KeyValues kv = load_config(config);
      if (seed) kv.set("seed", *seed);
      if (iterations) kv.set("iterations", *iterations);
      if (no_lpim) kv.set("lpim", false);
      if (no_sdc) kv.set("sdc", false);
      if (no_tic) kv.set("tic", false);
      const auto r = n2p::cmd_train(dataset, kv, out, resume.empty() ? std::nullopt : std::optional<std::string>(resume));
      const auto& last = r.trace.rows.back();
      std::printf("train: step %lld total %.6g (%.1f s) -> %s\n", static_cast<long long>(last.step), last.total, r.seconds,
                  r.checkpoint.c_str());
    } else if (*extract) {
      const auto r = n2p::cmd_extract(checkpoint, dataset, out, ex);
      if (r.lpim)
        std::printf("extract: road %zu, scene %zu, shared %zu\n", r.road.size(), r.scene.size(), r.shared_road.size());
      else
        std::printf("extract: field %zu\n", r.field.size());
    } else if (*merge) {
      const auto r = n2p::cmd_merge(road, scene, pairs, out, mo);
      std::printf("merge: %zu points, residual %.6g\n", r.merged.size(), r.pair_rms);
    } else if (*eval) {
      std::vector<std::pair<std::string, std::string>> ip;
      for (const auto& s : images) {
        const auto c = s.find(':');
        if (c == std::string::npos) throw n2p::UsageError("--image expects pred:gt, got " + s);
        ip.emplace_back(s.substr(0, c), s.substr(c + 1));
      }
      const auto r = n2p::cmd_eval(pred, gt, ip, out);
      std::printf("eval: chamfer %.6g", r.chamfer);
      if (r.psnr) std::printf(" psnr %.4f ssim %.4f", *r.psnr, *r.ssim);
      std::printf("\n");
    } else if (*render) {
      n2p::cmd_render(checkpoint, pose, frame, out);
      std::printf("render: -> %s\n", out.c_str());
    }
  } catch (const n2p::Error& e) {
    return fail(e.category(), e.what());
  } catch (const std::exception& e) {
    return fail(n2p::ErrorCategory::state, e.what());
  }
  return 0;
}
