#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "n2p/error.hpp"
#include "n2p/trainer.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using n2p::ErrorCategory;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const n2p::test::TempDir& dir, const std::string& args) {
  const std::string o = dir.file("stdout.txt"), e = dir.file("stderr.txt");
  const std::string cmd = std::string(N2P_CLI) + " " + args + " >" + o + " 2>" + e;
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

void write_configs(const n2p::test::TempDir& dir) {
  std::ofstream(dir.file("synth.txt")) << "frames = 3\nwidth = 16\nheight = 12\nfx = 12.8\nfy = 12.8\ncx = 8\ncy = 6\n";
  std::ofstream(dir.file("train.txt")) << "batch = 64\nn_samples = 8\nfield_width = 16\nfield_depth = 2\n"
                                          "pos_levels = 4\ndir_levels = 2\nfeature_width = 8\nburn_in = 0\n";
}

}  // namespace

TEST(Cli, UsageErrors) {
  n2p::test::TempDir dir("cli");
  const int usage = n2p::exit_code(ErrorCategory::usage);
  EXPECT_EQ(cli(dir, "").code, usage);
  EXPECT_EQ(cli(dir, "frobnicate").code, usage);
  const auto r = cli(dir, "train --out x");
  EXPECT_EQ(r.code, usage);
  EXPECT_EQ(r.err.rfind("error: category=usage message=", 0), 0u) << r.err;
  EXPECT_EQ(cli(dir, "--help").code, 0);
}

TEST(Cli, CategoryExitCodes) {
  n2p::test::TempDir dir("cli");
  auto r = cli(dir, "train --dataset " + dir.file("missing") + " --out " + dir.file("run"));
  EXPECT_EQ(r.code, n2p::exit_code(ErrorCategory::io));
  EXPECT_NE(r.err.find("category=io"), std::string::npos);
  std::ofstream(dir.file("bad.txt")) << "frames = many\n";
  r = cli(dir, "synth --config " + dir.file("bad.txt") + " --out " + dir.file("d"));
  EXPECT_EQ(r.code, n2p::exit_code(ErrorCategory::format));
  std::ofstream(dir.file("one.txt")) << "frames = 1\n";
  r = cli(dir, "synth --config " + dir.file("one.txt") + " --out " + dir.file("d"));
  EXPECT_EQ(r.code, n2p::exit_code(ErrorCategory::value));
  std::ofstream(dir.file("a.ply")) << "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n"
                                      "property float z\nend_header\n";
  r = cli(dir, "eval --pred " + dir.file("a.ply") + " --gt " + dir.file("a.ply") + " --out " + dir.file("ev"));
  EXPECT_EQ(r.code, n2p::exit_code(ErrorCategory::value));
}

TEST(Cli, SynthIsIdempotent) {
  n2p::test::TempDir dir("cli");
  write_configs(dir);
  ASSERT_EQ(cli(dir, "synth --config " + dir.file("synth.txt") + " --out " + dir.file("a")).code, 0);
  ASSERT_EQ(cli(dir, "synth --config " + dir.file("synth.txt") + " --out " + dir.file("b")).code, 0);
  int compared = 0;
  for (const auto& e : fs::directory_iterator(dir.file("a"))) {
    const auto name = e.path().filename().string();
    if (name == "manifest.txt") continue;
    EXPECT_EQ(slurp(e.path().string()), slurp(dir.file("b/" + name))) << name;
    ++compared;
  }
  EXPECT_EQ(compared, 3 * 4 + 5);
  const auto m = slurp(dir.file("a/manifest.txt"));
  EXPECT_NE(m.find("config_hash"), std::string::npos);
  EXPECT_NE(m.find("version"), std::string::npos);
}

TEST(Cli, FullChainOnTinyData) {
  n2p::test::TempDir dir("cli");
  write_configs(dir);
  ASSERT_EQ(cli(dir, "synth --config " + dir.file("synth.txt") + " --out " + dir.file("data")).code, 0);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = cli(dir, "train --dataset " + dir.file("data") + " --config " + dir.file("train.txt") + " --iterations 1 --out " +
                        dir.file("run"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(secs, 10.0);
  EXPECT_EQ(n2p::TrainTrace::read_csv(dir.file("run/trace.csv")).rows.size(), 1u);
  ASSERT_TRUE(fs::exists(dir.file("run/checkpoint.bin")));

  r = cli(dir, "train --dataset " + dir.file("data") + " --config " + dir.file("train.txt") +
                   " --iterations 3 --out " + dir.file("run") + " --resume " + dir.file("run/checkpoint.bin"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(n2p::TrainTrace::read_csv(dir.file("run/trace.csv")).rows.size(), 3u);

  r = cli(dir, "extract --checkpoint " + dir.file("run/checkpoint.bin") + " --dataset " + dir.file("data") +
                   " --accum-threshold 0 --out " + dir.file("ex"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"road.ply", "scene.ply", "shared_pairs.txt", "manifest.txt"}) EXPECT_TRUE(fs::exists(dir.file(std::string("ex/") + f))) << f;

  r = cli(dir, "merge --road " + dir.file("ex/road.ply") + " --scene " + dir.file("ex/scene.ply") + " --pairs " +
                   dir.file("ex/shared_pairs.txt") + " --icp --out " + dir.file("mg"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.file("mg/merged.ply")));
  EXPECT_NE(slurp(dir.file("mg/transform.txt")).find("residual"), std::string::npos);

  r = cli(dir, "render --checkpoint " + dir.file("run/checkpoint.bin") + " --pose " + dir.file("data/poses.txt") +
                   " --frame 1 --out " + dir.file("rd"));
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(dir.file("rd/render.ppm")));

  r = cli(dir, "eval --pred " + dir.file("mg/merged.ply") + " --gt " + dir.file("data/gt_cloud.ply") + " --image " +
                   dir.file("rd/render.ppm") + ":" + dir.file("data/frame_0001_rgb.ppm") + " --out " + dir.file("ev"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = slurp(dir.file("ev/metrics.txt"));
  EXPECT_NE(metrics.find("chamfer"), std::string::npos);
  EXPECT_NE(metrics.find("psnr"), std::string::npos);

  r = cli(dir, "render --checkpoint " + dir.file("run/checkpoint.bin") + " --pose " + dir.file("synth.txt") +
                   " --frame 0 --out " + dir.file("rd2"));
  EXPECT_EQ(r.code, n2p::exit_code(ErrorCategory::format));
}
