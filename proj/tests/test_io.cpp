#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "n2p/config.hpp"
#include "n2p/dataset_io.hpp"
#include "n2p/image_io.hpp"
#include "n2p/metrics.hpp"
#include "n2p/pipeline.hpp"
#include "support.hpp"

using namespace n2p;

TEST(Config, ParseCommentsAndTypes) {
  const auto kv = KeyValues::parse("# header\n a = 1 \nb=2.5 # trailing\n\nflag = true\nname = desk\n");
  EXPECT_EQ(kv.get("a", 0), 1);
  EXPECT_DOUBLE_EQ(kv.get("b", 0.0), 2.5);
  EXPECT_TRUE(kv.get("flag", false));
  EXPECT_EQ(kv.get("name", std::string()), "desk");
  EXPECT_EQ(kv.get("missing", 7), 7);
  EXPECT_THROW(KeyValues::parse("novalue\n"), FormatError);
  EXPECT_THROW(KeyValues::parse(" = 3\n"), FormatError);
  EXPECT_THROW(kv.get("name", 0), FormatError);
  EXPECT_THROW(kv.get("b", 0), FormatError);
}

TEST(Config, RoundTripAndHash) {
  test::TempDir dir("cfg");
  KeyValues kv;
  kv.set("x", 0.1);
  kv.set("n", 3);
  kv.set("on", false);
  kv.save(dir.file("c.txt"));
  const auto back = KeyValues::load(dir.file("c.txt"));
  EXPECT_EQ(back.entries(), kv.entries());
  EXPECT_DOUBLE_EQ(back.get("x", 0.0), 0.1);
  EXPECT_EQ(back.hash(), kv.hash());
  KeyValues other = kv;
  other.set("n", 4);
  EXPECT_NE(other.hash(), kv.hash());
  EXPECT_THROW(KeyValues::load(dir.file("none.txt")), IoError);
}

TEST(Images, PfmRoundTripExact) {
  test::TempDir dir("img");
  Rng rng(1);
  Raster r{5, 3, 3, {}};
  for (int i = 0; i < 45; ++i) r.data.push_back(static_cast<float>(rng.uniform(-100, 100)));
  write_pfm(r, dir.file("a.pfm"));
  const auto b = read_pfm(dir.file("a.pfm"));
  EXPECT_EQ(b.width, 5);
  EXPECT_EQ(b.height, 3);
  EXPECT_EQ(b.channels, 3);
  EXPECT_EQ(b.data, r.data);
}

TEST(Images, PnmQuantizedOnce) {
  test::TempDir dir("img");
  Raster r{4, 2, 1, {0.f, 1.f, 0.5f, 0.25f, -1.f, 2.f, 0.1f, 0.9f}};
  write_pnm(r, dir.file("a.pgm"));
  const auto b = read_pnm(dir.file("a.pgm"));
  ASSERT_EQ(b.data.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i)
    EXPECT_FLOAT_EQ(b.data[i], std::lround(std::clamp(r.data[i], 0.f, 1.f) * 255.f) / 255.f);
  write_pnm(b, dir.file("b.pgm"));
  EXPECT_EQ(read_pnm(dir.file("b.pgm")).data, b.data);
}

TEST(Images, MalformedRejected) {
  test::TempDir dir("img");
  std::ofstream(dir.file("t.ppm"), std::ios::binary) << "P6\n4 4\n255\nabc";
  EXPECT_THROW(read_pnm(dir.file("t.ppm")), FormatError);
  std::ofstream(dir.file("m.ppm"), std::ios::binary) << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(read_pnm(dir.file("m.ppm")), FormatError);
  std::ofstream(dir.file("d.ppm"), std::ios::binary) << "P6\n0 1\n255\n";
  EXPECT_THROW(read_pnm(dir.file("d.ppm")), FormatError);
  std::ofstream(dir.file("be.pfm"), std::ios::binary) << "Pf\n1 1\n1.0\nabcd";
  EXPECT_THROW(read_pfm(dir.file("be.pfm")), FormatError);
  EXPECT_THROW(read_pfm(dir.file("none.pfm")), IoError);
}

TEST(Poses, RoundTripExact) {
  test::TempDir dir("poses");
  Rng rng(2);
  std::vector<PoseEntry> poses;
  for (int i = 0; i < 5; ++i) {
    PoseEntry p;
    p.frame = i;
    p.rotation = Eigen::AngleAxisd(rng.uniform(-3, 3), Vec3(rng.uniform(), rng.uniform(), 1).normalized()).toRotationMatrix();
    p.position = Vec3(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-9, 9));
    poses.push_back(p);
  }
  write_poses(poses, dir.file("poses.txt"));
  const auto back = read_poses(dir.file("poses.txt"));
  ASSERT_EQ(back.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].frame, i);
    EXPECT_EQ(back[i].rotation, poses[i].rotation);
    EXPECT_EQ(back[i].position, poses[i].position);
  }
  std::ofstream(dir.file("bad.txt")) << "0 2 0 0 0 0 1 0 0 0 0 1 0\n";
  EXPECT_THROW(read_poses(dir.file("bad.txt")), FormatError);
  std::ofstream(dir.file("short.txt")) << "0 1 0 0\n";
  EXPECT_THROW(read_poses(dir.file("short.txt")), FormatError);
}

TEST(Dataset, RoundTrip) {
  test::TempDir dir("ds");
  SynthOptions opt;
  opt.trajectory.frames = 3;
  const auto r = synthesize(opt);
  write_dataset(r.dataset, dir.path());
  const auto ds = read_dataset(dir.path());
  ASSERT_EQ(ds.frames.size(), 3u);
  EXPECT_EQ(ds.intrinsics.width, r.dataset.intrinsics.width);
  EXPECT_DOUBLE_EQ(ds.intrinsics.fx, r.dataset.intrinsics.fx);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = r.dataset.frames[i];
    const auto& b = ds.frames[i];
    EXPECT_EQ(b.depth, a.depth);
    EXPECT_EQ(b.normal, a.normal);
    EXPECT_EQ(b.road_mask, a.road_mask);
    for (std::size_t k = 0; k < a.rgb.size(); ++k) ASSERT_NEAR(b.rgb[k], a.rgb[k], 0.5 / 255 + 1e-6);
    EXPECT_EQ(b.camera.position, a.camera.position);
    b.audit();
  }
  ASSERT_EQ(ds.pairs.size(), r.dataset.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    EXPECT_EQ(ds.pairs[i].frame_a, r.dataset.pairs[i].frame_a);
    EXPECT_EQ(ds.pairs[i].uv_a, r.dataset.pairs[i].uv_a);
    EXPECT_EQ(ds.pairs[i].uv_b, r.dataset.pairs[i].uv_b);
  }
}

TEST(Dataset, MissingFilesListedTogether) {
  test::TempDir dir("ds");
  SynthOptions opt;
  opt.trajectory.frames = 2;
  write_dataset(synthesize(opt).dataset, dir.path());
  std::filesystem::remove(dir.file("frame_0001_depth.pfm"));
  std::filesystem::remove(dir.file("frame_0000_mask.pgm"));
  try {
    read_dataset(dir.path());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("frame_0001_depth.pfm"), std::string::npos);
    EXPECT_NE(msg.find("frame_0000_mask.pgm"), std::string::npos);
  }
  EXPECT_THROW(read_dataset(dir.file("nothing")), IoError);
}

TEST(Metrics, PsnrValues) {
  const std::vector<float> a(300, 0.5f), b(300, 0.6f);
  EXPECT_DOUBLE_EQ(psnr(a, a), kPsnrCap);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-4);
  const std::vector<float> c(10, 0.f);
  EXPECT_THROW(psnr(a, c), ShapeError);
}

TEST(Metrics, SsimIdentityAndRange) {
  Rng rng(3);
  std::vector<float> a(32 * 24 * 3), b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<float>(rng.uniform());
    b[i] = std::clamp(a[i] + static_cast<float>(rng.uniform(-0.2, 0.2)), 0.f, 1.f);
  }
  EXPECT_NEAR(ssim(a, a, 32, 24, 3), 1.0, 1e-9);
  const double s = ssim(a, b, 32, 24, 3);
  EXPECT_LT(s, 1.0);
  EXPECT_GT(s, 0.0);
  EXPECT_NEAR(ssim(a, b, 32, 24, 3), ssim(b, a, 32, 24, 3), 1e-12);
  // Tiny images clip the window.
  const std::vector<float> t(3 * 3, 0.4f);
  EXPECT_NEAR(ssim(t, t, 3, 3, 1), 1.0, 1e-9);
  EXPECT_THROW(ssim(a, b, 32, 23, 3), ShapeError);
}
