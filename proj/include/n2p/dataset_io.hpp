#pragma once

// Dataset directory:
//   intrinsics.txt            key-value (width, height, fx, fy, cx, cy)
//   poses.txt                 "frame r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2"
//   frame_XXXX_rgb.ppm        P6
//   frame_XXXX_depth.pfm      Pf, meters along the unit ray
//   frame_XXXX_normal.pfm     PF
//   frame_XXXX_mask.pgm       P5, 0 / 255
//   correspondences.txt       "frame_a frame_b u_a v_a u_b v_b"
//   gt_cloud.ply

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "n2p/config.hpp"
#include "n2p/error.hpp"
#include "n2p/frame.hpp"
#include "n2p/image_io.hpp"

namespace n2p {

namespace fs = std::filesystem;

inline std::string format_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string frame_file(int index, const char* kind, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "frame_%04d_%s.%s", index, kind, ext);
  return buf;
}

inline KeyValues intrinsics_kv(const Intrinsics& k) {
  KeyValues kv;
  kv.set("width", k.width);
  kv.set("height", k.height);
  kv.set("fx", k.fx);
  kv.set("fy", k.fy);
  kv.set("cx", k.cx);
  kv.set("cy", k.cy);
  return kv;
}

inline Intrinsics intrinsics_from(const KeyValues& kv) {
  for (const char* key : {"width", "height", "fx", "fy", "cx", "cy"})
    if (!kv.has(key)) throw FormatError(std::string("intrinsics: missing key ") + key);
  Intrinsics k;
  k.width = kv.get("width", 0);
  k.height = kv.get("height", 0);
  k.fx = kv.get("fx", 0.0);
  k.fy = kv.get("fy", 0.0);
  k.cx = kv.get("cx", 0.0);
  k.cy = kv.get("cy", 0.0);
  return k;
}

struct PoseEntry {
  int frame = 0;
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();
};

inline void write_poses(const std::vector<PoseEntry>& poses, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& p : poses) {
    out << p.frame;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << ' ' << format_double(p.rotation(r, c));
      out << ' ' << format_double(p.position(r));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<PoseEntry> read_poses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<PoseEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.size() != 13) throw FormatError(path + ":" + std::to_string(line_no) + ": expected frame id and 12 numbers");
    PoseEntry p;
    std::vector<double> v(12);
    for (int i = 0; i < 13; ++i) {
      const std::string& s = tok[static_cast<std::size_t>(i)];
      std::from_chars_result r;
      if (i == 0)
        r = std::from_chars(s.data(), s.data() + s.size(), p.frame);
      else
        r = std::from_chars(s.data(), s.data() + s.size(), v[static_cast<std::size_t>(i - 1)]);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw FormatError(path + ":" + std::to_string(line_no) + ": cannot parse '" + s + "'");
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[static_cast<std::size_t>(4 * r + c)];
      p.position(r) = v[static_cast<std::size_t>(4 * r + 3)];
    }
    const double ortho = (p.rotation.transpose() * p.rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!p.rotation.allFinite() || !p.position.allFinite() || ortho > 1e-6 || std::abs(p.rotation.determinant() - 1.0) > 1e-6)
      throw FormatError(path + ":" + std::to_string(line_no) + ": rotation is not orthonormal");
    out.push_back(p);
  }
  return out;
}

inline void write_correspondences(const std::vector<CorrespondencePairs>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& p : pairs)
    for (std::size_t i = 0; i < p.size(); ++i)
      out << p.frame_a << ' ' << p.frame_b << ' ' << format_double(p.uv_a[i].x()) << ' ' << format_double(p.uv_a[i].y())
          << ' ' << format_double(p.uv_b[i].x()) << ' ' << format_double(p.uv_b[i].y()) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<CorrespondencePairs> read_correspondences(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::map<std::pair<int, int>, CorrespondencePairs> groups;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    int a, b;
    double ua, va, ub, vb;
    if (!(ls >> a >> b >> ua >> va >> ub >> vb)) throw FormatError(path + ":" + std::to_string(line_no) + ": malformed row");
    auto& g = groups[{a, b}];
    g.frame_a = a;
    g.frame_b = b;
    g.uv_a.emplace_back(ua, va);
    g.uv_b.emplace_back(ub, vb);
  }
  std::vector<CorrespondencePairs> out;
  for (auto& [k, v] : groups) out.push_back(std::move(v));
  return out;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  intrinsics_kv(ds.intrinsics).save((fs::path(dir) / "intrinsics.txt").string());
  std::vector<PoseEntry> poses;
  for (const auto& f : ds.frames) {
    poses.push_back({f.index, f.camera.rotation, f.camera.position});
    const int w = f.width(), h = f.height();
    const fs::path base(dir);
    write_pnm({w, h, 3, f.rgb}, (base / frame_file(f.index, "rgb", "ppm")).string());
    write_pfm({w, h, 1, f.depth}, (base / frame_file(f.index, "depth", "pfm")).string());
    write_pfm({w, h, 3, f.normal}, (base / frame_file(f.index, "normal", "pfm")).string());
    std::vector<float> mask(f.road_mask.begin(), f.road_mask.end());
    write_pnm({w, h, 1, mask}, (base / frame_file(f.index, "mask", "pgm")).string());
  }
  write_poses(poses, (fs::path(dir) / "poses.txt").string());
  write_correspondences(ds.pairs, (fs::path(dir) / "correspondences.txt").string());
}

/// Loads a dataset; all missing files are listed in one IoError.
inline Dataset read_dataset(const std::string& dir) {
  const fs::path base(dir);
  std::vector<std::string> missing;
  for (const char* f : {"intrinsics.txt", "poses.txt"})
    if (!fs::exists(base / f)) missing.push_back(f);
  if (!missing.empty()) {
    std::string msg = "dataset " + dir + " is missing:";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }
  Dataset ds;
  ds.intrinsics = intrinsics_from(KeyValues::load((base / "intrinsics.txt").string()));
  const auto poses = read_poses((base / "poses.txt").string());
  for (const auto& p : poses)
    for (const char* kind : {"rgb.ppm", "depth.pfm", "normal.pfm", "mask.pgm"}) {
      const std::string k(kind);
      const auto dot = k.find('.');
      const auto name = frame_file(p.frame, k.substr(0, dot).c_str(), k.substr(dot + 1).c_str());
      if (!fs::exists(base / name)) missing.push_back(name);
    }
  if (!missing.empty()) {
    std::string msg = "dataset " + dir + " is missing:";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }
  const int w = ds.intrinsics.width, h = ds.intrinsics.height;
  auto expect = [&](const Raster& r, int ch, const std::string& name) {
    if (r.width != w || r.height != h || r.channels != ch)
      throw FormatError(name + ": raster does not match the intrinsics");
  };
  for (const auto& p : poses) {
    FrameRecord f;
    f.index = p.frame;
    f.camera.intrinsics = ds.intrinsics;
    f.camera.rotation = p.rotation;
    f.camera.position = p.position;
    const auto rgb_name = (base / frame_file(p.frame, "rgb", "ppm")).string();
    const auto depth_name = (base / frame_file(p.frame, "depth", "pfm")).string();
    const auto normal_name = (base / frame_file(p.frame, "normal", "pfm")).string();
    const auto mask_name = (base / frame_file(p.frame, "mask", "pgm")).string();
    auto rgb = read_pnm(rgb_name);
    expect(rgb, 3, rgb_name);
    auto depth = read_pfm(depth_name);
    expect(depth, 1, depth_name);
    auto normal = read_pfm(normal_name);
    expect(normal, 3, normal_name);
    auto mask = read_pnm(mask_name);
    expect(mask, 1, mask_name);
    f.rgb = std::move(rgb.data);
    f.depth = std::move(depth.data);
    f.normal = std::move(normal.data);
    f.road_mask.resize(mask.data.size());
    for (std::size_t i = 0; i < mask.data.size(); ++i) f.road_mask[i] = mask.data[i] > 0.5f ? 1 : 0;
    ds.frames.push_back(std::move(f));
  }
  if (fs::exists(base / "correspondences.txt")) ds.pairs = read_correspondences((base / "correspondences.txt").string());
  return ds;
}

}  // namespace n2p
