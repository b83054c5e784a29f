#pragma once

// ASCII PLY: float x, y, z plus uchar red, green, blue when colors exist.
// The reader accepts any property list that contains x, y, z and skips
// other elements' rows.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "n2p/error.hpp"
#include "n2p/geometry.hpp"

namespace n2p {

inline int quantize_channel(double c) {
  return static_cast<int>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

inline std::string format_float(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_ply(const PointCloud& pc, const std::string& path) {
  pc.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "ply\nformat ascii 1.0\nelement vertex " << pc.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (pc.has_colors()) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3& p = pc.points[i];
    out << format_float(float(p.x())) << ' ' << format_float(float(p.y())) << ' ' << format_float(float(p.z()));
    if (pc.has_colors()) {
      const Vec3& c = pc.colors[i];
      out << ' ' << quantize_channel(c.x()) << ' ' << quantize_channel(c.y()) << ' ' << quantize_channel(c.z());
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline PointCloud read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  auto bad = [&](const std::string& msg) { return FormatError(path + ": " + msg); };
  if (!std::getline(in, line) || line != "ply") throw bad("missing 'ply' magic");
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
  };
  std::vector<Element> elements;
  bool ascii = false, ended = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word.empty() || word == "comment" || word == "obj_info") continue;
    if (word == "format") {
      std::string kind;
      ls >> kind;
      if (kind != "ascii") throw bad("only ascii PLY is supported, got '" + kind + "'");
      ascii = true;
    } else if (word == "element") {
      Element e;
      if (!(ls >> e.name >> e.count)) throw bad("malformed element line");
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw bad("property before element");
      std::string type, name;
      ls >> type;
      if (type == "list") throw bad("list properties are not supported");
      if (!(ls >> name)) throw bad("malformed property line");
      elements.back().props.push_back(name);
    } else if (word == "end_header") {
      ended = true;
      break;
    } else {
      throw bad("unexpected header line '" + line + "'");
    }
  }
  if (!ascii) throw bad("missing format line");
  if (!ended) throw bad("missing end_header");
  PointCloud pc;
  for (const auto& e : elements) {
    int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
    for (int k = 0; k < static_cast<int>(e.props.size()); ++k) {
      const auto& p = e.props[static_cast<std::size_t>(k)];
      if (p == "x") ix = k;
      else if (p == "y") iy = k;
      else if (p == "z") iz = k;
      else if (p == "red") ir = k;
      else if (p == "green") ig = k;
      else if (p == "blue") ib = k;
    }
    const bool vertex = e.name == "vertex";
    if (vertex && (ix < 0 || iy < 0 || iz < 0)) throw bad("vertex element lacks x/y/z");
    const bool colored = vertex && ir >= 0 && ig >= 0 && ib >= 0;
    std::vector<double> row(e.props.size());
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!std::getline(in, line)) throw bad("truncated body: expected " + std::to_string(e.count) + " " + e.name + " rows");
      if (!vertex) continue;
      std::istringstream ls(line);
      for (auto& v : row)
        if (!(ls >> v)) throw bad("malformed vertex row " + std::to_string(i));
      pc.points.emplace_back(row[ix], row[iy], row[iz]);
      if (colored) pc.colors.emplace_back(row[ir] / 255.0, row[ig] / 255.0, row[ib] / 255.0);
    }
  }
  pc.validate();
  return pc;
}

}  // namespace n2p
