#pragma once

// Binary PPM (P6), PGM (P5) and PFM (Pf / PF) rasters. Float rasters are
// row-major top-to-bottom in memory; PFM stores rows bottom-to-top.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "n2p/error.hpp"

namespace n2p {

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;  // row-major, interleaved channels
};

namespace detail {

inline std::string read_token(std::istream& in, const std::string& path) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw FormatError(path + ": truncated header");
  return tok;
}

inline int parse_dim(const std::string& s, const std::string& path) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size() || v <= 0) throw FormatError(path + ": bad dimension '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError(path + ": bad dimension '" + s + "'");
  }
}

}  // namespace detail

/// channels 3 -> P6, channels 1 -> P5. Values in [0,1] are quantized once.
inline void write_pnm(const Raster& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw ValueError("write_pnm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 3 ? "P6\n" : "P5\n") << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Raster read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const auto magic = detail::read_token(in, path);
  if (magic != "P6" && magic != "P5") throw FormatError(path + ": not a binary PPM/PGM");
  Raster img;
  img.channels = magic == "P6" ? 3 : 1;
  img.width = detail::parse_dim(detail::read_token(in, path), path);
  img.height = detail::parse_dim(detail::read_token(in, path), path);
  if (detail::read_token(in, path) != "255") throw FormatError(path + ": only maxval 255 is supported");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(img.width) * img.height * img.channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path + ": truncated pixel data");
  img.data.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.f;
  return img;
}

inline void write_pfm(const Raster& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw ValueError("write_pfm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 3 ? "PF\n" : "Pf\n") << img.width << ' ' << img.height << "\n-1.0\n";
  const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  for (int r = img.height - 1; r >= 0; --r)
    out.write(reinterpret_cast<const char*>(img.data.data() + r * row), static_cast<std::streamsize>(row * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

inline Raster read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const auto magic = detail::read_token(in, path);
  if (magic != "PF" && magic != "Pf") throw FormatError(path + ": not a PFM file");
  Raster img;
  img.channels = magic == "PF" ? 3 : 1;
  img.width = detail::parse_dim(detail::read_token(in, path), path);
  img.height = detail::parse_dim(detail::read_token(in, path), path);
  double scale = 0;
  try {
    scale = std::stod(detail::read_token(in, path));
  } catch (const std::logic_error&) {
    throw FormatError(path + ": bad scale");
  }
  if (scale >= 0) throw FormatError(path + ": big-endian PFM is not supported");
  const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  img.data.resize(row * img.height);
  for (int r = img.height - 1; r >= 0; --r) {
    in.read(reinterpret_cast<char*>(img.data.data() + r * row), static_cast<std::streamsize>(row * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(row * sizeof(float))) throw FormatError(path + ": truncated pixel data");
  }
  return img;
}

}  // namespace n2p
