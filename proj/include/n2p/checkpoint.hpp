#pragma once

// Binary checkpoint container:
//
//   "N2PCKPT\n"  u32 version  u32 scalar_bytes  i64 step
//   u32 meta_count   { str key, str value }*
//   u32 array_count  { str name, u32 rows, u32 cols, scalar[rows*cols] }*
//
// Strings are u32 length + bytes; all integers and scalars little-endian.
// Values are stored as raw scalars so a reload is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/error.hpp"
#include "n2p/optim.hpp"

namespace n2p {

inline constexpr char kCheckpointMagic[8] = {'N', '2', 'P', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class T>
struct Checkpoint {
  std::int64_t step = 0;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Matrix<T>>> arrays;

  const Matrix<T>& array(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return m;
    throw FormatError("checkpoint has no array '" + name + "'");
  }
  bool has_array(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.first == name) return true;
    return false;
  }
  const std::string& meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint has no metadata key '" + key + "'");
    return it->second;
  }

  /// Stores values plus Adam moments under "<prefix><name>", ".m", ".v".
  void add_group(const std::string& prefix, std::span<const Parameter<T>> params,
                 const AdamState<T>& adam) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      arrays.emplace_back(prefix + params[i].name, params[i].value);
      if (i < adam.m.size()) {
        arrays.emplace_back(prefix + params[i].name + ".m", adam.m[i]);
        arrays.emplace_back(prefix + params[i].name + ".v", adam.v[i]);
      }
    }
    meta[prefix + "adam_step"] = std::to_string(adam.step);
  }

  void restore_group(const std::string& prefix, std::span<Parameter<T>> params,
                     AdamState<T>* adam) const {
    if (adam) *adam = AdamState<T>(std::span<const Parameter<T>>(params.data(), params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& v = array(prefix + params[i].name);
      if (v.rows() != params[i].value.rows() || v.cols() != params[i].value.cols())
        throw ShapeError("checkpoint array '" + prefix + params[i].name + "' has shape " +
                         std::to_string(v.rows()) + "x" + std::to_string(v.cols()) +
                         ", parameter expects " + std::to_string(params[i].value.rows()) + "x" +
                         std::to_string(params[i].value.cols()));
      params[i].value = v;
      params[i].zero_grad();
      if (adam && has_array(prefix + params[i].name + ".m")) {
        adam->m[i] = array(prefix + params[i].name + ".m");
        adam->v[i] = array(prefix + params[i].name + ".v");
      }
    }
    if (adam) adam->step = std::stoll(meta_value(prefix + "adam_step"));
  }
};

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
inline void put_str(std::ostream& os, const std::string& s) {
  put(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
template <class V>
V get(std::istream& is, const std::string& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V)))
    throw FormatError("truncated checkpoint '" + path + "'");
  return v;
}
inline std::string get_str(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > (1u << 24)) throw FormatError("corrupt string length in checkpoint '" + path + "'");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("truncated checkpoint '" + path + "'");
  return s;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put(os, kCheckpointVersion);
    detail::put(os, static_cast<std::uint32_t>(sizeof(T)));
    detail::put(os, static_cast<std::int64_t>(ckpt.step));
    detail::put(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
      detail::put_str(os, k);
      detail::put_str(os, v);
    }
    detail::put(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, m] : ckpt.arrays) {
      detail::put_str(os, name);
      detail::put(os, static_cast<std::uint32_t>(m.rows()));
      detail::put(os, static_cast<std::uint32_t>(m.cols()));
      os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(T) * m.size()));
    }
    if (!os) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string p = path.string();
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("'" + p + "' is not a checkpoint");
  const auto version = detail::get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto scalar = detail::get<std::uint32_t>(is, p);
  if (scalar != sizeof(T))
    throw FormatError("checkpoint scalar size " + std::to_string(scalar) + " does not match " +
                      std::to_string(sizeof(T)));
  Checkpoint<T> ckpt;
  ckpt.step = detail::get<std::int64_t>(is, p);
  const auto meta_n = detail::get<std::uint32_t>(is, p);
  for (std::uint32_t i = 0; i < meta_n; ++i) {
    auto k = detail::get_str(is, p);
    ckpt.meta[k] = detail::get_str(is, p);
  }
  const auto arrays_n = detail::get<std::uint32_t>(is, p);
  for (std::uint32_t i = 0; i < arrays_n; ++i) {
    auto name = detail::get_str(is, p);
    const auto rows = detail::get<std::uint32_t>(is, p);
    const auto cols = detail::get<std::uint32_t>(is, p);
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 30))
      throw FormatError("corrupt array size in checkpoint '" + p + "'");
    Matrix<T> m(rows, cols);
    if (m.size() && !is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(T) * m.size())))
      throw FormatError("truncated checkpoint '" + p + "'");
    ckpt.arrays.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

}  // namespace n2p
