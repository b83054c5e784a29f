#pragma once

// Flat text key-value files: one "key = value" per line, '#' starts a comment.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

#include "n2p/error.hpp"

namespace n2p {

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view text, const std::string& origin = "<string>") {
    KeyValues kv;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw FormatError(origin + ":" + std::to_string(line_no) + ": expected key = value");
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw FormatError(origin + ":" + std::to_string(line_no) + ": empty key");
      kv.values_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
      if (end == text.size()) break;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << str();
    if (!out) throw IoError("write failed: " + path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  void set(const std::string& key, const std::string& v) { values_[key] = v; }
  void set(const std::string& key, const char* v) { values_[key] = v; }
  void set(const std::string& key, bool v) { values_[key] = v ? "true" : "false"; }
  template <class N>
    requires std::is_arithmetic_v<N>
  void set(const std::string& key, N v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    values_[key] = std::string(buf, r.ptr);
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  bool get(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw FormatError("config key " + key + ": expected true/false, got '" + it->second + "'");
  }
  template <class N>
    requires std::is_arithmetic_v<N>
  N get(const std::string& key, N fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    N v{};
    const auto& s = it->second;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw FormatError("config key " + key + ": cannot parse '" + s + "'");
    return v;
  }

  /// Stable 64-bit FNV-1a hash of the canonical text form.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : str()) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace n2p
