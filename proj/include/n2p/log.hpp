#pragma once

#include <atomic>
#include <iostream>
#include <sstream>
#include <string>

namespace n2p::log {

enum class Level { debug = 0, info = 1, warn = 2, silent = 3 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> level{Level::info};
  return level;
}

inline std::atomic<long>& warning_count() {
  static std::atomic<long> count{0};
  return count;
}

inline void set_level(Level level) { threshold().store(level); }

template <class... Args>
void write(Level level, const char* tag, const Args&... args) {
  if (level == Level::warn) warning_count().fetch_add(1);
  if (level < threshold().load()) return;
  std::ostringstream os;
  os << '[' << tag << "] ";
  (os << ... << args);
  os << '\n';
  std::clog << os.str();
}

template <class... Args>
void debug(const Args&... args) { write(Level::debug, "debug", args...); }
template <class... Args>
void info(const Args&... args) { write(Level::info, "info", args...); }
template <class... Args>
void warn(const Args&... args) { write(Level::warn, "warn", args...); }

}  // namespace n2p::log
