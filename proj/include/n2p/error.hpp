#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace n2p {

/// Coarse error classes; the CLI prints the category name on stderr and
/// maps each one to its own exit code.
enum class ErrorCategory { shape, value, numeric, degenerate, state, io, format, usage };

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::value: return "value";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::degenerate: return "degenerate";
    case ErrorCategory::state: return "state";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::usage: return "usage";
  }
  return "unknown";
}

inline int exit_code(ErrorCategory c) { return 2 + static_cast<int>(c); }

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCategory::shape, w) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& w) : Error(ErrorCategory::value, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};
struct DegenerateConfiguration : Error {
  explicit DegenerateConfiguration(const std::string& w) : Error(ErrorCategory::degenerate, w) {}
};
struct StateError : Error {
  explicit StateError(const std::string& w) : Error(ErrorCategory::state, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::io, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorCategory::format, w) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorCategory::usage, w) {}
};

}  // namespace n2p
