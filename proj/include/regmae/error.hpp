#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace regmae {

enum class ErrorKind {
  Format,
  Unsupported,
  Io,
  Size,
  Geometry,
  Validation,
  Config,
  Degenerate,
  InsufficientSamples,
  EmptyMask,
  Metric,
  Training,
  Attribution,
  Normalization,
  Load,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` tells callers (and the
/// CLI exit-code mapping) which contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::Io: return "I/O";
    case ErrorKind::Size: return "size";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Config: return "configuration";
    case ErrorKind::Degenerate: return "degenerate-input";
    case ErrorKind::InsufficientSamples: return "insufficient-samples";
    case ErrorKind::EmptyMask: return "empty-mask";
    case ErrorKind::Metric: return "metric";
    case ErrorKind::Training: return "training";
    case ErrorKind::Attribution: return "attribution";
    case ErrorKind::Normalization: return "normalization";
    case ErrorKind::Load: return "load";
  }
  return "unknown";
}

}  // namespace regmae
