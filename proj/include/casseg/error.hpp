#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace casseg {

enum class ErrorKind {
  Format,       // malformed file header
  Corruption,   // payload size disagrees with header
  Unsupported,  // valid request the toolkit does not implement
  Io,
  Misuse,       // caller violated an operation precondition
  Shape,
  Config,
  Numeric,      // NaN/Inf encountered
  Placement,    // phantom geometry could not be placed
  InvalidBox,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Corruption: return "corruption error";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::Misuse: return "misuse error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::Placement: return "placement error";
    case ErrorKind::InvalidBox: return "invalid box";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

  // Same kind, message prefixed with where it happened ("stage1: ...").
  Error with_context(std::string_view context) const {
    return Error(kind_, std::string(context) + ": " + detail_);
  }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace casseg
