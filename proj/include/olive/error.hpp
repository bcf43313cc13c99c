#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace olive {

enum class ErrorCode {
  Dimension,
  Numeric,
  Usage,
  Domain,
  Shape,
  Format,
  Placement,
  EmptyMask,
  DegenerateEmbedding,
  EmptyIndex,
  MissingLabel,
  UnboundSlot,
  Length,
  Config,
  Divergence,
  NotFound,
  Precondition,
  DegenerateSpectrum,
};

inline std::string_view code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Dimension: return "DIMENSION";
    case ErrorCode::Numeric: return "NUMERIC";
    case ErrorCode::Usage: return "USAGE";
    case ErrorCode::Domain: return "DOMAIN";
    case ErrorCode::Shape: return "SHAPE";
    case ErrorCode::Format: return "FORMAT";
    case ErrorCode::Placement: return "PLACEMENT";
    case ErrorCode::EmptyMask: return "EMPTY_MASK";
    case ErrorCode::DegenerateEmbedding: return "DEGENERATE_EMBEDDING";
    case ErrorCode::EmptyIndex: return "EMPTY_INDEX";
    case ErrorCode::MissingLabel: return "MISSING_LABEL";
    case ErrorCode::UnboundSlot: return "UNBOUND_SLOT";
    case ErrorCode::Length: return "LENGTH";
    case ErrorCode::Config: return "CONFIG";
    case ErrorCode::Divergence: return "DIVERGENCE";
    case ErrorCode::NotFound: return "NOT_FOUND";
    case ErrorCode::Precondition: return "PRECONDITION";
    case ErrorCode::DegenerateSpectrum: return "DEGENERATE_SPECTRUM";
  }
  return "UNKNOWN";
}

/// Every failure raised by the library carries a machine-readable code; the
/// service maps these onto wire error bodies.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(code_name(code)) + ": " + message), code_(code), message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

/// Format errors additionally remember where in the byte stream they happened.
class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::size_t offset)
      : Error(ErrorCode::Format, message + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace olive
