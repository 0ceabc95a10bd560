#pragma once

#include <stdexcept>
#include <string>

namespace ddta {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shape disagreement.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition on a caller-supplied value.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Could not open, read or write a file.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kShapeMismatch,
  kCorrupt,
};

const char* to_string(FormatErrorKind kind);

/// Malformed on-disk content (checkpoints, datasets, soft-label files).
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic:
      return "bad magic";
    case FormatErrorKind::kVersionMismatch:
      return "version mismatch";
    case FormatErrorKind::kTruncated:
      return "truncated";
    case FormatErrorKind::kShapeMismatch:
      return "shape mismatch";
    case FormatErrorKind::kCorrupt:
      return "corrupt";
  }
  return "format error";
}

}  // namespace ddta
