#pragma once

#include <stdexcept>
#include <string>

namespace cmoe {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform (dimension mismatch, bad axis, non-scalar loss).
struct ShapeError : Error {
  using Error::Error;
};

// A value is outside the documented domain of an operation
// (even kernel size, invalid label, presence outside [0,1], ...).
struct ValueError : Error {
  using Error::Error;
};

// Filesystem-level failure: file cannot be opened, read, or written.
struct IoError : Error {
  using Error::Error;
};

// A file exists but its contents are not what we expect:
// bad magic, unsupported version, truncation.
struct FormatError : Error {
  using Error::Error;
};

// Config file or flag parsing failure, including unknown keys.
struct ConfigError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, int epoch_) : Error(msg), epoch(epoch_) {}
  int epoch;
};

}  // namespace cmoe
