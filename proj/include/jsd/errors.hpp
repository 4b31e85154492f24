#pragma once

#include <stdexcept>
#include <string>

namespace jsd {

/// Root of every error raised by the library. The CLI maps subclasses onto
/// exit codes, so each one names the failure category it belongs to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input / configuration problems (CLI exit code 2).
class FormatError : public Error {
 public:
  using Error::Error;
};
class TruncationError : public Error {
 public:
  using Error::Error;
};
class DuplicateError : public Error {
 public:
  using Error::Error;
};
class MissingIdError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

// Numeric failure (CLI exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace jsd
