#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ulip {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an op's shape rule, or an op kind is unknown.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid input data: missing files, malformed formats, violated invariants.
/// The CLI maps this family to exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Content digest does not match the payload.
class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A stored value breaks a documented invariant (e.g. a non-unit embedding row).
class InvariantError : public DataError {
 public:
  using DataError::DataError;
};

/// OBJ parse failure; carries the 1-based line number (0 when not line-specific).
class MeshError : public DataError {
 public:
  MeshError(const std::string& what, std::size_t line)
      : DataError(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite values or degenerate numerics. CLI exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace ulip
