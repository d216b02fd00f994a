#pragma once

#include <stdexcept>
#include <string>

namespace nnmil {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow the expected layout (bad magic, malformed JSON).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file is well-formed at the header but its payload is damaged or short.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure: missing file, unwritable path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes disagree (e.g. checkpoint D vs bag D).
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace nnmil
