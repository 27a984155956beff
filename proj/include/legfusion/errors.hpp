#pragma once

#include <stdexcept>
#include <string>

namespace legfusion {

/// Base class for every error raised by the library. The CLI maps the
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration, rejected before any computation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable, or not in the expected schema.
class IoError : public Error {
 public:
  using Error::Error;
};

/// The filter state left the valid manifold (non-unit quaternion,
/// indefinite covariance, degenerate norm).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A sensor observation that cannot be used (zero area, degenerate pixel
/// distance, ...).
class InvalidObservation : public Error {
 public:
  using Error::Error;
};

/// Timestamps jump by more than the allowed gap inside a sensor stream.
class StreamDiscontinuity : public Error {
 public:
  using Error::Error;
};

/// A chain of frame rotations that does not connect.
class FrameMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace legfusion
