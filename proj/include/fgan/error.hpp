#pragma once

#include <stdexcept>
#include <string>

namespace fgan {

/// Base class for all toolkit failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shape contract violation; messages name the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad or unparsable run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or structurally invalid input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated serialized artifacts (checkpoints, fitted models).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fgan
