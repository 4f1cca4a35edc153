#pragma once

#include <stdexcept>
#include <string>

namespace advlab {

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration: bad shapes, out-of-range hyperparameters, unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward before forward or sampling an empty buffer.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where a finite one was required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or run-directory contents could not be read back.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace advlab
