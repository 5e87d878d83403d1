#pragma once

#include <stdexcept>
#include <string>

namespace knnmem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data: bad CSV records, corrupt index or
/// checkpoint files, infeasible splits.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Incompatible tensor shapes handed to a primitive or to the optimizer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared in a forward value or a training loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace knnmem
