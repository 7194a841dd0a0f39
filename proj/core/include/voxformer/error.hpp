// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace voxformer {

/// Root of the library's exception hierarchy. Every failure raised by
/// voxformer derives from this so callers can map categories to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or extents do not satisfy an operator's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the computation graph (double backward, non-scalar root, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (volume files, manifests, splits).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace voxformer
