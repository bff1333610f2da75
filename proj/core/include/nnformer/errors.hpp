#pragma once

#include <stdexcept>
#include <string>

namespace nnformer {

// Root of every recoverable error raised by the library. Internal invariant
// violations use std::logic_error instead.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A model, partition or operator configuration cannot be realised.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The caller violated an API precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input data is out of its admissible domain (labels, masks).
class DataError : public Error {
 public:
  using Error::Error;
};

// A serialized file is malformed, truncated or of the wrong version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace nnformer
