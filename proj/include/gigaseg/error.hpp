#pragma once

#include <stdexcept>
#include <string>

namespace gigaseg {

// Base of every error thrown by the library. Subtypes name the category so the
// CLI can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// (size - kernel) is not a multiple of stride somewhere in a valid-conv chain.
class DivisibilityError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace gigaseg
