#pragma once

#include <stdexcept>
#include <string>

namespace rattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor or argument does not satisfy an operation's shape or range contract.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A model spec, run config or CLI option is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A dataset file is missing or does not match the expected binary layout.
class IngestionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity showed up in activations, losses or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace rattn
