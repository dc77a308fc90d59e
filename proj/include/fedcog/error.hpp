#pragma once

#include <stdexcept>
#include <string>

namespace fedcog {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not follow its declared format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// An experiment or component configuration is invalid or infeasible.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The federated protocol was driven out of order (missing participants, empty rounds).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedcog
