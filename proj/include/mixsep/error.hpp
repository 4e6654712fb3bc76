#pragma once

#include <stdexcept>
#include <string>

namespace mixsep {

/// Raised when caller-supplied data violates a precondition (shape, NaN, range).
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a computation cannot be completed in floating point
/// (factorization failure after maximal loading, non-positive quadratic form).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised for inconsistent model or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace mixsep
