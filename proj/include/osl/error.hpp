#pragma once

#include <stdexcept>
#include <string>

namespace osl {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, dimension mismatch, unknown identifiers. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, singular systems, propensities outside their range.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inputs outside the mathematical domain of an operation (e.g. a policy
// output that is not in the simplex, unbounded aggregation candidates).
class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace osl
