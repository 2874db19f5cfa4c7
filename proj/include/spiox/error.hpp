#pragma once

#include <stdexcept>
#include <string>

namespace spiox {

// Base for all library errors. The CLI maps each kind to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed data, config violations, precondition failures.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Singular factors, non-finite likelihoods, solver breakdown.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace spiox
