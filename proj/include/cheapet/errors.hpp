#pragma once

#include <stdexcept>
#include <string>

namespace cheapet {

// Base class for all library errors. The CLI maps subclasses onto exit
// codes: validation/configuration problems exit 1, I/O and network
// problems exit 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value violated a documented invariant (bad probability vector,
// dimension mismatch, malformed record, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Structured input (trace line, weight file, config file) failed to parse.
// Messages carry the position of the failure.
class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A class had too few samples to fit its covariance.
class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Cholesky factorization failed: covariance not positive definite even
// after regularization.
class SingularityError : public Error {
 public:
  using Error::Error;
};

// Requested class id absent from a fitted model.
class LookupError : public Error {
 public:
  using Error::Error;
};

// A required field or option is missing or inconsistent for the selected mode.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced during numeric evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Remote endpoint kept failing transiently until retries were exhausted.
class RemoteUnavailableError : public Error {
 public:
  RemoteUnavailableError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_ = 0;
};

// Remote endpoint rejected the request (4xx); never retried.
class PermanentRequestError : public Error {
 public:
  using Error::Error;
};

// Remote endpoint answered with something that is not the wire protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace cheapet
