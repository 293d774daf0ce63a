#pragma once

#include <stdexcept>
#include <string>

namespace sdevi {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An input violated a documented precondition (ordering, sizes, ranges).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A factorization or evaluation produced a non-finite or indefinite result.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The caller broke an API contract (e.g. gradient of a non-scalar node).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A simulated path left the finite range.
class SimulationError : public NumericError {
 public:
  using NumericError::NumericError;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdevi
