#pragma once

#include <stdexcept>
#include <string>

namespace semcom {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation does not hold (bad argument, wrong state).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Raised when a model is used before training finished, or mutated after.
class ModelStateError : public ContractError {
 public:
  using ContractError::ContractError;
};

class CodecMismatchError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace semcom
