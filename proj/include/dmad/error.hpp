#pragma once

#include <stdexcept>
#include <string>

namespace dmad {

// Root of every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or invariant violated by caller-supplied data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A bank build produced zero rows where the caller may fall back.
class EmptyBankError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// On-disk bytes do not describe a valid object.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure (open, write, rename).
class StorageError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong object state (e.g. backward without forward).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmad
