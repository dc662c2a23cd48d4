#pragma once

#include <stdexcept>
#include <string>

namespace smd {

// Error hierarchy. The CLI maps each kind onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: violated preconditions, malformed config, shape mismatches.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses or estimates.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Missing, unreadable, unwritable, or corrupt files.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace smd
