#pragma once

#include <stdexcept>
#include <string>

namespace mitr {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments, unknown flags, bad config keys.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (files, records, shapes of user data).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, infeasible matchings, failed invariants of the math.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Operand shapes do not conform to an operation's arity rules.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace mitr
