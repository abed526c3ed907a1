#pragma once

#include <stdexcept>
#include <string>

namespace obc {

// Base for every error raised by the toolkit. The CLI maps the subclasses
// onto exit codes (usage 1, numerical 2, I/O 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments or violated preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Loss of positive definiteness, pivot breakdown, singular blocks.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported tensor/JSON content.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace obc
