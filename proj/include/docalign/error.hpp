#pragma once

#include <stdexcept>
#include <string>

namespace docalign {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes: InvalidArgument -> 2, IoError/ParseError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace docalign
