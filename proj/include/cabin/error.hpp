#pragma once

#include <stdexcept>
#include <string>

namespace cabin {

// Exception families. Callers that only care about "something went wrong"
// can catch cabin::Error; the CLI maps ArgumentError to usage problems and
// everything else to runtime/data failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

class SelectionError : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

class RenderError : public Error {
 public:
  using Error::Error;
};

}  // namespace cabin
