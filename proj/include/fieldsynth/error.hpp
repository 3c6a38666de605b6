#pragma once

#include <stdexcept>
#include <string>

namespace fieldsynth {

// Base for every error raised by the library. The CLI maps the subclasses
// onto exit codes (argument/format/io -> 2, numerical -> 1).
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

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A statistic is undefined on the given input (empty class, zero variance).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace fieldsynth
