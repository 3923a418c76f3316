#pragma once

#include <stdexcept>
#include <string>

namespace cab {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A scalar argument is outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Input is too short or too empty for the operation to mean anything.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Inconsistent model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values showed up where finite ones were required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable file.
class FileError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset or checkpoint content.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace cab
