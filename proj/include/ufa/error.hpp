#pragma once

#include <stdexcept>
#include <string>

namespace ufa {

// Base of every error thrown by the library. The CLI maps IoError to exit
// code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input record; carries the 1-based line number and offending field.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::string field, const std::string& what)
      : Error("line " + std::to_string(line) + ": field '" + field + "': " + what),
        line_(line),
        field_(std::move(field)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class SizingError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  DecodeError(std::size_t position, const std::string& what)
      : Error("position " + std::to_string(position) + ": " + what), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class LengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class RegistryError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class OrchestrationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ufa
