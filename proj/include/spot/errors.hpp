#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spot {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Model, engine or CLI configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Stage masks are not nested.
class HierarchyError : public Error {
 public:
  HierarchyError(std::size_t stage, std::size_t token, const std::string& what)
      : Error(what), stage_(stage), token_(token) {}
  std::size_t stage() const noexcept { return stage_; }
  std::size_t token() const noexcept { return token_; }

 private:
  std::size_t stage_;
  std::size_t token_;
};

/// Malformed configuration text; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A non-finite value appeared where the math must stay finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or dataset file could not be read back.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace spot
