#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowproto {

// Every library error derives from Error so the CLI can map categories to
// exit codes (config 2, I/O and parse 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape mismatch, stale cache, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}

  // Byte offset for binary formats, line number for text formats.
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class VersionError : public ParseError {
 public:
  VersionError(const std::string& what, unsigned found, unsigned expected)
      : ParseError(what, 4), found_(found), expected_(expected) {}

  unsigned found() const noexcept { return found_; }
  unsigned expected() const noexcept { return expected_; }

 private:
  unsigned found_;
  unsigned expected_;
};

}  // namespace flowproto
