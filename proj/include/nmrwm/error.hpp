#pragma once

#include <stdexcept>
#include <string>

namespace nmrwm {

/// Failure categories. The CLI maps them onto process exit codes.
enum class ErrorKind { usage = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Bad arguments: shapes, lengths, parameter ranges.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

/// Unreadable or malformed input data (WAV, model container, config).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Non-finite values or impossible numerics at runtime.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace nmrwm
