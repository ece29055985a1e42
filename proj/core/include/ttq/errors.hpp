#pragma once

#include <stdexcept>
#include <string>

namespace ttq {

// Error categories map onto CLI exit codes (see tools/ttq.cpp).
enum class ErrorCategory {
  Config = 2,
  Data = 3,
  Numeric = 4,
  Io = 5,
  Usage = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

/// Inconsistent shapes, plans or core dimensions.
class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& what) : Error(ErrorCategory::Usage, what) {}
};

/// Invalid plan request (e.g. too many factors for the matrix size).
class PlanningError : public Error {
 public:
  explicit PlanningError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

/// Bad argument values (non-positive scale, unsupported bit width, ...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

/// Bad input data (length mismatch, non-finite values, index out of range).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

/// Integer kernel contract violation (accumulator range).
class KernelError : public Error {
 public:
  explicit KernelError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

/// NaN/Inf during optimization.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

/// Misuse of an API with state (e.g. running backward twice on one tape).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorCategory::Usage, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

/// Checkpoint corruption: bad magic, version, length or checksum.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

}  // namespace ttq
