#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace betacons {

// Root of every error thrown by the library. Subclasses group by how the CLI
// reports them (data problems vs numeric/training failures).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside a function's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Moments that violate the Beta validity conditions.
class ValidityError : public DomainError {
 public:
  using DomainError::DomainError;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

// Malformed input files; message carries path and line.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Root finder gave up; keeps the last bracket so callers can inspect it.
class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, double lo, double hi)
      : NumericError(what), lo_(lo), hi_(hi) {}
  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }

 private:
  double lo_;
  double hi_;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

// CLI exit codes.
enum class ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

inline ExitCode exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return ExitCode::kNumeric;
  return ExitCode::kData;
}

}  // namespace betacons
