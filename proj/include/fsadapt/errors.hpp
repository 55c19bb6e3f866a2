#pragma once

#include <stdexcept>
#include <string>

namespace fsadapt {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's mathematical domain (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a numerically undefined quantity (zero norm).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration. May carry several violations at once.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File written by an incompatible version of the format.
class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Unusable few-shot task (e.g. empty support set).
class TaskError : public Error {
 public:
  using Error::Error;
};

/// No class could be scored during evaluation.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsadapt
