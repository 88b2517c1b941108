#pragma once

#include <stdexcept>
#include <string>

namespace pnas {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes (config 1, evaluator/transport 2, contract 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ConstructionError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

/// Spearman on a constant ranking.
class UndefinedCorrelationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

/// Evaluator-side failures (worker crash, record errors surfacing in a search).
class EvaluatorError : public Error {
 public:
  using Error::Error;
};

class TransportError : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

class ProtocolError : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

}  // namespace pnas
