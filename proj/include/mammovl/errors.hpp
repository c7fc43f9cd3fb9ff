#pragma once

#include <stdexcept>
#include <string>

namespace mammovl {

// Error taxonomy shared by every module. The CLI maps categories onto exit
// codes (config -> 2, numerical -> 3, data -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataValidationError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public DataValidationError {
 public:
  using DataValidationError::DataValidationError;
};

class SplitError : public DataValidationError {
 public:
  using DataValidationError::DataValidationError;
};

class ExtractionError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Raised when a loss component goes non-finite; `component` names it.
class NumericalAbort : public Error {
 public:
  NumericalAbort(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace mammovl
