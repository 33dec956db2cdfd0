#pragma once

#include <stdexcept>
#include <string>

namespace promptpar {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated shape or argument contract between modules.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class AuditError : public Error {
 public:
  using Error::Error;
};

// Anything wrong with input data: annotations, images, label matrices, splits.
class DataError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class SplitError : public DataError {
 public:
  using DataError::DataError;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public ContractError {
 public:
  using ContractError::ContractError;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace promptpar
