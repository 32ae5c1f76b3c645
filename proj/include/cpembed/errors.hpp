#pragma once

#include <stdexcept>
#include <string>

namespace cpembed {

// Three families, matching the CLI exit codes: config (1), data (2), model (3).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ModelError {
 public:
  using ModelError::ModelError;
};

class LoadError : public ModelError {
 public:
  using ModelError::ModelError;
};

class PositionError : public ModelError {
 public:
  using ModelError::ModelError;
};

class DegenerateError : public DataError {
 public:
  using DataError::DataError;
};

class TokenizeError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : DataError(msg), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class RangeError : public DataError {
 public:
  using DataError::DataError;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  if (dynamic_cast<const ModelError*>(&e)) return 3;
  return 2;
}

}  // namespace cpembed
