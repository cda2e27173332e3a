#pragma once

#include <stdexcept>
#include <string>

namespace schanger {

// Error hierarchy mirrors the CLI exit codes: config 2, data 3,
// numeric 4, reconciliation 5.
class Error : public std::runtime_error {
 public:
  Error(const std::string& msg, int exit_code)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg, 3) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

class ReconcileError : public Error {
 public:
  explicit ReconcileError(const std::string& msg) : Error(msg, 5) {}
};

// Tensor shape contract violations; a kind of configuration error.
class ShapeError : public ConfigError {
 public:
  explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

}  // namespace schanger
