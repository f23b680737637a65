#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dmasknas {

// Base of every error the library throws. `category()` is a short
// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
  ConfigError(const std::string& what, std::size_t line, std::size_t column)
      : Error("config", what + " at line " + std::to_string(line) +
                            ", column " + std::to_string(column)),
        line_(line),
        column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_ = 0;
  std::size_t column_ = 0;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

// Tape element budget exhausted (memory proxy runs).
class BudgetExceeded : public Error {
 public:
  explicit BudgetExceeded(const std::string& what) : Error("budget", what) {}
};

}  // namespace dmasknas
