#pragma once

#include <stdexcept>
#include <string>

namespace mnarjm {

/// Invalid parameter values or option combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parameters outside the model's domain (non-PSD covariance, nonpositive variance).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A period imputation model could not be fitted.
class ImputationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based row (0 = header) and column name.
class IngestionError : public std::runtime_error {
 public:
  IngestionError(std::size_t row, std::string column, const std::string& what)
      : std::runtime_error(column.empty() && row == 0
                               ? what
                               : "row " + std::to_string(row) + ", column '" + column + "': " + what),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

/// Model fitting failed; `diagnostics` holds best-so-far state in key=value form.
class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, std::string diagnostics = {})
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}

  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

}  // namespace mnarjm
