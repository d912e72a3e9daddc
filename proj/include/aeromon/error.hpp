#pragma once

#include <stdexcept>
#include <string>

namespace aeromon {

/// Broad failure classes; the CLI maps each one to an exit code.
enum class ErrorCategory { Config, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::Data, "shape error: " + what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(ErrorCategory::Data, "domain error: " + what) {}
};

class InsufficientDataError : public Error {
 public:
  explicit InsufficientDataError(const std::string& what)
      : Error(ErrorCategory::Data, "insufficient data: " + what) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error(ErrorCategory::Data, "schema error: " + what) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row)
      : Error(ErrorCategory::Data, "parse error at row " + std::to_string(row) + ": " + what), row_(row) {}

  /// 1-based data row (the header is row 0).
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class StratificationError : public Error {
 public:
  explicit StratificationError(const std::string& what)
      : Error(ErrorCategory::Data, "stratification error: " + what) {}
};

class MissingLabelsError : public Error {
 public:
  explicit MissingLabelsError(const std::string& what)
      : Error(ErrorCategory::Data, "missing labels: " + what) {}
};

class DegenerateLabelsError : public Error {
 public:
  explicit DegenerateLabelsError(const std::string& what)
      : Error(ErrorCategory::Data, "degenerate labels: " + what) {}
};

class NotPositiveDefiniteError : public Error {
 public:
  explicit NotPositiveDefiniteError(const std::string& what)
      : Error(ErrorCategory::Numeric, "matrix not positive definite: " + what) {}
};

class DegenerateResidualsError : public Error {
 public:
  explicit DegenerateResidualsError(const std::string& what)
      : Error(ErrorCategory::Numeric, "degenerate residuals: " + what) {}
};

class UndefinedAurocError : public Error {
 public:
  explicit UndefinedAurocError(const std::string& what)
      : Error(ErrorCategory::Numeric, "AUROC undefined: " + what) {}
};

/// Process exit code for an error category (0 is reserved for success).
inline int exit_code(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Numeric: return 4;
  }
  return 1;
}

}  // namespace aeromon
