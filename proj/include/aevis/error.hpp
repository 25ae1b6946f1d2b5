#pragma once

#include <stdexcept>
#include <string>

namespace aevis {

/// Base of every error raised by the library. `code()` is a stable
/// machine-readable tag used by the CLI and the HTTP layer.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension_error", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& m) : Error("parse_error", m) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error("validation_error", m) {}
};

class LookupError : public Error {
 public:
  explicit LookupError(const std::string& m) : Error("not_found", m) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& m) : Error("training_error", m) {}
};

class ExtractionError : public Error {
 public:
  explicit ExtractionError(const std::string& m) : Error("extraction_error", m) {}
};

}  // namespace aevis
