#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace gestdtr {

// Base of every error raised by the library. `kind()` is a stable
// machine-readable tag used by the CLI when it reports failures as JSON.
class GestError : public std::runtime_error {
 public:
  explicit GestError(const std::string& what) : std::runtime_error(what) {}

  virtual const char* kind() const noexcept { return "error"; }

  // 1-based stage the failure occurred at, if known.
  std::optional<int> stage() const noexcept { return stage_; }
  void set_stage(int stage) noexcept { stage_ = stage; }

 private:
  std::optional<int> stage_;
};

#define GESTDTR_DEFINE_ERROR(Name, tag)                         \
  class Name : public GestError {                              \
   public:                                                     \
    using GestError::GestError;                                \
    const char* kind() const noexcept override { return tag; } \
  }

GESTDTR_DEFINE_ERROR(SpecificationError, "specification");
GESTDTR_DEFINE_ERROR(DimensionError, "dimension");
GESTDTR_DEFINE_ERROR(SeparationError, "separation");
GESTDTR_DEFINE_ERROR(DivergenceError, "divergence");
GESTDTR_DEFINE_ERROR(DomainError, "domain");
GESTDTR_DEFINE_ERROR(StateError, "state");
GESTDTR_DEFINE_ERROR(CalibrationError, "calibration");
GESTDTR_DEFINE_ERROR(SelectionError, "selection");
GESTDTR_DEFINE_ERROR(ValidationError, "validation");
GESTDTR_DEFINE_ERROR(AggregationError, "aggregation");

#undef GESTDTR_DEFINE_ERROR

// Rank-deficient design or otherwise non-invertible system.
class SingularityError : public GestError {
 public:
  SingularityError(const std::string& what, double condition)
      : GestError(what), condition_(condition) {}
  const char* kind() const noexcept override { return "singularity"; }
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

// Blip parameters are not identified by the estimating equations (M singular).
class IdentifiabilityError : public SingularityError {
 public:
  using SingularityError::SingularityError;
  const char* kind() const noexcept override { return "identifiability"; }
};

class ParseError : public GestError {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : GestError(what + " (line " + std::to_string(line) + ", column " +
                  std::to_string(column) + ")"),
        line_(line),
        column_(column) {}
  const char* kind() const noexcept override { return "parse"; }
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

}  // namespace gestdtr
