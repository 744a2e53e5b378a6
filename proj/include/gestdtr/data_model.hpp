#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gestdtr/linalg.hpp"

namespace gestdtr {

enum class Scale { linear, loglinear };
enum class TreatmentType { binary, continuous };

const char* to_string(Scale scale);
const char* to_string(TreatmentType type);
Scale parse_scale(std::string_view text);
TreatmentType parse_treatment_type(std::string_view text);

// ---------------------------------------------------------------------------
// Longitudinal records
// ---------------------------------------------------------------------------

struct StageRecord {
  std::vector<double> covariates;  // x_j, in the dataset's declared order
  double treatment = 0.0;          // a_j
};

struct Subject {
  std::string id;
  std::vector<StageRecord> stages;  // length J
  double outcome = 0.0;             // y
};

// Fixed-length trajectories for every subject. Stage indices in the public
// API are 1-based to match the usual j = 1..J numbering.
struct Dataset {
  std::vector<std::vector<std::string>> covariate_names;  // per stage
  std::vector<Subject> subjects;

  int n_stages() const noexcept { return static_cast<int>(covariate_names.size()); }
  std::size_t size() const noexcept { return subjects.size(); }

  std::optional<std::size_t> covariate_index(int stage, std::string_view name) const;
  VectorXd outcomes() const;
  VectorXd treatments(int stage) const;
};

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

// One column of the stage history (x_1, a_1, x_2, a_2, ..., x_j).
struct HistoryColumn {
  enum class Kind { covariate, treatment };

  Kind kind = Kind::covariate;
  int stage = 1;
  std::string name;  // covariate name; empty for treatments

  // "x<stage>_<name>" or "a<stage>", identical to the CSV column header.
  std::string label() const;
  friend bool operator==(const HistoryColumn&, const HistoryColumn&) = default;
};

// Product of history columns, e.g. "a1*x1_age". No factors means the constant.
struct Term {
  std::vector<HistoryColumn> factors;

  static Term parse(std::string_view text);
  std::string label() const;
  friend bool operator==(const Term&, const Term&) = default;
};

// Ordered model terms with an optional leading intercept column.
struct TermList {
  bool intercept = true;
  std::vector<Term> terms;

  static TermList parse(const std::vector<std::string>& labels, bool intercept = true);
  std::size_t columns() const noexcept { return terms.size() + (intercept ? 1u : 0u); }
  std::vector<std::string> labels() const;  // "(Intercept)" first when present
  std::string key() const;                  // canonical single-string form
  friend bool operator==(const TermList&, const TermList&) = default;
};

inline constexpr const char* kInterceptLabel = "(Intercept)";

struct DoseRange {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const DoseRange&, const DoseRange&) = default;
};

struct StageSpec {
  TermList blip;             // h_psi (linear-in-a blip terms)
  TermList treatment_free;   // h_beta
  TermList treatment;        // h_alpha
  TermList blip_quadratic{false, {}};  // h_psi2, continuous treatments only
  std::optional<DoseRange> dose_range;  // required for continuous treatments
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct ModelSpec {
  Scale scale = Scale::linear;
  TreatmentType treatment_type = TreatmentType::binary;
  std::vector<StageSpec> stages;  // index 0 is stage 1

  int n_stages() const noexcept { return static_cast<int>(stages.size()); }
  const StageSpec& stage(int j) const { return stages.at(static_cast<std::size_t>(j - 1)); }
  StageSpec& stage(int j) { return stages.at(static_cast<std::size_t>(j - 1)); }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Row-per-subject design for one stage. The diagonal matrix A of treatments is
// represented by the vector `a`.
struct DesignMatrices {
  MatrixXd h_psi;
  MatrixXd h_psi2;  // n x 0 unless the stage has quadratic blip terms
  MatrixXd h_beta;
  MatrixXd h_alpha;
  VectorXd a;

  Eigen::Index rows() const noexcept { return a.size(); }
};

// Throws SpecificationError when a selector does not resolve against the
// dataset or references history that is not available before decision j.
void check_spec(const Dataset& dataset, const ModelSpec& spec);
void check_terms(const Dataset& dataset, const TermList& terms, int stage,
                 const char* role);

DesignMatrices build_design(const Dataset& dataset, const ModelSpec& spec, int stage);

// Evaluates a term list at stage `stage` for every subject.
MatrixXd build_columns(const Dataset& dataset, const TermList& terms, int stage,
                       const char* role = "model");

struct Violation {
  std::string message;
  std::optional<std::size_t> row;  // 0-based subject index
  std::optional<int> stage;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const noexcept { return violations.empty(); }
  std::string summary() const;
};

ValidationReport validate_dataset(const Dataset& dataset, const ModelSpec& spec);

}  // namespace gestdtr
