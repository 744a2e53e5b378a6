#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gestdtr/data_model.hpp"
#include "gestdtr/dtr_engine.hpp"
#include "gestdtr/simulation.hpp"

namespace gestdtr {

// ---------------------------------------------------------------------------
// Wide CSV: id, then per stage x{j}_<name>..., a{j}, and a final y column.
// ---------------------------------------------------------------------------

// Throws ParseError with the 1-based line and column of the offending field.
Dataset read_csv(std::istream& in);
Dataset read_csv_file(const std::string& path);

// Numbers use the shortest representation that reads back to the same double.
void write_csv(std::ostream& out, const Dataset& dataset);
void write_csv_file(const std::string& path, const Dataset& dataset);

std::string format_double(double value);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class Command { fit, select, simulate, regime };
enum class OutputFormat { csv, json };

const char* to_string(Command command);
const char* to_string(OutputFormat format);
Command parse_command(std::string_view text);
OutputFormat parse_output_format(std::string_view text);

enum class AnalysisKind { fit, selection, exhaustive, trace };
const char* to_string(AnalysisKind kind);
AnalysisKind parse_analysis_kind(std::string_view text);

struct RunConfig {
  Command command = Command::fit;
  std::optional<std::string> dataset_path;
  ModelSpec spec;
  std::string output_path;  // empty writes to standard output
  OutputFormat format = OutputFormat::json;
  std::uint64_t seed = 1;
  FitOptions fit;

  // select
  Direction direction = Direction::forward;
  Criterion criterion = Criterion::qic;
  double significance = 0.05;
  std::vector<std::vector<Term>> candidate_terms;       // stepwise, per stage
  std::vector<std::vector<TermList>> candidate_models;  // exhaustive, per stage
  std::map<int, TermList> frozen;

  // simulate
  std::optional<std::string> preset;
  std::optional<Scenario> scenario;
  AnalysisKind analysis = AnalysisKind::fit;
  std::size_t reps = 1000;
  Stage2Policy stage2_policy = Stage2Policy::correct;
  unsigned threads = 0;

  // Throws SpecificationError when fields required by `command` are missing.
  void validate() const;
  friend bool operator==(const RunConfig& a, const RunConfig& b);
};

// JSON text <-> RunConfig. Unknown keys are rejected.
RunConfig parse_config(std::string_view json_text);
RunConfig read_config_file(const std::string& path);
std::string dump_config(const RunConfig& config);

}  // namespace gestdtr
