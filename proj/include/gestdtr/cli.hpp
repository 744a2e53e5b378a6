#pragma once

#include <iosfwd>
#include <string>

#include "gestdtr/io.hpp"

namespace gestdtr {

// ---------------------------------------------------------------------------
// Command implementations. Each writes its result to `config.output_path`
// when set, otherwise to `out`. They throw GestError on failure.
// ---------------------------------------------------------------------------

void cmd_fit(const RunConfig& config, std::ostream& out);
void cmd_select(const RunConfig& config, std::ostream& out);
void cmd_simulate(const RunConfig& config, std::ostream& out);
void cmd_regime(const RunConfig& config, std::ostream& out);

// Machine-readable error report: {"error": kind, "message", "stage", "line", "column"}.
std::string error_json(const std::exception& e);

// Validates and dispatches `config`. Errors are written to `err` as a JSON
// object and turned into a nonzero exit status.
int run(const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace gestdtr
