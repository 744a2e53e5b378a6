#include "gestdtr/cli.hpp"

#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "gestdtr/errors.hpp"

namespace gestdtr {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

json number(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

json vector_json(const VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v(i)));
  return out;
}

json matrix_json(const MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(vector_json(m.row(i).transpose()));
  return out;
}

json named(const std::vector<std::string>& labels, const VectorXd& v) {
  json out = json::object();
  for (std::size_t i = 0; i < labels.size() && static_cast<Eigen::Index>(i) < v.size(); ++i) {
    out[labels[i]] = number(v(static_cast<Eigen::Index>(i)));
  }
  return out;
}

std::vector<std::string> psi_labels(const StageResult& r) {
  std::vector<std::string> labels = r.blip.labels();
  for (const std::string& l : r.blip_quadratic.labels()) labels.push_back("a^2:" + l);
  return labels;
}

std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : "NA"; }

// Writes `text` to the configured path, or to `out` when none is set.
void emit(const RunConfig& config, std::ostream& out, const std::string& text) {
  if (config.output_path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(config.output_path, std::ios::binary);
  if (!file) throw SpecificationError("cannot write '" + config.output_path + "'");
  file << text;
}

Dataset load_dataset(const RunConfig& config) { return read_csv_file(*config.dataset_path); }

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

json stage_json(const StageResult& r, const ModelSpec& spec) {
  const StageSpec& s = spec.stage(r.stage);
  const std::vector<std::string> labels = psi_labels(r);
  json out{{"stage", r.stage},
           {"blip", r.blip.key()},
           {"psi", named(labels, r.psi())},
           {"beta", named(s.treatment_free.labels(), r.beta())},
           {"alpha", named(s.treatment.labels(), r.treatment.alpha)},
           {"converged", r.converged()},
           {"q", number(r.q())}};
  if (r.inference) {
    const StageInference& inf = *r.inference;
    out["se"] = named(labels, inf.se);
    out["wald_p"] = named(labels, inf.wald_p);
    out["K"] = number(inf.K);
    out["qic"] = number(inf.qic);
    out["covariance"] = matrix_json(inf.V_hat);
  }
  if (const auto* ll = std::get_if<LoglinearStageFit>(&r.fit)) {
    out["convergence"] = json{{"iterations", ll->iterations},
                              {"refine_iterations", ll->refine_iterations},
                              {"ee_residual", number(ll->normalized_ee_residual())},
                              {"beta_residual", number(ll->normalized_beta_residual())}};
  }
  return out;
}

std::string fit_json(const DtrFit& fit, const ModelSpec& spec) {
  json stages = json::array();
  for (int j = 1; j <= spec.n_stages(); ++j) {
    bool found = false;
    for (const StageResult& r : fit.stage_fits) found = found || r.stage == j;
    if (found) stages.push_back(stage_json(fit.stage(j), spec));
  }
  json out{{"scale", to_string(fit.scale)},
           {"treatment_type", to_string(fit.treatment_type)},
           {"converged", fit.converged},
           {"stages", stages}};
  if (fit.failed_stage) out["failed_stage"] = *fit.failed_stage;
  return out.dump(2) + "\n";
}

std::string fit_csv(const DtrFit& fit, const ModelSpec& spec) {
  std::ostringstream os;
  os << "stage,block,term,estimate,se,p_value\n";
  for (int j = 1; j <= spec.n_stages(); ++j) {
    const StageResult* r = nullptr;
    for (const StageResult& s : fit.stage_fits) {
      if (s.stage == j) r = &s;
    }
    if (!r) continue;
    const StageSpec& s = spec.stage(j);
    const std::vector<std::string> labels = psi_labels(*r);
    const VectorXd psi = r->psi();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      os << j << ",psi," << labels[i] << ',' << csv_number(psi(k)) << ','
         << (r->inference ? csv_number(r->inference->se(k)) : "NA") << ','
         << (r->inference ? csv_number(r->inference->wald_p(k)) : "NA") << '\n';
    }
    const std::vector<std::string> beta_labels = s.treatment_free.labels();
    const VectorXd beta = r->beta();
    for (std::size_t i = 0; i < beta_labels.size(); ++i) {
      os << j << ",beta," << beta_labels[i] << ',' << csv_number(beta(static_cast<Eigen::Index>(i)))
         << ",NA,NA\n";
    }
    const std::vector<std::string> alpha_labels = s.treatment.labels();
    for (std::size_t i = 0; i < alpha_labels.size(); ++i) {
      os << j << ",alpha," << alpha_labels[i] << ','
         << csv_number(r->treatment.alpha(static_cast<Eigen::Index>(i))) << ",NA,NA\n";
    }
    os << j << ",stage,Q," << csv_number(r->q()) << ",NA,NA\n";
    if (r->inference) {
      os << j << ",stage,K," << csv_number(r->inference->K) << ",NA,NA\n";
      os << j << ",stage,QIC," << csv_number(r->inference->qic) << ",NA,NA\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

std::string select_output(const SelectionResult& sel, OutputFormat format) {
  if (format == OutputFormat::csv) {
    std::ostringstream os;
    os << "stage,candidate,value,decision,note\n";
    for (const TrailEntry& e : sel.trail) {
      std::string note = e.note;
      for (char& c : note) {
        if (c == ',' || c == '\n') c = ';';
      }
      os << e.stage << ',' << e.candidate << ',' << csv_number(e.value) << ',' << e.decision << ','
         << note << '\n';
    }
    return os.str();
  }
  json chosen = json::object();
  for (std::size_t j = 0; j < sel.chosen_per_stage.size(); ++j) {
    chosen[std::to_string(j + 1)] = sel.chosen_per_stage[j].key();
  }
  json trail = json::array();
  for (const TrailEntry& e : sel.trail) {
    trail.push_back(json{{"stage", e.stage},
                         {"candidate", e.candidate},
                         {"value", number(e.value)},
                         {"decision", e.decision},
                         {"note", e.note}});
  }
  json out{{"direction", to_string(sel.direction)},
           {"criterion", to_string(sel.criterion)},
           {"chosen", chosen},
           {"trail", trail}};
  return out.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

json report_json(const ReplicationReport& r) {
  json params = json::array();
  for (const ParameterSummary& p : r.parameters) {
    params.push_back(json{{"label", p.label},
                          {"truth", number(p.truth)},
                          {"count", p.count},
                          {"mean", number(p.mean)},
                          {"sd", number(p.sd)},
                          {"mean_se", number(p.mean_se)},
                          {"mean_k", number(p.mean_k)}});
  }
  json selection = json::array();
  for (const SelectionTally& t : r.selection) {
    selection.push_back(json{{"stage", t.stage},
                             {"method", t.method},
                             {"truth", t.truth},
                             {"total", t.total},
                             {"correct", t.correct},
                             {"rate", number(t.rate())},
                             {"chosen", t.chosen}});
  }
  json traces = json::array();
  for (const TraceSummary& t : r.traces) {
    traces.push_back(json{{"stage", t.stage},
                          {"truth", t.truth},
                          {"model", t.model},
                          {"count", t.count},
                          {"mean", number(t.mean)},
                          {"sd", number(t.sd)}});
  }
  json out{{"kind", to_string(r.scenario.kind)},
           {"n", r.scenario.n},
           {"n_requested", r.n_requested},
           {"n_converged", r.n_converged},
           {"failures", r.failures},
           {"zero_fraction", number(r.zero_fraction)},
           {"parameters", params},
           {"selection", selection},
           {"traces", traces}};
  if (r.beta0) out["beta0"] = number(*r.beta0);
  return out;
}

std::string table_csv(const Table& t) {
  std::ostringstream os;
  auto cell = [](const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << (i ? "," : "") << cell(t.columns[i]);
  os << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << cell(row[i]);
    os << '\n';
  }
  return os.str();
}

Analysis scenario_analysis(const RunConfig& config) {
  const Scenario& s = *config.scenario;
  switch (config.analysis) {
    case AnalysisKind::fit: {
      FitAnalysis a = default_fit_analysis(s);
      if (!config.spec.stages.empty()) a.spec = config.spec;
      a.options = config.fit;
      return a;
    }
    case AnalysisKind::selection: {
      SelectionAnalysis a = default_selection_analysis(s, config.stage2_policy);
      a.significance = config.significance;
      a.options = config.fit;
      return a;
    }
    case AnalysisKind::exhaustive: {
      ExhaustiveAnalysis a = default_exhaustive_analysis(s);
      a.options = config.fit;
      return a;
    }
    case AnalysisKind::trace: {
      TraceAnalysis a = default_trace_analysis(s);
      a.options = config.fit;
      return a;
    }
  }
  throw SpecificationError("unknown analysis");
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_fit(const RunConfig& config, std::ostream& out) {
  const Dataset ds = load_dataset(config);
  const DtrFit fit = fit_dtr(ds, config.spec, config.fit);
  emit(config, out,
       config.format == OutputFormat::csv ? fit_csv(fit, config.spec) : fit_json(fit, config.spec));
}

void cmd_select(const RunConfig& config, std::ostream& out) {
  const Dataset ds = load_dataset(config);
  SelectionOptions opts;
  opts.direction = config.direction;
  opts.criterion = config.criterion;
  opts.significance = config.significance;
  opts.frozen = config.frozen;
  opts.fit = config.fit;
  const SelectionResult sel =
      config.direction == Direction::exhaustive
          ? exhaustive_select(ds, config.spec, config.candidate_models, opts)
          : stepwise_select(ds, config.spec, config.candidate_terms, opts);
  emit(config, out, select_output(sel, config.format));
}

void cmd_simulate(const RunConfig& config, std::ostream& out) {
  RunOptions run_opts;
  run_opts.threads = config.threads;
  if (config.scenario) {
    Scenario s = *config.scenario;
    const ReplicationReport report =
        run_replications(s, config.reps, scenario_analysis(config), run_opts);
    if (config.format == OutputFormat::csv) {
      std::ostringstream os;
      os << "label,truth,count,mean,sd,mean_se,mean_k\n";
      for (const ParameterSummary& p : report.parameters) {
        os << p.label << ',' << csv_number(p.truth) << ',' << p.count << ',' << csv_number(p.mean)
           << ',' << csv_number(p.sd) << ',' << csv_number(p.mean_se) << ','
           << csv_number(p.mean_k) << '\n';
      }
      emit(config, out, os.str());
    } else {
      emit(config, out, report_json(report).dump(2) + "\n");
    }
    return;
  }
  const Preset preset = make_preset(*config.preset, config.seed, config.stage2_policy);
  std::vector<ReplicationReport> reports;
  reports.reserve(preset.setups.size());
  for (const Setup& setup : preset.setups) {
    reports.push_back(run_replications(setup.scenario, config.reps, setup.analysis, run_opts));
  }
  const Table table = render_table(preset, reports);
  if (config.format == OutputFormat::csv) {
    emit(config, out, table_csv(table));
    return;
  }
  json rows = json::array();
  for (const auto& row : table.rows) rows.push_back(row);
  json reps = json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    json r = report_json(reports[i]);
    r["tags"] = preset.setups[i].tags;
    reps.push_back(std::move(r));
  }
  json doc{{"preset", preset.name},
           {"title", table.title},
           {"reps", config.reps},
           {"seed", config.seed},
           {"table", json{{"columns", table.columns}, {"rows", rows}}},
           {"reports", reps}};
  emit(config, out, doc.dump(2) + "\n");
}

void cmd_regime(const RunConfig& config, std::ostream& out) {
  const Dataset ds = load_dataset(config);
  const DtrFit fit = fit_dtr(ds, config.spec, config.fit);
  if (!fit.converged) {
    auto err = StateError("estimation did not converge; no regime is available");
    if (fit.failed_stage) err.set_stage(*fit.failed_stage);
    throw err;
  }
  std::ostringstream os;
  if (config.format == OutputFormat::json) {
    json rows = json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
      json row{{"id", ds.subjects[i].id}};
      for (int j = 1; j <= ds.n_stages(); ++j) {
        row["a" + std::to_string(j) + "_opt"] =
            number(fit.optimal_treatments(static_cast<Eigen::Index>(i), j - 1));
      }
      rows.push_back(std::move(row));
    }
    os << rows.dump(2) << '\n';
  } else {
    os << "id";
    for (int j = 1; j <= ds.n_stages(); ++j) os << ",a" << j << "_opt";
    os << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
      os << ds.subjects[i].id;
      for (int j = 1; j <= ds.n_stages(); ++j) {
        os << ',' << csv_number(fit.optimal_treatments(static_cast<Eigen::Index>(i), j - 1));
      }
      os << '\n';
    }
  }
  emit(config, out, os.str());
}

std::string error_json(const std::exception& e) {
  json out{{"message", e.what()}};
  if (const auto* g = dynamic_cast<const GestError*>(&e)) {
    out["error"] = g->kind();
    if (g->stage()) out["stage"] = *g->stage();
    if (const auto* p = dynamic_cast<const ParseError*>(&e)) {
      out["line"] = p->line();
      out["column"] = p->column();
    }
  } else {
    out["error"] = "internal";
  }
  return out.dump();
}

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    config.validate();
    switch (config.command) {
      case Command::fit: cmd_fit(config, out); break;
      case Command::select: cmd_select(config, out); break;
      case Command::simulate: cmd_simulate(config, out); break;
      case Command::regime: cmd_regime(config, out); break;
    }
    return 0;
  } catch (const std::exception& e) {
    err << error_json(e) << '\n';
    return 1;
  }
}

}  // namespace gestdtr
