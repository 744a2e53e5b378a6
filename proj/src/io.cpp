#include "gestdtr/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <system_error>

#include "json.hpp"

#include "gestdtr/errors.hpp"

namespace gestdtr {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

struct Field {
  std::string text;
  std::size_t column = 1;  // 1-based character column of the field start
};

// Splits one line on commas; double-quoted fields may contain commas and "".
std::vector<Field> split_line(const std::string& line, std::size_t line_no) {
  std::vector<Field> fields;
  std::size_t i = 0;
  const std::size_t n = line.size();
  while (true) {
    Field f;
    f.column = i + 1;
    if (i < n && line[i] == '"') {
      ++i;
      bool closed = false;
      while (i < n) {
        if (line[i] == '"') {
          if (i + 1 < n && line[i + 1] == '"') {
            f.text += '"';
            i += 2;
            continue;
          }
          closed = true;
          ++i;
          break;
        }
        f.text += line[i++];
      }
      if (!closed) throw ParseError("unterminated quoted field", line_no, f.column);
      if (i < n && line[i] != ',') throw ParseError("unexpected character after quoted field", line_no, i + 1);
    } else {
      while (i < n && line[i] != ',') f.text += line[i++];
    }
    fields.push_back(std::move(f));
    if (i >= n) break;
    ++i;  // comma
  }
  return fields;
}

double parse_number(const Field& f, std::size_t line_no) {
  const char* first = f.text.data();
  const char* last = first + f.text.size();
  while (first < last && (*first == ' ' || *first == '\t')) ++first;
  while (last > first && (last[-1] == ' ' || last[-1] == '\t')) --last;
  if (first < last && *first == '+') ++first;
  double value = 0.0;
  const auto res = std::from_chars(first, last, value);
  if (first == last || res.ec != std::errc() || res.ptr != last) {
    throw ParseError("expected a number, found '" + f.text + "'", line_no, f.column);
  }
  return value;
}

enum class ColumnRole { id, covariate, treatment, outcome };

struct ColumnInfo {
  ColumnRole role;
  int stage = 0;
  std::size_t covariate = 0;
};

}  // namespace

Dataset read_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    return true;
  };
  if (!next_line() || line.empty()) throw ParseError("empty input: a header row is required", 1, 1);

  const std::vector<Field> header = split_line(line, line_no);
  if (header.size() < 3 || header.front().text != "id") {
    throw ParseError("header must start with 'id'", line_no, 1);
  }
  if (header.back().text != "y") {
    throw ParseError("last header column must be 'y'", line_no, header.back().column);
  }

  Dataset ds;
  std::vector<ColumnInfo> columns;
  columns.push_back({ColumnRole::id});
  int stage = 1;
  bool stage_closed = false;
  for (std::size_t c = 1; c + 1 < header.size(); ++c) {
    const Field& h = header[c];
    const std::string& name = h.text;
    auto fail = [&](const std::string& why) -> void {
      throw ParseError("bad header '" + name + "': " + why, line_no, h.column);
    };
    if (name.size() >= 2 && name[0] == 'a') {
      int j = 0;
      const auto res = std::from_chars(name.data() + 1, name.data() + name.size(), j);
      if (res.ec != std::errc() || res.ptr != name.data() + name.size()) fail("expected a{j}");
      if (j != stage) fail("treatment columns must appear in stage order");
      if (static_cast<int>(ds.covariate_names.size()) < stage) ds.covariate_names.resize(stage);
      columns.push_back({ColumnRole::treatment, stage});
      ++stage;
      stage_closed = true;
      continue;
    }
    if (name.size() >= 4 && name[0] == 'x') {
      const auto underscore = name.find('_');
      int j = 0;
      const auto res = std::from_chars(name.data() + 1, name.data() + (underscore == std::string::npos ? name.size() : underscore), j);
      if (underscore == std::string::npos || underscore + 1 >= name.size() || res.ec != std::errc() ||
          res.ptr != name.data() + underscore) {
        fail("expected x{j}_<name>");
      }
      if (j != stage) fail("covariate columns must precede their stage's treatment column");
      if (static_cast<int>(ds.covariate_names.size()) < stage) ds.covariate_names.resize(stage);
      auto& names = ds.covariate_names[static_cast<std::size_t>(stage - 1)];
      const std::string cov = name.substr(underscore + 1);
      if (std::find(names.begin(), names.end(), cov) != names.end()) fail("duplicate column");
      names.push_back(cov);
      columns.push_back({ColumnRole::covariate, stage, names.size() - 1});
      stage_closed = false;
      continue;
    }
    fail("expected x{j}_<name> or a{j}");
  }
  if (ds.covariate_names.empty() || !stage_closed) {
    throw ParseError("every stage needs a treatment column a{j} before 'y'", line_no,
                     header.back().column);
  }
  columns.push_back({ColumnRole::outcome});
  const int n_stages = static_cast<int>(ds.covariate_names.size());

  while (next_line()) {
    if (line.empty()) continue;
    const std::vector<Field> fields = split_line(line, line_no);
    if (fields.size() != columns.size()) {
      std::ostringstream msg;
      msg << "expected " << columns.size() << " fields, found " << fields.size();
      throw ParseError(msg.str(), line_no, fields.size() < columns.size() ? line.size() + 1 : fields[columns.size()].column);
    }
    Subject subj;
    subj.stages.resize(static_cast<std::size_t>(n_stages));
    for (int j = 0; j < n_stages; ++j) {
      subj.stages[static_cast<std::size_t>(j)].covariates.resize(ds.covariate_names[static_cast<std::size_t>(j)].size());
    }
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const ColumnInfo& info = columns[c];
      switch (info.role) {
        case ColumnRole::id:
          subj.id = fields[c].text;
          break;
        case ColumnRole::covariate:
          subj.stages[static_cast<std::size_t>(info.stage - 1)].covariates[info.covariate] =
              parse_number(fields[c], line_no);
          break;
        case ColumnRole::treatment:
          subj.stages[static_cast<std::size_t>(info.stage - 1)].treatment = parse_number(fields[c], line_no);
          break;
        case ColumnRole::outcome:
          subj.outcome = parse_number(fields[c], line_no);
          break;
      }
    }
    ds.subjects.push_back(std::move(subj));
  }
  if (ds.subjects.empty()) throw ParseError("no data rows after the header", line_no + 1, 1);
  return ds;
}

Dataset read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'", 0, 0);
  return read_csv(in);
}

namespace {

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_csv(std::ostream& out, const Dataset& dataset) {
  out << "id";
  for (int j = 1; j <= dataset.n_stages(); ++j) {
    for (const std::string& name : dataset.covariate_names[static_cast<std::size_t>(j - 1)]) {
      out << ",x" << j << '_' << name;
    }
    out << ",a" << j;
  }
  out << ",y\n";
  for (const Subject& s : dataset.subjects) {
    out << quote_if_needed(s.id);
    for (const StageRecord& rec : s.stages) {
      for (double x : rec.covariates) out << ',' << format_double(x);
      out << ',' << format_double(rec.treatment);
    }
    out << ',' << format_double(s.outcome) << '\n';
  }
}

void write_csv_file(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SpecificationError("cannot write '" + path + "'");
  write_csv(out, dataset);
}

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

const char* to_string(Command command) {
  switch (command) {
    case Command::fit: return "fit";
    case Command::select: return "select";
    case Command::simulate: return "simulate";
    case Command::regime: return "regime";
  }
  return "?";
}

const char* to_string(OutputFormat format) { return format == OutputFormat::csv ? "csv" : "json"; }

Command parse_command(std::string_view text) {
  if (text == "fit") return Command::fit;
  if (text == "select") return Command::select;
  if (text == "simulate") return Command::simulate;
  if (text == "regime") return Command::regime;
  throw SpecificationError("unknown command '" + std::string(text) + "'");
}

OutputFormat parse_output_format(std::string_view text) {
  if (text == "csv") return OutputFormat::csv;
  if (text == "json") return OutputFormat::json;
  throw SpecificationError("unknown output format '" + std::string(text) + "'");
}

const char* to_string(AnalysisKind kind) {
  switch (kind) {
    case AnalysisKind::fit: return "fit";
    case AnalysisKind::selection: return "selection";
    case AnalysisKind::exhaustive: return "exhaustive";
    case AnalysisKind::trace: return "trace";
  }
  return "?";
}

AnalysisKind parse_analysis_kind(std::string_view text) {
  if (text == "fit") return AnalysisKind::fit;
  if (text == "selection") return AnalysisKind::selection;
  if (text == "exhaustive") return AnalysisKind::exhaustive;
  if (text == "trace") return AnalysisKind::trace;
  throw SpecificationError("unknown analysis '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  switch (command) {
    case Command::fit:
    case Command::regime:
    case Command::select:
      if (!dataset_path) {
        throw SpecificationError(std::string(to_string(command)) + " needs a dataset path");
      }
      if (spec.stages.empty()) throw SpecificationError("model specification has no stages");
      break;
    case Command::simulate:
      if (!preset && !scenario) throw SpecificationError("simulate needs a preset or a scenario");
      if (preset && scenario) throw SpecificationError("give either a preset or a scenario, not both");
      if (reps == 0) throw SpecificationError("reps must be at least 1");
      if (scenario) scenario->validate();
      break;
  }
  if (command == Command::select) {
    if (direction == Direction::exhaustive) {
      if (candidate_models.size() != spec.stages.size()) {
        throw SpecificationError("exhaustive selection needs candidate_models for every stage");
      }
    } else if (candidate_terms.size() != spec.stages.size()) {
      throw SpecificationError("stepwise selection needs candidate_terms for every stage");
    }
  }
  if (!(significance > 0.0 && significance < 1.0)) {
    throw SpecificationError("significance must lie in (0, 1)");
  }
  fit.irls.validate();
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.command == b.command && a.dataset_path == b.dataset_path && a.spec == b.spec &&
         a.output_path == b.output_path && a.format == b.format && a.seed == b.seed &&
         a.fit == b.fit && a.direction == b.direction && a.criterion == b.criterion &&
         a.significance == b.significance && a.candidate_terms == b.candidate_terms &&
         a.candidate_models == b.candidate_models && a.frozen == b.frozen && a.preset == b.preset &&
         a.scenario == b.scenario && a.analysis == b.analysis && a.reps == b.reps &&
         a.stage2_policy == b.stage2_policy && a.threads == b.threads;
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw SpecificationError(std::string("unknown key '") + key + "' in " + where);
  }
}

json terms_to_json(const TermList& t) {
  json labels = json::array();
  for (const Term& term : t.terms) labels.push_back(term.label());
  return json{{"intercept", t.intercept}, {"terms", labels}};
}

TermList terms_from_json(const json& j, bool default_intercept = true) {
  if (j.is_array()) return TermList::parse(j.get<std::vector<std::string>>(), default_intercept);
  if (!j.is_object()) throw SpecificationError("a model term list must be an array or an object");
  reject_unknown(j, {"intercept", "terms"}, "term list");
  const bool intercept = j.value("intercept", default_intercept);
  std::vector<std::string> labels;
  if (j.contains("terms")) labels = j.at("terms").get<std::vector<std::string>>();
  return TermList::parse(labels, intercept);
}

json spec_to_json(const ModelSpec& spec) {
  json stages = json::array();
  for (const StageSpec& s : spec.stages) {
    json st{{"blip", terms_to_json(s.blip)},
            {"treatment_free", terms_to_json(s.treatment_free)},
            {"treatment", terms_to_json(s.treatment)}};
    if (s.blip_quadratic.columns() > 0) st["blip_quadratic"] = terms_to_json(s.blip_quadratic);
    if (s.dose_range) st["dose_range"] = json::array({s.dose_range->lo, s.dose_range->hi});
    stages.push_back(std::move(st));
  }
  return json{{"scale", to_string(spec.scale)},
              {"treatment_type", to_string(spec.treatment_type)},
              {"stages", stages}};
}

ModelSpec spec_from_json(const json& j) {
  reject_unknown(j, {"scale", "treatment_type", "stages"}, "spec");
  ModelSpec spec;
  if (j.contains("scale")) spec.scale = parse_scale(j.at("scale").get<std::string>());
  if (j.contains("treatment_type")) {
    spec.treatment_type = parse_treatment_type(j.at("treatment_type").get<std::string>());
  }
  for (const json& st : j.at("stages")) {
    reject_unknown(st, {"blip", "treatment_free", "treatment", "blip_quadratic", "dose_range"}, "stage");
    StageSpec s;
    s.blip = terms_from_json(st.at("blip"));
    s.treatment_free = terms_from_json(st.at("treatment_free"));
    s.treatment = terms_from_json(st.at("treatment"));
    if (st.contains("blip_quadratic")) s.blip_quadratic = terms_from_json(st.at("blip_quadratic"), false);
    if (st.contains("dose_range")) {
      const auto r = st.at("dose_range").get<std::vector<double>>();
      if (r.size() != 2) throw SpecificationError("dose_range must be [lo, hi]");
      s.dose_range = DoseRange{r[0], r[1]};
    }
    spec.stages.push_back(std::move(s));
  }
  return spec;
}

json scenario_to_json(const Scenario& s) {
  json psi = json::array();
  for (const VectorXd& v : s.psi_true) psi.push_back(std::vector<double>(v.data(), v.data() + v.size()));
  json out{{"kind", to_string(s.kind)},
           {"n", s.n},
           {"psi_true", psi},
           {"error", to_string(s.error)},
           {"zero_prob_target", s.zero_prob_target},
           {"covariate_correlation", s.covariate_correlation},
           {"seed", s.seed}};
  if (s.beta0) out["beta0"] = *s.beta0;
  return out;
}

Scenario scenario_from_json(const json& j) {
  reject_unknown(j, {"kind", "n", "psi_true", "error", "zero_prob_target", "covariate_correlation",
                     "beta0", "seed"},
                 "scenario");
  Scenario s;
  s.kind = parse_scenario_kind(j.at("kind").get<std::string>());
  s.n = j.value("n", s.n);
  for (const json& v : j.at("psi_true")) {
    const auto coef = v.get<std::vector<double>>();
    s.psi_true.push_back(Eigen::Map<const VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size())));
  }
  if (j.contains("error")) s.error = parse_error_dist(j.at("error").get<std::string>());
  s.zero_prob_target = j.value("zero_prob_target", s.zero_prob_target);
  s.covariate_correlation = j.value("covariate_correlation", s.covariate_correlation);
  if (j.contains("beta0")) s.beta0 = j.at("beta0").get<double>();
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace

std::string dump_config(const RunConfig& c) {
  json out;
  out["command"] = to_string(c.command);
  if (c.dataset_path) out["dataset"] = *c.dataset_path;
  if (!c.spec.stages.empty()) out["spec"] = spec_to_json(c.spec);
  out["output"] = json{{"path", c.output_path}, {"format", to_string(c.format)}};
  out["seed"] = c.seed;
  out["irls"] = json{{"eps_eta", c.fit.irls.eps_eta},
                     {"max_iter", c.fit.irls.max_iter},
                     {"damping", c.fit.irls.damping},
                     {"zero_replacement", c.fit.irls.zero_replacement},
                     {"refine", c.fit.irls.refine},
                     {"equation", to_string(c.fit.irls.equation)}};
  out["logistic"] = json{{"tolerance", c.fit.logistic.tolerance},
                         {"max_iter", c.fit.logistic.max_iter},
                         {"boundary", c.fit.logistic.boundary},
                         {"max_coef_norm", c.fit.logistic.max_coef_norm}};
  json cand_terms = json::array();
  for (const auto& stage : c.candidate_terms) {
    json labels = json::array();
    for (const Term& t : stage) labels.push_back(t.label());
    cand_terms.push_back(labels);
  }
  json cand_models = json::array();
  for (const auto& stage : c.candidate_models) {
    json models = json::array();
    for (const TermList& t : stage) models.push_back(terms_to_json(t));
    cand_models.push_back(models);
  }
  json frozen = json::object();
  for (const auto& [stage, model] : c.frozen) frozen[std::to_string(stage)] = terms_to_json(model);
  out["selection"] = json{{"direction", to_string(c.direction)},
                          {"criterion", to_string(c.criterion)},
                          {"significance", c.significance},
                          {"candidate_terms", cand_terms},
                          {"candidate_models", cand_models},
                          {"frozen", frozen}};
  json sim{{"reps", c.reps},
           {"analysis", to_string(c.analysis)},
           {"stage2_policy", to_string(c.stage2_policy)},
           {"threads", c.threads}};
  if (c.preset) sim["preset"] = *c.preset;
  if (c.scenario) sim["scenario"] = scenario_to_json(*c.scenario);
  out["simulation"] = sim;
  return out.dump(2);
}

RunConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    // nlohmann reports a byte offset; convert it to line and column.
    std::size_t line = 1, column = 1;
    for (std::size_t k = 0; k + 1 < e.byte && k < text.size(); ++k) {
      if (text[k] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ParseError("invalid JSON configuration", line, column);
  }
  if (!j.is_object()) throw ParseError("configuration must be a JSON object", 1, 1);

  RunConfig c;
  try {
    reject_unknown(j, {"command", "dataset", "spec", "output", "seed", "irls", "logistic", "selection",
                       "simulation"},
                   "configuration");
    if (j.contains("command")) c.command = parse_command(j.at("command").get<std::string>());
    if (j.contains("dataset")) c.dataset_path = j.at("dataset").get<std::string>();
    if (j.contains("spec")) c.spec = spec_from_json(j.at("spec"));
    if (j.contains("output")) {
      const json& o = j.at("output");
      reject_unknown(o, {"path", "format"}, "output");
      c.output_path = o.value("path", std::string());
      if (o.contains("format")) c.format = parse_output_format(o.at("format").get<std::string>());
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("irls")) {
      const json& o = j.at("irls");
      reject_unknown(o, {"eps_eta", "max_iter", "damping", "zero_replacement", "refine", "equation"},
                     "irls");
      c.fit.irls.eps_eta = o.value("eps_eta", c.fit.irls.eps_eta);
      c.fit.irls.max_iter = o.value("max_iter", c.fit.irls.max_iter);
      c.fit.irls.damping = o.value("damping", c.fit.irls.damping);
      c.fit.irls.zero_replacement = o.value("zero_replacement", c.fit.irls.zero_replacement);
      c.fit.irls.refine = o.value("refine", c.fit.irls.refine);
      if (o.contains("equation")) {
        c.fit.irls.equation = parse_loglinear_equation(o.at("equation").get<std::string>());
      }
    }
    if (j.contains("logistic")) {
      const json& o = j.at("logistic");
      reject_unknown(o, {"tolerance", "max_iter", "boundary", "max_coef_norm"}, "logistic");
      c.fit.logistic.tolerance = o.value("tolerance", c.fit.logistic.tolerance);
      c.fit.logistic.max_iter = o.value("max_iter", c.fit.logistic.max_iter);
      c.fit.logistic.boundary = o.value("boundary", c.fit.logistic.boundary);
      c.fit.logistic.max_coef_norm = o.value("max_coef_norm", c.fit.logistic.max_coef_norm);
    }
    if (j.contains("selection")) {
      const json& o = j.at("selection");
      reject_unknown(o, {"direction", "criterion", "significance", "candidate_terms", "candidate_models", "frozen"},
                     "selection");
      if (o.contains("direction")) c.direction = parse_direction(o.at("direction").get<std::string>());
      if (o.contains("criterion")) c.criterion = parse_criterion(o.at("criterion").get<std::string>());
      c.significance = o.value("significance", c.significance);
      if (o.contains("candidate_terms")) {
        for (const json& stage : o.at("candidate_terms")) {
          std::vector<Term> terms;
          for (const json& label : stage) terms.push_back(Term::parse(label.get<std::string>()));
          c.candidate_terms.push_back(std::move(terms));
        }
      }
      if (o.contains("candidate_models")) {
        for (const json& stage : o.at("candidate_models")) {
          std::vector<TermList> models;
          for (const json& m : stage) models.push_back(terms_from_json(m));
          c.candidate_models.push_back(std::move(models));
        }
      }
      if (o.contains("frozen")) {
        for (const auto& [key, value] : o.at("frozen").items()) {
          int stage = 0;
          const auto res = std::from_chars(key.data(), key.data() + key.size(), stage);
          if (res.ec != std::errc() || res.ptr != key.data() + key.size() || stage < 1) {
            throw SpecificationError("frozen keys must be stage numbers, got '" + key + "'");
          }
          c.frozen[stage] = terms_from_json(value);
        }
      }
    }
    if (j.contains("simulation")) {
      const json& o = j.at("simulation");
      reject_unknown(o, {"reps", "analysis", "stage2_policy", "threads", "preset", "scenario"}, "simulation");
      c.reps = o.value("reps", c.reps);
      if (o.contains("analysis")) c.analysis = parse_analysis_kind(o.at("analysis").get<std::string>());
      if (o.contains("stage2_policy")) {
        c.stage2_policy = parse_stage2_policy(o.at("stage2_policy").get<std::string>());
      }
      c.threads = o.value("threads", c.threads);
      if (o.contains("preset")) c.preset = o.at("preset").get<std::string>();
      if (o.contains("scenario")) c.scenario = scenario_from_json(o.at("scenario"));
    }
  } catch (const json::exception& e) {
    throw SpecificationError(std::string("invalid configuration: ") + e.what());
  }
  return c;
}

RunConfig read_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'", 0, 0);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace gestdtr
