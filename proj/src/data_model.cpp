#include "gestdtr/data_model.hpp"

#include <cctype>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr {

const char* to_string(Scale scale) {
  return scale == Scale::linear ? "linear" : "loglinear";
}

const char* to_string(TreatmentType type) {
  return type == TreatmentType::binary ? "binary" : "continuous";
}

Scale parse_scale(std::string_view text) {
  if (text == "linear") return Scale::linear;
  if (text == "loglinear" || text == "log-linear") return Scale::loglinear;
  throw SpecificationError("unknown outcome scale '" + std::string(text) + "'");
}

TreatmentType parse_treatment_type(std::string_view text) {
  if (text == "binary") return TreatmentType::binary;
  if (text == "continuous") return TreatmentType::continuous;
  throw SpecificationError("unknown treatment type '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

std::optional<std::size_t> Dataset::covariate_index(int stage,
                                                    std::string_view name) const {
  if (stage < 1 || stage > n_stages()) return std::nullopt;
  const auto& names = covariate_names[static_cast<std::size_t>(stage - 1)];
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

VectorXd Dataset::outcomes() const {
  VectorXd y(static_cast<Eigen::Index>(subjects.size()));
  for (std::size_t i = 0; i < subjects.size(); ++i) y(static_cast<Eigen::Index>(i)) = subjects[i].outcome;
  return y;
}

VectorXd Dataset::treatments(int stage) const {
  VectorXd a(static_cast<Eigen::Index>(subjects.size()));
  const auto s = static_cast<std::size_t>(stage - 1);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    a(static_cast<Eigen::Index>(i)) = subjects[i].stages.at(s).treatment;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Terms
// ---------------------------------------------------------------------------

std::string HistoryColumn::label() const {
  if (kind == Kind::treatment) return "a" + std::to_string(stage);
  return "x" + std::to_string(stage) + "_" + name;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

HistoryColumn parse_factor(std::string_view text, std::string_view whole) {
  auto fail = [&]() -> HistoryColumn {
    throw SpecificationError("cannot parse model term '" + std::string(whole) +
                             "': expected factors like x1_name or a1");
  };
  if (text.size() < 2 || (text[0] != 'x' && text[0] != 'a')) return fail();
  int stage = 0;
  const char* first = text.data() + 1;
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, stage);
  if (ec != std::errc{} || ptr == first || stage < 1) return fail();
  HistoryColumn col;
  col.stage = stage;
  if (text[0] == 'a') {
    if (ptr != last) return fail();
    col.kind = HistoryColumn::Kind::treatment;
    return col;
  }
  if (ptr == last || *ptr != '_' || ptr + 1 == last) return fail();
  col.kind = HistoryColumn::Kind::covariate;
  col.name = std::string(ptr + 1, last);
  return col;
}

}  // namespace

Term Term::parse(std::string_view text) {
  Term term;
  std::string_view rest = trim(text);
  if (rest.empty()) throw SpecificationError("empty model term");
  while (true) {
    const auto star = rest.find('*');
    term.factors.push_back(parse_factor(trim(rest.substr(0, star)), text));
    if (star == std::string_view::npos) break;
    rest = rest.substr(star + 1);
  }
  return term;
}

std::string Term::label() const {
  if (factors.empty()) return "1";
  std::string out;
  for (std::size_t k = 0; k < factors.size(); ++k) {
    if (k) out += '*';
    out += factors[k].label();
  }
  return out;
}

TermList TermList::parse(const std::vector<std::string>& labels, bool intercept) {
  TermList list;
  list.intercept = intercept;
  for (const auto& label : labels) list.terms.push_back(Term::parse(label));
  return list;
}

std::vector<std::string> TermList::labels() const {
  std::vector<std::string> out;
  if (intercept) out.emplace_back(kInterceptLabel);
  for (const auto& t : terms) out.push_back(t.label());
  return out;
}

std::string TermList::key() const {
  std::string out = intercept ? "1" : "0";
  for (const auto& t : terms) out += "+" + t.label();
  return out;
}

// ---------------------------------------------------------------------------
// Design assembly
// ---------------------------------------------------------------------------

namespace {

struct ResolvedFactor {
  bool treatment;
  std::size_t stage;  // 0-based
  std::size_t index;  // covariate index
};

std::vector<std::vector<ResolvedFactor>> resolve(const Dataset& dataset,
                                                 const TermList& terms, int stage,
                                                 const char* role) {
  std::vector<std::vector<ResolvedFactor>> out;
  out.reserve(terms.terms.size());
  for (const auto& term : terms.terms) {
    std::vector<ResolvedFactor> factors;
    for (const auto& f : term.factors) {
      auto fail = [&](const std::string& why) {
        std::ostringstream msg;
        msg << "stage " << stage << " " << role << " term '" << term.label()
            << "': " << why;
        throw SpecificationError(msg.str());
      };
      if (f.kind == HistoryColumn::Kind::treatment) {
        if (f.stage >= stage) fail(f.label() + " is not available before decision " + std::to_string(stage));
        if (f.stage > dataset.n_stages()) fail("dataset has no stage " + std::to_string(f.stage));
        factors.push_back({true, static_cast<std::size_t>(f.stage - 1), 0});
      } else {
        if (f.stage > stage) fail(f.label() + " is not available before decision " + std::to_string(stage));
        auto idx = dataset.covariate_index(f.stage, f.name);
        if (!idx) fail("no covariate named " + f.label());
        factors.push_back({false, static_cast<std::size_t>(f.stage - 1), *idx});
      }
    }
    out.push_back(std::move(factors));
  }
  return out;
}

}  // namespace

void check_terms(const Dataset& dataset, const TermList& terms, int stage,
                 const char* role) {
  (void)resolve(dataset, terms, stage, role);
}

void check_spec(const Dataset& dataset, const ModelSpec& spec) {
  if (spec.n_stages() != dataset.n_stages()) {
    std::ostringstream msg;
    msg << "model specification has " << spec.n_stages()
        << " stages but the dataset has " << dataset.n_stages();
    throw SpecificationError(msg.str());
  }
  for (int j = 1; j <= spec.n_stages(); ++j) {
    const StageSpec& s = spec.stage(j);
    check_terms(dataset, s.blip, j, "blip");
    check_terms(dataset, s.treatment_free, j, "treatment-free");
    check_terms(dataset, s.treatment, j, "treatment");
    if (spec.treatment_type == TreatmentType::continuous) {
      check_terms(dataset, s.blip_quadratic, j, "quadratic blip");
      if (!s.dose_range || !(s.dose_range->hi > s.dose_range->lo)) {
        throw SpecificationError("stage " + std::to_string(j) +
                                 ": continuous treatments require a non-degenerate dose range");
      }
    } else if (s.blip_quadratic.columns() != 0) {
      throw SpecificationError("stage " + std::to_string(j) +
                               ": quadratic blip terms require a continuous treatment");
    }
    if (spec.scale == Scale::loglinear && spec.treatment_type == TreatmentType::continuous) {
      throw SpecificationError("log-linear blips are only supported for binary treatments");
    }
  }
}

MatrixXd build_columns(const Dataset& dataset, const TermList& terms, int stage,
                       const char* role) {
  if (stage < 1 || stage > dataset.n_stages()) {
    throw SpecificationError("stage " + std::to_string(stage) + " is out of range");
  }
  const auto resolved = resolve(dataset, terms, stage, role);
  const auto n = static_cast<Eigen::Index>(dataset.size());
  MatrixXd out(n, static_cast<Eigen::Index>(terms.columns()));
  const Eigen::Index offset = terms.intercept ? 1 : 0;
  if (terms.intercept) out.col(0).setOnes();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Subject& subj = dataset.subjects[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < resolved.size(); ++t) {
      double v = 1.0;
      for (const auto& f : resolved[t]) {
        const StageRecord& rec = subj.stages.at(f.stage);
        v *= f.treatment ? rec.treatment : rec.covariates.at(f.index);
      }
      out(i, offset + static_cast<Eigen::Index>(t)) = v;
    }
  }
  return out;
}

DesignMatrices build_design(const Dataset& dataset, const ModelSpec& spec, int stage) {
  if (stage < 1 || stage > spec.n_stages()) {
    throw SpecificationError("stage " + std::to_string(stage) + " is out of range");
  }
  const StageSpec& s = spec.stage(stage);
  DesignMatrices d;
  d.h_psi = build_columns(dataset, s.blip, stage, "blip");
  d.h_psi2 = build_columns(dataset, s.blip_quadratic, stage, "quadratic blip");
  d.h_beta = build_columns(dataset, s.treatment_free, stage, "treatment-free");
  d.h_alpha = build_columns(dataset, s.treatment, stage, "treatment");
  d.a = dataset.treatments(stage);
  return d;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

std::string ValidationReport::summary() const {
  std::ostringstream out;
  for (std::size_t k = 0; k < violations.size(); ++k) {
    const auto& v = violations[k];
    if (k) out << "; ";
    if (v.row) out << "row " << (*v.row + 1) << ": ";
    if (v.stage) out << "stage " << *v.stage << ": ";
    out << v.message;
  }
  return out.str();
}

ValidationReport validate_dataset(const Dataset& dataset, const ModelSpec& spec) {
  ValidationReport report;
  auto add = [&](std::string msg, std::optional<std::size_t> row = std::nullopt,
                 std::optional<int> stage = std::nullopt) {
    report.violations.push_back({std::move(msg), row, stage});
  };
  const int J = dataset.n_stages();
  if (dataset.subjects.empty()) add("dataset has no subjects");
  if (J < 1) add("dataset has no stages");
  if (spec.n_stages() != J) {
    add("model specification has " + std::to_string(spec.n_stages()) +
        " stages but the dataset has " + std::to_string(J));
  }
  for (std::size_t i = 0; i < dataset.subjects.size(); ++i) {
    const Subject& subj = dataset.subjects[i];
    if (static_cast<int>(subj.stages.size()) != J) {
      add("ragged trajectory: " + std::to_string(subj.stages.size()) + " stages, expected " +
              std::to_string(J),
          i);
      continue;
    }
    for (int j = 1; j <= J; ++j) {
      const StageRecord& rec = subj.stages[static_cast<std::size_t>(j - 1)];
      const auto& names = dataset.covariate_names[static_cast<std::size_t>(j - 1)];
      if (rec.covariates.size() != names.size()) {
        add("ragged stage: " + std::to_string(rec.covariates.size()) +
                " covariates, expected " + std::to_string(names.size()),
            i, j);
      }
      for (std::size_t c = 0; c < rec.covariates.size(); ++c) {
        if (!std::isfinite(rec.covariates[c])) {
          const std::string name = c < names.size() ? names[c] : std::to_string(c);
          add("non-finite covariate x" + std::to_string(j) + "_" + name, i, j);
        }
      }
      if (!std::isfinite(rec.treatment)) {
        add("non-finite treatment", i, j);
      } else if (spec.treatment_type == TreatmentType::binary && rec.treatment != 0.0 &&
                 rec.treatment != 1.0) {
        std::ostringstream msg;
        msg << "treatment " << rec.treatment << " is not binary";
        add(msg.str(), i, j);
      }
    }
    if (!std::isfinite(subj.outcome)) {
      add("non-finite outcome", i);
    } else if (spec.scale == Scale::loglinear && subj.outcome < 0.0) {
      std::ostringstream msg;
      msg << "outcome " << subj.outcome << " is negative under the log-linear scale";
      add(msg.str(), i);
    }
  }
  return report;
}

}  // namespace gestdtr
