#include "gestdtr/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include "gestdtr/errors.hpp"

namespace gestdtr {

namespace {

constexpr int kStages = 2;
constexpr int kMaxCovariates = 3;

const std::string kCovariateNames[kMaxCovariates] = {"1", "2", "3"};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string format_fixed(double v, int digits = 3) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string format_general(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

const char* to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::loglinear_twostage: return "loglinear_twostage";
    case ScenarioKind::continuous_twostage: return "continuous_twostage";
    case ScenarioKind::discrete_qic: return "discrete_qic";
  }
  return "?";
}

const char* to_string(ErrorDist dist) {
  return dist == ErrorDist::centered_lognormal ? "centered_lognormal" : "standard_normal";
}

ScenarioKind parse_scenario_kind(std::string_view text) {
  if (text == "loglinear_twostage") return ScenarioKind::loglinear_twostage;
  if (text == "continuous_twostage") return ScenarioKind::continuous_twostage;
  if (text == "discrete_qic") return ScenarioKind::discrete_qic;
  throw SpecificationError("unknown scenario kind '" + std::string(text) + "'");
}

ErrorDist parse_error_dist(std::string_view text) {
  if (text == "centered_lognormal") return ErrorDist::centered_lognormal;
  if (text == "standard_normal") return ErrorDist::standard_normal;
  throw SpecificationError("unknown error distribution '" + std::string(text) + "'");
}

const char* to_string(Stage2Policy policy) {
  switch (policy) {
    case Stage2Policy::correct: return "correct";
    case Stage2Policy::recommended: return "recommended";
    case Stage2Policy::intercept: return "intercept";
  }
  return "?";
}

Stage2Policy parse_stage2_policy(std::string_view text) {
  if (text == "correct") return Stage2Policy::correct;
  if (text == "recommended") return Stage2Policy::recommended;
  if (text == "intercept") return Stage2Policy::intercept;
  throw SpecificationError("unknown stage-2 policy '" + std::string(text) + "'");
}

std::string SelectionMethod::label() const {
  std::string out = criterion == Criterion::qic ? "QIC_G" : "Wald";
  switch (direction) {
    case Direction::forward: return out + "(F)";
    case Direction::backward: return out + "(B)";
    case Direction::exhaustive: return out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

int Scenario::covariates_per_stage() const {
  return kind == ScenarioKind::loglinear_twostage ? 1 : kMaxCovariates;
}

void Scenario::validate() const {
  if (n < 2) throw SpecificationError("scenario sample size must be at least 2");
  if (psi_true.size() != static_cast<std::size_t>(kStages)) {
    throw SpecificationError("scenario needs blip parameters for both stages");
  }
  for (const VectorXd& psi : psi_true) {
    if (psi.size() != covariates_per_stage() + 1) {
      std::ostringstream msg;
      msg << to_string(kind) << " blips need " << covariates_per_stage() + 1
          << " coefficients per stage, got " << psi.size();
      throw SpecificationError(msg.str());
    }
    if (!psi.allFinite()) throw SpecificationError("blip parameters must be finite");
  }
  if (!(covariate_correlation >= 0.0 && covariate_correlation < 1.0)) {
    throw SpecificationError("covariate correlation must lie in [0, 1)");
  }
  if (has_poisson_outcome() && !(zero_prob_target > 0.0 && zero_prob_target < 1.0)) {
    throw SpecificationError("zero_prob_target must lie in (0, 1)");
  }
  if (beta0 && !std::isfinite(*beta0)) throw SpecificationError("beta0 must be finite");
}

bool operator==(const Scenario& a, const Scenario& b) {
  if (a.psi_true.size() != b.psi_true.size()) return false;
  for (std::size_t k = 0; k < a.psi_true.size(); ++k) {
    if (a.psi_true[k].size() != b.psi_true[k].size() || a.psi_true[k] != b.psi_true[k]) {
      return false;
    }
  }
  return a.kind == b.kind && a.n == b.n && a.error == b.error &&
         a.zero_prob_target == b.zero_prob_target &&
         a.covariate_correlation == b.covariate_correlation && a.beta0 == b.beta0 &&
         a.seed == b.seed;
}

namespace {

VectorXd with_intercept(double intercept, const std::vector<double>& coefficients) {
  VectorXd psi(static_cast<Eigen::Index>(coefficients.size() + 1));
  psi(0) = intercept;
  for (std::size_t k = 0; k < coefficients.size(); ++k) {
    psi(static_cast<Eigen::Index>(k + 1)) = coefficients[k];
  }
  return psi;
}

}  // namespace

Scenario loglinear_scenario(std::size_t n, double zero_prob_target) {
  Scenario s;
  s.kind = ScenarioKind::loglinear_twostage;
  s.n = n;
  s.psi_true = {with_intercept(0.5, {-0.5}), with_intercept(0.5, {-0.5})};
  s.zero_prob_target = zero_prob_target;
  return s;
}

Scenario continuous_scenario(std::size_t n, const std::vector<double>& stage1,
                             const std::vector<double>& stage2, ErrorDist error,
                             double correlation) {
  Scenario s;
  s.kind = ScenarioKind::continuous_twostage;
  s.n = n;
  s.psi_true = {with_intercept(1.0, stage1), with_intercept(1.0, stage2)};
  s.error = error;
  s.covariate_correlation = correlation;
  return s;
}

Scenario discrete_scenario(std::size_t n, const std::vector<double>& stage1,
                           const std::vector<double>& stage2) {
  Scenario s;
  s.kind = ScenarioKind::discrete_qic;
  s.n = n;
  s.psi_true = {with_intercept(0.5, stage1), with_intercept(0.5, stage2)};
  s.zero_prob_target = 0.10;
  return s;
}

std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t rep) {
  return splitmix64(splitmix64(seed) ^ (rep * 0xd1342543de82ef95ULL + 1ULL));
}

namespace {

struct History {
  double x[kStages][kMaxCovariates] = {};
  double a[kStages] = {};
  double regret = 0.0;  // sum over stages of gamma(opt) - gamma(obs)
};

History draw_history(const Scenario& s, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const int k_max = s.covariates_per_stage();
  const double rho = s.covariate_correlation;
  const double shared_sd = std::sqrt(rho);
  const double own_sd = std::sqrt(1.0 - rho);
  History h;
  for (int j = 0; j < kStages; ++j) {
    double mean[kMaxCovariates] = {};
    switch (s.kind) {
      case ScenarioKind::loglinear_twostage:
      case ScenarioKind::continuous_twostage:
        for (int k = 0; k < k_max; ++k) mean[k] = j == 0 ? 0.0 : h.a[0];
        break;
      case ScenarioKind::discrete_qic:
        mean[0] = j == 0 ? 1.0 : h.a[0];
        mean[1] = -1.0;
        mean[2] = 1.0;
        break;
    }
    const double common = rho > 0.0 ? normal(rng) : 0.0;
    for (int k = 0; k < k_max; ++k) {
      h.x[j][k] = mean[k] + shared_sd * common + own_sd * normal(rng);
    }
    double lp = h.x[j][0];
    if (s.kind == ScenarioKind::continuous_twostage) lp = h.x[j][0] + h.x[j][1] + h.x[j][2];
    h.a[j] = uniform(rng) < expit(lp) ? 1.0 : 0.0;

    const VectorXd& psi = s.psi_true[static_cast<std::size_t>(j)];
    double contrast = psi(0);
    for (int k = 0; k < k_max; ++k) contrast += psi(k + 1) * h.x[j][k];
    const double optimal = contrast > 0.0 ? 1.0 : 0.0;
    h.regret += (optimal - h.a[j]) * contrast;
  }
  return h;
}

// log(lambda) - beta0 for the Poisson kinds.
double log_rate_offset(const Scenario& s, const History& h) {
  if (s.kind == ScenarioKind::loglinear_twostage) return std::log(std::abs(h.x[0][0])) - h.regret;
  return -h.regret;
}

std::vector<double> draw_offsets(const Scenario& scenario, std::size_t draws,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> offsets(draws);
  for (std::size_t i = 0; i < draws; ++i) offsets[i] = log_rate_offset(scenario, draw_history(scenario, rng));
  return offsets;
}

double mean_zero_probability(const std::vector<double>& offsets, double beta0) {
  double total = 0.0;
  for (double o : offsets) total += std::exp(-std::exp(beta0 + o));
  return total / static_cast<double>(offsets.size());
}

}  // namespace

Dataset generate(const Scenario& scenario, std::mt19937_64& rng) {
  scenario.validate();
  if (scenario.has_poisson_outcome() && !scenario.beta0) {
    throw StateError("Poisson scenario has no beta0; calibrate it first");
  }
  const int k_max = scenario.covariates_per_stage();
  Dataset ds;
  ds.covariate_names.assign(kStages, std::vector<std::string>(kCovariateNames, kCovariateNames + k_max));
  ds.subjects.resize(scenario.n);

  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < scenario.n; ++i) {
    const History h = draw_history(scenario, rng);
    Subject& subject = ds.subjects[i];
    subject.id = std::to_string(i + 1);
    subject.stages.resize(kStages);
    for (int j = 0; j < kStages; ++j) {
      StageRecord& rec = subject.stages[static_cast<std::size_t>(j)];
      rec.covariates.assign(h.x[j], h.x[j] + k_max);
      rec.treatment = h.a[j];
    }
    if (scenario.has_poisson_outcome()) {
      const double lambda = std::exp(*scenario.beta0 + log_rate_offset(scenario, h));
      if (lambda > 0.0 && std::isfinite(lambda)) {
        std::poisson_distribution<long long> poisson(lambda);
        subject.outcome = static_cast<double>(poisson(rng));
      } else if (lambda > 0.0) {
        throw DivergenceError("Poisson rate overflow while generating outcomes");
      } else {
        subject.outcome = 0.0;
      }
    } else {
      const double z = normal(rng);
      const double eps =
          scenario.error == ErrorDist::centered_lognormal ? std::exp(z) - std::exp(0.5) : z;
      subject.outcome = -h.regret + eps;
    }
  }
  return ds;
}

Dataset generate(const Scenario& scenario) {
  std::mt19937_64 rng(scenario.seed);
  return generate(scenario, rng);
}

double zero_probability(const Scenario& scenario, double beta0, std::size_t draws,
                        std::uint64_t seed) {
  scenario.validate();
  if (!scenario.has_poisson_outcome()) {
    throw SpecificationError("zero probability is defined for Poisson scenarios only");
  }
  if (draws == 0) throw SpecificationError("zero_probability needs at least one draw");
  return mean_zero_probability(draw_offsets(scenario, draws, seed), beta0);
}

double calibrate_beta0(const Scenario& scenario, double target, std::pair<double, double> bracket,
                       std::size_t draws, std::uint64_t seed) {
  scenario.validate();
  if (!scenario.has_poisson_outcome()) {
    throw SpecificationError("beta0 calibration applies to Poisson scenarios only");
  }
  if (!(target > 0.0 && target < 1.0)) throw CalibrationError("target zero probability must lie in (0, 1)");
  if (!(bracket.first < bracket.second)) throw CalibrationError("calibration bracket is empty");
  if (draws == 0) throw CalibrationError("calibration needs at least one draw");

  const std::vector<double> offsets = draw_offsets(scenario, draws, seed);
  // P(Y = 0) decreases in beta0.
  double lo = bracket.first;
  double hi = bracket.second;
  const double at_lo = mean_zero_probability(offsets, lo);
  const double at_hi = mean_zero_probability(offsets, hi);
  if (!(at_lo >= target && at_hi <= target)) {
    std::ostringstream msg;
    msg << "P(Y = 0) = " << target << " is not reachable for beta0 in [" << lo << ", " << hi
        << "] (attainable range [" << at_hi << ", " << at_lo << "])";
    throw CalibrationError(msg.str());
  }
  for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_zero_probability(offsets, mid) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

TermList true_blip(const Scenario& scenario, int stage) {
  const VectorXd& psi = scenario.psi_true.at(static_cast<std::size_t>(stage - 1));
  TermList out;
  out.intercept = true;
  for (Eigen::Index k = 1; k < psi.size(); ++k) {
    if (psi(k) != 0.0) {
      out.terms.push_back(
          Term::parse("x" + std::to_string(stage) + "_" + kCovariateNames[k - 1]));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

namespace {

TermList terms(std::initializer_list<std::string> labels) {
  return TermList::parse(std::vector<std::string>(labels), true);
}

std::string cov(int stage, int k) { return "x" + std::to_string(stage) + "_" + kCovariateNames[k]; }

}  // namespace

ModelSpec default_spec(const Scenario& scenario) {
  scenario.validate();
  ModelSpec spec;
  spec.treatment_type = TreatmentType::binary;
  spec.stages.resize(kStages);
  switch (scenario.kind) {
    case ScenarioKind::loglinear_twostage:
      spec.scale = Scale::loglinear;
      for (int j = 1; j <= kStages; ++j) {
        StageSpec& st = spec.stage(j);
        st.blip = terms({cov(j, 0)});
        st.treatment_free = terms({cov(j, 0)});
        st.treatment = terms({cov(j, 0)});
      }
      break;
    case ScenarioKind::continuous_twostage:
      spec.scale = Scale::linear;
      for (int j = 1; j <= kStages; ++j) {
        StageSpec& st = spec.stage(j);
        st.blip = true_blip(scenario, j);
        st.treatment = terms({cov(j, 0), cov(j, 1), cov(j, 2)});
      }
      spec.stage(1).treatment_free = terms({cov(1, 0), cov(1, 1), cov(1, 2)});
      spec.stage(2).treatment_free =
          terms({cov(1, 0), cov(1, 1), cov(1, 2), "a1*" + cov(1, 0), "a1*" + cov(1, 1),
                 "a1*" + cov(1, 2), cov(2, 0), cov(2, 1), cov(2, 2)});
      break;
    case ScenarioKind::discrete_qic:
      spec.scale = Scale::loglinear;
      for (int j = 1; j <= kStages; ++j) {
        StageSpec& st = spec.stage(j);
        st.blip = true_blip(scenario, j);
        st.treatment_free = terms({cov(j, 0)});
        st.treatment = terms({cov(j, 0)});
      }
      break;
  }
  return spec;
}

FitAnalysis default_fit_analysis(const Scenario& scenario) {
  return FitAnalysis{default_spec(scenario), FitOptions{}};
}

SelectionAnalysis default_selection_analysis(const Scenario& scenario, Stage2Policy policy) {
  SelectionAnalysis out;
  out.base = default_spec(scenario);
  out.policy = policy;
  for (int j = 1; j <= kStages; ++j) {
    std::vector<Term> stage_terms;
    for (int k = 0; k < scenario.covariates_per_stage(); ++k) stage_terms.push_back(Term::parse(cov(j, k)));
    out.candidates.push_back(std::move(stage_terms));
  }
  return out;
}

namespace {

// Intercept-only, then x_j1, then x_j1 + x_j2, ... (nested).
std::vector<std::vector<TermList>> nested_candidates(const Scenario& scenario) {
  std::vector<std::vector<TermList>> out;
  for (int j = 1; j <= kStages; ++j) {
    std::vector<TermList> stage;
    TermList model;
    stage.push_back(model);
    for (int k = 0; k < scenario.covariates_per_stage(); ++k) {
      model.terms.push_back(Term::parse(cov(j, k)));
      stage.push_back(model);
    }
    out.push_back(std::move(stage));
  }
  return out;
}

// Every subset of the stage covariates, by size and then lexicographically.
std::vector<std::vector<TermList>> all_subsets(const Scenario& scenario) {
  std::vector<std::vector<TermList>> out;
  const int k_max = scenario.covariates_per_stage();
  for (int j = 1; j <= kStages; ++j) {
    std::vector<std::vector<int>> subsets;
    for (unsigned mask = 0; mask < (1u << k_max); ++mask) {
      std::vector<int> s;
      for (int k = 0; k < k_max; ++k) {
        if (mask & (1u << k)) s.push_back(k);
      }
      subsets.push_back(std::move(s));
    }
    std::stable_sort(subsets.begin(), subsets.end(),
                     [](const auto& a, const auto& b) {
                       return a.size() != b.size() ? a.size() < b.size() : a < b;
                     });
    std::vector<TermList> stage;
    for (const auto& s : subsets) {
      TermList model;
      for (int k : s) model.terms.push_back(Term::parse(cov(j, k)));
      stage.push_back(std::move(model));
    }
    out.push_back(std::move(stage));
  }
  return out;
}

}  // namespace

ExhaustiveAnalysis default_exhaustive_analysis(const Scenario& scenario) {
  return ExhaustiveAnalysis{default_spec(scenario), nested_candidates(scenario), FitOptions{}};
}

TraceAnalysis default_trace_analysis(const Scenario& scenario) {
  return TraceAnalysis{default_spec(scenario), all_subsets(scenario), FitOptions{}};
}

// ---------------------------------------------------------------------------
// Replication harness
// ---------------------------------------------------------------------------

double SelectionTally::share(const std::string& key) const {
  if (total == 0) return 0.0;
  const auto it = chosen.find(key);
  return it == chosen.end() ? 0.0 : static_cast<double>(it->second) / total;
}

const SelectionTally* ReplicationReport::tally(int stage, const std::string& method,
                                               const std::string& truth) const {
  for (const SelectionTally& t : selection) {
    if (t.stage == stage && t.method == method && t.truth == truth) return &t;
  }
  return nullptr;
}

const TraceSummary* ReplicationReport::trace(int stage, const std::string& model) const {
  for (const TraceSummary& t : traces) {
    if (t.stage == stage && t.model == model) return &t;
  }
  return nullptr;
}

unsigned resolve_threads(const RunOptions& opts) {
  unsigned threads = opts.threads;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("GESTDTR_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) {
      threads = std::min(threads, static_cast<unsigned>(cap));
    }
  }
  return threads;
}

namespace {

struct Pick {
  int stage = 0;
  std::string method;
  std::string truth;
  std::string chosen;
};

struct KValue {
  int stage = 0;
  std::string model;
  double k = 0.0;
};

struct RepOutcome {
  bool ok = false;
  std::string failure;
  double zero_fraction = 0.0;
  std::vector<double> psi;
  std::vector<double> se;
  std::vector<double> k;  // trace penalty of the parameter's stage
  std::vector<Pick> picks;
  std::vector<KValue> ks;
};

struct ParameterLayout {
  std::vector<std::string> labels;
  std::vector<double> truth;
};

ParameterLayout parameter_layout(const Scenario& scenario, const ModelSpec& spec) {
  ParameterLayout out;
  for (int j = 1; j <= spec.n_stages(); ++j) {
    const TermList& blip = spec.stage(j).blip;
    const VectorXd& psi = scenario.psi_true.at(static_cast<std::size_t>(j - 1));
    if (blip.intercept) {
      out.labels.push_back("psi" + std::to_string(j) + "_0");
      out.truth.push_back(psi(0));
    }
    for (const Term& t : blip.terms) {
      double truth = std::numeric_limits<double>::quiet_NaN();
      std::string label = "psi" + std::to_string(j) + "_" + t.label();
      if (t.factors.size() == 1 && t.factors[0].kind == HistoryColumn::Kind::covariate &&
          t.factors[0].stage == j) {
        for (int k = 0; k < scenario.covariates_per_stage(); ++k) {
          if (t.factors[0].name == kCovariateNames[k]) {
            truth = psi(k + 1);
            label = "psi" + std::to_string(j) + "_" + kCovariateNames[k];
          }
        }
      }
      out.labels.push_back(label);
      out.truth.push_back(truth);
    }
  }
  return out;
}

void require_two_stages(const ModelSpec& spec) {
  if (spec.n_stages() != kStages) throw SpecificationError("simulation analyses are two-stage");
}

void run_fit(const Dataset& ds, const FitAnalysis& a, RepOutcome& out) {
  const DtrFit fit = fit_dtr(ds, a.spec, a.options);
  if (!fit.converged) {
    out.failure = "IRLS non-convergence at stage " + std::to_string(*fit.failed_stage);
    return;
  }
  for (int j = 1; j <= a.spec.n_stages(); ++j) {
    const StageResult& r = fit.stage(j);
    const VectorXd psi = r.psi();
    for (Eigen::Index k = 0; k < psi.size(); ++k) {
      out.psi.push_back(psi(k));
      out.se.push_back(r.inference ? r.inference->se(k) : std::numeric_limits<double>::quiet_NaN());
      out.k.push_back(r.inference ? r.inference->K : std::numeric_limits<double>::quiet_NaN());
    }
  }
  out.ok = true;
}

void fix_or_throw(StagewiseFitter& fitter, const TermList& model) {
  const StageResult& r = fitter.fix(model);
  if (!r.converged()) {
    throw SelectionError("stage " + std::to_string(r.stage) + " model " + model.key() +
                         " did not converge");
  }
}

void run_selection(const Scenario& s, const Dataset& ds, const SelectionAnalysis& a,
                   RepOutcome& out) {
  require_two_stages(a.base);
  StagewiseFitter base(ds, a.base, a.options);
  const TermList truth1 = true_blip(s, 1);
  const TermList truth2 = true_blip(s, 2);
  const double alpha = a.significance;
  std::vector<TrailEntry> trail;

  std::vector<TermList> chosen2;
  for (const SelectionMethod& m : a.methods) {
    chosen2.push_back(
        select_stage_stepwise(base, a.candidates[1], m.direction, m.criterion, alpha, trail));
    out.picks.push_back({2, m.label(), truth2.key(), chosen2.back().key()});
  }

  std::map<std::string, StagewiseFitter> stage1;
  auto fitter_for = [&](const TermList& model) -> StagewiseFitter& {
    auto it = stage1.find(model.key());
    if (it == stage1.end()) {
      StagewiseFitter f = base;
      fix_or_throw(f, model);
      it = stage1.emplace(model.key(), std::move(f)).first;
    }
    return it->second;
  };
  for (std::size_t m = 0; m < a.methods.size(); ++m) {
    const TermList& fixed = a.policy == Stage2Policy::correct   ? truth2
                            : a.policy == Stage2Policy::intercept ? TermList{}
                                                                  : chosen2[m];
    StagewiseFitter& f = fitter_for(fixed);
    const TermList c1 = select_stage_stepwise(f, a.candidates[0], a.methods[m].direction,
                                              a.methods[m].criterion, alpha, trail);
    out.picks.push_back({1, a.methods[m].label(), truth1.key(), c1.key()});
  }
  out.ok = true;
}

// Selects among candidates at fitter.next_stage(); reports whether every
// candidate converged.
std::pair<std::optional<TermList>, bool> exhaustive_stage(StagewiseFitter& fitter,
                                                          const std::vector<TermList>& candidates) {
  std::vector<TrailEntry> trail;
  std::optional<TermList> chosen;
  try {
    chosen = select_stage_exhaustive(fitter, candidates, trail);
  } catch (const SelectionError&) {
  }
  bool all = true;
  for (const TrailEntry& e : trail) all = all && e.decision != "failed";
  return {chosen, all};
}

void run_exhaustive(const Scenario& s, const Dataset& ds, const ExhaustiveAnalysis& a,
                    RepOutcome& out) {
  require_two_stages(a.base);
  StagewiseFitter base(ds, a.base, a.options);
  const TermList truth1 = true_blip(s, 1);
  const TermList truth2 = true_blip(s, 2);

  const auto [chosen2, all2] = exhaustive_stage(base, a.candidates[1]);
  if (chosen2) {
    out.picks.push_back({2, "QIC_G(converged candidates)", truth2.key(), chosen2->key()});
    if (all2) out.picks.push_back({2, "QIC_G", truth2.key(), chosen2->key()});
  }
  StagewiseFitter f = base;
  fix_or_throw(f, truth2);
  const auto [chosen1, all1] = exhaustive_stage(f, a.candidates[0]);
  if (chosen1) {
    out.picks.push_back({1, "QIC_G(converged candidates)", truth1.key(), chosen1->key()});
    if (all1 && all2) out.picks.push_back({1, "QIC_G", truth1.key(), chosen1->key()});
  }
  if (all1 && all2) {
    out.ok = true;
  } else {
    out.failure = "IRLS non-convergence for a candidate model";
  }
}

void collect_k(StagewiseFitter& fitter, const std::vector<TermList>& candidates, int stage,
               RepOutcome& out) {
  for (const TermList& model : candidates) {
    try {
      const StageResult& r = fitter.evaluate(model);
      if (r.converged() && r.inference) out.ks.push_back({stage, model.key(), r.inference->K});
    } catch (const GestError&) {
    }
  }
}

void run_trace(const Scenario& s, const Dataset& ds, const TraceAnalysis& a, RepOutcome& out) {
  require_two_stages(a.base);
  StagewiseFitter base(ds, a.base, a.options);
  collect_k(base, a.candidates[1], 2, out);
  StagewiseFitter f = base;
  fix_or_throw(f, true_blip(s, 2));
  collect_k(f, a.candidates[0], 1, out);
  out.ok = true;
}

RepOutcome run_one(const Scenario& scenario, std::uint64_t seed, const Analysis& analysis) {
  RepOutcome out;
  try {
    std::mt19937_64 rng(seed);
    const Dataset ds = generate(scenario, rng);
    std::size_t zeros = 0;
    for (const Subject& subj : ds.subjects) zeros += subj.outcome == 0.0;
    out.zero_fraction = static_cast<double>(zeros) / static_cast<double>(ds.size());
    std::visit(
        [&](const auto& a) {
          using A = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<A, FitAnalysis>) {
            run_fit(ds, a, out);
          } else if constexpr (std::is_same_v<A, SelectionAnalysis>) {
            run_selection(scenario, ds, a, out);
          } else if constexpr (std::is_same_v<A, ExhaustiveAnalysis>) {
            run_exhaustive(scenario, ds, a, out);
          } else {
            run_trace(scenario, ds, a, out);
          }
        },
        analysis);
  } catch (const GestError& e) {
    out.ok = false;
    out.failure = std::string(e.kind()) + " error";
  } catch (const std::exception& e) {
    out.ok = false;
    out.failure = "internal error";
  }
  return out;
}

void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

SelectionTally& tally_for(std::vector<SelectionTally>& tallies, int stage, const std::string& method,
                          const std::string& truth) {
  for (SelectionTally& t : tallies) {
    if (t.stage == stage && t.method == method && t.truth == truth) return t;
  }
  SelectionTally t;
  t.stage = stage;
  t.method = method;
  t.truth = truth;
  tallies.push_back(std::move(t));
  return tallies.back();
}


}  // namespace

ReplicationReport run_replications(const Scenario& scenario_in, std::size_t n_reps,
                                   const Analysis& analysis, const RunOptions& opts) {
  if (n_reps == 0) throw SpecificationError("n_reps must be at least 1");
  Scenario scenario = scenario_in;
  scenario.validate();
  if (scenario.has_poisson_outcome() && !scenario.beta0) {
    scenario.beta0 = calibrate_beta0(scenario, scenario.zero_prob_target, {-5.0, 10.0},
                                     1'000'000, splitmix64(scenario.seed ^ 0xca1b7a7eULL));
  }

  ReplicationReport report;
  report.scenario = scenario;
  report.beta0 = scenario.beta0;
  report.n_requested = n_reps;
  report.seeds.resize(n_reps);
  for (std::size_t r = 0; r < n_reps; ++r) report.seeds[r] = replication_seed(scenario.seed, r);

  std::vector<RepOutcome> outcomes(n_reps);
  parallel_for(n_reps, resolve_threads(opts), [&](std::size_t r) {
    outcomes[r] = run_one(scenario, report.seeds[r], analysis);
  });

  // Deterministic fold in replication order.
  std::optional<ParameterLayout> layout;
  if (const auto* fit = std::get_if<FitAnalysis>(&analysis)) layout = parameter_layout(scenario, fit->spec);
  std::vector<std::vector<double>> psi_values;
  std::vector<double> se_sum;
  std::vector<double> k_sum;
  std::map<std::pair<int, std::string>, std::vector<double>> k_values;
  std::vector<std::pair<int, std::string>> k_order;
  double zero_total = 0.0;

  for (const RepOutcome& o : outcomes) {
    zero_total += o.zero_fraction;
    if (o.ok) {
      ++report.n_converged;
    } else {
      ++report.failures[o.failure.empty() ? "unknown" : o.failure];
    }
    for (const Pick& p : o.picks) {
      SelectionTally& t = tally_for(report.selection, p.stage, p.method, p.truth);
      ++t.total;
      t.correct += p.chosen == p.truth;
      ++t.chosen[p.chosen];
    }
    for (const KValue& kv : o.ks) {
      const auto key = std::make_pair(kv.stage, kv.model);
      if (!k_values.count(key)) k_order.push_back(key);
      k_values[key].push_back(kv.k);
    }
    if (o.ok && layout) {
      if (psi_values.empty()) {
        psi_values.resize(o.psi.size());
        se_sum.assign(o.psi.size(), 0.0);
        k_sum.assign(o.psi.size(), 0.0);
      }
      for (std::size_t k = 0; k < o.psi.size(); ++k) {
        psi_values[k].push_back(o.psi[k]);
        se_sum[k] += o.se[k];
        k_sum[k] += o.k[k];
      }
    }
  }
  report.zero_fraction = zero_total / static_cast<double>(n_reps);

  if (layout) {
    for (std::size_t k = 0; k < layout->labels.size(); ++k) {
      ParameterSummary p;
      p.label = layout->labels[k];
      p.truth = layout->truth[k];
      if (k < psi_values.size()) {
        const std::vector<double>& v = psi_values[k];
        p.count = v.size();
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        p.mean = mean;
        p.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        p.mean_se = se_sum[k] / static_cast<double>(v.size());
        p.mean_k = k_sum[k] / static_cast<double>(v.size());
      } else {
        p.mean = p.sd = p.mean_se = p.mean_k = std::numeric_limits<double>::quiet_NaN();
      }
      report.parameters.push_back(std::move(p));
    }
  }
  for (const auto& key : k_order) {
    const std::vector<double>& v = k_values[key];
    TraceSummary t;
    t.stage = key.first;
    t.model = key.second;
    t.truth = true_blip(scenario, key.first).key();
    t.count = v.size();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    t.mean = mean;
    t.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    report.traces.push_back(std::move(t));
  }
  return report;
}

std::vector<SelectionTally> aggregate_selection(const std::vector<ReplicationReport>& reports) {
  std::vector<SelectionTally> pooled;
  std::optional<std::set<std::pair<int, std::string>>> layout;
  for (const ReplicationReport& r : reports) {
    std::set<std::pair<int, std::string>> methods;
    for (const SelectionTally& t : r.selection) methods.emplace(t.stage, t.method);
    if (layout && *layout != methods) {
      throw AggregationError("reports select different stages or methods and cannot be pooled");
    }
    layout = std::move(methods);
    for (const SelectionTally& t : r.selection) {
      SelectionTally& p = tally_for(pooled, t.stage, t.method, t.truth);
      p.total += t.total;
      p.correct += t.correct;
      for (const auto& [key, count] : t.chosen) p.chosen[key] += count;
    }
  }
  return pooled;
}

// ---------------------------------------------------------------------------
// Presets and tables
// ---------------------------------------------------------------------------

std::string model_label(const std::string& key) {
  std::string out;
  std::size_t pos = key.find('+');
  while (pos != std::string::npos) {
    const std::size_t next = key.find('+', pos + 1);
    std::string term = key.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1);
    term.erase(std::remove(term.begin(), term.end(), '_'), term.end());
    if (!out.empty()) out += ',';
    out += term;
    pos = next;
  }
  return out.empty() ? "Intercept" : out;
}

namespace {

const std::vector<std::vector<double>>& truth_patterns() {
  static const std::vector<std::vector<double>> patterns = {{1, 0, 0}, {1, 1, 0}, {1, 1, 1}};
  return patterns;
}

std::vector<double> scaled(const std::vector<double>& pattern, double value) {
  std::vector<double> out = pattern;
  for (double& v : out) v *= value;
  return out;
}

std::uint64_t setup_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(seed + 0x632be59bd9b4e019ULL * (index + 1));
}

// Nine continuous setups (stage-1 truth x stage-2 truth) per group.
void add_continuous_grid(Preset& p, std::uint64_t seed, std::size_t n, ErrorDist error,
                         double effect, double correlation, Stage2Policy policy,
                         std::map<std::string, std::string> tags) {
  for (std::size_t t1 = 0; t1 < 3; ++t1) {
    for (std::size_t t2 = 0; t2 < 3; ++t2) {
      Scenario s = continuous_scenario(n, scaled(truth_patterns()[t1], effect),
                                       scaled(truth_patterns()[t2], effect), error, correlation);
      s.seed = setup_seed(seed, p.setups.size());
      Setup setup{tags, s, default_selection_analysis(s, policy)};
      setup.tags["stage1_truth"] = model_label(true_blip(s, 1).key());
      setup.tags["stage2_truth"] = model_label(true_blip(s, 2).key());
      p.setups.push_back(std::move(setup));
    }
  }
}

Preset selection_by_n(std::string name, std::string title, std::uint64_t seed, ErrorDist error,
                      Stage2Policy policy) {
  Preset p{std::move(name), std::move(title), {}};
  for (std::size_t n : {50, 100, 200}) {
    add_continuous_grid(p, seed, n, error, 1.0, 0.0, policy, {{"group", std::to_string(n)}});
  }
  return p;
}

Preset selection_by_policy(std::string name, std::string title, std::uint64_t seed,
                           ErrorDist error) {
  Preset p{std::move(name), std::move(title), {}};
  for (Stage2Policy policy : {Stage2Policy::correct, Stage2Policy::recommended, Stage2Policy::intercept}) {
    std::string label = to_string(policy);
    label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
    add_continuous_grid(p, seed, 100, error, 1.0, 0.0, policy, {{"group", label}});
  }
  return p;
}

Preset selection_by_effect(std::string name, std::string title, std::uint64_t seed,
                           ErrorDist error, Stage2Policy policy) {
  Preset p{std::move(name), std::move(title), {}};
  for (double effect : {1.0, 0.5, 0.1}) {
    add_continuous_grid(p, seed, 100, error, effect, 0.0, policy, {{"group", format_general(effect)}});
  }
  return p;
}

Preset selection_by_correlation(std::string name, std::string title, std::uint64_t seed,
                                ErrorDist error, Stage2Policy policy) {
  Preset p{std::move(name), std::move(title), {}};
  const std::pair<double, const char*> levels[] = {{0.0, "None"}, {0.25, "Medium"}, {0.5, "Strong"}};
  for (const auto& [rho, label] : levels) {
    add_continuous_grid(p, seed, 100, error, 1.0, rho, policy, {{"group", label}});
  }
  return p;
}

Preset non_aggregated(std::string name, std::string title, std::uint64_t seed, ErrorDist error,
                      Stage2Policy policy) {
  Preset p{std::move(name), std::move(title), {}};
  add_continuous_grid(p, seed, 100, error, 1.0, 0.0, policy, {{"layout", "nonagg"}});
  return p;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"table1", "table2", "table3", "supp-s1", "supp-s2", "supp-s3", "supp-s4",
          "supp-s5", "supp-s6", "supp-s7", "supp-s8", "supp-effect", "trace"};
}

Preset make_preset(std::string_view name, std::uint64_t seed, Stage2Policy policy) {
  const ErrorDist lognormal = ErrorDist::centered_lognormal;
  const ErrorDist normal = ErrorDist::standard_normal;
  if (name == "table1") {
    Preset p{"table1", "Mean blip parameter estimates (SD) for the log-linear model via IRLS", {}};
    for (std::size_t n : {50, 100, 200, 500}) {
      for (double zeros : {0.05, 0.10, 0.20}) {
        Scenario s = loglinear_scenario(n, zeros);
        s.seed = setup_seed(seed, p.setups.size());
        p.setups.push_back(Setup{{{"n", std::to_string(n)}, {"zeros", format_general(zeros)}},
                                 s, default_fit_analysis(s)});
      }
    }
    return p;
  }
  if (name == "table2") {
    return selection_by_n("table2", "Correct-selection rates by sample size", seed, lognormal, policy);
  }
  if (name == "table3") {
    return selection_by_policy("table3", "Stage 1 selection (n = 100) by stage-2 model policy",
                               seed, lognormal);
  }
  if (name == "supp-s1") {
    Preset p{"supp-s1", "Exhaustive QIC_G selection (n = 200), discrete outcome", {}};
    for (const auto& pattern : truth_patterns()) {
      Scenario s = discrete_scenario(200, scaled(pattern, 0.5), scaled(pattern, 0.5));
      s.seed = setup_seed(seed, p.setups.size());
      p.setups.push_back(Setup{{}, s, default_exhaustive_analysis(s)});
    }
    return p;
  }
  if (name == "supp-s2") {
    return selection_by_correlation("supp-s2", "Selection (n = 100) by covariate correlation",
                                    seed, lognormal, policy);
  }
  if (name == "supp-s3") {
    return non_aggregated("supp-s3", "Non-aggregated selection (n = 100)", seed, lognormal, policy);
  }
  if (name == "supp-s4") {
    return selection_by_n("supp-s4", "Correct-selection rates by sample size, normal errors",
                          seed, normal, policy);
  }
  if (name == "supp-s5") {
    return selection_by_policy("supp-s5", "Stage 1 selection (n = 100) by stage-2 model policy, normal errors",
                               seed, normal);
  }
  if (name == "supp-s6") {
    return selection_by_effect("supp-s6", "Selection (n = 100) by effect size, normal errors",
                               seed, normal, policy);
  }
  if (name == "supp-s7") {
    return selection_by_correlation("supp-s7", "Selection (n = 100) by covariate correlation, normal errors",
                                    seed, normal, policy);
  }
  if (name == "supp-s8") {
    return non_aggregated("supp-s8", "Non-aggregated selection (n = 100), normal errors", seed,
                          normal, policy);
  }
  if (name == "supp-effect") {
    return selection_by_effect("supp-effect", "Selection (n = 100) by effect size", seed,
                               lognormal, policy);
  }
  if (name == "trace") {
    Preset p{"trace", "Trace penalty K by candidate model (n = 100), normal errors", {}};
    for (const auto& pattern : truth_patterns()) {
      Scenario s = continuous_scenario(100, pattern, pattern, normal);
      s.seed = setup_seed(seed, p.setups.size());
      p.setups.push_back(Setup{{}, s, default_trace_analysis(s)});
    }
    return p;
  }
  throw SpecificationError("unknown scenario preset '" + std::string(name) + "'");
}

namespace {

const std::vector<std::string>& method_columns() {
  static const std::vector<std::string> cols = {"QIC_G(F)", "QIC_G(B)", "Wald(F)", "Wald(B)"};
  return cols;
}

std::vector<std::string> truth_keys(int stage) {
  std::vector<std::string> keys;
  for (const auto& pattern : truth_patterns()) {
    TermList model;
    for (std::size_t k = 0; k < pattern.size(); ++k) {
      if (pattern[k] != 0.0) model.terms.push_back(Term::parse(cov(stage, static_cast<int>(k))));
    }
    keys.push_back(model.key());
  }
  return keys;
}

Table render_table1(const Preset& preset, const std::vector<ReplicationReport>& reports) {
  Table t{preset.title, {"n", "P(Y=0)", "psi10 (SE)", "psi11 (SE)", "psi20 (SE)", "psi21 (SE)"}, {}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::vector<std::string> row = {preset.setups[i].tags.at("n"),
                                    format_fixed(100.0 * reports[i].scenario.zero_prob_target, 0) + "%"};
    for (const ParameterSummary& p : reports[i].parameters) {
      row.push_back(format_fixed(p.mean) + " (" + format_fixed(p.sd) + ")");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table render_grouped(const Preset& preset, const std::vector<ReplicationReport>& reports,
                     const std::string& group_column) {
  Table t{preset.title, {group_column, "Model"}, {}};
  for (const std::string& m : method_columns()) t.columns.push_back(m);
  std::vector<std::string> groups;
  for (const Setup& s : preset.setups) {
    const std::string& g = s.tags.at("group");
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  const bool stage1_only = preset.name == "table3" || preset.name == "supp-s5";
  for (const std::string& g : groups) {
    std::vector<ReplicationReport> members;
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (preset.setups[i].tags.at("group") == g) members.push_back(reports[i]);
    }
    const std::vector<SelectionTally> pooled = aggregate_selection(members);
    for (int stage : {1, 2}) {
      if (stage1_only && stage == 2) continue;
      for (const std::string& truth : truth_keys(stage)) {
        std::vector<std::string> row = {g, model_label(truth)};
        for (const std::string& m : method_columns()) {
          const SelectionTally* found = nullptr;
          for (const SelectionTally& tally : pooled) {
            if (tally.stage == stage && tally.method == m && tally.truth == truth) found = &tally;
          }
          row.push_back(found ? format_fixed(found->rate()) : "NA");
        }
        t.rows.push_back(std::move(row));
      }
    }
  }
  return t;
}

Table render_nonagg(const Preset& preset, const std::vector<ReplicationReport>& reports) {
  Table t{preset.title, {"Selection", "Stage 1", "Stage 2"}, {}};
  for (const std::string& m : method_columns()) t.columns.push_back(m);
  for (int stage : {1, 2}) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const Setup& s = preset.setups[i];
      std::vector<std::string> row = {"Stage " + std::to_string(stage), s.tags.at("stage1_truth"),
                                      s.tags.at("stage2_truth")};
      const std::string truth = true_blip(reports[i].scenario, stage).key();
      for (const std::string& m : method_columns()) {
        const SelectionTally* tally = reports[i].tally(stage, m, truth);
        row.push_back(tally ? format_fixed(tally->rate()) : "NA");
      }
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

Table render_discrete(const Preset& preset, const std::vector<ReplicationReport>& reports) {
  Table t{preset.title, {"True", "Intercept", "x_j1", "x_j1,x_j2", "x_j1,x_j2,x_j3", "Runs"}, {}};
  for (int stage : {1, 2}) {
    for (const ReplicationReport& r : reports) {
      const std::string truth = true_blip(r.scenario, stage).key();
      const SelectionTally* tally = r.tally(stage, "QIC_G", truth);
      std::vector<std::string> row = {model_label(truth)};
      const auto& cands = std::get<ExhaustiveAnalysis>(preset.setups.front().analysis).candidates;
      for (const TermList& c : cands[static_cast<std::size_t>(stage - 1)]) {
        row.push_back(tally ? format_fixed(tally->share(c.key())) : "NA");
      }
      row.push_back(std::to_string(tally ? tally->total : 0));
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

Table render_trace(const Preset& preset, const std::vector<ReplicationReport>& reports) {
  Table t{preset.title, {"Stage", "True", "Model", "Dimension", "Mean K", "SD K"}, {}};
  for (int stage : {1, 2}) {
    for (const ReplicationReport& r : reports) {
      for (const TraceSummary& tr : r.traces) {
        if (tr.stage != stage) continue;
        const std::size_t dim = static_cast<std::size_t>(std::count(tr.model.begin(), tr.model.end(), '+')) + 1;
        t.rows.push_back({std::to_string(stage), model_label(tr.truth), model_label(tr.model),
                          std::to_string(dim), format_fixed(tr.mean), format_fixed(tr.sd)});
      }
    }
  }
  return t;
}

}  // namespace

Table render_table(const Preset& preset, const std::vector<ReplicationReport>& reports) {
  if (reports.size() != preset.setups.size()) {
    throw AggregationError("one report per preset setup is required");
  }
  if (preset.name == "table1") return render_table1(preset, reports);
  if (preset.name == "supp-s1") return render_discrete(preset, reports);
  if (preset.name == "trace") return render_trace(preset, reports);
  if (preset.name == "supp-s3" || preset.name == "supp-s8") return render_nonagg(preset, reports);
  if (preset.name == "table2" || preset.name == "supp-s4") return render_grouped(preset, reports, "n");
  if (preset.name == "table3" || preset.name == "supp-s5") {
    return render_grouped(preset, reports, "Stage 2 model");
  }
  if (preset.name == "supp-s2" || preset.name == "supp-s7") {
    return render_grouped(preset, reports, "Correlation");
  }
  return render_grouped(preset, reports, "psi");
}

}  // namespace gestdtr
