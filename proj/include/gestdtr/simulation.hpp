#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "gestdtr/data_model.hpp"
#include "gestdtr/dtr_engine.hpp"

namespace gestdtr {

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

enum class ScenarioKind {
  loglinear_twostage,   // one covariate per stage, Poisson outcome
  continuous_twostage,  // three covariates per stage, continuous outcome
  discrete_qic,         // three shifted covariates per stage, Poisson outcome
};
enum class ErrorDist { centered_lognormal, standard_normal };

const char* to_string(ScenarioKind kind);
const char* to_string(ErrorDist dist);
ScenarioKind parse_scenario_kind(std::string_view text);
ErrorDist parse_error_dist(std::string_view text);

struct Scenario {
  ScenarioKind kind = ScenarioKind::loglinear_twostage;
  std::size_t n = 500;
  // Per stage, blip coefficients on (1, x_j1, ..., x_jk).
  std::vector<VectorXd> psi_true;
  ErrorDist error = ErrorDist::centered_lognormal;
  double zero_prob_target = 0.10;
  double covariate_correlation = 0.0;  // exchangeable, within stage
  std::optional<double> beta0;         // calibrated on demand when absent
  std::uint64_t seed = 1;

  int covariates_per_stage() const;
  void validate() const;
  bool has_poisson_outcome() const { return kind != ScenarioKind::continuous_twostage; }
  friend bool operator==(const Scenario& a, const Scenario& b);
};

// Paper defaults for each kind. `coefficients` are the non-intercept blip
// coefficients of both stages.
Scenario loglinear_scenario(std::size_t n, double zero_prob_target);
Scenario continuous_scenario(std::size_t n, const std::vector<double>& stage1,
                             const std::vector<double>& stage2, ErrorDist error,
                             double correlation = 0.0);
Scenario discrete_scenario(std::size_t n, const std::vector<double>& stage1,
                           const std::vector<double>& stage2);

// Deterministic child seed for replication `rep`.
std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t rep);

// Draws one dataset. Poisson kinds need `beta0` set (see calibrate_beta0).
Dataset generate(const Scenario& scenario);
Dataset generate(const Scenario& scenario, std::mt19937_64& rng);

// Intercept beta0 giving P(Y = 0) = target, by bisection over `bracket` on
// the exact Poisson zero probability averaged over `draws` simulated
// histories. Throws CalibrationError when the target is not bracketed.
double calibrate_beta0(const Scenario& scenario, double target,
                       std::pair<double, double> bracket = {-5.0, 10.0},
                       std::size_t draws = 1'000'000, std::uint64_t seed = 20160101);

// Monte Carlo P(Y = 0) at the given intercept using the same construction.
double zero_probability(const Scenario& scenario, double beta0, std::size_t draws,
                        std::uint64_t seed);

// True blip model at `stage` (intercept plus covariates with nonzero psi).
TermList true_blip(const Scenario& scenario, int stage);

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

enum class Stage2Policy { correct, recommended, intercept };
const char* to_string(Stage2Policy policy);
Stage2Policy parse_stage2_policy(std::string_view text);

struct SelectionMethod {
  Direction direction = Direction::forward;
  Criterion criterion = Criterion::qic;
  std::string label() const;  // e.g. "QIC(F)", "Wald(B)"
  friend bool operator==(const SelectionMethod&, const SelectionMethod&) = default;
};

// Fit one fixed model; report psi, SEs and K.
struct FitAnalysis {
  ModelSpec spec;
  FitOptions options;
};

// Stepwise selection at stage 2, then at stage 1 after fixing the stage-2
// model according to `policy`.
struct SelectionAnalysis {
  ModelSpec base;
  std::vector<std::vector<Term>> candidates;  // per stage, index 0 is stage 1
  Stage2Policy policy = Stage2Policy::correct;
  double significance = 0.05;  // Wald criterion
  std::vector<SelectionMethod> methods = {{Direction::forward, Criterion::qic},
                                          {Direction::backward, Criterion::qic},
                                          {Direction::forward, Criterion::wald},
                                          {Direction::backward, Criterion::wald}};
  FitOptions options;
};

// Lowest-QIC model out of explicit candidates; stage 1 follows the true
// stage-2 model.
struct ExhaustiveAnalysis {
  ModelSpec base;
  std::vector<std::vector<TermList>> candidates;  // per stage
  FitOptions options;
};

// K for every candidate at stage 2, then at stage 1 after the true stage-2 model.
struct TraceAnalysis {
  ModelSpec base;
  std::vector<std::vector<TermList>> candidates;
  FitOptions options;
};

using Analysis = std::variant<FitAnalysis, SelectionAnalysis, ExhaustiveAnalysis, TraceAnalysis>;

// Analysis settings used in the paper for each scenario kind.
ModelSpec default_spec(const Scenario& scenario);
FitAnalysis default_fit_analysis(const Scenario& scenario);
SelectionAnalysis default_selection_analysis(const Scenario& scenario,
                                             Stage2Policy policy = Stage2Policy::correct);
ExhaustiveAnalysis default_exhaustive_analysis(const Scenario& scenario);
TraceAnalysis default_trace_analysis(const Scenario& scenario);

// ---------------------------------------------------------------------------
// Replication harness
// ---------------------------------------------------------------------------

struct ParameterSummary {
  std::string label;  // e.g. "psi1_0"
  double truth = 0.0;
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;       // empirical SD of the estimates
  double mean_se = 0.0;  // mean sandwich SE
  double mean_k = 0.0;   // mean trace penalty of the stage this parameter belongs to
};

struct SelectionTally {
  int stage = 0;
  std::string method;
  std::string truth;  // TermList::key() of the true model
  std::size_t total = 0;
  std::size_t correct = 0;
  std::map<std::string, std::size_t> chosen;  // model key -> count

  double rate() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
  double share(const std::string& key) const;
};

struct TraceSummary {
  int stage = 0;
  std::string truth;
  std::string model;
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;
};

struct ReplicationReport {
  Scenario scenario;
  std::size_t n_requested = 0;
  std::size_t n_converged = 0;
  std::map<std::string, std::size_t> failures;  // reason -> count
  std::vector<ParameterSummary> parameters;
  std::vector<SelectionTally> selection;
  std::vector<TraceSummary> traces;
  std::vector<std::uint64_t> seeds;
  double zero_fraction = 0.0;  // mean share of y == 0
  std::optional<double> beta0;

  std::size_t n_failed() const { return n_requested - n_converged; }
  const SelectionTally* tally(int stage, const std::string& method,
                              const std::string& truth) const;
  const TraceSummary* trace(int stage, const std::string& model) const;
};

struct RunOptions {
  unsigned threads = 0;  // 0: hardware concurrency capped by GESTDTR_THREADS
};

// Worker count from RunOptions, hardware and the GESTDTR_THREADS cap.
unsigned resolve_threads(const RunOptions& opts);

// Runs `n_reps` replications. Poisson scenarios without beta0 are calibrated
// first. The report depends only on (scenario, n_reps, analysis).
ReplicationReport run_replications(const Scenario& scenario, std::size_t n_reps,
                                   const Analysis& analysis, const RunOptions& opts = {});

// Pools tallies with the same (stage, method, truth) across reports.
std::vector<SelectionTally> aggregate_selection(const std::vector<ReplicationReport>& reports);

// ---------------------------------------------------------------------------
// Table presets
// ---------------------------------------------------------------------------

struct Setup {
  std::map<std::string, std::string> tags;  // row descriptors, e.g. {"n","100"}
  Scenario scenario;
  Analysis analysis;
};

struct Preset {
  std::string name;
  std::string title;
  std::vector<Setup> setups;
};

struct Table {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> preset_names();
Preset make_preset(std::string_view name, std::uint64_t seed,
                   Stage2Policy policy = Stage2Policy::correct);
Table render_table(const Preset& preset, const std::vector<ReplicationReport>& reports);

// Paper-style model label, e.g. "x11,x12" for {x1_1, x1_2}; "Intercept" when empty.
std::string model_label(const std::string& key);

}  // namespace gestdtr
