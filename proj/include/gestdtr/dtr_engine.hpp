#pragma once

#include <exception>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gestdtr/data_model.hpp"
#include "gestdtr/gest_continuous.hpp"
#include "gestdtr/gest_linear.hpp"
#include "gestdtr/gest_loglinear.hpp"
#include "gestdtr/inference.hpp"
#include "gestdtr/nuisance.hpp"

namespace gestdtr {

using StageFit = std::variant<LinearStageFit, LoglinearStageFit, ContinuousStageFit>;

struct FitOptions {
  IrlsOptions irls;
  LogisticOptions logistic;
  bool inference = true;
  friend bool operator==(const FitOptions& a, const FitOptions& b) {
    return a.irls == b.irls && a.logistic.tolerance == b.logistic.tolerance &&
           a.logistic.max_iter == b.logistic.max_iter &&
           a.logistic.boundary == b.logistic.boundary &&
           a.logistic.max_coef_norm == b.logistic.max_coef_norm && a.inference == b.inference;
  }
};

struct StageResult {
  int stage = 0;
  TermList blip;
  TermList blip_quadratic{false, {}};
  TreatmentFit treatment;
  StageFit fit;
  std::optional<StageInference> inference;  // absent for a non-converged IRLS fit
  VectorXd optimal_treatment;               // a_j^opt per subject
  // Per-subject adjustment passed to earlier stages: gamma(opt) - gamma(obs)
  // on the linear scale, gamma(opt)/gamma(obs) on the log-linear scale.
  VectorXd adjustment;

  VectorXd psi() const;
  VectorXd beta() const;
  bool converged() const;
  double q() const;
};

struct DtrFit {
  std::vector<StageResult> stage_fits;  // stage J first, down to stage 1
  MatrixXd optimal_treatments;          // n x J, column j-1 is stage j
  MatrixXd pseudo_outcomes;             // n x J, column j-1 is y_tilde_j
  Scale scale = Scale::linear;
  TreatmentType treatment_type = TreatmentType::binary;
  bool converged = true;
  std::optional<int> failed_stage;

  const StageResult& stage(int j) const;
};

// Stage-by-stage evaluator for one dataset. Stages are fixed from J down to 1;
// `evaluate` fits a candidate blip at the highest unfixed stage given the
// fixed later stages. Results (and failures) are cached per blip within the
// current recursion context. Copies share nothing mutable, so a copy can take
// a different path through the later-stage choices. The dataset must outlive
// the fitter.
class StagewiseFitter {
 public:
  StagewiseFitter(const Dataset& dataset, ModelSpec base, FitOptions opts = {});

  int n_stages() const noexcept { return spec_.n_stages(); }
  int next_stage() const noexcept { return next_stage_; }  // 0 when complete
  const ModelSpec& spec() const noexcept { return spec_; }

  // Throws on fit failure; a non-converged IRLS fit is returned, not thrown.
  const StageResult& evaluate(const TermList& blip);
  const StageResult& evaluate(const TermList& blip, const TermList& blip_quadratic);
  const StageResult& fix(const TermList& blip);
  const StageResult& fix(const TermList& blip, const TermList& blip_quadratic);

  const VectorXd& pseudo_outcome() const { return y_tilde_; }  // for next_stage()
  DtrFit result() const;  // requires every stage fixed

 private:
  struct StageCache {
    MatrixXd h_beta;
    MatrixXd h_alpha;
    VectorXd a;
    std::shared_ptr<const TreatmentFit> treatment;
  };

  StageResult fit_stage(const TermList& blip, const TermList& blip_quadratic);
  void prepare_stage();

  const Dataset* dataset_;
  ModelSpec spec_;
  FitOptions opts_;
  int next_stage_ = 0;
  VectorXd y_;
  VectorXd y_tilde_;
  std::vector<VectorXd> later_adjustments_;
  std::vector<StageResult> fixed_;  // stage J first
  StageCache cache_;
  std::vector<VectorXd> fixed_y_tilde_;
  std::map<std::string, std::shared_ptr<const StageResult>> evaluated_;
  std::map<std::string, std::exception_ptr> failed_;
};

// Recursive G-estimation from stage J down to stage 1. Stage errors carry the
// stage index; IRLS non-convergence yields converged = false and stops.
DtrFit fit_dtr(const Dataset& dataset, const ModelSpec& spec, const FitOptions& opts = {});

// 1 when h'psi > 0, otherwise the reference treatment 0.
int optimal_treatment_binary(const VectorXd& psi, const VectorXd& h_psi_row);

// ---------------------------------------------------------------------------
// Blip model selection
// ---------------------------------------------------------------------------

enum class Direction { forward, backward, exhaustive };
enum class Criterion { qic, wald };

const char* to_string(Direction d);
const char* to_string(Criterion c);
Direction parse_direction(std::string_view text);
Criterion parse_criterion(std::string_view text);

struct TrailEntry {
  int stage = 0;
  std::string candidate;  // TermList::key() of the evaluated blip
  double value = 0.0;     // QIC, or the Wald p-value of the term under test
  std::string decision;   // start, add, drop, keep, reject, failed, frozen, chosen, best
  std::string note;       // tested term or failure message
  friend bool operator==(const TrailEntry&, const TrailEntry&) = default;
};

struct SelectionOptions {
  Direction direction = Direction::forward;
  Criterion criterion = Criterion::qic;
  double significance = 0.05;
  std::map<int, TermList> frozen;  // stage -> fixed blip, skipped by selection
  FitOptions fit;
};

struct SelectionResult {
  std::vector<TermList> chosen_per_stage;  // index 0 is stage 1
  std::vector<TrailEntry> trail;
  Direction direction = Direction::forward;
  Criterion criterion = Criterion::qic;

  const TermList& chosen(int stage) const {
    return chosen_per_stage.at(static_cast<std::size_t>(stage - 1));
  }
};

// Candidate terms per stage (index 0 is stage 1) on top of the intercept.
// Forward starts from the intercept, backward from every candidate term.
SelectionResult stepwise_select(const Dataset& dataset, const ModelSpec& base,
                                const std::vector<std::vector<Term>>& candidate_terms,
                                const SelectionOptions& opts);

// Picks the QIC-minimizing model per stage out of explicit candidate lists.
SelectionResult exhaustive_select(const Dataset& dataset, const ModelSpec& base,
                                  const std::vector<std::vector<TermList>>& candidates,
                                  const SelectionOptions& opts);

// Single-stage building blocks for `fitter.next_stage()`. They only evaluate;
// fixing the chosen model is left to the caller.
TermList select_stage_stepwise(StagewiseFitter& fitter, const std::vector<Term>& candidates,
                               Direction direction, Criterion criterion, double significance,
                               std::vector<TrailEntry>& trail);
TermList select_stage_exhaustive(StagewiseFitter& fitter, const std::vector<TermList>& candidates,
                                 std::vector<TrailEntry>& trail);

}  // namespace gestdtr
