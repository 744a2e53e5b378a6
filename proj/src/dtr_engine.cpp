#include "gestdtr/dtr_engine.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string cache_key(const TermList& blip, const TermList& quadratic) {
  return quadratic.columns() == 0 ? blip.key() : blip.key() + " | " + quadratic.key();
}

}  // namespace

// ---------------------------------------------------------------------------
// StageResult / DtrFit
// ---------------------------------------------------------------------------

VectorXd StageResult::psi() const {
  return std::visit(Overloaded{[](const LinearStageFit& f) { return f.psi; },
                               [](const LoglinearStageFit& f) { return f.psi; },
                               [](const ContinuousStageFit& f) { return f.psi(); }},
                    fit);
}

VectorXd StageResult::beta() const {
  return std::visit([](const auto& f) { return f.beta; }, fit);
}

bool StageResult::converged() const {
  if (const auto* ll = std::get_if<LoglinearStageFit>(&fit)) return ll->converged;
  return true;
}

double StageResult::q() const {
  return std::visit(Overloaded{[](const LinearStageFit& f) { return f.q_at_psi_hat; },
                               [](const LoglinearStageFit& f) { return f.q_at_psi_hat; },
                               [](const ContinuousStageFit& f) { return f.q_at_psi_hat; }},
                    fit);
}

const StageResult& DtrFit::stage(int j) const {
  for (const StageResult& r : stage_fits) {
    if (r.stage == j) return r;
  }
  std::ostringstream msg;
  msg << "no fitted result for stage " << j;
  throw StateError(msg.str());
}

int optimal_treatment_binary(const VectorXd& psi, const VectorXd& h_psi_row) {
  if (psi.size() != h_psi_row.size()) {
    throw DimensionError("optimal_treatment_binary: coefficient and history lengths differ");
  }
  return h_psi_row.dot(psi) > 0.0 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// StagewiseFitter
// ---------------------------------------------------------------------------

StagewiseFitter::StagewiseFitter(const Dataset& dataset, ModelSpec base, FitOptions opts)
    : dataset_(&dataset), spec_(std::move(base)), opts_(std::move(opts)) {
  opts_.irls.validate();
  if (spec_.n_stages() != dataset.n_stages()) {
    std::ostringstream msg;
    msg << "model specifies " << spec_.n_stages() << " stages but the dataset has "
        << dataset.n_stages();
    throw SpecificationError(msg.str());
  }
  check_spec(dataset, spec_);
  const ValidationReport report = validate_dataset(dataset, spec_);
  if (!report.ok()) throw ValidationError(report.summary());
  y_ = dataset.outcomes();
  next_stage_ = spec_.n_stages();
  prepare_stage();
}

void StagewiseFitter::prepare_stage() {
  evaluated_.clear();
  failed_.clear();
  cache_ = StageCache{};
  if (next_stage_ == 0) return;
  const int j = next_stage_;
  try {
    if (spec_.scale == Scale::linear) {
      y_tilde_ = y_;
      for (const VectorXd& adj : later_adjustments_) y_tilde_ += adj;
    } else {
      y_tilde_ = pseudo_outcome_loglinear(y_, later_adjustments_, opts_.irls.zero_replacement);
    }
    const StageSpec& st = spec_.stage(j);
    cache_.a = dataset_->treatments(j);
    cache_.h_beta = build_columns(*dataset_, st.treatment_free, j, "treatment-free");
    cache_.h_alpha = build_columns(*dataset_, st.treatment, j, "treatment");
    cache_.treatment = std::make_shared<const TreatmentFit>(
        spec_.treatment_type == TreatmentType::binary
            ? fit_logistic(cache_.h_alpha, cache_.a, opts_.logistic)
            : fit_continuous_treatment(cache_.h_alpha, cache_.a));
  } catch (GestError& e) {
    if (!e.stage()) e.set_stage(j);
    throw;
  }
}

StageResult StagewiseFitter::fit_stage(const TermList& blip, const TermList& blip_quadratic) {
  const int j = next_stage_;
  const StageSpec& st = spec_.stage(j);
  check_terms(*dataset_, blip, j, "blip");
  if (blip_quadratic.columns() > 0) {
    if (spec_.treatment_type != TreatmentType::continuous) {
      throw SpecificationError("quadratic blip terms require a continuous treatment");
    }
    check_terms(*dataset_, blip_quadratic, j, "quadratic blip");
  }

  DesignMatrices design;
  design.h_psi = build_columns(*dataset_, blip, j, "blip");
  design.h_psi2 = build_columns(*dataset_, blip_quadratic, j, "quadratic blip");
  design.h_beta = cache_.h_beta;
  design.h_alpha = cache_.h_alpha;
  design.a = cache_.a;

  StageResult out;
  out.stage = j;
  out.blip = blip;
  out.blip_quadratic = blip_quadratic;
  out.treatment = *cache_.treatment;
  const VectorXd d = treatment_residuals(out.treatment, design.a);
  const Eigen::Index n = design.rows();

  if (spec_.treatment_type == TreatmentType::continuous) {
    if (!st.dose_range) throw SpecificationError("continuous treatment needs a dose range");
    ContinuousStageFit fit = stage_fit_continuous(y_tilde_, design, out.treatment);
    if (opts_.inference) out.inference = infer(fit, design);
    const VectorXd lin = design.h_psi * fit.psi1;
    const VectorXd quad =
        design.h_psi2.cols() > 0 ? VectorXd(design.h_psi2 * fit.psi2) : VectorXd(VectorXd::Zero(n));
    out.optimal_treatment.resize(n);
    out.adjustment.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double opt = optimal_dose(lin(i), quad(i), *st.dose_range);
      const double obs = design.a(i);
      out.optimal_treatment(i) = opt;
      out.adjustment(i) = (opt - obs) * lin(i) + (opt * opt - obs * obs) * quad(i);
    }
    out.fit = std::move(fit);
    return out;
  }

  VectorXd psi;
  if (spec_.scale == Scale::linear) {
    LinearStageFit fit = stage_fit_linear(y_tilde_, design, d);
    if (opts_.inference) out.inference = infer(fit, design);
    psi = fit.psi;
    out.fit = std::move(fit);
  } else {
    LoglinearStageFit fit = irls_stage_fit(y_tilde_, design, d, opts_.irls);
    if (opts_.inference && fit.converged) out.inference = infer(fit, design, y_tilde_);
    psi = fit.psi;
    out.fit = std::move(fit);
  }
  const VectorXd contrast = design.h_psi * psi;
  out.optimal_treatment = (contrast.array() > 0.0).cast<double>();
  const VectorXd shift = (out.optimal_treatment - design.a).cwiseProduct(contrast);
  out.adjustment = spec_.scale == Scale::linear ? shift : VectorXd(shift.array().exp());
  return out;
}

const StageResult& StagewiseFitter::evaluate(const TermList& blip) {
  return evaluate(blip, TermList{false, {}});
}

const StageResult& StagewiseFitter::evaluate(const TermList& blip,
                                             const TermList& blip_quadratic) {
  if (next_stage_ == 0) throw StateError("every stage has already been fixed");
  const std::string key = cache_key(blip, blip_quadratic);
  if (auto it = evaluated_.find(key); it != evaluated_.end()) return *it->second;
  if (auto it = failed_.find(key); it != failed_.end()) std::rethrow_exception(it->second);
  try {
    auto result = std::make_shared<const StageResult>(fit_stage(blip, blip_quadratic));
    return *evaluated_.emplace(key, std::move(result)).first->second;
  } catch (GestError& e) {
    if (!e.stage()) e.set_stage(next_stage_);
    failed_.emplace(key, std::current_exception());
    throw;
  }
}

const StageResult& StagewiseFitter::fix(const TermList& blip) {
  return fix(blip, TermList{false, {}});
}

const StageResult& StagewiseFitter::fix(const TermList& blip, const TermList& blip_quadratic) {
  const StageResult& chosen = evaluate(blip, blip_quadratic);
  fixed_.push_back(chosen);
  fixed_y_tilde_.push_back(y_tilde_);
  later_adjustments_.push_back(chosen.adjustment);
  --next_stage_;
  prepare_stage();
  return fixed_.back();
}

DtrFit StagewiseFitter::result() const {
  DtrFit out;
  out.scale = spec_.scale;
  out.treatment_type = spec_.treatment_type;
  out.stage_fits = fixed_;
  const Eigen::Index n = y_.size();
  const int stages = spec_.n_stages();
  out.optimal_treatments = MatrixXd::Constant(n, stages, kNaN);
  out.pseudo_outcomes = MatrixXd::Constant(n, stages, kNaN);
  for (std::size_t k = 0; k < fixed_.size(); ++k) {
    const int j = fixed_[k].stage;
    out.optimal_treatments.col(j - 1) = fixed_[k].optimal_treatment;
    out.pseudo_outcomes.col(j - 1) = fixed_y_tilde_[k];
    if (!fixed_[k].converged() && out.converged) {
      out.converged = false;
      out.failed_stage = j;
    }
  }
  if (next_stage_ != 0 && out.converged) {
    out.converged = false;
    out.failed_stage = next_stage_;
  }
  return out;
}

DtrFit fit_dtr(const Dataset& dataset, const ModelSpec& spec, const FitOptions& opts) {
  StagewiseFitter fitter(dataset, spec, opts);
  for (int j = spec.n_stages(); j >= 1; --j) {
    const StageSpec& st = spec.stage(j);
    const StageResult& r = fitter.fix(st.blip, st.blip_quadratic);
    if (!r.converged()) break;
  }
  return fitter.result();
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

const char* to_string(Direction d) {
  switch (d) {
    case Direction::forward: return "forward";
    case Direction::backward: return "backward";
    case Direction::exhaustive: return "exhaustive";
  }
  return "?";
}

const char* to_string(Criterion c) { return c == Criterion::qic ? "qic" : "wald"; }

Direction parse_direction(std::string_view text) {
  if (text == "forward") return Direction::forward;
  if (text == "backward") return Direction::backward;
  if (text == "exhaustive") return Direction::exhaustive;
  throw SpecificationError("unknown selection direction '" + std::string(text) + "'");
}

Criterion parse_criterion(std::string_view text) {
  if (text == "qic") return Criterion::qic;
  if (text == "wald") return Criterion::wald;
  throw SpecificationError("unknown selection criterion '" + std::string(text) + "'");
}

namespace {

using Mask = std::uint64_t;

TermList model_from_mask(const std::vector<Term>& candidates, Mask mask) {
  TermList model;
  model.intercept = true;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (mask & (Mask{1} << k)) model.terms.push_back(candidates[k]);
  }
  return model;
}

// Column of candidate k inside the model built from `mask`.
Eigen::Index column_of(Mask mask, std::size_t k) {
  Eigen::Index col = 1;
  for (std::size_t i = 0; i < k; ++i) {
    if (mask & (Mask{1} << i)) ++col;
  }
  return col;
}

struct Outcome {
  const StageResult* result = nullptr;
  std::string error;
};

Outcome try_evaluate(StagewiseFitter& fitter, const TermList& model) {
  Outcome out;
  try {
    const StageResult& r = fitter.evaluate(model);
    if (!r.converged()) {
      out.error = "IRLS did not converge";
    } else if (!r.inference) {
      out.error = "no inference available";
    } else {
      out.result = &r;
    }
  } catch (const GestError& e) {
    out.error = e.what();
  }
  return out;
}

TrailEntry entry(int stage, const TermList& model, double value, std::string decision,
                 std::string note = {}) {
  return TrailEntry{stage, model.key(), value, std::move(decision), std::move(note)};
}

TermList qic_stepwise(StagewiseFitter& fitter, const std::vector<Term>& candidates,
                      Direction direction, std::vector<TrailEntry>& trail) {
  const int j = fitter.next_stage();
  const std::size_t k_max = candidates.size();
  const Mask full = k_max == 64 ? ~Mask{0} : (Mask{1} << k_max) - 1;
  Mask mask = direction == Direction::forward ? Mask{0} : full;
  const double inf = std::numeric_limits<double>::infinity();

  double current = inf;
  {
    const TermList model = model_from_mask(candidates, mask);
    const Outcome o = try_evaluate(fitter, model);
    if (o.result) {
      current = o.result->inference->qic;
      trail.push_back(entry(j, model, current, "start"));
    } else {
      trail.push_back(entry(j, model, inf, "failed", o.error));
    }
  }
  for (;;) {
    std::optional<std::size_t> best;
    double best_qic = inf;
    std::size_t best_entry = 0;
    for (std::size_t k = 0; k < k_max; ++k) {
      const Mask bit = Mask{1} << k;
      const bool present = (mask & bit) != 0;
      if (direction == Direction::forward ? present : !present) continue;
      const TermList model = model_from_mask(candidates, mask ^ bit);
      const Outcome o = try_evaluate(fitter, model);
      if (!o.result) {
        trail.push_back(entry(j, model, inf, "failed", o.error));
        continue;
      }
      const double value = o.result->inference->qic;
      trail.push_back(entry(j, model, value, "reject", candidates[k].label()));
      if (value < best_qic) {
        best_qic = value;
        best = k;
        best_entry = trail.size() - 1;
      }
    }
    if (!best) break;
    // Forward needs a strict decrease; backward also drops on a tie so that
    // ties resolve to the smaller model.
    const bool move = direction == Direction::forward ? best_qic < current : best_qic <= current;
    if (!move) break;
    trail[best_entry].decision = direction == Direction::forward ? "add" : "drop";
    mask ^= Mask{1} << *best;
    current = best_qic;
  }
  return model_from_mask(candidates, mask);
}

TermList wald_stepwise(StagewiseFitter& fitter, const std::vector<Term>& candidates,
                       Direction direction, double significance,
                       std::vector<TrailEntry>& trail) {
  const int j = fitter.next_stage();
  const std::size_t k_max = candidates.size();
  const Mask full = k_max == 64 ? ~Mask{0} : (Mask{1} << k_max) - 1;

  if (direction == Direction::forward) {
    Mask mask = 0;
    trail.push_back(entry(j, model_from_mask(candidates, mask), kNaN, "start"));
    for (;;) {
      std::optional<std::size_t> best;
      double best_p = std::numeric_limits<double>::infinity();
      std::size_t best_entry = 0;
      for (std::size_t k = 0; k < k_max; ++k) {
        const Mask bit = Mask{1} << k;
        if (mask & bit) continue;
        const Mask trial = mask | bit;
        const TermList model = model_from_mask(candidates, trial);
        const Outcome o = try_evaluate(fitter, model);
        if (!o.result) {
          trail.push_back(entry(j, model, kNaN, "failed", o.error));
          continue;
        }
        const double p = o.result->inference->wald_p(column_of(trial, k));
        trail.push_back(entry(j, model, p, "reject", candidates[k].label()));
        if (p < best_p) {
          best_p = p;
          best = k;
          best_entry = trail.size() - 1;
        }
      }
      if (!best || !(best_p < significance)) break;
      trail[best_entry].decision = "add";
      mask |= Mask{1} << *best;
    }
    return model_from_mask(candidates, mask);
  }

  Mask mask = full;
  for (;;) {
    const TermList model = model_from_mask(candidates, mask);
    if (mask == 0) {
      trail.push_back(entry(j, model, kNaN, "keep"));
      break;
    }
    const Outcome o = try_evaluate(fitter, model);
    if (!o.result) {
      trail.push_back(entry(j, model, kNaN, "failed", o.error));
      std::ostringstream msg;
      msg << "Wald backward selection at stage " << j << " cannot evaluate " << model.key()
          << ": " << o.error;
      throw SelectionError(msg.str());
    }
    std::size_t worst = 0;
    double worst_p = -1.0;
    for (std::size_t k = 0; k < k_max; ++k) {
      if (!(mask & (Mask{1} << k))) continue;
      double p = o.result->inference->wald_p(column_of(mask, k));
      if (std::isnan(p)) p = 1.0;
      if (p > worst_p) {
        worst_p = p;
        worst = k;
      }
    }
    if (worst_p >= significance) {
      trail.push_back(entry(j, model, worst_p, "drop", candidates[worst].label()));
      mask &= ~(Mask{1} << worst);
    } else {
      trail.push_back(entry(j, model, worst_p, "keep", candidates[worst].label()));
      break;
    }
  }
  return model_from_mask(candidates, mask);
}

void check_candidates_per_stage(std::size_t given, int stages) {
  if (given != static_cast<std::size_t>(stages)) {
    std::ostringstream msg;
    msg << "selection needs one candidate set per stage (" << stages << "), got " << given;
    throw SpecificationError(msg.str());
  }
}

const StageResult& fix_chosen(StagewiseFitter& fitter, const TermList& chosen,
                              std::vector<TrailEntry>& trail, const char* decision) {
  const int j = fitter.next_stage();
  const StageResult* r = nullptr;
  try {
    r = &fitter.fix(chosen);
  } catch (const GestError& e) {
    std::ostringstream msg;
    msg << "stage " << j << " model " << chosen.key() << " could not be fitted: " << e.what();
    throw SelectionError(msg.str());
  }
  if (!r->converged()) {
    std::ostringstream msg;
    msg << "stage " << j << " model " << chosen.key() << " did not converge";
    throw SelectionError(msg.str());
  }
  trail.push_back(entry(j, chosen, r->inference ? r->inference->qic : kNaN, decision));
  return *r;
}

}  // namespace

TermList select_stage_stepwise(StagewiseFitter& fitter, const std::vector<Term>& candidates,
                               Direction direction, Criterion criterion, double significance,
                               std::vector<TrailEntry>& trail) {
  if (fitter.next_stage() == 0) throw StateError("every stage has already been fixed");
  if (direction == Direction::exhaustive) {
    throw SelectionError("stepwise selection needs direction forward or backward");
  }
  if (candidates.size() > 64) throw SelectionError("at most 64 candidate terms per stage");
  return criterion == Criterion::qic
             ? qic_stepwise(fitter, candidates, direction, trail)
             : wald_stepwise(fitter, candidates, direction, significance, trail);
}

TermList select_stage_exhaustive(StagewiseFitter& fitter, const std::vector<TermList>& candidates,
                                 std::vector<TrailEntry>& trail) {
  const int j = fitter.next_stage();
  if (j == 0) throw StateError("every stage has already been fixed");
  if (candidates.empty()) throw SelectionError("exhaustive selection needs at least one candidate");
  std::optional<std::size_t> best;
  double best_qic = std::numeric_limits<double>::infinity();
  std::size_t best_entry = 0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const Outcome o = try_evaluate(fitter, candidates[k]);
    if (!o.result) {
      trail.push_back(entry(j, candidates[k], kNaN, "failed", o.error));
      continue;
    }
    const double value = o.result->inference->qic;
    trail.push_back(entry(j, candidates[k], value, "reject"));
    if (!best || value < best_qic) {
      best_qic = value;
      best = k;
      best_entry = trail.size() - 1;
    }
  }
  if (!best) {
    std::ostringstream msg;
    msg << "every candidate blip model failed at stage " << j;
    throw SelectionError(msg.str());
  }
  trail[best_entry].decision = "best";
  return candidates[*best];
}

SelectionResult stepwise_select(const Dataset& dataset, const ModelSpec& base,
                                const std::vector<std::vector<Term>>& candidate_terms,
                                const SelectionOptions& opts) {
  check_candidates_per_stage(candidate_terms.size(), base.n_stages());
  StagewiseFitter fitter(dataset, base, opts.fit);
  SelectionResult out;
  out.direction = opts.direction;
  out.criterion = opts.criterion;
  out.chosen_per_stage.resize(static_cast<std::size_t>(base.n_stages()));
  for (int j = base.n_stages(); j >= 1; --j) {
    TermList chosen;
    const char* decision = "chosen";
    if (auto it = opts.frozen.find(j); it != opts.frozen.end()) {
      chosen = it->second;
      decision = "frozen";
    } else {
      chosen = select_stage_stepwise(fitter, candidate_terms[static_cast<std::size_t>(j - 1)],
                                     opts.direction, opts.criterion, opts.significance,
                                     out.trail);
    }
    fix_chosen(fitter, chosen, out.trail, decision);
    out.chosen_per_stage[static_cast<std::size_t>(j - 1)] = chosen;
  }
  return out;
}

SelectionResult exhaustive_select(const Dataset& dataset, const ModelSpec& base,
                                  const std::vector<std::vector<TermList>>& candidates,
                                  const SelectionOptions& opts) {
  if (opts.criterion != Criterion::qic) {
    throw SelectionError("exhaustive selection supports the QIC criterion only");
  }
  check_candidates_per_stage(candidates.size(), base.n_stages());
  StagewiseFitter fitter(dataset, base, opts.fit);
  SelectionResult out;
  out.direction = Direction::exhaustive;
  out.criterion = Criterion::qic;
  out.chosen_per_stage.resize(static_cast<std::size_t>(base.n_stages()));
  for (int j = base.n_stages(); j >= 1; --j) {
    TermList chosen;
    const char* decision = "chosen";
    if (auto it = opts.frozen.find(j); it != opts.frozen.end()) {
      chosen = it->second;
      decision = "frozen";
    } else {
      chosen = select_stage_exhaustive(fitter, candidates[static_cast<std::size_t>(j - 1)],
                                       out.trail);
    }
    fix_chosen(fitter, chosen, out.trail, decision);
    out.chosen_per_stage[static_cast<std::size_t>(j - 1)] = chosen;
  }
  return out;
}

}  // namespace gestdtr
