#include "gestdtr/gest_loglinear.hpp"

#include <cmath>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr {

void IrlsOptions::validate() const {
  if (!(eps_eta > 0.0)) throw SpecificationError("IRLS tolerance eps_eta must be positive");
  if (max_iter < 1) throw SpecificationError("IRLS max_iter must be at least 1");
  if (!(zero_replacement > 0.0)) throw SpecificationError("zero_replacement must be positive");
}

const char* to_string(LoglinearEquation eq) {
  return eq == LoglinearEquation::ratio ? "ratio" : "difference";
}

LoglinearEquation parse_loglinear_equation(std::string_view text) {
  if (text == "ratio") return LoglinearEquation::ratio;
  if (text == "difference") return LoglinearEquation::difference;
  throw SpecificationError("unknown log-linear equation '" + std::string(text) + "'");
}

VectorXd pseudo_outcome_loglinear(const VectorXd& y, std::span<const VectorXd> later_ratios,
                                  double zero_replacement) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!(y(i) >= 0.0)) {
      std::ostringstream msg;
      msg << "log-linear outcome must be nonnegative (row " << (i + 1) << " has " << y(i) << ")";
      throw DomainError(msg.str());
    }
  }
  if (later_ratios.empty()) return y;
  if (!(zero_replacement > 0.0)) throw DomainError("zero_replacement must be positive");
  VectorXd y_tilde = (y.array() == 0.0).select(zero_replacement, y);
  for (const VectorXd& ratio : later_ratios) {
    if (ratio.size() != y.size()) {
      throw DimensionError("pseudo_outcome_loglinear: ratios do not cover every subject");
    }
    if (!(ratio.array() > 0.0).all()) throw DomainError("blip ratios must be positive");
    y_tilde.array() *= ratio.array();
  }
  return y_tilde;
}

namespace {

constexpr double kMaxEta = 700.0;

struct Iterate {
  VectorXd beta;
  VectorXd psi;
  VectorXd eta;
  VectorXd mu;
};

class IrlsProblem {
 public:
  IrlsProblem(const VectorXd& y, const DesignMatrices& design, const VectorXd& d,
              LoglinearEquation equation)
      : y_(y), h_beta_(design.h_beta), h_psi_(design.h_psi), d_(d), equation_(equation),
        treated_(design.a.asDiagonal() * design.h_psi) {}

  // Throws DivergenceError when exp(eta) would overflow.
  Iterate make(VectorXd beta, VectorXd psi) const {
    Iterate it{std::move(beta), std::move(psi), {}, {}};
    it.eta = treated_ * it.psi;
    if (h_beta_.cols() > 0) it.eta += h_beta_ * it.beta;
    if (!it.eta.allFinite() || it.eta.maxCoeff() > kMaxEta) {
      throw DivergenceError("IRLS diverged: linear predictor exceeds the exp overflow guard");
    }
    it.mu = it.eta.array().exp();
    return it;
  }

  // Row weights of the linearized blip equation.
  VectorXd psi_weights(const Iterate& it) const {
    return equation_ == LoglinearEquation::ratio ? d_ : VectorXd(d_.cwiseProduct(it.mu));
  }

  // One IRLS update from `cur`, with the ingredients of the quadratic
  // approximation written to the optional outputs.
  std::pair<VectorXd, VectorXd> update(const Iterate& cur, VectorXd* z_out = nullptr,
                                       VectorXd* m_out = nullptr,
                                       MatrixXd* M_out = nullptr) const {
    const VectorXd& w = cur.mu;
    VectorXd z = cur.eta.array() + (y_.array() - cur.mu.array()) / cur.mu.array();
    const linalg::Projector proj(h_beta_, w);
    const MatrixXd scored = psi_weights(cur).asDiagonal() * h_psi_;
    MatrixXd M = scored.transpose() * proj.residual(treated_);
    VectorXd m = scored.transpose() * proj.residual(z);
    VectorXd psi = linalg::solve_identified(M, m);
    VectorXd beta = proj.coefficients(VectorXd(z - treated_ * psi));
    if (z_out) *z_out = std::move(z);
    if (m_out) *m_out = std::move(m);
    if (M_out) *M_out = std::move(M);
    return {std::move(beta), std::move(psi)};
  }

  // Newton step on the joint (beta, psi) system.
  std::pair<VectorXd, VectorXd> newton(const Iterate& cur) const {
    const Eigen::Index pb = h_beta_.cols();
    const Eigen::Index pp = h_psi_.cols();
    MatrixXd grad(cur.mu.size(), pb + pp);
    grad << h_beta_, treated_;
    MatrixXd jac(pb + pp, pb + pp);
    VectorXd rhs(pb + pp);
    jac.topRows(pb) = h_beta_.transpose() * cur.mu.asDiagonal() * grad;
    rhs.head(pb) = h_beta_.transpose() * (y_ - cur.mu);
    jac.bottomRows(pp) = h_psi_.transpose() * slope(cur).asDiagonal() * grad;
    rhs.tail(pp) = h_psi_.transpose() * equation_terms(cur);
    const VectorXd step = linalg::solve_identified(jac, rhs);
    return {cur.beta + step.head(pb), cur.psi + step.tail(pp)};
  }

  // Negative psi-Jacobian of the blip equation with beta(psi) profiled out.
  MatrixXd jacobian(const Iterate& cur) const {
    const linalg::Projector proj(h_beta_, cur.mu);
    return (slope(cur).asDiagonal() * h_psi_).transpose() * proj.residual(treated_);
  }

  // Per-subject terms e_i of the blip equation sum_i h_psi_i e_i = 0.
  VectorXd equation_terms(const Iterate& it) const {
    if (equation_ == LoglinearEquation::ratio) {
      return d_.cwiseProduct(VectorXd(y_.array() / it.mu.array() - 1.0));
    }
    return d_.cwiseProduct(y_ - it.mu);
  }

  double ee_residual(const Iterate& it) const {
    return (h_psi_.transpose() * equation_terms(it)).cwiseAbs().maxCoeff();
  }
  double beta_residual(const Iterate& it) const {
    if (h_beta_.cols() == 0) return 0.0;
    return (h_beta_.transpose() * (y_ - it.mu)).cwiseAbs().maxCoeff();
  }
  double ee_scale(const Iterate& it) const {
    const VectorXd observed = equation_ == LoglinearEquation::ratio
                                  ? VectorXd(d_.array() * y_.array() / it.mu.array())
                                  : VectorXd(d_.cwiseProduct(y_));
    return 1.0 + (h_psi_.transpose() * observed).cwiseAbs().maxCoeff();
  }
  double beta_scale() const {
    if (h_beta_.cols() == 0) return 1.0;
    return 1.0 + (h_beta_.transpose() * y_).cwiseAbs().maxCoeff();
  }
  double residual(const Iterate& it) const {
    return std::max(ee_residual(it) / ee_scale(it), beta_residual(it) / beta_scale());
  }

  VectorXd initial_beta() const {
    if (h_beta_.cols() == 0) return VectorXd(0);
    const VectorXd log_y = (y_.array() + 0.5).log();
    return linalg::Projector(h_beta_).coefficients(log_y);
  }

 private:
  // -d e_i / d eta_i
  VectorXd slope(const Iterate& it) const {
    if (equation_ == LoglinearEquation::ratio) {
      return VectorXd(d_.array() * y_.array() / it.mu.array());
    }
    return d_.cwiseProduct(it.mu);
  }

  const VectorXd& y_;
  const MatrixXd& h_beta_;
  const MatrixXd& h_psi_;
  const VectorXd& d_;
  LoglinearEquation equation_;
  MatrixXd treated_;
};

}  // namespace

LoglinearStageFit irls_stage_fit(const VectorXd& y_tilde, const DesignMatrices& design,
                                 const VectorXd& d, const IrlsOptions& opts) {
  opts.validate();
  const Eigen::Index n = design.rows();
  if (y_tilde.size() != n || d.size() != n || design.h_psi.rows() != n ||
      design.h_beta.rows() != n) {
    throw DimensionError("irls_stage_fit: inputs disagree on the number of subjects");
  }
  if (design.h_psi.cols() == 0) throw SpecificationError("blip model has no columns");
  if (!y_tilde.allFinite() || y_tilde.minCoeff() < 0.0) {
    throw DomainError("irls_stage_fit: pseudo-outcomes must be finite and nonnegative");
  }

  const IrlsProblem problem(y_tilde, design, d, opts.equation);
  Iterate cur = problem.make(problem.initial_beta(), VectorXd::Zero(design.h_psi.cols()));

  LoglinearStageFit fit;
  fit.d = d;
  fit.equation = opts.equation;
  for (int t = 1; t <= opts.max_iter; ++t) {
    fit.iterations = t;
    auto [beta, psi] = problem.update(cur);
    if (opts.damping) {
      beta = 0.5 * (beta + cur.beta);
      psi = 0.5 * (psi + cur.psi);
    }
    Iterate next = problem.make(std::move(beta), std::move(psi));
    const double change = (next.eta - cur.eta).cwiseAbs().maxCoeff();
    cur = std::move(next);
    if (change < opts.eps_eta) {
      fit.converged = true;
      break;
    }
  }

  if (fit.converged && opts.refine) {
    double res = problem.residual(cur);
    for (int k = 0; k < 50 && res > 1e-13; ++k) {
      auto [beta, psi] = problem.newton(cur);
      const VectorXd db = beta - cur.beta;
      const VectorXd dp = psi - cur.psi;
      bool accepted = false;
      double scale = 1.0;
      for (int h = 0; h < 20 && !accepted; ++h, scale *= 0.5) {
        try {
          Iterate trial = problem.make(cur.beta + scale * db, cur.psi + scale * dp);
          const double trial_res = problem.residual(trial);
          if (trial_res < res) {
            cur = std::move(trial);
            res = trial_res;
            accepted = true;
          }
        } catch (const DivergenceError&) {
        }
      }
      if (!accepted) break;
      ++fit.refine_iterations;
    }
  }

  fit.beta = cur.beta;
  fit.psi = cur.psi;
  fit.ee_residual = problem.ee_residual(cur);
  fit.ee_scale = problem.ee_scale(cur);
  fit.beta_residual = problem.beta_residual(cur);
  fit.beta_scale = problem.beta_scale();
  if (opts.refine && fit.converged &&
      (fit.normalized_ee_residual() > kFixedPointTolerance ||
       fit.normalized_beta_residual() > kFixedPointTolerance)) {
    fit.converged = false;
  }

  (void)problem.update(cur, &fit.z, &fit.m_tilde, &fit.M_tilde);
  fit.jacobian = problem.jacobian(cur);
  fit.w = cur.mu;
  fit.eta = std::move(cur.eta);
  fit.mu = std::move(cur.mu);
  if (fit.converged) fit.q_at_psi_hat = quasi_likelihood_loglinear(fit);
  return fit;
}

double quasi_likelihood_loglinear(const LoglinearStageFit& fit) {
  if (!fit.converged) throw StateError("quasi-likelihood requested for a non-converged IRLS fit");
  return fit.psi.dot(fit.m_tilde) - 0.5 * fit.psi.dot(fit.M_tilde * fit.psi);
}

}  // namespace gestdtr
