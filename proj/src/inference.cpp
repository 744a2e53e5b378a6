#include "gestdtr/inference.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr {

namespace {

MatrixXd outer_sum(const MatrixXd& u) { return u.transpose() * u; }

void check_rows(Eigen::Index n, const DesignMatrices& design, const char* what) {
  if (design.rows() != n || design.h_psi.rows() != n) {
    std::ostringstream msg;
    msg << what << ": fit and design disagree on the number of subjects";
    throw DimensionError(msg.str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

MatrixXd score_matrix(const LinearStageFit& fit, const DesignMatrices& design) {
  check_rows(fit.d.size(), design, "score_matrix");
  return fit.d.cwiseProduct(fit.residuals).asDiagonal() * design.h_psi;
}

MatrixXd score_matrix(const LoglinearStageFit& fit, const DesignMatrices& design,
                      const VectorXd& y_tilde) {
  if (!fit.converged) throw StateError("scores requested for a non-converged IRLS fit");
  check_rows(fit.d.size(), design, "score_matrix");
  if (y_tilde.size() != fit.mu.size()) {
    throw DimensionError("score_matrix: pseudo-outcome length does not match the fit");
  }
  const VectorXd e = fit.equation == LoglinearEquation::ratio
                         ? VectorXd(fit.d.array() * (y_tilde.array() / fit.mu.array() - 1.0))
                         : VectorXd(fit.d.cwiseProduct(y_tilde - fit.mu));
  return e.asDiagonal() * design.h_psi;
}

MatrixXd score_matrix(const ContinuousStageFit& fit, const DesignMatrices& design) {
  const Eigen::Index n = fit.d1.size();
  if (design.rows() != n || design.h_psi.rows() != n || design.h_psi2.rows() != n) {
    throw DimensionError("score_matrix: fit and design disagree on the number of subjects");
  }
  MatrixXd u(n, design.h_psi.cols() + design.h_psi2.cols());
  u << fit.d1.cwiseProduct(fit.residuals).asDiagonal() * design.h_psi,
      fit.d2.cwiseProduct(fit.residuals).asDiagonal() * design.h_psi2;
  return u;
}

std::pair<MatrixXd, MatrixXd> info_matrices(const LinearStageFit& fit,
                                            const DesignMatrices& design) {
  return {fit.M, outer_sum(score_matrix(fit, design))};
}

std::pair<MatrixXd, MatrixXd> info_matrices(const LoglinearStageFit& fit,
                                            const DesignMatrices& design,
                                            const VectorXd& y_tilde) {
  return {fit.jacobian, outer_sum(score_matrix(fit, design, y_tilde))};
}

std::pair<MatrixXd, MatrixXd> info_matrices(const ContinuousStageFit& fit,
                                            const DesignMatrices& design) {
  return {fit.M_c, outer_sum(score_matrix(fit, design))};
}

// ---------------------------------------------------------------------------
// Sandwich, trace penalty, criteria
// ---------------------------------------------------------------------------

MatrixXd sandwich_variance(const MatrixXd& I_hat, const MatrixXd& J_hat) {
  if (I_hat.rows() != I_hat.cols() || J_hat.rows() != I_hat.rows() ||
      J_hat.cols() != I_hat.cols()) {
    throw DimensionError("sandwich_variance: I and J must be square and of equal size");
  }
  const MatrixXd inv = linalg::checked_inverse(I_hat, "information matrix");
  const MatrixXd v = inv * J_hat * inv.transpose();
  return 0.5 * (v + v.transpose());
}

double trace_term(const MatrixXd& I_hat, const MatrixXd& J_hat) {
  if (I_hat.rows() != I_hat.cols() || J_hat.rows() != I_hat.rows() ||
      J_hat.cols() != I_hat.cols()) {
    throw DimensionError("trace_term: I and J must be square and of equal size");
  }
  const MatrixXd inv = linalg::checked_inverse(I_hat, "information matrix");
  return (J_hat * inv).trace();
}

double qic(double q, double k) { return -2.0 * q + 2.0 * k; }

double wald_pvalue(double estimate, double variance) {
  if (!(variance > 0.0)) {
    std::ostringstream msg;
    msg << "Wald test needs a positive variance (got " << variance << ")";
    throw DomainError(msg.str());
  }
  const double z = estimate / std::sqrt(variance);
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

VectorXd wald_pvalues(const VectorXd& psi, const MatrixXd& V_hat) {
  if (V_hat.rows() != psi.size() || V_hat.cols() != psi.size()) {
    throw DimensionError("wald_pvalues: variance matrix does not match the estimates");
  }
  VectorXd p(psi.size());
  for (Eigen::Index k = 0; k < psi.size(); ++k) p(k) = wald_pvalue(psi(k), V_hat(k, k));
  return p;
}

StageInference make_inference(MatrixXd I_hat, MatrixXd J_hat, const VectorXd& psi, double q) {
  StageInference out;
  out.I_hat = std::move(I_hat);
  out.J_hat = std::move(J_hat);
  out.V_hat = sandwich_variance(out.I_hat, out.J_hat);
  out.K = trace_term(out.I_hat, out.J_hat);
  out.q = q;
  out.qic = qic(q, out.K);
  out.se = out.V_hat.diagonal().cwiseMax(0.0).cwiseSqrt();
  out.wald_p.resize(psi.size());
  for (Eigen::Index k = 0; k < psi.size(); ++k) {
    // A zero variance arises only for a degenerate score column.
    out.wald_p(k) = out.V_hat(k, k) > 0.0 ? wald_pvalue(psi(k), out.V_hat(k, k))
                                          : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

StageInference infer(const LinearStageFit& fit, const DesignMatrices& design) {
  auto [i_hat, j_hat] = info_matrices(fit, design);
  return make_inference(std::move(i_hat), std::move(j_hat), fit.psi, fit.q_at_psi_hat);
}

StageInference infer(const LoglinearStageFit& fit, const DesignMatrices& design,
                     const VectorXd& y_tilde) {
  auto [i_hat, j_hat] = info_matrices(fit, design, y_tilde);
  return make_inference(std::move(i_hat), std::move(j_hat), fit.psi,
                        quasi_likelihood_loglinear(fit));
}

StageInference infer(const ContinuousStageFit& fit, const DesignMatrices& design) {
  auto [i_hat, j_hat] = info_matrices(fit, design);
  return make_inference(std::move(i_hat), std::move(j_hat), fit.psi(), fit.q_at_psi_hat);
}

}  // namespace gestdtr
