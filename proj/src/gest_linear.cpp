#include "gestdtr/gest_linear.hpp"

#include "gestdtr/errors.hpp"

namespace gestdtr {

VectorXd pseudo_outcome_linear(const VectorXd& y, std::span<const BlipValues> later) {
  VectorXd y_tilde = y;
  for (const BlipValues& stage : later) {
    if (stage.optimal.size() != y.size() || stage.observed.size() != y.size()) {
      throw DimensionError("pseudo_outcome_linear: blip values do not cover every subject");
    }
    y_tilde += stage.optimal - stage.observed;
  }
  return y_tilde;
}

LinearStageFit stage_fit_linear(const VectorXd& y_tilde, const DesignMatrices& design,
                                const VectorXd& d) {
  const Eigen::Index n = design.rows();
  if (y_tilde.size() != n || d.size() != n || design.h_psi.rows() != n ||
      design.h_beta.rows() != n) {
    throw DimensionError("stage_fit_linear: inputs disagree on the number of subjects");
  }
  if (design.h_psi.cols() == 0) throw SpecificationError("blip model has no columns");

  const linalg::Projector tf(design.h_beta);
  const MatrixXd treated = design.a.asDiagonal() * design.h_psi;  // A h_psi
  const MatrixXd scored = d.asDiagonal() * design.h_psi;          // D h_psi

  LinearStageFit fit;
  fit.d = d;
  fit.M = scored.transpose() * tf.residual(treated);
  fit.m = scored.transpose() * tf.residual(y_tilde);
  fit.psi = linalg::solve_identified(fit.M, fit.m, &fit.condition);

  const VectorXd removed = y_tilde - treated * fit.psi;
  fit.beta = tf.coefficients(removed);
  fit.residuals = tf.residual(removed);
  fit.q_at_psi_hat = quasi_likelihood_linear(fit.psi, fit.m, fit.M);
  return fit;
}

double quasi_likelihood_linear(const VectorXd& psi, const VectorXd& m, const MatrixXd& M) {
  if (psi.size() != m.size() || M.rows() != psi.size() || M.cols() != psi.size()) {
    throw DimensionError("quasi_likelihood_linear: dimension mismatch");
  }
  return psi.dot(m) - 0.5 * psi.dot(M * psi);
}

}  // namespace gestdtr
