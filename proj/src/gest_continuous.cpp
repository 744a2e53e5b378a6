#include "gestdtr/gest_continuous.hpp"

#include <algorithm>

#include "gestdtr/errors.hpp"

namespace gestdtr {

VectorXd ContinuousStageFit::psi() const {
  VectorXd out(psi1.size() + psi2.size());
  out << psi1, psi2;
  return out;
}

ContinuousStageFit stage_fit_continuous(const VectorXd& y_tilde, const MatrixXd& h_psi1,
                                        const MatrixXd& h_psi2, const MatrixXd& h_beta,
                                        const VectorXd& a, const TreatmentFit& tfit) {
  const Eigen::Index n = a.size();
  if (y_tilde.size() != n || h_psi1.rows() != n || h_psi2.rows() != n || h_beta.rows() != n) {
    throw DimensionError("stage_fit_continuous: inputs disagree on the number of subjects");
  }
  if (h_psi1.cols() + h_psi2.cols() == 0) throw SpecificationError("blip model has no columns");

  ContinuousStageFit fit;
  fit.d1 = treatment_residuals(tfit, a);
  fit.d2 = h_psi2.cols() > 0 ? second_moment_residuals(tfit, a) : VectorXd(VectorXd::Zero(n));

  const Eigen::Index p1 = h_psi1.cols();
  const Eigen::Index p2 = h_psi2.cols();
  MatrixXd scored(n, p1 + p2);
  MatrixXd regressors(n, p1 + p2);
  const VectorXd a2 = a.array().square();
  scored << fit.d1.asDiagonal() * h_psi1, fit.d2.asDiagonal() * h_psi2;
  regressors << a.asDiagonal() * h_psi1, a2.asDiagonal() * h_psi2;

  const linalg::Projector tf(h_beta);
  fit.M_c = scored.transpose() * tf.residual(regressors);
  fit.m_c = scored.transpose() * tf.residual(y_tilde);
  const VectorXd psi = linalg::solve_identified(fit.M_c, fit.m_c, &fit.condition);
  fit.psi1 = psi.head(p1);
  fit.psi2 = psi.tail(p2);

  const VectorXd removed = y_tilde - regressors * psi;
  fit.beta = tf.coefficients(removed);
  fit.residuals = tf.residual(removed);
  fit.q_at_psi_hat = quasi_likelihood_continuous(psi, fit);
  return fit;
}

double optimal_dose(double lin, double quad, const DoseRange& range) {
  const double lo = range.lo;
  const double hi = range.hi;
  if (quad < 0.0) {
    const double vertex = -lin / (2.0 * quad);
    return std::clamp(vertex, lo, hi);
  }
  const double at_lo = lo * lin + lo * lo * quad;
  const double at_hi = hi * lin + hi * hi * quad;
  return at_hi > at_lo ? hi : lo;
}

double optimal_dose(const VectorXd& psi1, const VectorXd& psi2, const VectorXd& h_psi1_row,
                    const VectorXd& h_psi2_row, const DoseRange& range) {
  if (psi1.size() != h_psi1_row.size() || psi2.size() != h_psi2_row.size()) {
    throw DimensionError("optimal_dose: coefficient and history lengths differ");
  }
  return optimal_dose(h_psi1_row.dot(psi1), h_psi2_row.dot(psi2), range);
}

double quasi_likelihood_continuous(const VectorXd& psi, const ContinuousStageFit& fit) {
  if (psi.size() != fit.m_c.size()) {
    throw DimensionError("quasi_likelihood_continuous: dimension mismatch");
  }
  return psi.dot(fit.m_c) - 0.5 * psi.dot(fit.M_c * psi);
}

double quasi_likelihood_continuous(const ContinuousStageFit& fit) {
  return quasi_likelihood_continuous(fit.psi(), fit);
}

}  // namespace gestdtr
