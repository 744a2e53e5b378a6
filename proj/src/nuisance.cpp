#include "gestdtr/nuisance.hpp"

#include <cmath>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr {

double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

double log_likelihood(const VectorXd& eta, const VectorXd& a) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + e^eta) computed without overflow
    const double softplus = eta(i) > 0 ? eta(i) + std::log1p(std::exp(-eta(i)))
                                       : std::log1p(std::exp(eta(i)));
    ll += a(i) * eta(i) - softplus;
  }
  return ll;
}

}  // namespace

TreatmentFit fit_logistic(const MatrixXd& h_alpha, const VectorXd& a,
                          const LogisticOptions& opts) {
  const Eigen::Index n = h_alpha.rows();
  const Eigen::Index p = h_alpha.cols();
  if (a.size() != n) throw DimensionError("fit_logistic: treatment length does not match design");
  if (n == 0 || p == 0) throw DimensionError("fit_logistic: empty design");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a(i) != 0.0 && a(i) != 1.0) throw DomainError("fit_logistic: treatments must be 0 or 1");
  }
  if (a.minCoeff() == a.maxCoeff()) {
    throw SeparationError("treatment model is degenerate: every subject received the same treatment");
  }
  // Rank check up front; throws SingularityError.
  (void)linalg::Projector(h_alpha);

  TreatmentFit fit;
  fit.alpha = VectorXd::Zero(p);
  VectorXd eta = VectorXd::Zero(n);
  double ll = log_likelihood(eta, a);
  fit.converged = false;
  for (int it = 1; it <= opts.max_iter; ++it) {
    fit.iterations = it;
    VectorXd prob = eta.unaryExpr([](double x) { return expit(x); });
    VectorXd w = prob.array() * (1.0 - prob.array());
    VectorXd score = h_alpha.transpose() * (a - prob);
    MatrixXd info = h_alpha.transpose() * w.asDiagonal() * h_alpha;
    Eigen::LDLT<MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) break;
    VectorXd step = ldlt.solve(score);
    if (!step.allFinite()) break;

    // Step-halving keeps the likelihood monotone.
    double scale = 1.0;
    VectorXd next = fit.alpha + step;
    VectorXd next_eta = h_alpha * next;
    double next_ll = log_likelihood(next_eta, a);
    for (int h = 0; h < 30 && next_ll < ll - 1e-12 * (1.0 + std::abs(ll)); ++h) {
      scale *= 0.5;
      next = fit.alpha + scale * step;
      next_eta = h_alpha * next;
      next_ll = log_likelihood(next_eta, a);
    }
    const double change = (next - fit.alpha).cwiseAbs().maxCoeff();
    fit.alpha = std::move(next);
    eta = std::move(next_eta);
    ll = next_ll;
    if (change < opts.tolerance) {
      fit.converged = true;
      break;
    }
  }
  fit.fitted = eta.unaryExpr([](double x) { return expit(x); });

  const double lo = fit.fitted.minCoeff();
  const double hi = fit.fitted.maxCoeff();
  if (lo < opts.boundary || hi > 1.0 - opts.boundary ||
      fit.alpha.norm() > opts.max_coef_norm || !fit.alpha.allFinite()) {
    std::ostringstream msg;
    msg << "treatment model shows separation: fitted probabilities reach [" << lo << ", "
        << hi << "] with |alpha| = " << fit.alpha.norm();
    throw SeparationError(msg.str());
  }
  return fit;
}

TreatmentFit fit_continuous_treatment(const MatrixXd& h_alpha, const VectorXd& a) {
  const Eigen::Index n = h_alpha.rows();
  const Eigen::Index p = h_alpha.cols();
  if (a.size() != n) throw DimensionError("fit_continuous_treatment: treatment length does not match design");
  if (n == 0) throw DimensionError("fit_continuous_treatment: empty design");
  linalg::Projector proj(h_alpha);
  TreatmentFit fit;
  fit.alpha = proj.coefficients(a);
  fit.fitted = p == 0 ? VectorXd(VectorXd::Zero(n)) : VectorXd(h_alpha * fit.alpha);
  const VectorXd resid = a - fit.fitted;
  const double dof = static_cast<double>(std::max<Eigen::Index>(n - p, 1));
  fit.residual_variance = resid.squaredNorm() / dof;
  fit.second_moment = fit.fitted.array().square() + fit.residual_variance;
  fit.converged = true;
  fit.iterations = 1;
  return fit;
}

VectorXd treatment_residuals(const TreatmentFit& fit, const VectorXd& a) {
  if (fit.fitted.size() != a.size()) {
    throw DimensionError("treatment_residuals: fitted values and treatments differ in length");
  }
  return a - fit.fitted;
}

VectorXd second_moment_residuals(const TreatmentFit& fit, const VectorXd& a) {
  if (!fit.second_moment) {
    throw StateError("treatment fit carries no second moment (fit it as a continuous treatment)");
  }
  if (fit.second_moment->size() != a.size()) {
    throw DimensionError("second_moment_residuals: length mismatch");
  }
  return a.array().square().matrix() - *fit.second_moment;
}

}  // namespace gestdtr
