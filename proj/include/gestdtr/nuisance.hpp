#pragma once

#include <optional>

#include "gestdtr/linalg.hpp"

namespace gestdtr {

// Fitted treatment (propensity) model E[A_j | h_alpha].
struct TreatmentFit {
  VectorXd alpha;
  VectorXd fitted;                       // E[A | h_alpha]
  std::optional<VectorXd> second_moment;  // E[A^2 | h_alpha], continuous only
  double residual_variance = 0.0;         // continuous only
  bool converged = true;
  int iterations = 0;
};

struct LogisticOptions {
  double tolerance = 1e-8;  // on max |delta alpha|
  int max_iter = 100;
  double boundary = 1e-10;      // fitted probabilities this close to 0/1 flag separation
  double max_coef_norm = 1e4;
};

// Binomial maximum likelihood by Newton-Raphson (IRLS), starting at zero.
// Throws SeparationError on (quasi-)complete separation and SingularityError
// on a rank-deficient design.
TreatmentFit fit_logistic(const MatrixXd& h_alpha, const VectorXd& a,
                          const LogisticOptions& opts = {});

// Ordinary least squares for E[A|H] plus a homoscedastic second moment
// E[A^2|H] = fitted^2 + sigma^2 with sigma^2 the residual variance (n - p).
TreatmentFit fit_continuous_treatment(const MatrixXd& h_alpha, const VectorXd& a);

// d_i = a_i - E[A_i | h_alpha].
VectorXd treatment_residuals(const TreatmentFit& fit, const VectorXd& a);

// a_i^2 - E[A_i^2 | h_alpha]; requires a continuous-treatment fit.
VectorXd second_moment_residuals(const TreatmentFit& fit, const VectorXd& a);

double expit(double x);

}  // namespace gestdtr
