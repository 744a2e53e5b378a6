#pragma once

#include <limits>
#include <span>
#include <string_view>

#include "gestdtr/data_model.hpp"
#include "gestdtr/linalg.hpp"

namespace gestdtr {

// Form of the blip estimating equation, both with mu_i = exp(h_beta_i beta + a_i h_psi_i psi):
//   ratio:      sum_i d_i h_psi_i (y_i / mu_i - 1) = 0
//   difference: sum_i d_i h_psi_i (y_i - mu_i) = 0
// The ratio form stays unbiased under a misspecified treatment-free model
// when the treatment model is correct; the difference form does not.
enum class LoglinearEquation { ratio, difference };

const char* to_string(LoglinearEquation eq);
LoglinearEquation parse_loglinear_equation(std::string_view text);

struct IrlsOptions {
  double eps_eta = 1e-3;          // stop when max |eta(t) - eta(t-1)| < eps_eta
  int max_iter = 1000;
  bool damping = true;            // average each raw update with the previous iterate
  double zero_replacement = 1e-3;  // stand-in for y = 0 inside pseudo-outcome products
  // After the eta criterion is met, take undamped Newton steps until both
  // estimating equations hold to working precision.
  bool refine = true;
  LoglinearEquation equation = LoglinearEquation::ratio;

  void validate() const;
  friend bool operator==(const IrlsOptions&, const IrlsOptions&) = default;
};

// Normalized sup-norm bound every converged fit satisfies on both equations.
inline constexpr double kFixedPointTolerance = 1e-6;

struct LoglinearStageFit {
  VectorXd psi;
  VectorXd beta;
  VectorXd d;
  VectorXd eta;  // h_beta beta + a h_psi psi
  VectorXd mu;   // exp(eta)
  VectorXd z;    // working response at the final iterate
  VectorXd w;    // working weights (mu for the log link, V(mu) = mu)
  LoglinearEquation equation = LoglinearEquation::ratio;
  bool converged = false;
  int iterations = 0;         // damped IRLS iterations
  int refine_iterations = 0;  // Newton polishing steps after the eta criterion
  double ee_residual = 0.0;    // sup-norm of the blip estimating equation
  double ee_scale = 1.0;       // 1 + sup-norm of its observed-outcome part
  double beta_residual = 0.0;  // || sum_i h_beta_i (y_i - mu_i) ||_inf
  double beta_scale = 1.0;     // 1 + || h_beta' y_tilde ||_inf
  // Quadratic approximation at the final iterate, with v = d (ratio) or
  // v = d w (difference): m~ = h_psi' diag(v)(I - P_w) z and
  // M~ = h_psi' diag(v)(I - P_w) A h_psi.
  VectorXd m_tilde;
  MatrixXd M_tilde;
  // Negative Jacobian in psi of the blip estimating equation with beta
  // profiled out through its own equation.
  MatrixXd jacobian;
  double q_at_psi_hat = std::numeric_limits<double>::quiet_NaN();

  double normalized_ee_residual() const { return ee_residual / ee_scale; }
  double normalized_beta_residual() const { return beta_residual / beta_scale; }
};

// y_tilde_i = y_i * prod_{k>j} ratio_k,i. A zero outcome is replaced by
// `zero_replacement` before multiplying whenever at least one later stage
// contributes a ratio; at the final stage y_tilde = y.
VectorXd pseudo_outcome_loglinear(const VectorXd& y, std::span<const VectorXd> later_ratios,
                                  double zero_replacement = 1e-3);

// Solves the blip equation selected by `opts.equation` jointly with
// sum_i h_beta_i (y_i - mu_i) = 0 by iteratively reweighted least squares. Non-convergence is reported through `converged`; exp overflow
// throws DivergenceError and singular weighted systems throw SingularityError.
LoglinearStageFit irls_stage_fit(const VectorXd& y_tilde, const DesignMatrices& design,
                                 const VectorXd& d, const IrlsOptions& opts = {});

// Quadratic approximation Q = psi'm~ - psi'M~ psi / 2 built from the final
// working response and weights. Throws StateError on a non-converged fit.
double quasi_likelihood_loglinear(const LoglinearStageFit& fit);

}  // namespace gestdtr
