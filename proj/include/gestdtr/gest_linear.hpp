#pragma once

#include <span>

#include "gestdtr/data_model.hpp"
#include "gestdtr/linalg.hpp"

namespace gestdtr {

// Blip values of one later stage k for every subject: gamma_k(h, a_k^opt)
// and gamma_k(h, a_k) at the estimated parameters.
struct BlipValues {
  VectorXd optimal;
  VectorXd observed;
};

// Additive-scale stage fit. W = D'(I - H_beta) is never formed; its action is
// carried by `d` together with the projection onto h_beta.
struct LinearStageFit {
  VectorXd psi;
  VectorXd beta;
  VectorXd d;          // treatment residuals a - E[A | h_alpha]
  VectorXd m;          // h_psi' W y_tilde
  MatrixXd M;          // h_psi' W A h_psi (generally asymmetric)
  VectorXd residuals;  // (I - H_beta)(y_tilde - A h_psi psi)
  double q_at_psi_hat = 0.0;
  double condition = 1.0;  // of M
};

// y_tilde_i = y_i + sum_{k>j} (gamma_k^opt_i - gamma_k^obs_i).
VectorXd pseudo_outcome_linear(const VectorXd& y, std::span<const BlipValues> later);

// Closed-form G-estimate psi = (h_psi' W A h_psi)^-1 h_psi' W y_tilde with
// beta profiled out by least squares.
LinearStageFit stage_fit_linear(const VectorXd& y_tilde, const DesignMatrices& design,
                                const VectorXd& d);

// Q(psi) = psi'm - psi'M psi / 2 (constant term dropped).
double quasi_likelihood_linear(const VectorXd& psi, const VectorXd& m, const MatrixXd& M);

}  // namespace gestdtr
