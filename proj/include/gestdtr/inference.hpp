#pragma once

#include <utility>

#include "gestdtr/data_model.hpp"
#include "gestdtr/gest_continuous.hpp"
#include "gestdtr/gest_linear.hpp"
#include "gestdtr/gest_loglinear.hpp"
#include "gestdtr/linalg.hpp"

namespace gestdtr {

// All matrices are totals over subjects, not per-observation averages.
struct StageInference {
  MatrixXd I_hat;  // negative Jacobian of the total score in psi
  MatrixXd J_hat;  // sum_i u_i u_i'
  MatrixXd V_hat;  // I^-1 J I^-T, symmetrized
  double K = 0.0;  // tr(J I^-1)
  double q = 0.0;
  double qic = 0.0;
  VectorXd se;      // sqrt(diag V_hat)
  VectorXd wald_p;  // two-sided normal p-values
};

// Per-subject scores (n x p). Linear: u_i = d_i e_i h_psi_i with e the
// treatment-free residual. Log-linear: u_i = e_i h_psi_i with e_i the fit's
// blip-equation term.
// Continuous: u_i = e_i [d1_i h_psi1_i, d2_i h_psi2_i].
MatrixXd score_matrix(const LinearStageFit& fit, const DesignMatrices& design);
MatrixXd score_matrix(const LoglinearStageFit& fit, const DesignMatrices& design,
                      const VectorXd& y_tilde);
MatrixXd score_matrix(const ContinuousStageFit& fit, const DesignMatrices& design);

// (I_hat, J_hat). I_hat is M, the profiled log-linear Jacobian, or M_c.
std::pair<MatrixXd, MatrixXd> info_matrices(const LinearStageFit& fit,
                                            const DesignMatrices& design);
std::pair<MatrixXd, MatrixXd> info_matrices(const LoglinearStageFit& fit,
                                            const DesignMatrices& design,
                                            const VectorXd& y_tilde);
std::pair<MatrixXd, MatrixXd> info_matrices(const ContinuousStageFit& fit,
                                            const DesignMatrices& design);

MatrixXd sandwich_variance(const MatrixXd& I_hat, const MatrixXd& J_hat);
double trace_term(const MatrixXd& I_hat, const MatrixXd& J_hat);
double qic(double q, double k);
double wald_pvalue(double estimate, double variance);
VectorXd wald_pvalues(const VectorXd& psi, const MatrixXd& V_hat);

// Assembles V, K, QIC and p-values from (I, J) and the stage estimates.
StageInference make_inference(MatrixXd I_hat, MatrixXd J_hat, const VectorXd& psi, double q);

StageInference infer(const LinearStageFit& fit, const DesignMatrices& design);
StageInference infer(const LoglinearStageFit& fit, const DesignMatrices& design,
                     const VectorXd& y_tilde);
StageInference infer(const ContinuousStageFit& fit, const DesignMatrices& design);

}  // namespace gestdtr
