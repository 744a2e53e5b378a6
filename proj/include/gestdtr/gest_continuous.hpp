#pragma once

#include "gestdtr/data_model.hpp"
#include "gestdtr/linalg.hpp"
#include "gestdtr/nuisance.hpp"

namespace gestdtr {

// Quadratic-in-dose blip gamma = a h_psi1 psi1 + a^2 h_psi2 psi2.
struct ContinuousStageFit {
  VectorXd psi1;
  VectorXd psi2;
  VectorXd beta;
  VectorXd d1;  // a - E[A | H]
  VectorXd d2;  // a^2 - E[A^2 | H]
  VectorXd m_c;
  MatrixXd M_c;
  VectorXd residuals;  // (I - H_beta)(y_tilde - A h_psi1 psi1 - A^2 h_psi2 psi2)
  double q_at_psi_hat = 0.0;
  double condition = 1.0;

  VectorXd psi() const;  // (psi1, psi2) stacked
};

// Stacked score [D1 h_psi1, D2 h_psi2] against regressors [A h_psi1, A^2 h_psi2]
// with beta profiled out by least squares on h_beta.
ContinuousStageFit stage_fit_continuous(const VectorXd& y_tilde, const MatrixXd& h_psi1,
                                        const MatrixXd& h_psi2, const MatrixXd& h_beta,
                                        const VectorXd& a, const TreatmentFit& tfit);

inline ContinuousStageFit stage_fit_continuous(const VectorXd& y_tilde,
                                               const DesignMatrices& design,
                                               const TreatmentFit& tfit) {
  return stage_fit_continuous(y_tilde, design.h_psi, design.h_psi2, design.h_beta, design.a,
                              tfit);
}

// Maximizer of a*lin + a^2*quad over [lo, hi]; ties go to lo.
double optimal_dose(double lin, double quad, const DoseRange& range);
double optimal_dose(const VectorXd& psi1, const VectorXd& psi2, const VectorXd& h_psi1_row,
                    const VectorXd& h_psi2_row, const DoseRange& range);

double quasi_likelihood_continuous(const ContinuousStageFit& fit);
double quasi_likelihood_continuous(const VectorXd& psi, const ContinuousStageFit& fit);

}  // namespace gestdtr
