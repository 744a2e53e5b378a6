#pragma once

#include <Eigen/Dense>

namespace gestdtr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace linalg {

// Designs and normal-equation systems whose pivoted-QR diagonal ratio exceeds
// this bound are treated as singular.
inline constexpr double kMaxCondition = 1e12;

// Ratio |R_00| / |R_kk| of a column-pivoted QR; +inf when the trailing
// diagonal is exactly zero, 1 for an empty matrix.
double pivoted_condition(const Eigen::ColPivHouseholderQR<MatrixXd>& qr);

// Least-squares projection onto the column space of a design, optionally with
// observation weights. `residual(v)` applies (I - P) where
// P = X (X' W X)^-1 X' W.
class Projector {
 public:
  // Throws SingularityError when the (weighted) design is rank deficient.
  explicit Projector(const MatrixXd& basis);
  Projector(const MatrixXd& basis, const VectorXd& weights);

  VectorXd coefficients(const VectorXd& v) const;
  VectorXd residual(const VectorXd& v) const;
  MatrixXd residual(const MatrixXd& v) const;

  double condition() const noexcept { return condition_; }
  Eigen::Index cols() const noexcept { return basis_.cols(); }

 private:
  void factorize(const MatrixXd& scaled);

  MatrixXd basis_;
  VectorXd sqrt_w_;  // empty when unweighted
  Eigen::ColPivHouseholderQR<MatrixXd> qr_;
  double condition_ = 1.0;
};

// Solves the square system M x = rhs, throwing IdentifiabilityError (with the
// condition estimate) when M is singular to working precision.
VectorXd solve_identified(const MatrixXd& M, const VectorXd& rhs,
                          double* condition = nullptr);

// Inverse of a square matrix; throws SingularityError when ill conditioned.
MatrixXd checked_inverse(const MatrixXd& M, const char* what);

}  // namespace linalg
}  // namespace gestdtr
