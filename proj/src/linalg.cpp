#include "gestdtr/linalg.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "gestdtr/errors.hpp"

namespace gestdtr::linalg {

double pivoted_condition(const Eigen::ColPivHouseholderQR<MatrixXd>& qr) {
  const MatrixXd& r = qr.matrixQR();
  const Eigen::Index k = std::min(r.rows(), r.cols());
  if (k == 0) return 1.0;
  const double top = std::abs(r(0, 0));
  const double bottom = std::abs(r(k - 1, k - 1));
  if (bottom == 0.0) return std::numeric_limits<double>::infinity();
  return top / bottom;
}

Projector::Projector(const MatrixXd& basis) : basis_(basis) {
  factorize(basis_);
}

Projector::Projector(const MatrixXd& basis, const VectorXd& weights)
    : basis_(basis), sqrt_w_(weights.array().sqrt().matrix()) {
  if (weights.size() != basis.rows()) {
    throw DimensionError("projector weights do not match design rows");
  }
  factorize(sqrt_w_.asDiagonal() * basis_);
}

void Projector::factorize(const MatrixXd& scaled) {
  if (basis_.cols() == 0) return;
  if (basis_.rows() < basis_.cols()) {
    throw SingularityError("design has fewer rows than columns",
                           std::numeric_limits<double>::infinity());
  }
  qr_.compute(scaled);
  condition_ = pivoted_condition(qr_);
  if (!(condition_ <= kMaxCondition)) {
    std::ostringstream msg;
    msg << "design matrix is rank deficient (condition " << condition_ << ")";
    throw SingularityError(msg.str(), condition_);
  }
}

VectorXd Projector::coefficients(const VectorXd& v) const {
  if (basis_.cols() == 0) return VectorXd(0);
  if (sqrt_w_.size() == 0) return qr_.solve(v);
  return qr_.solve(VectorXd(sqrt_w_.cwiseProduct(v)));
}

VectorXd Projector::residual(const VectorXd& v) const {
  if (basis_.cols() == 0) return v;
  return v - basis_ * coefficients(v);
}

MatrixXd Projector::residual(const MatrixXd& v) const {
  if (basis_.cols() == 0) return v;
  MatrixXd coef = sqrt_w_.size() == 0
                      ? MatrixXd(qr_.solve(v))
                      : MatrixXd(qr_.solve(MatrixXd(sqrt_w_.asDiagonal() * v)));
  return v - basis_ * coef;
}

VectorXd solve_identified(const MatrixXd& M, const VectorXd& rhs,
                          double* condition) {
  if (M.rows() != M.cols() || M.rows() != rhs.size()) {
    throw DimensionError("solve_identified: system is not square");
  }
  if (M.rows() == 0) return VectorXd(0);
  Eigen::ColPivHouseholderQR<MatrixXd> qr(M);
  const double cond = pivoted_condition(qr);
  if (condition) *condition = cond;
  if (!(cond <= kMaxCondition)) {
    std::ostringstream msg;
    msg << "blip parameters are not identified: estimating-equation matrix is "
           "singular (condition "
        << cond << ")";
    throw IdentifiabilityError(msg.str(), cond);
  }
  return qr.solve(rhs);
}

MatrixXd checked_inverse(const MatrixXd& M, const char* what) {
  if (M.rows() != M.cols()) throw DimensionError("checked_inverse: not square");
  if (M.rows() == 0) return MatrixXd(0, 0);
  Eigen::ColPivHouseholderQR<MatrixXd> qr(M);
  const double cond = pivoted_condition(qr);
  if (!(cond <= kMaxCondition)) {
    std::ostringstream msg;
    msg << what << " is singular (condition " << cond << ")";
    throw SingularityError(msg.str(), cond);
  }
  return qr.inverse();
}

}  // namespace gestdtr::linalg
