#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "gestdtr/errors.hpp"
#include "gestdtr/gest_linear.hpp"
#include "gestdtr/nuisance.hpp"

using namespace gestdtr;

namespace {

double sup(const VectorXd& v) { return v.cwiseAbs().maxCoeff(); }

DesignMatrices random_design(std::size_t n, std::mt19937_64& rng) {
  DesignMatrices d;
  d.h_psi = fixtures::design_with_intercept(n, 2, rng);
  d.h_beta = fixtures::design_with_intercept(n, 3, rng);
  d.h_alpha = d.h_psi;
  d.a = fixtures::bernoulli(d.h_alpha, VectorXd::Constant(2, 0.3), rng);
  d.h_psi2 = MatrixXd(static_cast<Eigen::Index>(n), 0);
  return d;
}

// Binary covariate with saturated blip, treatment-free and treatment models.
DesignMatrices saturated_design(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MatrixXd X(static_cast<Eigen::Index>(n), 2);
  VectorXd a(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = unif(rng) < 0.5 ? 1.0 : 0.0;
    a(i) = unif(rng) < (X(i, 1) > 0 ? 0.7 : 0.35) ? 1.0 : 0.0;
  }
  DesignMatrices d;
  d.h_psi = d.h_beta = d.h_alpha = X;
  d.h_psi2 = MatrixXd(X.rows(), 0);
  d.a = a;
  return d;
}

}  // namespace

TEST_CASE("logistic fit solves the score equations") {
  std::mt19937_64 rng(5);
  const MatrixXd X = fixtures::design_with_intercept(400, 3, rng);
  VectorXd alpha_true(3);
  alpha_true << -0.2, 0.8, -0.5;
  const VectorXd a = fixtures::bernoulli(X, alpha_true, rng);
  const TreatmentFit fit = fit_logistic(X, a);
  CHECK(fit.converged);
  CHECK(sup(X.transpose() * (a - fit.fitted)) < 1e-8);
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    CHECK(fit.fitted(i) == doctest::Approx(expit(X.row(i).dot(fit.alpha))).epsilon(1e-12));
  CHECK(sup(treatment_residuals(fit, a) - (a - fit.fitted)) == 0.0);
}

TEST_CASE("logistic fit reports separation and rank deficiency") {
  std::mt19937_64 rng(6);
  const MatrixXd X = fixtures::design_with_intercept(100, 2, rng);
  VectorXd a(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) a(i) = X(i, 1) > 0 ? 1.0 : 0.0;
  CHECK_THROWS_AS(fit_logistic(X, a), SeparationError);

  MatrixXd dup(X.rows(), 3);
  dup << X, X.col(1);
  const VectorXd b = fixtures::bernoulli(X, VectorXd::Zero(2), rng);
  CHECK_THROWS_AS(fit_logistic(dup, b), SingularityError);
}

TEST_CASE("continuous treatment model is least squares with a constant variance") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> norm(0.0, 0.5);
  const MatrixXd X = fixtures::design_with_intercept(200, 2, rng);
  VectorXd a(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) a(i) = 0.5 + 0.2 * X(i, 1) + norm(rng);
  const TreatmentFit fit = fit_continuous_treatment(X, a);
  const VectorXd r = a - fit.fitted;
  CHECK(sup(X.transpose() * r) < 1e-9);
  CHECK(fit.residual_variance == doctest::Approx(r.squaredNorm() / (200 - 2)));
  REQUIRE(fit.second_moment.has_value());
  const VectorXd expected = fit.fitted.array().square() + fit.residual_variance;
  CHECK(sup(*fit.second_moment - expected) < 1e-12);
  CHECK(sup(second_moment_residuals(fit, a) - (a.array().square().matrix() - expected)) < 1e-12);
}

TEST_CASE("linear pseudo-outcome adds later blip differences") {
  VectorXd y(3);
  y << 1.0, 2.0, 3.0;
  BlipValues b2{VectorXd::Constant(3, 1.5), VectorXd::Constant(3, 0.5)};
  BlipValues b3{VectorXd::Zero(3), VectorXd::Constant(3, -1.0)};
  const std::vector<BlipValues> later{b2, b3};
  const VectorXd yt = pseudo_outcome_linear(y, later);
  CHECK(sup(yt - (y.array() + 2.0).matrix()) < 1e-15);
  CHECK(sup(pseudo_outcome_linear(y, {}) - y) == 0.0);
}

TEST_CASE("linear stage fit satisfies its estimating equations") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> norm(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const DesignMatrices d = random_design(120, rng);
    VectorXd y(d.rows());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = norm(rng) + d.a(i) * d.h_psi(i, 1);
    const TreatmentFit t = fit_logistic(d.h_alpha, d.a);
    const LinearStageFit f = stage_fit_linear(y, d, treatment_residuals(t, d.a));
    CHECK(sup(f.m - f.M * f.psi) < 1e-8 * (1.0 + sup(f.m)));
    CHECK(sup(d.h_beta.transpose() * f.residuals) < 1e-8 * (1.0 + sup(y)));
    CHECK(f.q_at_psi_hat == doctest::Approx(quasi_likelihood_linear(f.psi, f.m, f.M)));
  }
}

TEST_CASE("noise-free linear outcome is recovered exactly") {
  std::mt19937_64 rng(9);
  const DesignMatrices d = random_design(80, rng);
  VectorXd psi(2), beta(3);
  psi << 0.7, -1.3;
  beta << 2.0, 0.5, -0.25;
  const VectorXd y = d.h_beta * beta + (d.a.asDiagonal() * d.h_psi) * psi;
  const TreatmentFit t = fit_logistic(d.h_alpha, d.a);
  const LinearStageFit f = stage_fit_linear(y, d, treatment_residuals(t, d.a));
  CHECK(sup(f.psi - psi) < 1e-10);
  CHECK(sup(f.beta - beta) < 1e-10);
  CHECK(sup(f.residuals) < 1e-10);
}

TEST_CASE("saturated binary example: estimate maximizes Q on a grid") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> norm(0.0, 1.0);
  const DesignMatrices d = saturated_design(300, rng);
  VectorXd y(d.rows());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y(i) = 1.0 + d.h_psi(i, 1) + d.a(i) * (0.5 - d.h_psi(i, 1)) + norm(rng);
  const TreatmentFit t = fit_logistic(d.h_alpha, d.a);
  const LinearStageFit f = stage_fit_linear(y, d, treatment_residuals(t, d.a));
  REQUIRE((f.M - f.M.transpose()).cwiseAbs().maxCoeff() < 1e-9 * f.M.cwiseAbs().maxCoeff());

  double best = -1e300;
  VectorXd arg(2);
  for (int u = -200; u <= 200; ++u) {
    for (int v = -200; v <= 200; ++v) {
      VectorXd p = f.psi;
      p(0) += u * 1e-3;
      p(1) += v * 1e-3;
      const double q = quasi_likelihood_linear(p, f.m, f.M);
      if (q > best) {
        best = q;
        arg = p;
      }
    }
  }
  CHECK(sup(arg - f.psi) < 1e-12);
  CHECK(best <= f.q_at_psi_hat + 1e-12);
}

TEST_CASE("Q at the estimate grows with nested blip models") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> norm(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const DesignMatrices big = saturated_design(200, rng);
    VectorXd y(big.rows());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = big.a(i) * 0.3 + norm(rng);
    const TreatmentFit t = fit_logistic(big.h_alpha, big.a);
    const VectorXd dres = treatment_residuals(t, big.a);
    DesignMatrices small = big;
    small.h_psi = big.h_psi.leftCols(1);
    const double q_big = stage_fit_linear(y, big, dres).q_at_psi_hat;
    const double q_small = stage_fit_linear(y, small, dres).q_at_psi_hat;
    CHECK(q_big >= q_small - 1e-10);
  }
}

TEST_CASE("unidentified blip raises IdentifiabilityError") {
  std::mt19937_64 rng(12);
  DesignMatrices d = random_design(60, rng);
  d.h_psi.col(1) = d.h_psi.col(0) * 2.0;
  const TreatmentFit t = fit_logistic(d.h_alpha.leftCols(1), d.a);
  const VectorXd y = VectorXd::Ones(d.rows());
  CHECK_THROWS_AS(stage_fit_linear(y, d, treatment_residuals(t, d.a)), IdentifiabilityError);
}
