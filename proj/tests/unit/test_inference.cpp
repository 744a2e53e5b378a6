#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "gestdtr/errors.hpp"
#include "gestdtr/inference.hpp"
#include "gestdtr/nuisance.hpp"

using namespace gestdtr;

namespace {

struct LinearCase {
  DesignMatrices design;
  VectorXd y;
  VectorXd d;
};

LinearCase linear_case(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> norm(0.0, 1.0);
  LinearCase c;
  c.design.h_psi = fixtures::design_with_intercept(n, 3, rng);
  c.design.h_beta = fixtures::design_with_intercept(n, 2, rng);
  c.design.h_alpha = c.design.h_psi.leftCols(2);
  c.design.h_psi2 = MatrixXd(static_cast<Eigen::Index>(n), 0);
  c.design.a = fixtures::bernoulli(c.design.h_alpha, VectorXd::Constant(2, 0.25), rng);
  c.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < c.y.size(); ++i)
    c.y(i) = c.design.h_beta(i, 1) + c.design.a(i) * (0.5 + c.design.h_psi(i, 1)) +
             norm(rng) * (1.0 + std::abs(c.design.h_psi(i, 2)));
  c.d = treatment_residuals(fit_logistic(c.design.h_alpha, c.design.a), c.design.a);
  return c;
}

StageInference linear_inference(const LinearCase& c) {
  return infer(stage_fit_linear(c.y, c.design, c.d), c.design);
}

}  // namespace

TEST_CASE("sandwich, trace and QIC formulas") {
  MatrixXd I(2, 2), J(2, 2);
  I << 2.0, 0.5, 0.0, 1.0;
  J << 3.0, 1.0, 1.0, 2.0;
  const MatrixXd Iinv = I.inverse();
  const MatrixXd V = sandwich_variance(I, J);
  CHECK((V - Iinv * J * Iinv.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(trace_term(I, J) == doctest::Approx((J * Iinv).trace()));
  CHECK(qic(-3.0, 2.5) == doctest::Approx(11.0));
  CHECK(wald_pvalue(0.0, 1.0) == doctest::Approx(1.0));
  CHECK(wald_pvalue(1.959963984540054, 1.0) == doctest::Approx(0.05).epsilon(1e-9));
  CHECK_THROWS_AS(trace_term(MatrixXd::Zero(2, 2), J), SingularityError);
}

TEST_CASE("scores sum to zero at the estimate and match the information pair") {
  std::mt19937_64 rng(41);
  const LinearCase c = linear_case(200, rng);
  const LinearStageFit f = stage_fit_linear(c.y, c.design, c.d);
  const MatrixXd U = score_matrix(f, c.design);
  CHECK(U.colwise().sum().cwiseAbs().maxCoeff() < 1e-8 * U.cwiseAbs().maxCoeff() * 200);
  const auto [I, J] = info_matrices(f, c.design);
  CHECK((I - f.M).cwiseAbs().maxCoeff() == 0.0);
  CHECK((J - U.transpose() * U).cwiseAbs().maxCoeff() < 1e-10 * J.cwiseAbs().maxCoeff());
  const StageInference inf = infer(f, c.design);
  CHECK(inf.qic == doctest::Approx(-2.0 * f.q_at_psi_hat + 2.0 * inf.K));
  for (Eigen::Index k = 0; k < inf.se.size(); ++k)
    CHECK(inf.se(k) == doctest::Approx(std::sqrt(inf.V_hat(k, k))));
}

TEST_CASE("K is invariant to reparameterizing the blip") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> norm(0.0, 1.0);
  for (int rep = 0; rep < 25; ++rep) {
    LinearCase c = linear_case(150, rng);
    MatrixXd T(3, 3);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) T(r, k) = norm(rng) + (r == k ? 3.0 : 0.0);
    const double k0 = linear_inference(c).K;
    c.design.h_psi = c.design.h_psi * T;
    const double k1 = linear_inference(c).K;
    CHECK(std::abs(k0 - k1) < 1e-8);
  }
}

TEST_CASE("log-linear K is invariant to reparameterizing the blip") {
  std::mt19937_64 rng(43);
  for (int rep = 0; rep < 10; ++rep) {
    DesignMatrices d;
    d.h_psi = fixtures::design_with_intercept(250, 2, rng);
    d.h_beta = fixtures::design_with_intercept(250, 2, rng);
    d.h_alpha = d.h_psi;
    d.h_psi2 = MatrixXd(250, 0);
    d.a = fixtures::bernoulli(d.h_alpha, VectorXd::Constant(2, 0.1), rng);
    VectorXd y(250);
    for (Eigen::Index i = 0; i < 250; ++i) {
      std::poisson_distribution<int> pois(
          std::exp(0.5 + 0.3 * d.h_beta(i, 1) + d.a(i) * 0.4 * d.h_psi(i, 1)));
      y(i) = pois(rng);
    }
    const VectorXd dres = treatment_residuals(fit_logistic(d.h_alpha, d.a), d.a);
    IrlsOptions tight;
    const LoglinearStageFit f0 = irls_stage_fit(y, d, dres, tight);
    MatrixXd T(2, 2);
    T << 1.0, 0.5, -0.3, 2.0;
    DesignMatrices d1 = d;
    d1.h_psi = d.h_psi * T;
    const LoglinearStageFit f1 = irls_stage_fit(y, d1, dres, tight);
    REQUIRE(f0.converged);
    REQUIRE(f1.converged);
    CHECK(std::abs(infer(f0, d, y).K - infer(f1, d1, y).K) < 1e-6);
  }
}

TEST_CASE("QIC does not depend on subject order") {
  std::mt19937_64 rng(44);
  const LinearCase c = linear_case(120, rng);
  std::vector<int> order(120);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const Eigen::PermutationMatrix<Eigen::Dynamic> P(
      Eigen::Map<Eigen::VectorXi>(order.data(), 120));
  LinearCase p = c;
  p.design.h_psi = P * c.design.h_psi;
  p.design.h_beta = P * c.design.h_beta;
  p.design.h_alpha = P * c.design.h_alpha;
  p.design.h_psi2 = MatrixXd(120, 0);
  p.design.a = P * c.design.a;
  p.y = P * c.y;
  p.d = P * c.d;
  const StageInference a = linear_inference(c);
  const StageInference b = linear_inference(p);
  CHECK(a.qic == doctest::Approx(b.qic).epsilon(1e-12));
  CHECK(a.K == doctest::Approx(b.K).epsilon(1e-12));
}
