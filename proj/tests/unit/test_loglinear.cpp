#include <cmath>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "gestdtr/errors.hpp"
#include "gestdtr/gest_loglinear.hpp"
#include "gestdtr/nuisance.hpp"

using namespace gestdtr;

namespace {

double sup(const VectorXd& v) { return v.cwiseAbs().maxCoeff(); }

struct Instance {
  DesignMatrices design;
  VectorXd d;
  VectorXd y;
};

Instance poisson_instance(std::size_t n, std::mt19937_64& rng, const VectorXd& beta,
                          const VectorXd& psi) {
  Instance in;
  in.design.h_psi = fixtures::design_with_intercept(n, 2, rng);
  in.design.h_beta = fixtures::design_with_intercept(n, 2, rng);
  in.design.h_alpha = in.design.h_psi;
  in.design.h_psi2 = MatrixXd(static_cast<Eigen::Index>(n), 0);
  in.design.a = fixtures::bernoulli(in.design.h_alpha, VectorXd::Constant(2, 0.2), rng);
  const TreatmentFit t = fit_logistic(in.design.h_alpha, in.design.a);
  in.d = treatment_residuals(t, in.design.a);
  const VectorXd eta =
      in.design.h_beta * beta + (in.design.a.asDiagonal() * in.design.h_psi) * psi;
  in.y.resize(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    std::poisson_distribution<int> pois(std::exp(eta(i)));
    in.y(i) = pois(rng);
  }
  return in;
}

// beta solving sum h_beta (y - exp(h_beta beta + offset)) = 0 by plain Newton.
VectorXd profile_beta(const MatrixXd& hb, const VectorXd& y, const VectorXd& offset,
                      VectorXd beta) {
  for (int it = 0; it < 100; ++it) {
    const VectorXd mu = (hb * beta + offset).array().exp();
    const VectorXd g = hb.transpose() * (y - mu);
    const MatrixXd H = hb.transpose() * mu.asDiagonal() * hb;
    const VectorXd step = H.ldlt().solve(g);
    beta += step;
    if (sup(step) < 1e-14) break;
  }
  return beta;
}

VectorXd blip_equation(const Instance& in, const VectorXd& psi, const VectorXd& beta_start,
                       LoglinearEquation eq) {
  const DesignMatrices& dm = in.design;
  const VectorXd offset = (dm.a.asDiagonal() * dm.h_psi) * psi;
  const VectorXd beta = profile_beta(dm.h_beta, in.y, offset, beta_start);
  const VectorXd mu = (dm.h_beta * beta + offset).array().exp();
  const VectorXd e = eq == LoglinearEquation::ratio ? (in.y.array() / mu.array() - 1.0).matrix()
                                                    : (in.y - mu).eval();
  return dm.h_psi.transpose() * (in.d.array() * e.array()).matrix();
}

}  // namespace

TEST_CASE("log-linear pseudo-outcome examples") {
  VectorXd y(3);
  y << 4.0, 0.0, 2.0;
  const VectorXd r = (VectorXd(3) << std::exp(0.5), 2.0, 1.0).finished();
  const std::vector<VectorXd> later{r};
  const VectorXd yt = pseudo_outcome_loglinear(y, later, 1e-3);
  CHECK(yt(0) == doctest::Approx(6.5949).epsilon(1e-5));
  CHECK(yt(1) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(yt(2) == 2.0);

  const VectorXd final_stage = pseudo_outcome_loglinear(y, {}, 1e-3);
  CHECK(sup(final_stage - y) == 0.0);
  CHECK(final_stage(1) == 0.0);
}

TEST_CASE("noise-free log-linear outcome is an exact fixed point") {
  std::mt19937_64 rng(21);
  VectorXd beta(2), psi(2);
  beta << 0.5, 0.3;
  psi << -0.4, 0.6;
  for (auto eq : {LoglinearEquation::ratio, LoglinearEquation::difference}) {
    Instance in = poisson_instance(150, rng, beta, psi);
    in.y = (in.design.h_beta * beta + (in.design.a.asDiagonal() * in.design.h_psi) * psi)
               .array()
               .exp();
    IrlsOptions opts;
    opts.equation = eq;
    const LoglinearStageFit f = irls_stage_fit(in.y, in.design, in.d, opts);
    CHECK(f.converged);
    CHECK(sup(f.psi - psi) < 1e-8);
    CHECK(sup(f.beta - beta) < 1e-8);
  }
}

TEST_CASE("converged fits satisfy both estimating equations") {
  std::mt19937_64 rng(22);
  VectorXd beta(2), psi(2);
  beta << 1.0, 0.2;
  psi << 0.3, -0.2;
  for (int rep = 0; rep < 30; ++rep) {
    for (auto eq : {LoglinearEquation::ratio, LoglinearEquation::difference}) {
      const Instance in = poisson_instance(200, rng, beta, psi);
      IrlsOptions opts;
      opts.equation = eq;
      const LoglinearStageFit f = irls_stage_fit(in.y, in.design, in.d, opts);
      REQUIRE(f.converged);
      CHECK(f.normalized_ee_residual() <= kFixedPointTolerance);
      CHECK(f.normalized_beta_residual() <= kFixedPointTolerance);
      const VectorXd ee = blip_equation(in, f.psi, f.beta, eq);
      CHECK(sup(ee) <= kFixedPointTolerance * f.ee_scale);
    }
  }
}

TEST_CASE("damping does not change the fixed point") {
  std::mt19937_64 rng(23);
  VectorXd beta(2), psi(2);
  beta << 0.8, -0.3;
  psi << 0.5, 0.25;
  for (int rep = 0; rep < 10; ++rep) {
    const Instance in = poisson_instance(250, rng, beta, psi);
    IrlsOptions damped, plain;
    plain.damping = false;
    const LoglinearStageFit a = irls_stage_fit(in.y, in.design, in.d, damped);
    const LoglinearStageFit b = irls_stage_fit(in.y, in.design, in.d, plain);
    REQUIRE(a.converged);
    REQUIRE(b.converged);
    CHECK(sup(a.psi - b.psi) < 1e-4);
    CHECK(sup(a.beta - b.beta) < 1e-4);
  }
}

TEST_CASE("profiled Jacobian matches central finite differences") {
  std::mt19937_64 rng(24);
  VectorXd beta(2), psi(2);
  beta << 0.6, 0.4;
  psi << -0.3, 0.5;
  for (auto eq : {LoglinearEquation::ratio, LoglinearEquation::difference}) {
    const Instance in = poisson_instance(300, rng, beta, psi);
    IrlsOptions opts;
    opts.equation = eq;
    const LoglinearStageFit f = irls_stage_fit(in.y, in.design, in.d, opts);
    REQUIRE(f.converged);
    const double h = 1e-5;
    MatrixXd fd(2, 2);
    for (int k = 0; k < 2; ++k) {
      VectorXd up = f.psi, dn = f.psi;
      up(k) += h;
      dn(k) -= h;
      fd.col(k) = -(blip_equation(in, up, f.beta, eq) - blip_equation(in, dn, f.beta, eq)) /
                  (2.0 * h);
    }
    const double scale = fd.cwiseAbs().maxCoeff();
    CHECK((f.jacobian - fd).cwiseAbs().maxCoeff() < 1e-5 * scale);
  }
}

TEST_CASE("IRLS options are validated and non-convergence is reported") {
  IrlsOptions bad;
  bad.eps_eta = 0.0;
  CHECK_THROWS_AS(bad.validate(), SpecificationError);
  bad = {};
  bad.max_iter = 0;
  CHECK_THROWS_AS(bad.validate(), SpecificationError);

  std::mt19937_64 rng(25);
  const Instance in = poisson_instance(100, rng, VectorXd::Constant(2, 0.5), VectorXd::Zero(2));
  IrlsOptions one;
  one.max_iter = 1;
  one.refine = false;
  const LoglinearStageFit f = irls_stage_fit(in.y, in.design, in.d, one);
  CHECK_FALSE(f.converged);
  CHECK_THROWS_AS(quasi_likelihood_loglinear(f), StateError);
}

TEST_CASE("equation names round trip") {
  for (auto eq : {LoglinearEquation::ratio, LoglinearEquation::difference})
    CHECK(parse_loglinear_equation(to_string(eq)) == eq);
  CHECK_THROWS_AS(parse_loglinear_equation("other"), SpecificationError);
}
