#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gestdtr/data_model.hpp"
#include "gestdtr/nuisance.hpp"

namespace fixtures {

using gestdtr::Dataset;
using gestdtr::MatrixXd;
using gestdtr::ModelSpec;
using gestdtr::StageSpec;
using gestdtr::TermList;
using gestdtr::VectorXd;

enum class Outcome { normal, poisson, exact_linear };

// Two covariates per stage ("u", "v"), logistic treatment in u, and an
// outcome whose stage-j blip is a_j (psi_j0 + psi_j1 u_j).
struct TwoStageTruth {
  double psi10 = 1.0, psi11 = -0.5;
  double psi20 = 0.5, psi21 = 0.8;
};

inline Dataset two_stage_dataset(std::size_t n, std::uint64_t seed, Outcome outcome,
                                 const TwoStageTruth& t = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> norm(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Dataset ds;
  ds.covariate_names = {{"u", "v"}, {"u", "v"}};
  for (std::size_t i = 0; i < n; ++i) {
    gestdtr::Subject s;
    s.id = "s" + std::to_string(i);
    s.stages.resize(2);
    double eta = 0.2;
    double blips = 0.0;
    for (int j = 0; j < 2; ++j) {
      const double u = norm(rng);
      const double v = norm(rng);
      const double a = unif(rng) < gestdtr::expit(0.4 * u) ? 1.0 : 0.0;
      s.stages[j] = {{u, v}, a};
      eta += 0.3 * u;
      blips += j == 0 ? a * (t.psi10 + t.psi11 * u) : a * (t.psi20 + t.psi21 * u);
    }
    switch (outcome) {
      case Outcome::normal:
        s.outcome = eta + blips + norm(rng);
        break;
      case Outcome::exact_linear:
        s.outcome = eta + blips;
        break;
      case Outcome::poisson: {
        std::poisson_distribution<int> pois(std::exp(0.3 * eta + 0.4 * blips));
        s.outcome = pois(rng);
        break;
      }
    }
    ds.subjects.push_back(std::move(s));
  }
  return ds;
}

inline StageSpec stage_spec(int j) {
  const std::string u = "x" + std::to_string(j) + "_u";
  StageSpec s;
  s.blip = TermList::parse({u});
  s.treatment_free = TermList::parse({"x1_u", "x2_u"});
  if (j == 1) s.treatment_free = TermList::parse({"x1_u"});
  s.treatment = TermList::parse({u});
  return s;
}

inline ModelSpec two_stage_spec(gestdtr::Scale scale) {
  ModelSpec spec;
  spec.scale = scale;
  spec.stages = {stage_spec(1), stage_spec(2)};
  return spec;
}

// Random n x p matrix with a leading column of ones.
inline MatrixXd design_with_intercept(std::size_t n, int p, std::mt19937_64& rng) {
  std::normal_distribution<double> norm(0.0, 1.0);
  MatrixXd X(static_cast<Eigen::Index>(n), p);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    X(i, 0) = 1.0;
    for (int k = 1; k < p; ++k) X(i, k) = norm(rng);
  }
  return X;
}

inline VectorXd bernoulli(const MatrixXd& X, const VectorXd& alpha, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd a(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    a(i) = unif(rng) < gestdtr::expit(X.row(i).dot(alpha)) ? 1.0 : 0.0;
  return a;
}

}  // namespace fixtures
