// Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gestdtr/dtr_engine.hpp"
#include "gestdtr/errors.hpp"
#include "gestdtr/gest_continuous.hpp"
#include "gestdtr/gest_linear.hpp"
#include "gestdtr/gest_loglinear.hpp"
#include "gestdtr/nuisance.hpp"
#include "gestdtr/simulation.hpp"

using namespace gestdtr;

namespace {

constexpr std::uint64_t kSeed = 1;
constexpr std::size_t kReps = 1000;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    detail << (detail.tellp() > 0 ? "; " : "") << what << (ok ? "" : " [miss]");
  }
};

std::string fmt(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int failures = 0;
std::map<int, std::string> lines;

void report(int number, const std::string& name, const Verdict& v) {
  lines[number] = "Criterion " + std::to_string(number) + " (" + name + "): " +
                  (v.pass ? "PASS" : "FAIL") + " | " + v.detail.str();
  std::cerr << "finished criterion " << number << std::endl;
  if (!v.pass) ++failures;
}

void guarded(int number, const std::string& name, const std::function<void(Verdict&)>& body) {
  Verdict v;
  try {
    body(v);
  } catch (const std::exception& e) {
    v.check(false, std::string("exception: ") + e.what());
  }
  report(number, name, v);
}

std::string stage_key(int stage, int covariates) {
  TermList t;
  for (int k = 1; k <= covariates; ++k) {
    t.terms.push_back(Term::parse("x" + std::to_string(stage) + "_" + std::to_string(k)));
  }
  return t.key();
}

using GroupedReports = std::vector<std::pair<std::string, ReplicationReport>>;

// Runs every setup of `preset` whose group tag is listed (all when empty).
GroupedReports run_preset(const Preset& preset, const std::vector<std::string>& groups = {}) {
  GroupedReports out;
  for (const Setup& s : preset.setups) {
    const auto it = s.tags.find("group");
    const std::string group = it == s.tags.end() ? "" : it->second;
    if (!groups.empty() && std::find(groups.begin(), groups.end(), group) == groups.end()) continue;
    out.emplace_back(group, run_replications(s.scenario, kReps, s.analysis));
  }
  return out;
}

std::vector<ReplicationReport> group_of(const GroupedReports& reports, const std::string& group) {
  std::vector<ReplicationReport> out;
  for (const auto& [g, r] : reports) {
    if (g == group) out.push_back(r);
  }
  return out;
}

double pooled_rate(const std::vector<ReplicationReport>& reports, int stage,
                   const std::string& method, const std::string& truth) {
  for (const SelectionTally& t : aggregate_selection(reports)) {
    if (t.stage == stage && t.method == method && t.truth == truth) return t.rate();
  }
  return std::nan("");
}

// ---------------------------------------------------------------------------
// Criteria 1, 2, 9, 10: one log-linear run at n = 500 with 10% zeros
// ---------------------------------------------------------------------------

void loglinear_criteria() {
  Scenario s = loglinear_scenario(500, 0.10);
  s.seed = kSeed;
  const ReplicationReport r = run_replications(s, kReps, default_fit_analysis(s));

  const double paper_mean[] = {0.497, -0.485, 0.505, -0.495};
  const double paper_sd[] = {0.095, 0.066, 0.100, 0.110};

  guarded(1, "log-linear IRLS estimates, n=500, 10% zeros", [&](Verdict& v) {
    if (r.parameters.size() != 4) throw StateError("expected four blip parameters");
    for (std::size_t k = 0; k < 4; ++k) {
      const ParameterSummary& p = r.parameters[k];
      v.check(std::abs(p.mean - paper_mean[k]) <= 0.02,
              p.label + " mean " + fmt(p.mean) + " vs " + fmt(paper_mean[k]) + " +-0.02");
      v.check(std::abs(p.sd / paper_sd[k] - 1.0) <= 0.25,
              p.label + " sd " + fmt(p.sd) + " vs " + fmt(paper_sd[k]) + " +-25%");
    }
  });

  guarded(2, "IRLS convergence-failure rate", [&](Verdict& v) {
    const double rate = static_cast<double>(r.n_failed()) / static_cast<double>(r.n_requested);
    v.check(rate <= 0.05, "failures " + std::to_string(r.n_failed()) + "/" +
                              std::to_string(r.n_requested) + " = " + fmt(100.0 * rate, 1) +
                              "% (target <= 3%, soft bound 5%)" +
                              (rate <= 0.03 ? "" : ", above target, within soft bound"));
  });

  guarded(9, "double robustness under misspecified treatment-free model", [&](Verdict& v) {
    for (std::size_t k = 0; k < r.parameters.size(); ++k) {
      const ParameterSummary& p = r.parameters[k];
      const double mcse = p.sd / std::sqrt(static_cast<double>(p.count));
      const double z = (p.mean - p.truth) / mcse;
      v.check(std::abs(z) <= 3.0, p.label + " bias " + fmt(p.mean - p.truth, 4) + " = " +
                                      fmt(z, 2) + " MC SE");
    }
  });

  guarded(10, "sandwich SE calibration", [&](Verdict& v) {
    for (const ParameterSummary& p : r.parameters) {
      v.check(std::abs(p.mean_se / p.sd - 1.0) <= 0.25,
              p.label + " mean SE " + fmt(p.mean_se) + " / SD " + fmt(p.sd) + " = " +
                  fmt(p.mean_se / p.sd, 2));
    }
  });
}

// ---------------------------------------------------------------------------
// Criteria 3-6: selection and trace presets
// ---------------------------------------------------------------------------

void selection_criteria() {
  const std::string full1 = stage_key(1, 3);
  const std::string single1 = stage_key(1, 1);

  guarded(3, "QIC_G vs Wald stepwise selection rates", [&](Verdict& v) {
    const Preset p = make_preset("table2", kSeed);
    const GroupedReports reports = run_preset(p, {"100", "200"});
    const auto n200 = group_of(reports, "200");
    const auto n100 = group_of(reports, "100");
    const double qic_b = pooled_rate(n200, 1, "QIC_G(B)", full1);
    const double wald_f = pooled_rate(n200, 1, "Wald(F)", full1);
    const double wald_f100 = pooled_rate(n100, 1, "Wald(F)", single1);
    v.check(std::abs(qic_b - 0.628) <= 0.05, "n=200 {x11,x12,x13} QIC_G(B) " + fmt(qic_b) + " vs 0.628");
    v.check(std::abs(wald_f - 0.379) <= 0.05, "n=200 {x11,x12,x13} Wald(F) " + fmt(wald_f) + " vs 0.379");
    v.check(std::abs(wald_f100 - 0.479) <= 0.05, "n=100 {x11} Wald(F) " + fmt(wald_f100) + " vs 0.479");
  });

  guarded(4, "stage-1 selection under stage-2 policies", [&](Verdict& v) {
    const Preset p = make_preset("table3", kSeed);
    const GroupedReports reports = run_preset(p);
    const std::pair<const char*, double> targets[] = {
        {"Correct", 0.419}, {"Recommended", 0.417}, {"Intercept", 0.411}};
    for (const auto& [group, target] : targets) {
      const double rate = pooled_rate(group_of(reports, group), 1, "QIC_G(B)", full1);
      v.check(std::abs(rate - target) <= 0.05,
              std::string(group) + " QIC_G(B) " + fmt(rate) + " vs " + fmt(target));
    }
  });

  guarded(5, "exhaustive QIC_G selection, discrete outcome", [&](Verdict& v) {
    const Preset p = make_preset("supp-s1", kSeed);
    const GroupedReports reports = run_preset(p);
    const std::pair<int, double> targets[] = {{3, 0.919}, {2, 0.799}};
    for (const auto& [k, target] : targets) {
      const std::string truth = stage_key(1, k);
      const SelectionTally* tally = nullptr;
      for (const auto& [g, r] : reports) {
        if (!tally) tally = r.tally(1, "QIC_G", truth);
      }
      if (!tally) throw StateError("no stage-1 tally for " + truth);
      v.check(std::abs(tally->rate() - target) <= 0.05,
              model_label(truth) + " " + fmt(tally->rate()) + " vs " + fmt(target) + " (" +
                  std::to_string(tally->total) + " runs)");
    }
  });

  guarded(6, "trace term matches dimension", [&](Verdict& v) {
    const Preset p = make_preset("trace", kSeed);
    const GroupedReports reports = run_preset(p);
    for (const auto& [g, r] : reports) {
      const TermList truth = true_blip(r.scenario, 2);
      const TraceSummary* t = r.trace(2, truth.key());
      if (!t) throw StateError("missing trace summary for " + truth.key());
      const double dim = static_cast<double>(truth.columns());
      v.check(std::abs(t->mean - dim) <= 0.5,
              "p=" + fmt(dim, 0) + " mean K " + fmt(t->mean));
    }
  });
}

// ---------------------------------------------------------------------------
// Criterion 7: fixed-point properties on random small instances
// ---------------------------------------------------------------------------

double sup(const VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

void fixed_point_criterion() {
  guarded(7, "fixed-point property suite", [&](Verdict& v) {
    std::mt19937_64 rng(kSeed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> size(30, 80);

    std::size_t fits = 0, converged = 0, worst_count = 0;
    double worst_ll = 0.0;
    for (int inst = 0; inst < 1000; ++inst) {
      const int n = size(rng);
      DesignMatrices des;
      des.h_psi = MatrixXd::Ones(n, 2);
      des.h_beta = MatrixXd::Ones(n, 3);
      des.h_alpha = MatrixXd::Ones(n, 2);
      des.a = VectorXd(n);
      VectorXd y(n);
      const double b0 = 0.5 + unif(rng);
      const double psi0 = normal(rng) * 0.5;
      const double psi1 = normal(rng) * 0.5;
      for (int i = 0; i < n; ++i) {
        const double x = normal(rng);
        const double x2 = normal(rng);
        des.h_psi(i, 1) = x;
        des.h_beta(i, 1) = x;
        des.h_beta(i, 2) = x2;
        des.h_alpha(i, 1) = x;
        des.a(i) = unif(rng) < expit(0.7 * x) ? 1.0 : 0.0;
        const double lambda = std::exp(b0 + 0.3 * x + std::log(1.0 + x2 * x2) +
                                       des.a(i) * (psi0 + psi1 * x));
        y(i) = static_cast<double>(std::poisson_distribution<int>(lambda)(rng));
      }
      TreatmentFit tfit;
      try {
        tfit = fit_logistic(des.h_alpha, des.a);
      } catch (const GestError&) {
        continue;
      }
      const VectorXd d = des.a - tfit.fitted;
      for (LoglinearEquation eq : {LoglinearEquation::ratio, LoglinearEquation::difference}) {
        IrlsOptions opts;
        opts.equation = eq;
        LoglinearStageFit fit;
        ++fits;
        try {
          fit = irls_stage_fit(y, des, d, opts);
        } catch (const GestError&) {
          continue;
        }
        if (!fit.converged) continue;
        ++converged;
        // Independent evaluation of both estimating equations.
        const VectorXd eta = des.h_beta * fit.beta + des.a.asDiagonal() * (des.h_psi * fit.psi);
        const VectorXd mu = eta.array().exp();
        VectorXd e, obs;
        if (eq == LoglinearEquation::ratio) {
          e = d.array() * (y.array() / mu.array() - 1.0);
          obs = d.array() * y.array() / mu.array();
        } else {
          e = d.array() * (y - mu).array();
          obs = d.array() * y.array();
        }
        const double ee = sup(des.h_psi.transpose() * e) / (1.0 + sup(des.h_psi.transpose() * obs));
        const double be = sup(des.h_beta.transpose() * (y - mu)) / (1.0 + sup(des.h_beta.transpose() * y));
        const double worst = std::max(ee, be);
        worst_ll = std::max(worst_ll, worst);
        if (worst > 1e-6) ++worst_count;
      }
    }
    v.check(worst_count == 0, "log-linear: " + std::to_string(converged) + "/" + std::to_string(fits) +
                                  " fits converged, max normalized residual " + fmt(worst_ll * 1e6, 3) +
                                  "e-6");
    v.check(converged >= fits * 9 / 10, "log-linear convergence share >= 90%");

    std::size_t linear_fits = 0, linear_bad = 0;
    double worst_lin = 0.0;
    std::uniform_int_distribution<int> lin_size(10, 60);
    for (int inst = 0; inst < 1000; ++inst) {
      const int n = lin_size(rng);
      DesignMatrices des;
      des.h_psi = MatrixXd::Ones(n, 2);
      des.h_beta = MatrixXd::Ones(n, 3);
      des.a = VectorXd(n);
      VectorXd y(n), d(n);
      for (int i = 0; i < n; ++i) {
        const double x = normal(rng);
        des.h_psi(i, 1) = x;
        des.h_beta(i, 1) = x;
        des.h_beta(i, 2) = normal(rng);
        const double p = expit(x);
        des.a(i) = unif(rng) < p ? 1.0 : 0.0;
        d(i) = des.a(i) - p;
        y(i) = des.h_beta(i, 2) + des.a(i) * (1.0 - x) + normal(rng);
      }
      LinearStageFit fit;
      try {
        fit = stage_fit_linear(y, des, d);
      } catch (const GestError&) {
        continue;
      }
      ++linear_fits;
      const double stat = sup(fit.m - fit.M * fit.psi) / (1.0 + sup(fit.m));
      const VectorXd resid = y - des.h_beta * fit.beta - des.a.asDiagonal() * (des.h_psi * fit.psi);
      const double orth = sup(des.h_beta.transpose() * resid) / (1.0 + sup(des.h_beta.transpose() * y));
      worst_lin = std::max({worst_lin, stat, orth});
      if (stat > 1e-8 || orth > 1e-8) ++linear_bad;
    }
    v.check(linear_bad == 0 && linear_fits >= 950,
            "linear: " + std::to_string(linear_fits) + " fits, max normalized residual " +
                fmt(worst_lin * 1e12, 3) + "e-12");
  });
}

// ---------------------------------------------------------------------------
// Criterion 8: closed forms against a generic root-finder
// ---------------------------------------------------------------------------

// Newton iteration with a central-difference Jacobian; knows nothing about
// the structure of the equations it solves.
VectorXd generic_root(const std::function<VectorXd(const VectorXd&)>& f, VectorXd x) {
  for (int it = 0; it < 50; ++it) {
    const VectorXd fx = f(x);
    if (sup(fx) < 1e-14) break;
    MatrixXd jac(fx.size(), x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      const double h = 1e-4 * (1.0 + std::abs(x(k)));
      VectorXd xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      jac.col(k) = (f(xp) - f(xm)) / (2.0 * h);
    }
    const VectorXd step = jac.colPivHouseholderQr().solve(-fx);
    x += step;
    if (sup(step) < 1e-15 * (1.0 + sup(x))) break;
  }
  return x;
}

void oracle_criterion() {
  guarded(8, "closed forms match a generic root-finder", [&](Verdict& v) {
    std::mt19937_64 rng(kSeed + 8);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> size(8, 12);

    double worst_lin = 0.0, worst_cont = 0.0;
    int lin_done = 0, cont_done = 0;
    for (int attempt = 0; lin_done < 100 && attempt < 1000; ++attempt) {
      const int n = size(rng);
      DesignMatrices des;
      des.h_psi = MatrixXd::Ones(n, 2);
      des.h_beta = MatrixXd::Ones(n, 2);
      des.a = VectorXd(n);
      VectorXd y(n), d(n);
      for (int i = 0; i < n; ++i) {
        des.h_psi(i, 1) = normal(rng);
        des.h_beta(i, 1) = normal(rng);
        const double p = 0.2 + 0.6 * unif(rng);
        des.a(i) = unif(rng) < p ? 1.0 : 0.0;
        d(i) = des.a(i) - p;
        y(i) = normal(rng) + des.a(i);
      }
      LinearStageFit fit;
      try {
        fit = stage_fit_linear(y, des, d);
      } catch (const GestError&) {
        continue;
      }
      const auto raw = [&](const VectorXd& theta) {
        const VectorXd beta = theta.head(2);
        const VectorXd psi = theta.tail(2);
        const VectorXd r = y - des.h_beta * beta - des.a.asDiagonal() * (des.h_psi * psi);
        VectorXd out(4);
        out.head(2) = des.h_beta.transpose() * r;
        out.tail(2) = des.h_psi.transpose() * d.asDiagonal() * r;
        return out;
      };
      const VectorXd root = generic_root(raw, VectorXd::Zero(4));
      worst_lin = std::max(worst_lin, sup(root.tail(2) - fit.psi) / (1.0 + sup(fit.psi)));
      ++lin_done;
    }
    for (int attempt = 0; cont_done < 100 && attempt < 1000; ++attempt) {
      const int n = size(rng);
      MatrixXd h1 = MatrixXd::Ones(n, 2);
      MatrixXd h2 = MatrixXd::Ones(n, 1);
      MatrixXd hb = MatrixXd::Ones(n, 2);
      VectorXd a(n), y(n);
      TreatmentFit tfit;
      tfit.fitted = VectorXd(n);
      tfit.second_moment = VectorXd(n);
      tfit.residual_variance = 1.0;
      for (int i = 0; i < n; ++i) {
        h1(i, 1) = normal(rng);
        hb(i, 1) = normal(rng);
        const double m = 0.5 * h1(i, 1);
        tfit.fitted(i) = m;
        (*tfit.second_moment)(i) = m * m + 1.0;
        a(i) = m + normal(rng);
        y(i) = a(i) * (1.0 + h1(i, 1)) - 0.5 * a(i) * a(i) + normal(rng);
      }
      ContinuousStageFit fit;
      try {
        fit = stage_fit_continuous(y, h1, h2, hb, a, tfit);
      } catch (const GestError&) {
        continue;
      }
      const VectorXd d1 = a - tfit.fitted;
      const VectorXd d2 = a.cwiseProduct(a) - *tfit.second_moment;
      const auto raw = [&](const VectorXd& theta) {
        const VectorXd beta = theta.head(2);
        const VectorXd psi1 = theta.segment(2, 2);
        const VectorXd psi2 = theta.tail(1);
        const VectorXd r = y - hb * beta - a.asDiagonal() * (h1 * psi1) -
                           a.cwiseProduct(a).asDiagonal() * (h2 * psi2);
        VectorXd out(5);
        out.head(2) = hb.transpose() * r;
        out.segment(2, 2) = h1.transpose() * d1.asDiagonal() * r;
        out.tail(1) = h2.transpose() * d2.asDiagonal() * r;
        return out;
      };
      const VectorXd root = generic_root(raw, VectorXd::Zero(5));
      VectorXd psi(3);
      psi << fit.psi1, fit.psi2;
      worst_cont = std::max(worst_cont, sup(root.tail(3) - psi) / (1.0 + sup(psi)));
      ++cont_done;
    }
    v.check(lin_done == 100 && worst_lin <= 1e-8,
            "linear: " + std::to_string(lin_done) + " instances, max rel. diff " + fmt(worst_lin * 1e10, 3) + "e-10");
    v.check(cont_done == 100 && worst_cont <= 1e-8,
            "continuous: " + std::to_string(cont_done) + " instances, max rel. diff " + fmt(worst_cont * 1e10, 3) + "e-10");
  });
}

}  // namespace

int main() {
  loglinear_criteria();
  selection_criteria();
  fixed_point_criterion();
  oracle_criterion();
  for (const auto& [number, line] : lines) std::cout << line << '\n';
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAIL")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
