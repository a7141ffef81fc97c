// Acceptance gate: one pass/fail line per criterion, frozen tolerances.
// Exit code 0 only if every criterion holds.  Failures print their measured
// numbers so a regression is a finding, not a mystery.

#include "dsf/bessel.hpp"
#include "dsf/config.hpp"
#include "dsf/experiments.hpp"
#include "dsf/loss.hpp"
#include "dsf/train.hpp"
#include "dsf/vmf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace dsf;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> extra;  // indented context lines
};

std::string fmt(const char* pattern, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, pattern);
  std::vsnprintf(buf, sizeof(buf), pattern, ap);
  va_end(ap);
  return buf;
}

// 1. The optimal-case InfoNCE grid (s+ = 1, every negative at -1) matches
// the frozen reference cells within 1e-3 in under a second.
Outcome check_floor_grid() {
  const double reference[4][3] = {{3.573, 6.319, 9.090},
                                  {1.738, 4.331, 7.091},
                                  {0.011, 0.170, 1.380},
                                  {0.000, 0.000, 0.0001}};
  const auto grid = reference_floor_grid();
  double worst = 0.0;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      worst = std::max(worst, std::abs(grid.values(r, c) - reference[r][c]));
    }
  return {worst < 1e-3, fmt("12 cells, max |diff| %.2e (tol 1e-3)", worst), {}};
}

// 2. Divergence InfoNCE with the temperature-matched concentration equals
// cosine InfoNCE: 100 randomized trials over p in {3,8,64}, tau in
// {0.2,0.5,1.0}, all below 1e-8.
Outcome check_equivalence() {
  const auto report = theorem_trial_report(2024, 100);
  const double worst = report.at("max_abs_diff").get<double>();
  return {report.at("pass").get<bool>(),
          fmt("100 trials, max |L_div - L_cos| %.2e (tol 1e-8)", worst),
          {}};
}

// 3. Closed-form KL between fitted distributions agrees with a 1e6-sample
// Monte Carlo estimate on 10 randomized pairs (p <= 8) within
// max(1% relative, 3 standard errors).
Outcome check_kl_monte_carlo() {
  std::mt19937_64 rng(derive_seed(99, "acceptance-kl"));
  std::uniform_real_distribution<double> log_kappa(std::log(0.5), std::log(50.0));
  const int n = 1000000;
  double worst_ratio = 0.0;  // |closed - mc| / tolerance, max over pairs
  std::string worst_desc;
  for (int pair = 0; pair < 10; ++pair) {
    const int p = 3 + static_cast<int>(rng() % 6);
    const double kq = std::exp(log_kappa(rng));
    const double kt = std::exp(log_kappa(rng));
    const Eigen::MatrixXd mus = sample_uniform_sphere(2, p, rng());
    const auto dq = make_vmf(Eigen::VectorXd(mus.row(0).transpose()), kq);
    const auto dt = make_vmf(Eigen::VectorXd(mus.row(1).transpose()), kt);
    const double closed = kl_divergence(dq, dt);

    const Eigen::MatrixXd xs = sample(dq, n, rng());
    const Eigen::VectorXd w = kq * dq.mu - kt * dt.mu;
    const double c0 = log_normalizer(p, kq) - log_normalizer(p, kt);
    const Eigen::VectorXd log_ratio = (xs * w).array() + c0;
    const double mc = log_ratio.mean();
    const double se = std::sqrt((log_ratio.array() - mc).square().sum() /
                                (double(n) * double(n - 1)));
    const double tol = std::max(0.01 * std::abs(closed), 3.0 * se);
    const double ratio = std::abs(closed - mc) / tol;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_desc = fmt("p=%d kq=%.2f kt=%.2f closed %.5f mc %.5f (3se %.1e)", p, kq, kt,
                       closed, mc, 3.0 * se);
    }
  }
  return {worst_ratio < 1.0, fmt("10 pairs x 1e6 samples, worst at %.0f%% of tolerance",
                                 100.0 * worst_ratio),
          {worst_desc}};
}

// 4. Analytic gradients of all three losses, both negative modes, match
// central finite differences within 1e-4 relative; tangency within 1e-6.
Outcome check_gradients() {
  const auto report = gradcheck_report(7, 60);
  return {report.at("pass").get<bool>(),
          fmt("max rel err %.2e (tol 1e-4), max tangency %.2e (tol 1e-6)",
              report.at("max_rel_err").get<double>(),
              report.at("max_tangency").get<double>()),
          {}};
}

// 5. Concentration machinery: the moment approximation tracks the Newton
// inversion oracle over r in [0.1, 0.99] for p in {8, 128} (measured and
// reported); the stabilized estimate at p=128 never exceeds 9.676; the
// Bessel evaluation branches agree to >= 9 significant digits around the
// crossover.
Outcome check_concentration_machinery() {
  double max_rel[2] = {0.0, 0.0};
  const int ps[2] = {8, 128};
  for (int i = 0; i < 2; ++i) {
    for (double r = 0.10; r <= 0.9901; r += 0.005) {
      const double approx = concentration_approx(ps[i], r);
      const double exact = invert_bessel_ratio(ps[i], r);
      max_rel[i] = std::max(max_rel[i], std::abs(approx - exact) / exact);
    }
  }

  double ceiling = 0.0;
  for (double r = 0.01; r <= 1.0001; r += 0.01) {
    const double clamped = std::min(0.95 * std::min(r, 1.0), 1.0 - 1e-9);
    ceiling = std::max(ceiling, concentration_approx(128, clamped) / 128.0);
  }

  double branch_rel = 0.0;
  for (double x = 480.0; x <= 520.0; x += 2.5) {
    for (const double nu : {3.0, 63.0}) {
      const double series = detail::log_bessel_series(nu, x);
      const double large = nu < detail::kHankelMaxOrder ? detail::log_bessel_hankel(nu, x)
                                                        : detail::log_bessel_uniform(nu, x);
      branch_rel = std::max(branch_rel, std::abs(series - large) / std::abs(large));
    }
  }

  // Observed: p=8 peaks near 2.1e-2 (small-r regime), p=128 near 1.3e-3.
  const bool pass = ceiling <= 9.676 && branch_rel < 1e-9 && max_rel[0] < 0.03 &&
                    max_rel[1] < 0.03;
  return {pass,
          fmt("approx vs oracle rel err: p=8 %.2e, p=128 %.2e (cap 0.03); stabilized max "
              "%.4f (cap 9.676); branch agreement %.1e (tol 1e-9)",
              max_rel[0], max_rel[1], ceiling, branch_rel),
          {}};
}

// 6. The cosine of unnormalized group means equals the mean pairwise dot
// product between the groups, to 1e-12, on random batches.
Outcome check_mean_identity() {
  std::mt19937_64 rng(derive_seed(13, "acceptance-identity"));
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 4);
    const int p = 3 + static_cast<int>(rng() % 14);
    const Eigen::MatrixXd g1 = sample_uniform_sphere(m, p, rng());
    const Eigen::MatrixXd g2 = sample_uniform_sphere(m, p, rng());
    const double via_means =
        g1.colwise().mean().dot(g2.colwise().mean());
    double pairwise = 0.0;
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) pairwise += g1.row(a).dot(g2.row(b));
    pairwise /= double(m) * double(m);
    worst = std::max(worst, std::abs(via_means - pairwise));
  }
  return {worst < 1e-12, fmt("25 random batches, max |diff| %.2e (tol 1e-12)", worst), {}};
}

// 7. Margin dichotomy: tempered cosine margins can never exceed 2/tau (and a
// saturating construction attains it), while the divergence similarity
// yields margins exceeding 100 for concentrated opposing distributions.
Outcome check_margin_dichotomy() {
  const double tau = 0.5;
  std::mt19937_64 rng(derive_seed(3, "acceptance-margin"));
  double cos_margin_max = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const Eigen::MatrixXd z = sample_uniform_sphere(3, 8, rng());
    const double margin = (z.row(0).dot(z.row(1)) - z.row(0).dot(z.row(2))) / tau;
    cos_margin_max = std::max(cos_margin_max, margin);
  }
  // Saturating construction: positive aligned, negative antipodal.
  Eigen::VectorXd e1 = Eigen::VectorXd::Zero(8);
  e1(0) = 1.0;
  const double saturated = (e1.dot(e1) - e1.dot((-e1).eval())) / tau;

  const int p = 16;
  const double kappa = 100.0;
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(p);
  mu(0) = 1.0;
  const auto da = make_vmf(mu, kappa);
  const auto db = make_vmf((-mu).eval(), kappa);
  const double div_margin = sim_div(da, da) - sim_div(da, db);  // 2 kappa A_p(kappa)

  const bool pass = cos_margin_max <= saturated + 1e-12 && saturated == 2.0 / tau &&
                    div_margin > 100.0;
  return {pass,
          fmt("cosine margin max %.3f, saturated bound %.1f (= 2/tau); divergence margin "
              "%.2f (> 100)",
              cos_margin_max, saturated, div_margin),
          {}};
}

// 8. Desk-scale comparison on the default 10-class benchmark: every method
// trained under the same view budget for 5 seeds; the divergence loss (m=2)
// must reach each multi-view baseline's mean accuracy minus one pooled
// standard deviation, and every method must triple the 0.1 chance level.
Outcome check_comparison() {
  CompareSpec spec = CompareSpec::defaults();
  const auto result = run_comparison(spec, "acceptance_artifacts/comparison");

  const auto find_run = [&](const std::string& method, int m) -> const nlohmann::json* {
    for (const auto& run : result.at("runs")) {
      if (run.at("method") == method && run.at("views_per_group") == m) return &run;
    }
    return nullptr;
  };
  const auto* dsf_run = find_run("dsf", 2);
  const auto* loss_avg = find_run("loss_avg", 2);
  const auto* fea_avg = find_run("fea_avg", 2);
  if (dsf_run == nullptr || loss_avg == nullptr || fea_avg == nullptr) {
    return {false, "default suite is missing a required run", {}};
  }

  const auto pooled = [](double a, double b) { return std::sqrt(0.5 * (a * a + b * b)); };
  bool pass = true;
  std::vector<std::string> extra;
  for (const char* metric : {"knn", "probe"}) {
    const std::string mean_key = std::string(metric) + "_mean";
    const std::string std_key = std::string(metric) + "_std";
    const double d_mean = dsf_run->at(mean_key).get<double>();
    const double d_std = dsf_run->at(std_key).get<double>();
    for (const auto* base : {loss_avg, fea_avg}) {
      const double b_mean = base->at(mean_key).get<double>();
      const double b_std = base->at(std_key).get<double>();
      const double sigma = pooled(d_std, b_std);
      const bool ok = d_mean >= b_mean - sigma;
      pass = pass && ok;
      extra.push_back(fmt("%-5s dsf %.4f vs %s %.4f (pooled sd %.4f) %s", metric,
                          d_mean, base->at("method").get<std::string>().c_str(), b_mean,
                          sigma, ok ? "ok" : "VIOLATED"));
    }
  }
  for (const auto& run : result.at("runs")) {
    const double knn = run.at("knn_mean").get<double>();
    const double probe = run.at("probe_mean").get<double>();
    const bool ok = knn >= 0.3 && probe >= 0.3;
    pass = pass && ok;
    extra.push_back(fmt("%-8s m=%d B=%-3d knn %.4f +- %.4f  probe %.4f +- %.4f%s",
                        run.at("method").get<std::string>().c_str(),
                        run.at("views_per_group").get<int>(),
                        run.at("batch_size").get<int>(), knn,
                        run.at("knn_std").get<double>(), probe,
                        run.at("probe_std").get<double>(),
                        ok ? "" : "  BELOW 3x CHANCE"));
  }
  return {pass, "6 runs x 5 seeds under view budget 256 (tables in acceptance_artifacts/)",
          extra};
}

// 9. Temperature robustness: divergence training completes at tau in
// {0.8, 1.0, 1.25} without divergence and the final losses stay within a
// 2x band.
Outcome check_temperature_band() {
  std::vector<double> finals;
  std::vector<std::string> extra;
  for (const double tau : {0.8, 1.0, 1.25}) {
    ExperimentConfig cfg;  // defaults: dsf on the 10-class benchmark
    cfg.seed = 1;
    cfg.loss.temperature = tau;
    Trainer trainer(cfg);
    try {
      const auto records = trainer.run();
      double final_loss = 0.0;
      const long per = trainer.steps_per_epoch();
      for (long i = 0; i < per; ++i) final_loss += records[records.size() - 1 - i].loss;
      final_loss /= double(per);
      finals.push_back(final_loss);
      extra.push_back(fmt("tau %.2f -> final epoch loss %.5f", tau, final_loss));
    } catch (const TrainingDivergedError& e) {
      return {false, fmt("diverged at tau %.2f: %s", tau, e.what()), extra};
    }
  }
  const double lo = *std::min_element(finals.begin(), finals.end());
  const double hi = *std::max_element(finals.begin(), finals.end());
  const bool finite = std::isfinite(lo) && std::isfinite(hi);
  return {finite && hi <= 2.0 * lo,
          fmt("final losses in [%.4f, %.4f], ratio %.3f (band 2.0)", lo, hi, hi / lo),
          extra};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"optimal-case InfoNCE grid matches frozen reference cells", 1.0, check_floor_grid},
      {"divergence/cosine InfoNCE equivalence at matched concentration", 10.0,
       check_equivalence},
      {"closed-form KL agrees with Monte Carlo oracle", 120.0, check_kl_monte_carlo},
      {"analytic loss gradients match finite differences", 60.0, check_gradients},
      {"concentration approximation, stabilization ceiling, Bessel branches", 60.0,
       check_concentration_machinery},
      {"mean-feature cosine equals mean pairwise dot product", 10.0, check_mean_identity},
      {"margin dichotomy: bounded cosine vs unbounded divergence", 10.0,
       check_margin_dichotomy},
      {"desk-scale method comparison under a fixed view budget", 1800.0, check_comparison},
      {"temperature robustness of divergence training", 300.0, check_temperature_band},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = criteria[i].run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what(), {}};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < criteria[i].budget_s;
    const bool pass = outcome.pass && in_budget;
    if (!pass) ++failures;
    std::printf("[C%zu] %s  %s (%s; %.2f s%s)\n", i + 1, pass ? "PASS" : "FAIL",
                criteria[i].name, outcome.detail.c_str(), secs,
                in_budget ? "" : " OVER TIME BUDGET");
    for (const auto& line : outcome.extra) std::printf("       %s\n", line.c_str());
    std::fflush(stdout);
  }
  std::printf("ACCEPTANCE: %zu/%zu criteria passed\n", criteria.size() - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
