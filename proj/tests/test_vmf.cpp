#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dsf/vmf.hpp"
#include "oracles.hpp"

#include <Eigen/QR>

#include <cmath>
#include <random>

using dsf::bessel_ratio;
using dsf::estimate;
using dsf::estimate_with_gradient;
using dsf::kl_divergence;
using dsf::log_normalizer;
using dsf::log_pdf;
using dsf::make_vmf;
using dsf::StabilizationPolicy;
using dsf::VmfDistribution;

namespace {

Eigen::VectorXd axis(int p, int i) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(p);
  e(i) = 1.0;
  return e;
}

Eigen::MatrixXd random_unit_rows(int m, int p, std::uint64_t seed) {
  return dsf::sample_uniform_sphere(m, p, seed);
}

}  // namespace

TEST_CASE("log_normalizer matches the p = 3 closed form") {
  // C_3(kappa) = kappa / (4 pi sinh(kappa)).
  for (double k : {0.3, 1.0, 2.0, 10.0, 50.0}) {
    const double ref = std::log(k) - std::log(4.0 * M_PI) - (k + std::log1p(-std::exp(-2 * k))) +
                       std::log(2.0);
    CHECK(oracle::rel_err(log_normalizer(3, k), ref) < 1e-13);
  }
  CHECK(oracle::rel_err(std::exp(log_normalizer(3, 1.0)), 0.06771391313789565899) < 1e-13);
}

TEST_CASE("log_pdf at the mean direction matches a frozen value") {
  const auto d = make_vmf(axis(3, 0), 1.0);
  CHECK(oracle::rel_err(log_pdf(d, axis(3, 0)), -1.6924636085404864266) < 1e-13);
  // Density is largest along mu and smallest opposite it.
  CHECK(log_pdf(d, axis(3, 1)) < log_pdf(d, axis(3, 0)));
  CHECK(log_pdf(d, Eigen::VectorXd(-axis(3, 0))) < log_pdf(d, axis(3, 1)));
  CHECK_THROWS_AS(log_pdf(d, axis(4, 0)), std::invalid_argument);
}

TEST_CASE("density integrates to one on S^2 (Monte Carlo)") {
  const auto d = make_vmf(axis(3, 2), 2.0);
  const int n = 1000000;
  const Eigen::MatrixXd x = dsf::sample_uniform_sphere(n, 3, 11);
  const double logc = log_normalizer(3, d.kappa);
  const Eigen::ArrayXd vals =
      (4.0 * M_PI) * ((x * d.mu).array() * d.kappa + logc).exp();  // area * density
  const double mean = vals.mean();
  const double se = std::sqrt((vals - mean).square().sum() / (double(n) * (n - 1.0)));
  CHECK(std::abs(mean - 1.0) < std::max(3.0 * se, 1e-3));
}

TEST_CASE("sampler matches the analytic mean resultant length") {
  // E[mu^T x] = A_p(kappa) and Var[mu^T x] = A_p'(kappa).
  for (auto [p, kappa] : {std::pair{3, 2.0}, {8, 20.0}, {64, 120.0}}) {
    const auto d = make_vmf(random_unit_rows(1, p, 100 + p).row(0).transpose(), kappa);
    const int n = 200000;
    const Eigen::MatrixXd x = dsf::sample(d, n, 7 * p + 1);
    for (int i = 0; i < n; i += 4999) CHECK(std::abs(x.row(i).norm() - 1.0) < 1e-12);
    const double mean_dot = (x * d.mu).mean();
    const double se = std::sqrt(dsf::bessel_ratio_dkappa(p, kappa) / n);
    CHECK_MESSAGE(std::abs(mean_dot - bessel_ratio(p, kappa)) < 4.0 * se + 1e-6, "p=", p);
  }
}

TEST_CASE("sampler concentrates near mu for very large kappa") {
  const auto d = make_vmf(axis(3, 1), 1e5);
  const Eigen::MatrixXd x = dsf::sample(d, 2000, 5);
  CHECK(((x * d.mu).array() >= std::cos(M_PI / 180.0)).all());
}

TEST_CASE("estimate applies shrink and dimension normalization") {
  // Identical views: resultant length 1, so kappa hits its ceiling
  // r(p - r^2)/(1 - r^2)/p at r = lambda_r = 0.95.
  for (auto [p, ceiling] : {std::pair{8, 8.644391025641025641}, {128, 9.6748898237179487179}}) {
    Eigen::MatrixXd views(3, p);
    const Eigen::VectorXd mu = random_unit_rows(1, p, 40 + p).row(0).transpose();
    for (int i = 0; i < 3; ++i) views.row(i) = mu.transpose();
    const auto est = estimate_with_gradient(views);
    CHECK(oracle::rel_err(est.dist.kappa, ceiling) < 1e-12);
    CHECK(est.dist.mu.dot(mu) == doctest::Approx(1.0));
    CHECK(est.dist.r_bar_raw == doctest::Approx(1.0));
    CHECK(est.dkappa_drbar > 0.0);  // 0.95 is interior, not a clamp
  }
  // Random groups stay at or below the ceiling.
  for (int rep = 0; rep < 50; ++rep) {
    const auto d = estimate(random_unit_rows(4, 8, 500 + rep));
    CHECK(d.kappa <= 8.644391025641025641 * (1 + 1e-12));
    CHECK(d.kappa > 0.0);
  }
}

TEST_CASE("disabled stabilization reproduces the raw blow-up") {
  Eigen::MatrixXd views(2, 8);
  const Eigen::VectorXd mu = axis(8, 3);
  views.row(0) = mu.transpose();
  views.row(1) = mu.transpose();
  const auto est = estimate_with_gradient(views, StabilizationPolicy::disabled());
  // r clamps at 1 - 1e-9, so kappa ~ p / (2e-9): finite but astronomically
  // larger than the stabilized value.
  CHECK(std::isfinite(est.dist.kappa));
  CHECK(est.dist.kappa > 1e9);
  CHECK(est.dkappa_drbar == 0.0);  // clamped
}

TEST_CASE("estimate rejects degenerate and malformed inputs") {
  Eigen::MatrixXd anti(2, 3);
  anti.row(0) = axis(3, 0).transpose();
  anti.row(1) = -axis(3, 0).transpose();
  CHECK_THROWS_AS(estimate(anti), dsf::DegenerateDirectionError);

  Eigen::MatrixXd short_rows = Eigen::MatrixXd::Constant(2, 3, 0.1);
  CHECK_THROWS_AS(estimate(short_rows), std::invalid_argument);

  StabilizationPolicy bad;
  bad.lambda_r = 1.0;
  CHECK_THROWS_AS(estimate(random_unit_rows(2, 3, 1), bad), dsf::ValidationError);
}

TEST_CASE("estimate is equivariant under rotations") {
  const int p = 8;
  const Eigen::MatrixXd views = random_unit_rows(5, p, 77);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0, 1);
  Eigen::MatrixXd g(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) g(i, j) = normal(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();

  const auto base = estimate(views);
  const auto rotated = estimate((views * q.transpose()).eval());
  CHECK(oracle::rel_err(rotated.kappa, base.kappa) < 1e-12);
  CHECK((rotated.mu - q * base.mu).norm() < 1e-12);
}

TEST_CASE("estimate recovers parameters of sampled data") {
  const int p = 8;
  const double kappa = 50.0;
  const auto truth = make_vmf(random_unit_rows(1, p, 9).row(0).transpose(), kappa);
  const Eigen::MatrixXd x = dsf::sample(truth, 200000, 17);
  const auto fit = estimate(x, StabilizationPolicy::disabled());
  CHECK(fit.mu.dot(truth.mu) > 0.9999);
  CHECK(std::abs(fit.kappa - kappa) / kappa < 0.04);
}

TEST_CASE("concentration_approx derivative matches central differences") {
  for (int p : {2, 3, 8, 128}) {
    for (double r : {0.01, 0.2, 0.5, 0.9, 0.99}) {
      const double h = 1e-6;
      const double fd = oracle::central_diff(
          [p](double x) { return dsf::concentration_approx(p, x); }, r, h);
      CHECK(oracle::rel_err(dsf::concentration_approx_dr(p, r), fd, 1e-12) < 1e-6);
    }
  }
}

TEST_CASE("kl_divergence matches the frozen orthogonal-means value") {
  const auto a = make_vmf(axis(3, 0), 2.0);
  const auto b = make_vmf(axis(3, 1), 2.0);
  CHECK(oracle::rel_err(kl_divergence(a, b), 1.0746294414550961918) < 1e-13);
}

TEST_CASE("kl_divergence is zero at identity, nonnegative, and asymmetric") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> logk(-2.0, 4.0);
  for (int p : {2, 3, 8, 64}) {
    for (int rep = 0; rep < 30; ++rep) {
      const auto a = make_vmf(random_unit_rows(1, p, 1000 + rep).row(0).transpose(),
                              std::exp(logk(rng)));
      const auto b = make_vmf(random_unit_rows(1, p, 2000 + rep).row(0).transpose(),
                              std::exp(logk(rng)));
      CHECK(std::abs(kl_divergence(a, a)) < 1e-12);
      CHECK(kl_divergence(a, b) > -1e-12);
    }
  }
  const auto a = make_vmf(axis(3, 0), 2.0);
  const auto b = make_vmf(axis(3, 1), 10.0);
  CHECK(std::abs(kl_divergence(a, b) - kl_divergence(b, a)) > 0.1);
}

TEST_CASE("kl_divergence decreases as the means align") {
  const double ka = 3.0, kb = 5.0;
  auto at_cos = [&](double c) {
    const auto a = make_vmf(axis(3, 0), ka);
    Eigen::VectorXd m(3);
    m << c, std::sqrt(1.0 - c * c), 0.0;
    return kl_divergence(a, make_vmf(m, kb));
  };
  CHECK(at_cos(-1.0) > at_cos(0.0));
  CHECK(at_cos(0.0) > at_cos(1.0));
}

TEST_CASE("closed-form KL agrees with a Monte Carlo estimate") {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> logk(-0.5, 3.0);
  for (int p : {3, 8}) {
    for (int rep = 0; rep < 3; ++rep) {
      const auto a = make_vmf(random_unit_rows(1, p, 50 + rep).row(0).transpose(),
                              std::exp(logk(rng)));
      const auto b = make_vmf(random_unit_rows(1, p, 60 + rep).row(0).transpose(),
                              std::exp(logk(rng)));
      const int n = 400000;
      const Eigen::MatrixXd x = dsf::sample(a, n, 90 + 10 * p + rep);
      const Eigen::ArrayXd diff = (x * a.mu).array() * a.kappa - (x * b.mu).array() * b.kappa +
                                  (log_normalizer(p, a.kappa) - log_normalizer(p, b.kappa));
      const double mc = diff.mean();
      const double se = std::sqrt((diff - mc).square().sum() / (double(n) * (n - 1.0)));
      const double closed = kl_divergence(a, b);
      CHECK_MESSAGE(std::abs(closed - mc) < std::max(0.02 * std::abs(closed), 4.0 * se),
                    "p=", p, " rep=", rep, " closed=", closed, " mc=", mc);
    }
  }
}

TEST_CASE("make_vmf renormalizes and rejects bad input") {
  const auto d = make_vmf(Eigen::VectorXd(3.0 * axis(4, 1)), 2.0);
  CHECK(d.mu.norm() == doctest::Approx(1.0));
  CHECK(d.dim == 4);
  CHECK_THROWS_AS(make_vmf(Eigen::VectorXd(Eigen::VectorXd::Zero(3)), 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_vmf(axis(3, 0), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(make_vmf(axis(3, 0), -1.0), std::invalid_argument);
}

TEST_CASE("uniform sphere samples are unit and centered") {
  const int n = 20000;
  const Eigen::MatrixXd x = dsf::sample_uniform_sphere(n, 5, 3);
  for (int i = 0; i < n; i += 997) CHECK(std::abs(x.row(i).norm() - 1.0) < 1e-12);
  CHECK(x.colwise().mean().norm() < 4.0 / std::sqrt(double(n)));
}
