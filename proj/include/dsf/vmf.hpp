#pragma once

// von Mises-Fisher distributions on the unit sphere S^{p-1}:
//   f(x; mu, kappa) = C_p(kappa) exp(kappa mu^T x)
// with mean direction mu, concentration kappa > 0 and normalizer
//   C_p(kappa) = kappa^{p/2-1} / ((2 pi)^{p/2} I_{p/2-1}(kappa)).
// Provides moment-based estimation from a group of unit vectors (with the
// stabilization used during representation learning), log density, exact
// rejection sampling, and the closed-form KL divergence between two vMF
// distributions on the same sphere.

#include "dsf/bessel.hpp"
#include "dsf/common.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <utility>

namespace dsf {

template <typename Scalar = double>
struct VmfDistribution {
  VectorX<Scalar> mu;  // unit mean direction
  Scalar kappa = Scalar(0);
  int dim = 0;  // ambient dimension p (sphere S^{p-1})
  // Resultant length the estimate came from; NaN when constructed directly.
  Scalar r_bar_raw = std::numeric_limits<Scalar>::quiet_NaN();
};

// Build a distribution from a direction (renormalized here) and kappa.
template <typename Derived>
VmfDistribution<typename Derived::Scalar> make_vmf(const Eigen::MatrixBase<Derived>& mu,
                                                   typename Derived::Scalar kappa) {
  using Scalar = typename Derived::Scalar;
  if (mu.size() < 2) throw std::invalid_argument("make_vmf: direction needs dimension >= 2");
  if (!(kappa > Scalar(0)) || !std::isfinite(kappa)) {
    throw std::invalid_argument("make_vmf: kappa must be finite and > 0");
  }
  VectorX<Scalar> m = mu;
  const Scalar n = m.norm();
  if (!(n > Scalar(1e-12))) {
    throw std::invalid_argument("make_vmf: direction has near-zero norm");
  }
  m /= n;
  return VmfDistribution<Scalar>{std::move(m), kappa, static_cast<int>(mu.size())};
}

// Controls how the moment estimate of kappa is kept in a trainable range:
// shrink the resultant length by lambda_r before applying the concentration
// formula, and divide the result by the dimension.  Both switches exist so
// the unstabilized estimator (whose kappa blows up as views collapse) can be
// reproduced for diagnostics.
struct StabilizationPolicy {
  double lambda_r = 0.95;        // resultant shrink factor, in (0, 1)
  bool scale_r_bar = true;       // apply lambda_r
  bool normalize_by_dim = true;  // divide kappa by p
  double r_bar_floor = 1e-8;     // below this resultant length the direction is undefined

  static StabilizationPolicy disabled() { return {0.95, false, false, 1e-8}; }

  void validate() const {
    if (!(lambda_r > 0.0) || !(lambda_r < 1.0)) {
      throw ValidationError("stabilization.lambda_r", "must lie in (0, 1)");
    }
    if (!(r_bar_floor > 0.0) || !(r_bar_floor <= 0.1)) {
      throw ValidationError("stabilization.r_bar_floor", "must lie in (0, 0.1]");
    }
  }
};

// Rational concentration approximation kappa(r) = r (p - r^2) / (1 - r^2)
// for the resultant length r of a sample on S^{p-1}; accurate to ~1% of the
// exact inverse of A_p across dimensions.
template <typename Scalar>
Scalar concentration_approx(int p, Scalar r) {
  if (p < 2) throw std::domain_error("concentration_approx: dimension must be >= 2");
  if (!(r >= Scalar(0)) || !(r < Scalar(1))) {
    throw std::domain_error("concentration_approx: r must lie in [0, 1)");
  }
  return r * (Scalar(p) - r * r) / (Scalar(1) - r * r);
}

// d/dr of the approximation above: (p + (p-3) r^2 + r^4) / (1 - r^2)^2.
template <typename Scalar>
Scalar concentration_approx_dr(int p, Scalar r) {
  if (p < 2) throw std::domain_error("concentration_approx_dr: dimension must be >= 2");
  if (!(r >= Scalar(0)) || !(r < Scalar(1))) {
    throw std::domain_error("concentration_approx_dr: r must lie in [0, 1)");
  }
  const Scalar r2 = r * r;
  const Scalar d = Scalar(1) - r2;
  return (Scalar(p) + (Scalar(p) - Scalar(3)) * r2 + r2 * r2) / (d * d);
}

// Estimate plus the derivative of kappa with respect to the raw resultant
// length (zero where the stabilization clamp is active) -- the piece needed
// to backpropagate through the estimator.
template <typename Scalar = double>
struct VmfEstimate {
  VmfDistribution<Scalar> dist;
  Scalar r_bar_used = Scalar(0);  // resultant length after shrink/clamp
  Scalar dkappa_drbar = Scalar(0);
};

// Moment estimation from a group of unit row vectors (one view per row):
// mean direction mu = zbar / |zbar|, concentration from the resultant length
// |zbar| via concentration_approx, after the policy's shrink and clamp.
// Throws DegenerateDirectionError when the views cancel to |zbar| below the
// floor and no direction is defined.
template <typename Derived>
VmfEstimate<typename Derived::Scalar> estimate_with_gradient(
    const Eigen::MatrixBase<Derived>& views, const StabilizationPolicy& policy = {}) {
  using Scalar = typename Derived::Scalar;
  policy.validate();
  const int m = static_cast<int>(views.rows());
  const int p = static_cast<int>(views.cols());
  if (m < 1) throw std::invalid_argument("estimate: need at least one view");
  if (p < 2) throw std::invalid_argument("estimate: dimension must be >= 2");
  for (int i = 0; i < m; ++i) {
    if (std::abs(views.row(i).norm() - Scalar(1)) > Scalar(1e-6)) {
      throw std::invalid_argument("estimate: view rows must be unit vectors");
    }
  }

  VectorX<Scalar> zbar = views.colwise().mean().transpose();
  const Scalar r_bar = zbar.norm();
  if (!(r_bar >= Scalar(policy.r_bar_floor))) {
    throw DegenerateDirectionError("estimate: views cancel; mean direction undefined");
  }

  const Scalar hi = Scalar(1) - Scalar(1e-9);
  const Scalar lo = Scalar(policy.r_bar_floor);
  const Scalar scale = policy.scale_r_bar ? Scalar(policy.lambda_r) : Scalar(1);
  const Scalar scaled = scale * r_bar;
  const Scalar r_used = std::clamp(scaled, lo, hi);
  const Scalar p_div = policy.normalize_by_dim ? Scalar(p) : Scalar(1);

  VmfEstimate<Scalar> out;
  out.dist.mu = zbar / r_bar;
  out.dist.kappa = concentration_approx(p, r_used) / p_div;
  out.dist.dim = p;
  out.dist.r_bar_raw = r_bar;
  out.r_bar_used = r_used;
  // Clamp boundaries have zero slope; the interior passes the shrink factor
  // through the chain rule.
  out.dkappa_drbar =
      (scaled > lo && scaled < hi) ? concentration_approx_dr(p, r_used) * scale / p_div
                                   : Scalar(0);
  return out;
}

template <typename Derived>
VmfDistribution<typename Derived::Scalar> estimate(const Eigen::MatrixBase<Derived>& views,
                                                   const StabilizationPolicy& policy = {}) {
  return estimate_with_gradient(views, policy).dist;
}

// log C_p(kappa) = (p/2 - 1) log kappa - (p/2) log(2 pi) - log I_{p/2-1}(kappa).
template <typename Scalar>
Scalar log_normalizer(int p, Scalar kappa) {
  if (p < 2) throw std::domain_error("log_normalizer: dimension must be >= 2");
  if (!(kappa > Scalar(0)) || !std::isfinite(kappa)) {
    throw std::domain_error("log_normalizer: kappa must be finite and > 0");
  }
  const Scalar nu = Scalar(0.5) * p - Scalar(1);
  const Scalar two_pi = Scalar(2) * Scalar(M_PI);
  const Scalar lead = nu > Scalar(0) ? nu * std::log(kappa) : Scalar(0);
  return lead - Scalar(0.5) * p * std::log(two_pi) - log_bessel_i(nu, kappa);
}

// Log density at a unit vector x.
template <typename Scalar, typename Derived>
Scalar log_pdf(const VmfDistribution<Scalar>& d, const Eigen::MatrixBase<Derived>& x) {
  if (x.size() != d.dim) throw std::invalid_argument("log_pdf: dimension mismatch");
  const Scalar dot = (d.mu.transpose() * x.derived())(0);
  return log_normalizer(d.dim, d.kappa) + d.kappa * dot;
}

// KL(a || b) for two vMF distributions on the same sphere, in closed form:
//   (p/2 - 1) log(kappa_a / kappa_b)
//   + log I_{p/2-1}(kappa_b) - log I_{p/2-1}(kappa_a)
//   + A_p(kappa_a) (kappa_a - kappa_b mu_a^T mu_b).
template <typename Scalar>
Scalar kl_divergence(const VmfDistribution<Scalar>& a, const VmfDistribution<Scalar>& b) {
  if (a.dim != b.dim) throw std::invalid_argument("kl_divergence: dimension mismatch");
  const int p = a.dim;
  const Scalar nu = Scalar(0.5) * p - Scalar(1);
  const Scalar t1 = nu > Scalar(0) ? nu * (std::log(a.kappa) - std::log(b.kappa)) : Scalar(0);
  const Scalar t2 = log_bessel_i(nu, b.kappa) - log_bessel_i(nu, a.kappa);
  const Scalar cosine = a.mu.dot(b.mu);
  const Scalar t3 = bessel_ratio(p, a.kappa) * (a.kappa - b.kappa * cosine);
  return t1 + t2 + t3;
}

// n independent points uniform on S^{p-1}, one per row.
inline Eigen::MatrixXd sample_uniform_sphere(int n, int p, std::uint64_t seed) {
  if (n < 1 || p < 2) throw std::invalid_argument("sample_uniform_sphere: need n >= 1, p >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(n, p);
  for (int i = 0; i < n; ++i) {
    double norm2 = 0.0;
    do {
      for (int j = 0; j < p; ++j) out(i, j) = normal(rng);
      norm2 = out.row(i).squaredNorm();
    } while (norm2 < 1e-24);
    out.row(i) /= std::sqrt(norm2);
  }
  return out;
}

// Exact vMF sampling by the standard rejection scheme: draw the cosine w of
// the angle to mu from the envelope built on Beta((p-1)/2, (p-1)/2), accept
// with the tightness test, then attach a uniform tangent direction.
inline Eigen::MatrixXd sample(const VmfDistribution<double>& d, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: need n >= 1");
  if (!(d.kappa > 0.0) || d.dim < 2 || d.mu.size() != d.dim) {
    throw std::invalid_argument("sample: distribution is not initialized");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::gamma_distribution<double> gamma_half(0.5 * (d.dim - 1), 1.0);

  const double p1 = d.dim - 1.0;
  const double b = p1 / (std::sqrt(4.0 * d.kappa * d.kappa + p1 * p1) + 2.0 * d.kappa);
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = d.kappa * x0 + p1 * std::log(1.0 - x0 * x0);

  Eigen::MatrixXd out(n, d.dim);
  Eigen::VectorXd v(d.dim);
  for (int i = 0; i < n; ++i) {
    double w = 0.0;
    for (;;) {
      // Beta((p-1)/2, (p-1)/2) from a pair of gamma draws.
      const double g1 = gamma_half(rng);
      const double g2 = gamma_half(rng);
      const double beta = g1 / (g1 + g2);
      w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta);
      const double u = unif(rng);
      if (d.kappa * w + p1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
    }
    // Uniform direction orthogonal to mu.
    double tnorm = 0.0;
    do {
      for (int j = 0; j < d.dim; ++j) v(j) = normal(rng);
      v -= d.mu * d.mu.dot(v);
      tnorm = v.norm();
    } while (tnorm < 1e-12);
    v /= tnorm;
    out.row(i) = (d.mu * w + v * std::sqrt(std::max(0.0, 1.0 - w * w))).transpose();
    out.row(i) /= out.row(i).norm();
  }
  return out;
}

}  // namespace dsf
