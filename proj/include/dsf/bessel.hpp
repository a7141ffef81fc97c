#pragma once

// Modified Bessel functions of the first kind, in the form needed for
// von Mises-Fisher work on S^{p-1}: log I_nu(x) for half-integer orders
// nu = p/2 - 1, the ratio A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa),
// its derivative, and Newton inversion of the ratio.
//
// Everything is in log space or ratio space; I_nu itself overflows double
// near x ~ 700 so it is never formed.  Branch layout for log I:
//
//   x <= 500                ascending power series (exact summation is safe:
//                           the sum is < e^500, far below double max)
//   x  > 500, nu <  25      Hankel large-argument expansion
//   x  > 500, nu >= 25      uniform large-order expansion (Olver), with the
//                           polynomial coefficients u_k(t) hard-coded below
//
// The branches agree to ~1e-15 in a band around x = 500 (covered by tests),
// so the crossover introduces no seam.  The ratio uses a continued fraction
// (modified Lentz) up to x = 1e5 -- its iteration count grows linearly with
// x, still well under a millisecond there -- and exp(log-difference) beyond.
// The log-difference route carries an absolute noise floor of about
// ulp(log I) ~ x * 1e-16 on the ratio, which only matters for the Newton
// inversion stopping rule (see invert_bessel_ratio).

#include "dsf/common.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>

namespace dsf {

// Order bookkeeping for a sphere dimension: on S^{p-1} the relevant order is
// nu = p/2 - 1 (and the ratio numerator order is nu + 1 = p/2).
struct BesselOrder {
  double nu;
  int dim;

  static BesselOrder from_dim(int p) {
    if (p < 2) throw std::domain_error("BesselOrder: dimension must be >= 2");
    return BesselOrder{0.5 * p - 1.0, p};
  }
};

namespace detail {

inline constexpr double kSeriesMaxArg = 500.0;
inline constexpr double kHankelMaxOrder = 25.0;
inline constexpr double kRatioCfMaxArg = 1.0e5;

// log I_nu(x) by the ascending series
//   I_nu(x) = (x/2)^nu / Gamma(nu+1) * sum_k (x^2/4)^k / (k! (nu+1)_k).
// All terms are positive, the sum is bounded by e^x <= e^500, so plain
// summation in double is exact to roundoff.
template <typename Scalar>
Scalar log_bessel_series(Scalar nu, Scalar x) {
  const Scalar q = Scalar(0.25) * x * x;
  Scalar term = Scalar(1);
  Scalar sum = Scalar(1);
  for (int k = 1; k < 100000; ++k) {
    term *= q / (Scalar(k) * (nu + Scalar(k)));
    sum += term;
    if (term < sum * std::numeric_limits<Scalar>::epsilon()) break;
  }
  const Scalar prefix =
      nu > Scalar(0) ? nu * std::log(Scalar(0.5) * x) - std::lgamma(nu + Scalar(1)) : Scalar(0);
  return prefix + std::log(sum);
}

// log I_nu(x) by the Hankel expansion
//   I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k,
//   a_k recurrence: t_{k} = -t_{k-1} (4 nu^2 - (2k-1)^2) / (8 x k).
// Asymptotic: stop at the smallest term.  For x > 500 and nu < 25 the
// smallest term is far below 1e-16, so truncation error is negligible.
template <typename Scalar>
Scalar log_bessel_hankel(Scalar nu, Scalar x) {
  const Scalar mu4 = Scalar(4) * nu * nu;
  Scalar term = Scalar(1);
  Scalar sum = Scalar(1);
  Scalar prev = std::numeric_limits<Scalar>::max();
  for (int k = 1; k < 60; ++k) {
    const Scalar f = Scalar(2 * k - 1);
    term *= -(mu4 - f * f) / (Scalar(8) * x * Scalar(k));
    const Scalar mag = std::abs(term);
    if (mag >= prev) break;  // past the smallest term: stop before divergence
    prev = mag;
    sum += term;
    if (mag < std::abs(sum) * std::numeric_limits<Scalar>::epsilon()) break;
  }
  const Scalar two_pi = Scalar(2) * Scalar(M_PI);
  return x - Scalar(0.5) * std::log(two_pi * x) + std::log(sum);
}

// Polynomials u_k(t) of the uniform large-order expansion, ascending powers
// of t, k = 0..10.  Generated once from the standard recurrence
//   u_{k+1}(t) = t^2 (1 - t^2) / 2 * u_k'(t) + 1/8 * int_0^t (1 - 5 s^2) u_k(s) ds
// and frozen here as double literals.
inline constexpr int kUniformOrders = 11;
inline constexpr int kUniformMaxLen = 31;
inline constexpr double kUniformPoly[kUniformOrders][kUniformMaxLen] = {
    {1.0},
    {0, 0.125, 0, -0.20833333333333333333},
    {0, 0, 0.0703125, 0, -0.40104166666666666667, 0, 0.33420138888888888889},
    {0, 0, 0, 0.0732421875, 0, -0.8912109375, 0, 1.8464626736111111111, 0,
     -1.0258125964506172840},
    {0, 0, 0, 0, 0.112152099609375, 0, -2.3640869140625, 0, 8.78912353515625, 0,
     -11.207002616222993827, 0, 4.6695844234262474280},
    {0, 0, 0, 0, 0, 0.227108001708984375, 0, -7.3687943594796316964, 0, 42.534998745388454861,
     0, -91.818241543240017361, 0, 84.636217674600734632, 0, -28.212072558200244877},
    {0, 0, 0, 0, 0, 0, 0.57250142097473144531, 0, -26.491430486951555525, 0,
     218.19051174421159048, 0, -699.57962737613254123, 0, 1059.9904525279998779, 0,
     -765.25246814118164230, 0, 212.57013003921712286},
    {0, 0, 0, 0, 0, 0, 0, 1.7277275025844573975, 0, -108.09091978839465550, 0,
     1200.9029132163524628, 0, -5305.6469786134031084, 0, 11655.393336864533248, 0,
     -13586.550006434137439, 0, 8061.7221817373093845, 0, -1919.4576623184069963},
    {0, 0, 0, 0, 0, 0, 0, 0, 6.0740420012734830379, 0, -493.91530477308801242, 0,
     7109.5143024893637214, 0, -41192.654968897551298, 0, 122200.46498301745979, 0,
     -203400.17728041553428, 0, 192547.00123253153236, 0, -96980.598388637513489, 0,
     20204.291330966148643},
    {0, 0, 0, 0, 0, 0, 0, 0, 0, 24.380529699556063861, 0, -2499.8304818112096241, 0,
     45218.768981362726273, 0, -331645.17248456357783, 0, 1268365.2733216247816, 0,
     -2813563.2265865341107, 0, 3763271.2976564039964, 0, -2998015.9185381067501, 0,
     1311763.6146629772007, 0, -242919.18790055133346},
    {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 110.01714026924673817, 0, -13886.089753717040532, 0,
     308186.40461266239848, 0, -2785618.1280864546890, 0, 13288767.166421818329, 0,
     -37567176.660763351308, 0, 66344512.274729026665, 0, -74105148.211532657748, 0,
     50952602.492664642206, 0, -19706819.118432226927, 0, 3284469.8530720378211},
};
inline constexpr int kUniformDegree[kUniformOrders] = {0, 3, 6, 9, 12, 15, 18, 21, 24, 27, 30};

template <typename Scalar>
Scalar uniform_poly(int k, Scalar t) {
  Scalar acc = Scalar(0);
  for (int d = kUniformDegree[k]; d >= 0; --d) {
    acc = acc * t + Scalar(kUniformPoly[k][d]);
  }
  return acc;
}

// log I_nu(nu z) by the uniform large-order expansion
//   I_nu(nu z) ~ e^{nu eta} / (sqrt(2 pi nu) (1+z^2)^{1/4}) * sum_k u_k(t)/nu^k,
//   t = 1/sqrt(1+z^2), eta = sqrt(1+z^2) + log(z / (1 + sqrt(1+z^2))).
// With nu >= 25 the k = 11 tail is below 1e-16 for all z.
template <typename Scalar>
Scalar log_bessel_uniform(Scalar nu, Scalar x) {
  const Scalar z = x / nu;
  const Scalar s = std::hypot(Scalar(1), z);  // sqrt(1 + z^2)
  const Scalar eta = s + std::log(z / (Scalar(1) + s));
  const Scalar t = Scalar(1) / s;
  Scalar sum = Scalar(0);
  for (int k = kUniformOrders - 1; k >= 0; --k) {
    sum = sum / nu + uniform_poly(k, t);
  }
  const Scalar two_pi = Scalar(2) * Scalar(M_PI);
  return nu * eta - Scalar(0.5) * std::log(two_pi * nu) - Scalar(0.5) * std::log(s) +
         std::log(sum);
}

}  // namespace detail

// log I_nu(x) for nu >= 0, x >= 0 (x = 0 allowed only with the convention
// I_nu(0) = [nu == 0], handled by the series prefix).
template <typename Scalar>
Scalar log_bessel_i(Scalar nu, Scalar x) {
  static_assert(std::is_floating_point_v<Scalar>);
  if (!(nu >= Scalar(0)) || !std::isfinite(nu)) {
    throw std::domain_error("log_bessel_i: order must be finite and >= 0");
  }
  if (!(x >= Scalar(0)) || !std::isfinite(x)) {
    throw std::domain_error("log_bessel_i: argument must be finite and >= 0");
  }
  if (x <= Scalar(detail::kSeriesMaxArg)) return detail::log_bessel_series(nu, x);
  if (nu < Scalar(detail::kHankelMaxOrder)) return detail::log_bessel_hankel(nu, x);
  return detail::log_bessel_uniform(nu, x);
}

inline double log_bessel_i(BesselOrder order, double x) { return log_bessel_i(order.nu, x); }

// A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa), the mean resultant length
// of a vMF distribution with concentration kappa on S^{p-1}.  Strictly
// increasing in kappa, range (0, 1).
template <typename Scalar>
Scalar bessel_ratio(int p, Scalar kappa) {
  static_assert(std::is_floating_point_v<Scalar>);
  if (p < 2) throw std::domain_error("bessel_ratio: dimension must be >= 2");
  if (!(kappa > Scalar(0)) || !std::isfinite(kappa)) {
    throw std::domain_error("bessel_ratio: kappa must be finite and > 0");
  }
  const Scalar nu = Scalar(0.5) * p - Scalar(1);
  if (kappa > Scalar(detail::kRatioCfMaxArg)) {
    return std::exp(log_bessel_i(nu + Scalar(1), kappa) - log_bessel_i(nu, kappa));
  }
  // Gauss continued fraction for I_{nu+1}/I_nu, evaluated by modified Lentz:
  //   A = 1 / (b_1 + 1 / (b_2 + ...)),  b_k = 2 (nu + k) / kappa.
  // Convergence needs roughly kappa - nu iterations once kappa > nu.
  const Scalar tiny = Scalar(1e-300);
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  Scalar f = tiny;
  Scalar c = tiny;
  Scalar d = Scalar(0);
  const long max_iter = static_cast<long>(kappa) + 2000;
  for (long k = 1; k <= max_iter; ++k) {
    const Scalar b = Scalar(2) * (nu + Scalar(k)) / kappa;
    d = b + d;
    if (d == Scalar(0)) d = tiny;
    c = b + Scalar(1) / c;
    if (c == Scalar(0)) c = tiny;
    d = Scalar(1) / d;
    const Scalar delta = c * d;
    f *= delta;
    if (std::abs(delta - Scalar(1)) < eps) return f;
  }
  throw ConvergenceError("bessel_ratio: continued fraction did not converge",
                         static_cast<double>(f), std::numeric_limits<double>::quiet_NaN());
}

// d/dkappa A_p(kappa) via the Riccati identity
//   A' = 1 - A^2 - (p-1)/kappa * A,
// which is well conditioned even for tiny kappa (limit 1/p).
template <typename Scalar>
Scalar bessel_ratio_dkappa(int p, Scalar kappa) {
  const Scalar a = bessel_ratio(p, kappa);
  return Scalar(1) - a * a - (Scalar(p) - Scalar(1)) / kappa * a;
}

// Solve A_p(kappa) = r_bar for kappa by Newton, seeded with the rational
// approximation kappa0 = r (p - r^2) / (1 - r^2) which is within ~1% for
// moderate p.  A_p is strictly increasing so the root is unique.  The
// stopping rule widens the residual tolerance to the evaluation noise floor
// of A_p at the current kappa (~kappa * 5e-16 on the log-difference branch):
// below that, the residual carries no information about the root.
template <typename Scalar>
Scalar invert_bessel_ratio(int p, Scalar r_bar, Scalar tol = Scalar(1e-9)) {
  static_assert(std::is_floating_point_v<Scalar>);
  if (p < 2) throw std::domain_error("invert_bessel_ratio: dimension must be >= 2");
  if (!(r_bar > Scalar(0)) || !(r_bar < Scalar(1))) {
    throw std::domain_error("invert_bessel_ratio: r_bar must lie strictly in (0, 1)");
  }
  Scalar kappa = r_bar * (Scalar(p) - r_bar * r_bar) / (Scalar(1) - r_bar * r_bar);
  Scalar best_kappa = kappa;
  Scalar best_residual = std::numeric_limits<Scalar>::infinity();
  for (int iter = 0; iter < 50; ++iter) {
    const Scalar residual = bessel_ratio(p, kappa) - r_bar;
    if (std::abs(residual) < std::abs(best_residual)) {
      best_residual = residual;
      best_kappa = kappa;
    }
    if (std::abs(residual) < std::max(tol, kappa * Scalar(5e-16))) return kappa;
    const Scalar slope = bessel_ratio_dkappa(p, kappa);
    Scalar next = kappa - residual / slope;
    if (!(next > Scalar(0))) next = Scalar(0.5) * kappa;  // keep the iterate in domain
    kappa = next;
  }
  throw ConvergenceError("invert_bessel_ratio: Newton did not reach tolerance",
                         static_cast<double>(best_kappa), static_cast<double>(best_residual));
}

}  // namespace dsf
