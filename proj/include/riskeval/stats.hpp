#pragma once

#include <cstddef>
#include <utility>

namespace riskeval {

// Special functions and interval helpers shared by the samplers and
// estimators. All of them are deterministic scalar math; anything that can
// fail throws std::domain_error or std::runtime_error.

// Standard normal CDF, accurate in both tails.
double normal_cdf(double x);

// Inverse standard normal CDF (Wichura's PPND16). Requires 0 < p < 1.
double normal_quantile(double p);

// log of the standard normal density at x.
double log_normal_pdf(double x);

// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
double beta_cdf_regularized(double x, double a, double b);

// Inverse of I_x(a, b) in x, by safeguarded Newton iteration with a
// bisection fallback. Converges to |I_x - p| <= 1e-10 or throws after 200
// iterations. p outside [0, 1] is a domain error.
double beta_quantile(double p, double a, double b);

// 95% Wilson score interval for a binomial proportion with `hits` successes
// out of `n` trials. Returns {lo, hi}; both ends lie in [0, 1].
std::pair<double, double> wilson_interval(std::size_t hits, std::size_t n);

// log(exp(a) + exp(b)) without overflow; tolerates -infinity inputs.
double log_sum_exp(double a, double b);

// z for a two-sided 95% normal interval, frozen so every interval in the
// library uses the same constant.
inline constexpr double kZ95 = 1.9599639845400542;

}  // namespace riskeval
