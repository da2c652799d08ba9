#include "riskeval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace riskeval {

double normal_cdf(double x) {
    // erfc keeps relative accuracy deep in the lower tail, where the naive
    // 0.5 * (1 + erf(x / sqrt(2))) form would lose everything to cancellation.
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

double normal_quantile(double p) {
    // Wichura's algorithm AS 241, rational approximations PPND16. Absolute
    // error below 1e-15 over the full open interval.
    if (!(p > 0.0 && p < 1.0))
        throw std::domain_error("normal_quantile: p must lie in (0, 1)");

    const double q = p - 0.5;
    if (std::fabs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        const double num =
            (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                  6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
              1.3314166789178437745e+2) * r + 3.3871328727963666080e+0);
        const double den =
            (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                  3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
                5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
              4.2313330701600911252e+1) * r + 1.0);
        return q * num / den;
    }

    double r = (q < 0.0) ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        const double num =
            (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
              4.63033784615654529590e+0) * r + 1.42343711074968357734e+0);
        const double den =
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
              2.05319162663775882187e+0) * r + 1.0);
        val = num / den;
    } else {
        r -= 5.0;
        const double num =
            (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
              5.46378491116411436990e+0) * r + 6.65790464350110377720e+0);
        const double den =
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
              5.99832206555887937690e-1) * r + 1.0);
        val = num / den;
    }
    return (q < 0.0) ? -val : val;
}

double log_normal_pdf(double x) {
    constexpr double kLogTwoPi = 1.8378770664093455;
    return -0.5 * (kLogTwoPi + x * x);
}

namespace {

// Continued fraction for the incomplete beta, evaluated with the modified
// Lentz method. Converges fast for x < (a + 1) / (a + b + 2).
double beta_continued_fraction(double x, double a, double b) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-16;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;

    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;

    for (int m = 1; m <= 300; ++m) {
        const auto md = static_cast<double>(m);
        const double m2 = 2.0 * md;

        double aa = md * (b - md) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;

        aa = -(a + md) * (qab + md) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw std::runtime_error("beta_cdf_regularized: continued fraction failed");
}

}  // namespace

double beta_cdf_regularized(double x, double a, double b) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::domain_error("beta_cdf_regularized: a, b must be positive");
    if (!(x >= 0.0 && x <= 1.0))
        throw std::domain_error("beta_cdf_regularized: x must lie in [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;

    const double log_front = a * std::log(x) + b * std::log1p(-x) -
                             (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * beta_continued_fraction(x, a, b) / a;
    return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) -
                          (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b))) *
                     beta_continued_fraction(1.0 - x, b, a) / b;
}

double beta_quantile(double p, double a, double b) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::domain_error("beta_quantile: a, b must be positive");
    if (!(p >= 0.0 && p <= 1.0))
        throw std::domain_error("beta_quantile: p must lie in [0, 1]");
    if (p == 0.0) return 0.0;
    if (p == 1.0) return 1.0;

    constexpr double kTol = 1e-10;
    const double log_beta =
        std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);

    // Bracket is maintained throughout; Newton steps that would leave it
    // are replaced by bisection, so the iteration cannot escape or cycle.
    double lo = 0.0;
    double hi = 1.0;
    double x = a / (a + b);

    for (int iter = 0; iter < 200; ++iter) {
        const double cdf = beta_cdf_regularized(x, a, b);
        const double err = cdf - p;
        if (std::fabs(err) <= kTol) return x;
        if (err > 0.0)
            hi = x;
        else
            lo = x;

        const double log_pdf = (a - 1.0) * std::log(x) +
                               (b - 1.0) * std::log1p(-x) - log_beta;
        double next = x - err / std::exp(log_pdf);
        if (!(next > lo && next < hi) || !std::isfinite(next))
            next = 0.5 * (lo + hi);
        x = next;
        if (hi - lo < 1e-15) return x;
    }
    throw std::runtime_error("beta_quantile: no convergence in 200 iterations");
}

std::pair<double, double> wilson_interval(std::size_t hits, std::size_t n) {
    if (n == 0) throw std::domain_error("wilson_interval: n must be positive");
    if (hits > n) throw std::domain_error("wilson_interval: hits > n");

    const double z = kZ95;
    const double nn = static_cast<double>(n);
    const double phat = static_cast<double>(hits) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (phat + z2 / (2.0 * nn)) / denom;
    const double half =
        z * std::sqrt(phat * (1.0 - phat) / nn + z2 / (4.0 * nn * nn)) / denom;
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace riskeval
