#pragma once

#include <cstdint>
#include <string>

#include "riskeval/harness.hpp"
#include "riskeval/param_space.hpp"

namespace riskeval {

// Common result shape for every estimator of p = P(f(X) < gamma). The
// interval always satisfies 0 <= ci_lo <= p_hat <= ci_hi <= 1.
struct Estimate {
    std::string method;
    double gamma = 0.0;
    double p_hat = 0.0;
    double log_p_hat = 0.0;
    double std_err = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    std::uint64_t n_evals = 0;
    std::uint64_t hits = 0;
    // Effective sample size: n for unweighted estimators, the importance
    // weight ESS otherwise.
    double ess = 0.0;
};

// Plain Monte Carlo: n independent draws from the base law, hit frequency,
// Wilson 95% interval. Draw i comes from its own derived stream, so results
// do not depend on batch sizes or worker counts.
Estimate estimate_naive(const ParamSpace& space, EvalPool& pool, double gamma,
                        std::uint64_t n, std::uint64_t seed);

// Samples needed for relative standard error `rel_err` at failure
// probability p: ceil((1 - p) / (p * rel_err^2)).
std::uint64_t required_samples(double p, double rel_err);

}  // namespace riskeval
