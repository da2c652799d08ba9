#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "riskeval/estimate.hpp"
#include "riskeval/harness.hpp"
#include "riskeval/param_space.hpp"

namespace riskeval {

// Adaptive multilevel splitting for p = P(f(X) < gamma). The population
// walks a decreasing ladder of levels; at each one the worst particles are
// replaced by copies of survivors moved with a level-conditioned MCMC
// kernel, and the survivor fractions multiply into the estimate.

struct AmsConfig {
    std::size_t n_particles = 1000;
    // Fraction discarded per level; the level is the (ceil(delta * N) + 1)-th
    // largest objective, so at least that many particles are replaced.
    double delta = 0.1;
    // MCMC transitions applied to every revived particle.
    int t_mcmc = 10;
    // Autoregressive proposal mixing in (0, 1]; adapted between levels when
    // adapt_beta is set, frozen within a level.
    double beta = 0.3;
    bool adapt_beta = true;
    int max_iters = 10000;
    double gamma = 0.0;
    std::uint64_t seed = 0;
};

struct Particle {
    std::int64_t id = 0;
    std::vector<double> latent;
    std::vector<double> scenario;
    double f = 0.0;
};

struct LevelRecord {
    int iter = 0;
    double level = 0.0;
    // Survivor fraction at this level.
    double p_k = 0.0;
    // Mean MCMC acceptance over the revived particles; 0 when the level
    // needed no moves (the final, converged one).
    double acc_rate = 0.0;
    std::size_t n_killed = 0;
    double beta = 0.0;
};

enum class AmsTermination { Converged, Stalled, MaxIters };

struct AmsResult {
    double p_hat = 0.0;
    double log_p = 0.0;
    // Idealized delta-method standard error of log p_hat, treating levels
    // as independent binomial stages: sqrt(sum (1 - p_k) / (N * p_k)).
    double std_err_log = 0.0;
    std::vector<LevelRecord> levels;
    std::vector<Particle> survivors;
    std::uint64_t n_evals = 0;
    AmsTermination terminated = AmsTermination::Converged;
    double final_beta = 0.0;
};

// The level rule in isolation: sort objectives descending, clip the
// (n_discard + 1)-th largest at gamma, count strict survivors. Returns
// {level, survivor_fraction}. Requires n_discard < f_values.size().
std::pair<double, double> level_and_fraction(std::vector<double> f_values,
                                             std::size_t n_discard,
                                             double gamma);

// One autoregressive proposal u' = sqrt(1 - beta^2) u + beta z with z drawn
// from `stream`, accepted iff f(to_params(u')) < level. Returns whether the
// particle moved. Exact detailed balance with respect to N(0, I) restricted
// to {f < level}, for any beta in (0, 1].
bool mcmc_transition(Particle& particle, const ParamSpace& space,
                     const ObjectiveFn& objective, double level, double beta,
                     Stream& stream);

AmsResult run_ams(const ParamSpace& space, EvalPool& pool, const AmsConfig& cfg);

// Estimate view of a splitting run: normal-theory interval on log p_hat,
// hits reported as the final survivor count.
Estimate to_estimate(const AmsResult& result, double gamma);

}  // namespace riskeval
