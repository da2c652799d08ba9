#include "riskeval/ams.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "riskeval/stats.hpp"

namespace riskeval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> propose_latent(const std::vector<double>& u, double beta,
                                   Stream& stream) {
    const double keep = std::sqrt(1.0 - beta * beta);
    std::vector<double> out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        out[i] = keep * u[i] + beta * stream.normal();
    return out;
}

void validate(const AmsConfig& cfg) {
    if (cfg.n_particles < 2)
        throw std::invalid_argument("ams: needs at least 2 particles");
    if (!(cfg.delta > 0.0 && cfg.delta < 1.0))
        throw std::invalid_argument("ams: delta must lie in (0, 1)");
    const auto m = static_cast<std::size_t>(
        std::ceil(cfg.delta * static_cast<double>(cfg.n_particles)));
    if (m >= cfg.n_particles)
        throw std::invalid_argument("ams: delta discards the whole population");
    if (cfg.t_mcmc < 1) throw std::invalid_argument("ams: t_mcmc must be positive");
    if (!(cfg.beta > 0.0 && cfg.beta <= 1.0))
        throw std::invalid_argument("ams: beta must lie in (0, 1]");
    if (cfg.max_iters < 1)
        throw std::invalid_argument("ams: max_iters must be positive");
    if (!std::isfinite(cfg.gamma))
        throw std::invalid_argument("ams: gamma must be finite");
}

}  // namespace

std::pair<double, double> level_and_fraction(std::vector<double> f_values,
                                             std::size_t n_discard,
                                             double gamma) {
    if (f_values.empty())
        throw std::invalid_argument("level_and_fraction: empty population");
    if (n_discard >= f_values.size())
        throw std::invalid_argument(
            "level_and_fraction: n_discard must be below the population size");
    std::sort(f_values.begin(), f_values.end(), std::greater<double>());
    const double level = std::max(gamma, f_values[n_discard]);
    std::size_t survivors = 0;
    for (const double f : f_values)
        if (f < level) ++survivors;
    return {level, static_cast<double>(survivors) /
                       static_cast<double>(f_values.size())};
}

bool mcmc_transition(Particle& particle, const ParamSpace& space,
                     const ObjectiveFn& objective, double level, double beta,
                     Stream& stream) {
    const auto proposal = propose_latent(particle.latent, beta, stream);
    const auto scenario = space.to_params(proposal);
    const double f = objective(proposal, scenario);
    if (f < level) {
        particle.latent = proposal;
        particle.scenario = scenario;
        particle.f = f;
        return true;
    }
    return false;
}

AmsResult run_ams(const ParamSpace& space, EvalPool& pool, const AmsConfig& cfg) {
    validate(cfg);
    const std::size_t n = cfg.n_particles;
    const auto n_discard = static_cast<std::size_t>(
        std::ceil(cfg.delta * static_cast<double>(n)));

    AmsResult result;
    std::int64_t next_id = 0;
    std::uint64_t n_evals = 0;

    auto request_for = [&](std::int64_t id, std::vector<double> latent) {
        EvalRequest req;
        req.id = id;
        req.seed = derive_seed(cfg.seed, {stream_tag::kRequestSeed,
                                          static_cast<std::uint64_t>(id)});
        req.scenario = space.to_params(latent);
        req.latent = std::move(latent);
        return req;
    };

    // Initial population: one stream per particle.
    std::vector<Particle> particles;
    particles.reserve(n);
    {
        std::vector<EvalRequest> reqs;
        reqs.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            Stream draw(derive_seed(cfg.seed, {stream_tag::kAmsInit, i}));
            reqs.push_back(request_for(next_id++, space.sample_latent(draw)));
        }
        auto resps = pool.submit_batch(reqs);
        n_evals += reqs.size();
        for (std::size_t i = 0; i < n; ++i) {
            Particle p;
            p.id = reqs[i].id;
            p.latent = std::move(reqs[i].latent);
            p.scenario = std::move(reqs[i].scenario);
            p.f = resps[i].objective;
            particles.push_back(std::move(p));
        }
    }

    double beta = cfg.beta;
    double log_p = 0.0;
    double var_log = 0.0;
    double level_prev = kInf;
    result.terminated = AmsTermination::MaxIters;

    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        // Level rule on the current population; ties on f broken by id so
        // reruns order identically.
        std::sort(particles.begin(), particles.end(),
                  [](const Particle& a, const Particle& b) {
                      return a.f != b.f ? a.f > b.f : a.id < b.id;
                  });
        const double level = std::max(cfg.gamma, particles[n_discard].f);

        std::vector<Particle> survivors;
        survivors.reserve(n);
        for (auto& p : particles)
            if (p.f < level) survivors.push_back(std::move(p));

        const double p_k =
            static_cast<double>(survivors.size()) / static_cast<double>(n);
        if (p_k == 0.0) {
            // The population cannot get below this level; typically a flat
            // objective region. Partial product stays in the result for
            // diagnosis.
            result.terminated = AmsTermination::Stalled;
            particles.clear();
            break;
        }
        // The population invariant (every f strictly below the previous
        // level) makes levels strictly decrease; a repeat means no progress
        // is possible.
        if (level >= level_prev) {
            result.terminated = AmsTermination::Stalled;
            particles = std::move(survivors);
            break;
        }
        level_prev = level;

        log_p += std::log(p_k);
        var_log += (1.0 - p_k) / (static_cast<double>(n) * p_k);

        if (level == cfg.gamma) {
            result.levels.push_back(
                {iter, level, p_k, 0.0, n - survivors.size(), beta});
            result.terminated = AmsTermination::Converged;
            particles = std::move(survivors);
            break;
        }

        // Revive the discarded mass from uniformly chosen survivors, then
        // move every copy T times with the level-conditioned kernel.
        const std::size_t n_kill = n - survivors.size();
        Stream resample(derive_seed(
            cfg.seed, {stream_tag::kAmsResample, static_cast<std::uint64_t>(iter)}));

        struct Revived {
            Particle particle;
            Stream chain;
        };
        std::vector<Revived> revived;
        revived.reserve(n_kill);
        for (std::size_t r = 0; r < n_kill; ++r) {
            const auto& src = survivors[resample.below(survivors.size())];
            Particle p = src;
            p.id = next_id++;
            Stream chain(derive_seed(cfg.seed, {stream_tag::kAmsMcmc,
                                                static_cast<std::uint64_t>(p.id)}));
            revived.push_back({std::move(p), std::move(chain)});
        }

        std::size_t accepted = 0;
        for (int t = 0; t < cfg.t_mcmc; ++t) {
            std::vector<EvalRequest> reqs;
            reqs.reserve(revived.size());
            for (auto& r : revived)
                reqs.push_back(request_for(
                    next_id++, propose_latent(r.particle.latent, beta, r.chain)));
            auto resps = pool.submit_batch(reqs);
            n_evals += reqs.size();
            for (std::size_t i = 0; i < revived.size(); ++i) {
                if (resps[i].objective < level) {
                    revived[i].particle.latent = std::move(reqs[i].latent);
                    revived[i].particle.scenario = std::move(reqs[i].scenario);
                    revived[i].particle.f = resps[i].objective;
                    ++accepted;
                }
            }
        }
        const double acc_rate =
            static_cast<double>(accepted) /
            (static_cast<double>(n_kill) * static_cast<double>(cfg.t_mcmc));
        result.levels.push_back({iter, level, p_k, acc_rate, n_kill, beta});

        particles = std::move(survivors);
        for (auto& r : revived) particles.push_back(std::move(r.particle));

        if (cfg.adapt_beta) {
            if (acc_rate > 0.5)
                beta = std::min(0.99, beta * 1.1);
            else if (acc_rate < 0.2)
                beta = std::max(0.05, beta * 0.9);
        }
    }

    result.p_hat = std::exp(log_p);
    result.log_p = log_p;
    result.std_err_log = std::sqrt(var_log);
    result.survivors = std::move(particles);
    result.n_evals = n_evals;
    result.final_beta = beta;
    return result;
}

Estimate to_estimate(const AmsResult& result, double gamma) {
    Estimate est;
    est.method = "ams";
    est.gamma = gamma;
    est.p_hat = result.p_hat;
    est.log_p_hat = result.log_p;
    est.std_err = result.p_hat * result.std_err_log;
    est.ci_lo = std::max(
        0.0, std::exp(result.log_p - kZ95 * result.std_err_log));
    est.ci_hi = std::min(
        1.0, std::exp(result.log_p + kZ95 * result.std_err_log));
    // A converged run keeps its whole final population below gamma.
    est.hits = result.survivors.size();
    est.n_evals = result.n_evals;
    est.ess = static_cast<double>(result.survivors.size());
    return est;
}

}  // namespace riskeval
