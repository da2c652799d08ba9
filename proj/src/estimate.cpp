#include "riskeval/estimate.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "riskeval/stats.hpp"

namespace riskeval {

namespace {

// Keeps peak request memory bounded for high-dimensional spaces without
// changing any result: draws are keyed by index, not by batch.
constexpr std::uint64_t kChunk = 8192;

}  // namespace

Estimate estimate_naive(const ParamSpace& space, EvalPool& pool, double gamma,
                        std::uint64_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("estimate_naive: n must be positive");
    if (!std::isfinite(gamma))
        throw std::invalid_argument("estimate_naive: gamma must be finite");

    std::uint64_t hits = 0;
    for (std::uint64_t lo = 0; lo < n; lo += kChunk) {
        const std::uint64_t hi = std::min(n, lo + kChunk);
        std::vector<EvalRequest> reqs;
        reqs.reserve(hi - lo);
        for (std::uint64_t i = lo; i < hi; ++i) {
            Stream draw(derive_seed(seed, {stream_tag::kNaiveDraw, i}));
            EvalRequest req;
            req.id = static_cast<std::int64_t>(i);
            req.seed = derive_seed(seed, {stream_tag::kRequestSeed, i});
            req.latent = space.sample_latent(draw);
            req.scenario = space.to_params(req.latent);
            reqs.push_back(std::move(req));
        }
        for (const auto& resp : pool.submit_batch(std::move(reqs)))
            if (resp.objective < gamma) ++hits;
    }

    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(hits) / nn;
    const auto [lo, hi] = wilson_interval(hits, n);

    Estimate est;
    est.method = "naive";
    est.gamma = gamma;
    est.p_hat = p;
    est.log_p_hat =
        hits == 0 ? -std::numeric_limits<double>::infinity() : std::log(p);
    est.std_err = std::sqrt(p * (1.0 - p) / nn);
    est.ci_lo = std::min(lo, p);
    est.ci_hi = std::max(hi, p);
    est.n_evals = n;
    est.hits = hits;
    est.ess = nn;
    return est;
}

std::uint64_t required_samples(double p, double rel_err) {
    if (!(p > 0.0 && p < 1.0))
        throw std::domain_error("required_samples: p must lie in (0, 1)");
    if (!(rel_err > 0.0))
        throw std::domain_error("required_samples: rel_err must be positive");
    const long double raw =
        (1.0L - static_cast<long double>(p)) /
        (static_cast<long double>(p) * static_cast<long double>(rel_err) *
         static_cast<long double>(rel_err));
    return static_cast<std::uint64_t>(std::ceil(raw));
}

}  // namespace riskeval
