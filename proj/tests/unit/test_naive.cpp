#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "riskeval/estimate.hpp"
#include "riskeval/objectives.hpp"

using namespace riskeval;
using doctest::Approx;

namespace {

ParamSpace gauss1() {
    return ParamSpace::from_json(nlohmann::json::parse(
        R"([{"name":"u","law":"normal_mv","dim":1}])"));
}

EvalPool local_pool(ObjectiveFn fn, int workers = 1) {
    PoolConfig cfg;
    cfg.n_workers = workers;
    return EvalPool(std::move(cfg), std::move(fn));
}

}  // namespace

TEST_CASE("degenerate objectives give exact endpoint estimates") {
    const auto space = gauss1();
    auto pool = local_pool([](const std::vector<double>&,
                              const std::vector<double>&) { return 1.0; });

    const auto sure = estimate_naive(space, pool, 2.0, 500, 1);
    CHECK(sure.p_hat == 1.0);
    CHECK(sure.log_p_hat == 0.0);
    CHECK(sure.hits == 500);
    CHECK(sure.ci_hi == 1.0);
    CHECK(sure.std_err == 0.0);

    const auto never = estimate_naive(space, pool, 0.0, 500, 1);
    CHECK(never.p_hat == 0.0);
    CHECK(never.log_p_hat == -std::numeric_limits<double>::infinity());
    CHECK(never.hits == 0);
    CHECK(never.ci_lo == 0.0);
    CHECK(never.ci_hi > 0.0);
    CHECK(never.ci_hi < 0.02);
    CHECK(never.n_evals == 500);
}

TEST_CASE("hit frequency converges to the normal tail") {
    const auto space = gauss1();
    auto pool = local_pool(make_gaussian_linear({1.0}));
    const auto est = estimate_naive(space, pool, -1.0, 200000, 42);
    // Truth 0.15865..., 4 sigma window for n = 2e5.
    CHECK(est.p_hat == Approx(0.15865525393145705).epsilon(0.021));
    CHECK(est.ci_lo < est.p_hat);
    CHECK(est.ci_hi > est.p_hat);
    CHECK(est.ess == 200000.0);
}

TEST_CASE("estimator is unbiased over repetitions") {
    const auto space = gauss1();
    auto pool = local_pool(make_gaussian_linear({1.0}));
    const double truth = 0.022750131948179207;  // lower tail at -2

    double sum = 0.0;
    const int reps = 500;
    for (int r = 0; r < reps; ++r)
        sum += estimate_naive(space, pool, -2.0, 1000, 9000 + r).p_hat;
    const double mean = sum / reps;
    // Mean of 500 reps has sd ~ 2.1e-4; allow 4 sigma.
    CHECK(std::abs(mean - truth) < 8.5e-4);
}

TEST_CASE("wilson intervals cover the truth at close to nominal rate") {
    const auto space = gauss1();
    auto pool = local_pool(make_gaussian_linear({1.0}));
    const double truth = 0.15865525393145705;

    int covered = 0;
    const int reps = 100;
    for (int r = 0; r < reps; ++r) {
        const auto est = estimate_naive(space, pool, -1.0, 2000, 500 + r);
        if (est.ci_lo <= truth && truth <= est.ci_hi) ++covered;
    }
    // Nominal 95 of 100; demand at least 90.
    CHECK(covered >= 90);
}

TEST_CASE("same seed gives nested events across levels") {
    const auto space = gauss1();
    auto pool = local_pool(make_gaussian_linear({1.0}));
    const auto a = estimate_naive(space, pool, -2.0, 20000, 7);
    const auto b = estimate_naive(space, pool, -1.0, 20000, 7);
    const auto c = estimate_naive(space, pool, 0.0, 20000, 7);
    CHECK(a.p_hat <= b.p_hat);
    CHECK(b.p_hat <= c.p_hat);
    CHECK(a.hits <= b.hits);
}

TEST_CASE("results are bit-identical across worker counts and reruns") {
    const auto space = gauss1();
    auto p1 = local_pool(make_gaussian_linear({1.0}), 1);
    auto p8 = local_pool(make_gaussian_linear({1.0}), 8);
    const auto a = estimate_naive(space, p1, -1.5, 30000, 77);
    const auto b = estimate_naive(space, p8, -1.5, 30000, 77);
    const auto c = estimate_naive(space, p1, -1.5, 30000, 77);
    CHECK(a.p_hat == b.p_hat);
    CHECK(a.hits == b.hits);
    CHECK(a.p_hat == c.p_hat);
    CHECK(a.ci_lo == b.ci_lo);
}

TEST_CASE("required_samples applies the ceiling exactly") {
    CHECK(required_samples(0.5, 0.1) == 100);
    CHECK(required_samples(1e-3, 0.1) == 99900);
    CHECK(required_samples(1e-4, 0.1) == 999900);
    CHECK(required_samples(0.5, 1000.0) == 1);
    CHECK(required_samples(0.9, 0.5) == 1);  // raw 0.444... rounds up
    CHECK_THROWS_AS((void)required_samples(0.0, 0.1), std::domain_error);
    CHECK_THROWS_AS((void)required_samples(1.0, 0.1), std::domain_error);
    CHECK_THROWS_AS((void)required_samples(0.5, 0.0), std::domain_error);
}

TEST_CASE("input validation") {
    const auto space = gauss1();
    auto pool = local_pool(make_gaussian_linear({1.0}));
    CHECK_THROWS_AS((void)estimate_naive(space, pool, -1.0, 0, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        (void)estimate_naive(space, pool,
                             std::numeric_limits<double>::infinity(), 10, 1),
        std::invalid_argument);
}

TEST_CASE("non-finite objectives abort the estimate") {
    const auto space = gauss1();
    auto pool = local_pool([](const std::vector<double>&,
                              const std::vector<double>&) {
        return std::numeric_limits<double>::quiet_NaN();
    });
    CHECK_THROWS_AS((void)estimate_naive(space, pool, 0.0, 10, 1), EvalError);
}
