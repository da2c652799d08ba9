#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "riskeval/estimate.hpp"
#include "riskeval/flow.hpp"

namespace riskeval {

// Post-hoc comparison of estimator run collections plus geometric tools for
// inspecting the failure region: projection of failure scenarios onto their
// principal axes and clustering of the projected cloud.

// A batch of repeated runs of one estimator at one level. `budget` is the
// per-run evaluation entitlement the matched-budget checks compare; it
// defaults to the mean observed evaluation count but can be declared higher
// when one method's training cost is accounted against its competitor.
struct RunSet {
    std::string method;
    double gamma = 0.0;
    double budget = 0.0;
    std::vector<Estimate> estimates;
};

// Builds a RunSet from repeated estimates, requiring a uniform method and
// gamma. With `declared_budget` <= 0 the budget is the mean of n_evals.
RunSet make_run_set(std::vector<Estimate> estimates,
                    double declared_budget = 0.0);

// Evaluation count a plain Monte Carlo competitor is entitled to when the
// other side spent a splitting run to obtain its training set: the proposal's
// own draws plus that training cost.
std::uint64_t matched_naive_budget(std::uint64_t proposal_draws,
                                   std::uint64_t training_evals);

// Unbiased sample variance of a's p_hat values over b's. Requires equal
// gamma, budgets within 5% of the larger, and at least 2 runs per side.
// Degenerate spreads keep the swap symmetry ratio(a,b) = 1/ratio(b,a):
// 0/0 -> 1, x/0 -> +inf, 0/x -> 0.
double variance_ratio(const RunSet& a, const RunSet& b);

// (total hits / total evaluations) of a over the same for b, preconditions
// as variance_ratio. A hitless denominator yields +infinity; callers are
// expected to surface that sentinel rather than average over it.
double event_frequency_ratio(const RunSet& a, const RunSet& b);

// Failure scenarios as rows; feature_names, when present, must match the
// column count.
struct FailureSet {
    std::vector<std::vector<double>> points;
    std::vector<std::string> feature_names;
};

struct PcaResult {
    // Columns that survived the constant-column drop, as indices into the
    // original feature order; means and sds refer to these columns.
    std::vector<int> kept_columns;
    std::vector<double> column_mean, column_sd;
    // k rows, one unit direction per row in kept-column coordinates, each
    // oriented so its largest-magnitude entry is positive.
    std::vector<std::vector<double>> components;
    // Fractions of total standardized variance, one per component.
    std::vector<double> explained;
    // n rows by k columns: standardized data projected on the components.
    std::vector<std::vector<double>> projected;
};

// Principal axes of the standardized failure matrix via SVD. Constant
// columns are dropped (kept_columns records the survivors). Throws when k
// exceeds the rank of the standardized matrix or the row count.
PcaResult pca_project(const FailureSet& fs, int k);

struct KmeansResult {
    std::vector<int> labels;
    std::vector<std::vector<double>> centroids;
    double inertia = 0.0;
    // Inertia after each assignment pass of the winning restart; never
    // increasing.
    std::vector<double> inertia_path;
};

// Lloyd iterations from squared-distance-weighted seeding, 20 restarts, best
// inertia kept. Deterministic in (points, k, seed). Requires at least k
// distinct points; an emptied cluster is reseeded on the point farthest from
// its centroid.
KmeansResult kmeans_cluster(const std::vector<std::vector<double>>& points,
                            int k, std::uint64_t seed);

struct ClusterLikelihood {
    int cluster = 0;
    std::size_t size = 0;
    double median_log_prob = 0.0;
};

struct ClusterLikelihoodReport {
    std::vector<ClusterLikelihood> clusters;
    // ratio[i][j] = exp(median_i - median_j): how much more likely cluster
    // i's typical member is under the flow than cluster j's.
    std::vector<std::vector<double>> ratio;
};

// Median flow log-density per cluster of latent points. Labels must cover
// 0..max(label) with no empty cluster.
ClusterLikelihoodReport cluster_likelihoods(
    const std::vector<int>& labels, const FlowModel& flow,
    const std::vector<std::vector<double>>& latents);

}  // namespace riskeval
