#include "riskeval/analysis.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "riskeval/rng.hpp"

namespace riskeval {

namespace {

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows,
                          const char* what) {
    if (rows.empty()) {
        throw std::invalid_argument(std::string(what) + ": no points");
    }
    const std::size_t m = rows[0].size();
    if (m == 0) {
        throw std::invalid_argument(std::string(what) + ": empty rows");
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != m) {
            throw std::invalid_argument(std::string(what) +
                                        ": ragged rows");
        }
        for (std::size_t j = 0; j < m; ++j) {
            const double v = rows[i][j];
            if (!std::isfinite(v)) {
                throw std::invalid_argument(std::string(what) +
                                            ": non-finite value");
            }
            out(static_cast<Eigen::Index>(i),
                static_cast<Eigen::Index>(j)) = v;
        }
    }
    return out;
}

double sample_variance(const std::vector<Estimate>& estimates) {
    const double n = static_cast<double>(estimates.size());
    double mean = 0.0;
    for (const auto& e : estimates) mean += e.p_hat;
    mean /= n;
    double ss = 0.0;
    for (const auto& e : estimates) {
        const double d = e.p_hat - mean;
        ss += d * d;
    }
    return ss / (n - 1.0);
}

void check_comparable(const RunSet& a, const RunSet& b) {
    if (a.estimates.size() < 2 || b.estimates.size() < 2) {
        throw std::invalid_argument(
            "run set comparison: need at least 2 runs per side");
    }
    if (a.gamma != b.gamma) {
        throw std::invalid_argument(
            "run set comparison: thresholds differ");
    }
    const double larger = std::max(a.budget, b.budget);
    if (std::abs(a.budget - b.budget) > 0.05 * larger) {
        throw std::invalid_argument(
            "run set comparison: budgets differ by more than 5%");
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sq_dist(const Eigen::MatrixXd& points, Eigen::Index i,
               const Eigen::VectorXd& c) {
    return (points.row(i).transpose() - c).squaredNorm();
}

}  // namespace

RunSet make_run_set(std::vector<Estimate> estimates, double declared_budget) {
    if (estimates.empty()) {
        throw std::invalid_argument("run set: no estimates");
    }
    RunSet rs;
    rs.method = estimates[0].method;
    rs.gamma = estimates[0].gamma;
    long double evals = 0.0L;
    for (const auto& e : estimates) {
        if (e.method != rs.method) {
            throw std::invalid_argument("run set: mixed methods");
        }
        if (e.gamma != rs.gamma) {
            throw std::invalid_argument("run set: mixed thresholds");
        }
        evals += static_cast<long double>(e.n_evals);
    }
    rs.budget = declared_budget > 0.0
                    ? declared_budget
                    : static_cast<double>(evals /
                                          static_cast<long double>(
                                              estimates.size()));
    rs.estimates = std::move(estimates);
    return rs;
}

std::uint64_t matched_naive_budget(std::uint64_t proposal_draws,
                                   std::uint64_t training_evals) {
    return proposal_draws + training_evals;
}

double variance_ratio(const RunSet& a, const RunSet& b) {
    check_comparable(a, b);
    const double va = sample_variance(a.estimates);
    const double vb = sample_variance(b.estimates);
    if (vb == 0.0) {
        return va == 0.0 ? 1.0
                         : std::numeric_limits<double>::infinity();
    }
    return va / vb;
}

double event_frequency_ratio(const RunSet& a, const RunSet& b) {
    check_comparable(a, b);
    std::uint64_t hits_a = 0, evals_a = 0, hits_b = 0, evals_b = 0;
    for (const auto& e : a.estimates) {
        hits_a += e.hits;
        evals_a += e.n_evals;
    }
    for (const auto& e : b.estimates) {
        hits_b += e.hits;
        evals_b += e.n_evals;
    }
    if (evals_a == 0 || evals_b == 0) {
        throw std::invalid_argument(
            "run set comparison: zero evaluations recorded");
    }
    const double fa = static_cast<double>(hits_a) /
                      static_cast<double>(evals_a);
    const double fb = static_cast<double>(hits_b) /
                      static_cast<double>(evals_b);
    if (fb == 0.0) {
        return fa == 0.0 ? 1.0
                         : std::numeric_limits<double>::infinity();
    }
    return fa / fb;
}

PcaResult pca_project(const FailureSet& fs, int k) {
    const Eigen::MatrixXd raw = to_matrix(fs.points, "pca");
    const Eigen::Index n = raw.rows();
    const Eigen::Index m = raw.cols();
    if (!fs.feature_names.empty() &&
        static_cast<Eigen::Index>(fs.feature_names.size()) != m) {
        throw std::invalid_argument(
            "pca: feature_names does not match column count");
    }
    if (k < 1) {
        throw std::invalid_argument("pca: k must be at least 1");
    }

    PcaResult res;
    for (Eigen::Index j = 0; j < m; ++j) {
        const double mean = raw.col(j).mean();
        const double var =
            (raw.col(j).array() - mean).square().sum() /
            static_cast<double>(n);
        const double sd = std::sqrt(var);
        // A column the failure scenarios never vary in carries no
        // direction; it is dropped rather than divided by ~0.
        if (sd <= 1e-12 * (1.0 + std::abs(mean))) continue;
        res.kept_columns.push_back(static_cast<int>(j));
        res.column_mean.push_back(mean);
        res.column_sd.push_back(sd);
    }
    const Eigen::Index mk =
        static_cast<Eigen::Index>(res.kept_columns.size());
    if (mk == 0) {
        throw std::invalid_argument("pca: all columns are constant");
    }

    Eigen::MatrixXd z(n, mk);
    for (Eigen::Index j = 0; j < mk; ++j) {
        const Eigen::Index src = res.kept_columns[static_cast<std::size_t>(j)];
        z.col(j) = (raw.col(src).array() - res.column_mean[j]) /
                   res.column_sd[j];
    }

    Eigen::BDCSVD<Eigen::MatrixXd> svd(
        z, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double tol = std::numeric_limits<double>::epsilon() *
                       static_cast<double>(std::max(n, mk)) *
                       (sv.size() > 0 ? sv(0) : 0.0);
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv(rank) > tol) ++rank;
    if (static_cast<Eigen::Index>(k) > rank ||
        static_cast<Eigen::Index>(k) > n) {
        throw std::invalid_argument(
            "pca: k exceeds the rank of the standardized data");
    }

    Eigen::MatrixXd v = svd.matrixV().leftCols(k);
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
        Eigen::Index imax = 0;
        v.col(c).cwiseAbs().maxCoeff(&imax);
        if (v(imax, c) < 0.0) v.col(c) = -v.col(c);
    }
    const Eigen::MatrixXd scores = z * v;

    const double total = sv.array().square().sum();
    for (int c = 0; c < k; ++c) {
        res.explained.push_back(sv(c) * sv(c) / total);
    }
    res.components.assign(static_cast<std::size_t>(k),
                          std::vector<double>(static_cast<std::size_t>(mk)));
    for (int c = 0; c < k; ++c) {
        for (Eigen::Index j = 0; j < mk; ++j) {
            res.components[static_cast<std::size_t>(c)]
                          [static_cast<std::size_t>(j)] = v(j, c);
        }
    }
    res.projected.assign(static_cast<std::size_t>(n),
                         std::vector<double>(static_cast<std::size_t>(k)));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < k; ++c) {
            res.projected[static_cast<std::size_t>(i)]
                         [static_cast<std::size_t>(c)] = scores(i, c);
        }
    }
    return res;
}

KmeansResult kmeans_cluster(const std::vector<std::vector<double>>& points,
                            int k, std::uint64_t seed) {
    const Eigen::MatrixXd x = to_matrix(points, "kmeans");
    const Eigen::Index n = x.rows();
    if (k < 1) {
        throw std::invalid_argument("kmeans: k must be at least 1");
    }
    {
        auto rows = points;
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
        if (rows.size() < static_cast<std::size_t>(k)) {
            throw std::invalid_argument(
                "kmeans: fewer distinct points than clusters");
        }
    }

    constexpr int kRestarts = 20;
    constexpr int kMaxIters = 200;
    KmeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();

    for (int restart = 0; restart < kRestarts; ++restart) {
        Stream rng(derive_seed(seed, {stream_tag::kKmeans,
                                      static_cast<std::uint64_t>(restart)}));

        // Squared-distance-weighted seeding: the next centre is drawn with
        // probability proportional to its distance from the chosen set, so
        // well separated groups each receive a seed.
        Eigen::MatrixXd centroids(k, x.cols());
        centroids.row(0) =
            x.row(static_cast<Eigen::Index>(rng.below(
                static_cast<std::uint64_t>(n))));
        Eigen::VectorXd d2 = Eigen::VectorXd::Zero(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            d2(i) = sq_dist(x, i, centroids.row(0).transpose());
        }
        for (int c = 1; c < k; ++c) {
            const double total = d2.sum();
            Eigen::Index pick = 0;
            if (total > 0.0) {
                double u = rng.u01() * total;
                for (Eigen::Index i = 0; i < n; ++i) {
                    u -= d2(i);
                    if (u <= 0.0) {
                        pick = i;
                        break;
                    }
                    pick = i;
                }
            } else {
                pick = static_cast<Eigen::Index>(
                    rng.below(static_cast<std::uint64_t>(n)));
            }
            centroids.row(c) = x.row(pick);
            for (Eigen::Index i = 0; i < n; ++i) {
                d2(i) = std::min(
                    d2(i), sq_dist(x, i, centroids.row(c).transpose()));
            }
        }

        std::vector<int> labels(static_cast<std::size_t>(n), 0);
        std::vector<double> path;
        double inertia = std::numeric_limits<double>::infinity();
        for (int iter = 0; iter < kMaxIters; ++iter) {
            bool changed = false;
            double sum = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                int arg = 0;
                double bestd =
                    sq_dist(x, i, centroids.row(0).transpose());
                for (int c = 1; c < k; ++c) {
                    const double d =
                        sq_dist(x, i, centroids.row(c).transpose());
                    if (d < bestd) {
                        bestd = d;
                        arg = c;
                    }
                }
                if (labels[static_cast<std::size_t>(i)] != arg) {
                    labels[static_cast<std::size_t>(i)] = arg;
                    changed = true;
                }
                sum += bestd;
            }
            path.push_back(sum);
            inertia = sum;
            if (!changed && iter > 0) break;

            Eigen::MatrixXd sums =
                Eigen::MatrixXd::Zero(k, x.cols());
            std::vector<Eigen::Index> counts(static_cast<std::size_t>(k),
                                             0);
            for (Eigen::Index i = 0; i < n; ++i) {
                const int c = labels[static_cast<std::size_t>(i)];
                sums.row(c) += x.row(i);
                ++counts[static_cast<std::size_t>(c)];
            }
            for (int c = 0; c < k; ++c) {
                if (counts[static_cast<std::size_t>(c)] > 0) {
                    centroids.row(c) =
                        sums.row(c) /
                        static_cast<double>(
                            counts[static_cast<std::size_t>(c)]);
                } else {
                    // Reseed an emptied cluster on the worst-served point
                    // so every label stays populated.
                    Eigen::Index far = 0;
                    double fard = -1.0;
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const double d = sq_dist(
                            x, i,
                            centroids
                                .row(labels[static_cast<std::size_t>(i)])
                                .transpose());
                        if (d > fard) {
                            fard = d;
                            far = i;
                        }
                    }
                    centroids.row(c) = x.row(far);
                }
            }
        }

        if (inertia < best.inertia) {
            best.labels = labels;
            best.inertia = inertia;
            best.inertia_path = std::move(path);
            best.centroids.assign(
                static_cast<std::size_t>(k),
                std::vector<double>(static_cast<std::size_t>(x.cols())));
            for (int c = 0; c < k; ++c) {
                for (Eigen::Index j = 0; j < x.cols(); ++j) {
                    best.centroids[static_cast<std::size_t>(c)]
                                  [static_cast<std::size_t>(j)] =
                        centroids(c, j);
                }
            }
        }
    }
    return best;
}

ClusterLikelihoodReport cluster_likelihoods(
    const std::vector<int>& labels, const FlowModel& flow,
    const std::vector<std::vector<double>>& latents) {
    if (labels.size() != latents.size()) {
        throw std::invalid_argument(
            "cluster likelihoods: labels and points differ in length");
    }
    if (labels.empty()) {
        throw std::invalid_argument("cluster likelihoods: no points");
    }
    int k = 0;
    for (int l : labels) {
        if (l < 0) {
            throw std::invalid_argument(
                "cluster likelihoods: negative label");
        }
        k = std::max(k, l + 1);
    }

    std::vector<std::vector<double>> per_cluster(
        static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        per_cluster[static_cast<std::size_t>(labels[i])].push_back(
            flow.log_prob(latents[i]));
    }

    ClusterLikelihoodReport report;
    for (int c = 0; c < k; ++c) {
        const auto& lp = per_cluster[static_cast<std::size_t>(c)];
        if (lp.empty()) {
            throw std::invalid_argument("cluster likelihoods: cluster " +
                                        std::to_string(c) + " is empty");
        }
        report.clusters.push_back(
            {c, lp.size(), median(lp)});
    }
    report.ratio.assign(static_cast<std::size_t>(k),
                        std::vector<double>(static_cast<std::size_t>(k)));
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            report.ratio[static_cast<std::size_t>(i)]
                        [static_cast<std::size_t>(j)] =
                std::exp(report.clusters[static_cast<std::size_t>(i)]
                             .median_log_prob -
                         report.clusters[static_cast<std::size_t>(j)]
                             .median_log_prob);
        }
    }
    return report;
}

}  // namespace riskeval
