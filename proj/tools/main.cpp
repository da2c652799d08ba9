// Single entry point for the estimation pipeline. Subcommands hand work to
// each other through files: `estimate --method ams` writes failure samples,
// `train-flow` turns them into a proposal model, `is-estimate` spends it,
// `compare` and `analyze` digest the results. Every pipeline run drops a
// manifest next to its outputs so a result file can always be traced back
// to (config, seed, version).
//
// Exit codes: 0 success, 1 usage error (message on stderr), 2 runtime
// failure (one-line diagnostic JSON on stderr).

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "riskeval/ams.hpp"
#include "riskeval/analysis.hpp"
#include "riskeval/config.hpp"
#include "riskeval/estimate.hpp"
#include "riskeval/flow.hpp"
#include "riskeval/harness.hpp"
#include "riskeval/rng.hpp"
#include "riskeval/serde.hpp"

#ifndef RISKEVAL_VERSION
#define RISKEVAL_VERSION "v0.1.0"
#endif

namespace {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace riskeval;

struct GlobalOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    int workers = 1;
    std::string out_dir = ".";
    std::string backend = "in_process";
    int timeout_ms = 30000;
    int max_retries = 2;
};

// Failure that should surface as exit 2 with a one-line JSON diagnostic.
struct RuntimeFailure {
    std::string diagnostic;
};

PoolConfig pool_config(const GlobalOpts& g) {
    PoolConfig cfg;
    cfg.n_workers = g.workers;
    cfg.timeout_ms = g.timeout_ms;
    cfg.max_retries = g.max_retries;
    if (g.backend == "in_process") {
        cfg.backend = PoolBackend::InProcess;
    } else if (g.backend.rfind("command:", 0) == 0) {
        cfg.backend = PoolBackend::Command;
        cfg.command = g.backend.substr(8);
        if (cfg.command.empty()) {
            throw std::invalid_argument(
                "--backend command: needs a command line");
        }
    } else if (g.backend.rfind("tcp:", 0) == 0) {
        cfg.backend = PoolBackend::Tcp;
        const std::string rest = g.backend.substr(4);
        const auto colon = rest.rfind(':');
        if (colon == std::string::npos) {
            throw std::invalid_argument("--backend tcp: needs host:port");
        }
        cfg.host = rest.substr(0, colon);
        cfg.port = std::stoi(rest.substr(colon + 1));
    } else {
        throw std::invalid_argument(
            "--backend must be in_process, command:<cmd> or tcp:<host:port>");
    }
    if (cfg.n_workers < 1) {
        throw std::invalid_argument("--workers must be at least 1");
    }
    return cfg;
}

// All outputs live under --out-dir; a name escaping it is refused.
std::string out_path(const GlobalOpts& g, const std::string& name) {
    const fs::path p(name);
    if (p.is_absolute()) {
        throw std::invalid_argument("output path '" + name +
                                    "' must be relative to --out-dir");
    }
    for (const auto& part : p) {
        if (part == "..") {
            throw std::invalid_argument("output path '" + name +
                                        "' must stay inside --out-dir");
        }
    }
    return (fs::path(g.out_dir) / p).string();
}

Config require_config(const GlobalOpts& g) {
    if (g.config_path.empty()) {
        throw std::invalid_argument("this subcommand needs --config");
    }
    return load_config(g.config_path);
}

// Number formatting shared by every writer: JSON round-trip form, so files
// are byte-stable across reruns.
std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return json(v).dump();
}

struct ManifestScope {
    RunManifest m;
    const GlobalOpts* g = nullptr;

    ManifestScope(const std::string& subcommand, const GlobalOpts& global,
                  const std::vector<std::string>& argv) {
        m.subcommand = subcommand;
        m.config_path = global.config_path;
        m.seed = global.seed;
        m.version = RISKEVAL_VERSION;
        m.started_at = iso8601_utc_now();
        m.argv = argv;
        g = &global;
    }

    void add_output(const std::string& path) { m.outputs.push_back(path); }

    void write() {
        m.finished_at = iso8601_utc_now();
        atomic_write_text(out_path(*g, "manifest.json"),
                          manifest_to_json(m).dump(2) + "\n");
    }
};

std::vector<FailureSample> load_failure_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open samples file '" + path +
                                    "'");
    }
    return read_failure_samples(in);
}

FlowModel load_flow_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open model file '" + path + "'");
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("model file '" + path +
                                    "' is not valid JSON: " + e.what());
    }
    return FlowModel::from_json(doc);
}

// ---------------------------------------------------------------------------
// sample

int run_sample(const GlobalOpts& g, std::uint64_t n,
               const std::vector<std::string>& argv) {
    const Config cfg = require_config(g);
    ManifestScope manifest("sample", g, argv);

    std::ostringstream out;
    for (std::uint64_t i = 0; i < n; ++i) {
        Stream stream(derive_seed(g.seed, {stream_tag::kSampleCli, i}));
        const auto latent = cfg.space.sample_latent(stream);
        const auto scenario = cfg.space.to_params(latent);
        ordered_json j;
        j["id"] = i;
        j["u"] = latent;
        j["x"] = scenario;
        out << j.dump() << '\n';
    }
    const std::string path = out_path(g, "samples.ndjson");
    atomic_write_text(path, out.str());
    manifest.add_output(path);
    manifest.write();
    std::cout << "wrote " << n << " draws to " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// simulate

int run_simulate(const GlobalOpts& g, const std::vector<std::string>& argv) {
    const Config cfg = require_config(g);
    if (cfg.objective_kind != "highway") {
        throw std::invalid_argument(
            "simulate needs a config with a highway objective");
    }
    ManifestScope manifest("simulate", g, argv);

    Stream stream(derive_seed(g.seed, {stream_tag::kSampleCli, 0}));
    const auto latent = cfg.space.sample_latent(stream);
    const auto scenario = cfg.space.to_params(latent);
    const RolloutTrace trace = simulate_highway(cfg.sim, scenario);

    std::ostringstream out;
    ordered_json meta;
    meta["dt"] = trace.dt;
    meta["veh_length"] = trace.veh_length;
    meta["veh_width"] = trace.veh_width;
    meta["ttc_cap"] = trace.ttc_cap;
    meta["collided"] = trace.collided;
    meta["min_ttc"] = trace.min_ttc;
    meta["n_frames"] = trace.frames.size();
    out << meta.dump() << '\n';
    for (const auto& frame : trace.frames) {
        ordered_json fj;
        fj["time"] = frame.time;
        ordered_json vehicles = ordered_json::array();
        for (const auto& v : frame.vehicles) {
            ordered_json vj;
            vj["s"] = v.s;
            vj["t"] = v.t;
            vj["v"] = v.v;
            vj["v_lat"] = v.v_lat;
            vehicles.push_back(std::move(vj));
        }
        fj["vehicles"] = std::move(vehicles);
        out << fj.dump() << '\n';
    }
    const std::string path = out_path(g, "trace.ndjson");
    atomic_write_text(path, out.str());
    manifest.add_output(path);
    manifest.write();
    std::cout << "min_ttc " << fmt(trace.min_ttc) << ", "
              << trace.frames.size() << " frames, wrote " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateOpts {
    std::string method;
    double gamma = 0.0;
    std::uint64_t n = 0;
    int repeats = 1;
    double delta = 0.1;
    int t_mcmc = 10;
    double beta = 0.3;
    bool no_adapt_beta = false;
    int max_iters = 10000;
    std::string failures_out;
};

AmsConfig ams_config(const EstimateOpts& o, std::uint64_t seed) {
    AmsConfig cfg;
    cfg.n_particles = o.n == 0 ? 1000 : o.n;
    cfg.delta = o.delta;
    cfg.t_mcmc = o.t_mcmc;
    cfg.beta = o.beta;
    cfg.adapt_beta = !o.no_adapt_beta;
    cfg.max_iters = o.max_iters;
    cfg.gamma = o.gamma;
    cfg.seed = seed;
    return cfg;
}

[[noreturn]] void ams_failure(const AmsResult& r) {
    ordered_json diag;
    diag["error"] = "splitting run did not converge";
    diag["terminated"] =
        r.terminated == AmsTermination::Stalled ? "stalled" : "max_iters";
    diag["p_hat"] = r.p_hat;
    diag["n_evals"] = r.n_evals;
    diag["n_levels"] = r.levels.size();
    throw RuntimeFailure{diag.dump()};
}

int run_estimate(const GlobalOpts& g, const EstimateOpts& o,
                 const std::vector<std::string>& argv) {
    const Config cfg = require_config(g);
    if (o.method != "naive" && o.method != "ams") {
        throw std::invalid_argument("--method must be naive or ams");
    }
    if (o.method == "naive" && o.n == 0) {
        throw std::invalid_argument("--method naive needs --n");
    }
    if (o.repeats < 1) {
        throw std::invalid_argument("--repeats must be at least 1");
    }
    if (!o.failures_out.empty() && (o.method != "ams" || o.repeats != 1)) {
        throw std::invalid_argument(
            "--failures-out needs a single ams run");
    }

    EvalPool pool(pool_config(g), make_objective(cfg));
    ManifestScope manifest("estimate", g, argv);

    if (o.repeats == 1) {
        Estimate est;
        if (o.method == "naive") {
            est = estimate_naive(cfg.space, pool, o.gamma, o.n, g.seed);
        } else {
            const AmsResult result =
                run_ams(cfg.space, pool, ams_config(o, g.seed));
            const std::string ams_path = out_path(g, "ams.json");
            atomic_write_text(ams_path,
                              ams_result_to_json(result).dump(2) + "\n");
            manifest.add_output(ams_path);
            if (!o.failures_out.empty()) {
                std::ostringstream lines;
                write_failure_samples(lines, result.survivors);
                const std::string fpath = out_path(g, o.failures_out);
                atomic_write_text(fpath, lines.str());
                manifest.add_output(fpath);
            }
            est = to_estimate(result, o.gamma);
            if (result.terminated != AmsTermination::Converged) {
                const std::string est_path = out_path(g, "estimate.json");
                atomic_write_text(est_path,
                                  estimate_to_json(est).dump(2) + "\n");
                manifest.add_output(est_path);
                manifest.write();
                ams_failure(result);
            }
        }
        const std::string est_path = out_path(g, "estimate.json");
        atomic_write_text(est_path, estimate_to_json(est).dump(2) + "\n");
        manifest.add_output(est_path);
        manifest.write();
        std::cout << "p_hat " << fmt(est.p_hat) << " (" << est.n_evals
                  << " evaluations), wrote " << est_path << "\n";
        return 0;
    }

    std::vector<Estimate> estimates;
    estimates.reserve(static_cast<std::size_t>(o.repeats));
    for (int r = 0; r < o.repeats; ++r) {
        const std::uint64_t run_seed = derive_seed(
            g.seed, {stream_tag::kRepeat, static_cast<std::uint64_t>(r)});
        if (o.method == "naive") {
            estimates.push_back(
                estimate_naive(cfg.space, pool, o.gamma, o.n, run_seed));
        } else {
            const AmsResult result =
                run_ams(cfg.space, pool, ams_config(o, run_seed));
            if (result.terminated != AmsTermination::Converged) {
                manifest.write();
                ams_failure(result);
            }
            estimates.push_back(to_estimate(result, o.gamma));
        }
    }
    const RunSet rs = make_run_set(std::move(estimates));
    const std::string path = out_path(g, "runset.json");
    atomic_write_text(path, run_set_to_json(rs).dump(2) + "\n");
    manifest.add_output(path);
    manifest.write();
    std::cout << o.repeats << " runs, mean budget " << fmt(rs.budget)
              << ", wrote " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-flow

struct TrainOpts {
    std::string samples;
    std::string model_out = "flow.json";
    FlowConfig cfg;
};

int run_train_flow(const GlobalOpts& g, const TrainOpts& o,
                   const std::vector<std::string>& argv) {
    auto samples = load_failure_samples(o.samples);
    auto latents = latent_matrix(samples);

    // Resampled particles repeat; the duplicates stay in (they are the
    // empirical failure measure) but the unique count is worth surfacing.
    std::size_t n_unique = 0;
    {
        auto sorted = latents;
        std::sort(sorted.begin(), sorted.end());
        n_unique = static_cast<std::size_t>(
            std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    }

    ManifestScope manifest("train-flow", g, argv);
    FlowConfig cfg = o.cfg;
    cfg.seed = g.seed;
    const FlowModel model = fit_flow(latents, cfg);

    bool diverged =
        model.history().size() < static_cast<std::size_t>(cfg.epochs);
    for (const auto& ep : model.history()) {
        if (!std::isfinite(ep.train_nll) || !std::isfinite(ep.val_nll)) {
            diverged = true;
        }
    }
    if (diverged) {
        manifest.write();
        ordered_json diag;
        diag["error"] = "flow training diverged";
        diag["epochs_completed"] = model.history().size();
        diag["epochs_requested"] = cfg.epochs;
        throw RuntimeFailure{diag.dump()};
    }

    const std::string path = out_path(g, o.model_out);
    atomic_write_text(path, model.to_json().dump() + "\n");
    manifest.add_output(path);
    manifest.write();

    ordered_json summary;
    summary["n_samples"] = latents.size();
    summary["n_unique"] = n_unique;
    summary["epochs"] = model.history().size();
    summary["final_val_nll"] = model.history().back().val_nll;
    std::cout << summary.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// is-estimate

struct IsOpts {
    std::string model;
    double gamma = 0.0;
    std::uint64_t m = 10000;
    double alpha = 0.1;
    int repeats = 1;
    std::uint64_t charge_evals = 0;
};

int run_is_estimate(const GlobalOpts& g, const IsOpts& o,
                    const std::vector<std::string>& argv) {
    const Config cfg = require_config(g);
    const FlowModel flow = load_flow_model(o.model);
    if (o.repeats < 1) {
        throw std::invalid_argument("--repeats must be at least 1");
    }
    if (o.alpha == 1.0) {
        std::cerr << "warning: --alpha 1 disables the flow; this is plain "
                     "Monte Carlo\n";
    }

    EvalPool pool(pool_config(g), make_objective(cfg));
    ManifestScope manifest("is-estimate", g, argv);

    if (o.repeats == 1) {
        const Estimate est = estimate_importance(cfg.space, pool, flow,
                                                 o.gamma, o.m, o.alpha,
                                                 g.seed);
        const std::string path = out_path(g, "estimate.json");
        atomic_write_text(path, estimate_to_json(est).dump(2) + "\n");
        manifest.add_output(path);
        manifest.write();
        std::cout << "p_hat " << fmt(est.p_hat) << " (ess "
                  << fmt(est.ess) << "), wrote " << path << "\n";
        return 0;
    }

    std::vector<Estimate> estimates;
    for (int r = 0; r < o.repeats; ++r) {
        const std::uint64_t run_seed = derive_seed(
            g.seed, {stream_tag::kRepeat, static_cast<std::uint64_t>(r)});
        estimates.push_back(estimate_importance(cfg.space, pool, flow,
                                                o.gamma, o.m, o.alpha,
                                                run_seed));
    }
    // The declared budget charges the training cost against this proposal,
    // so downstream comparisons stay fair.
    const double budget =
        static_cast<double>(o.m) + static_cast<double>(o.charge_evals);
    const RunSet rs = make_run_set(std::move(estimates), budget);
    const std::string path = out_path(g, "runset.json");
    atomic_write_text(path, run_set_to_json(rs).dump(2) + "\n");
    manifest.add_output(path);
    manifest.write();
    std::cout << o.repeats << " runs, declared budget " << fmt(rs.budget)
              << ", wrote " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// compare

int run_compare(const GlobalOpts& g, const std::vector<std::string>& files,
                const std::vector<std::string>& argv) {
    if (files.size() < 2) {
        throw std::invalid_argument("compare needs at least two run sets");
    }
    std::vector<RunSet> sets;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) {
            throw std::invalid_argument("cannot open run set '" + f + "'");
        }
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument("run set '" + f +
                                        "' is not valid JSON: " + e.what());
        }
        sets.push_back(run_set_from_json(doc));
    }

    ManifestScope manifest("compare", g, argv);
    std::ostringstream csv;
    csv << "gamma,method,mean,variance,ratio\n";
    for (const auto& rs : sets) {
        double mean = 0.0;
        for (const auto& e : rs.estimates) mean += e.p_hat;
        mean /= static_cast<double>(rs.estimates.size());
        double ss = 0.0;
        for (const auto& e : rs.estimates) {
            ss += (e.p_hat - mean) * (e.p_hat - mean);
        }
        const double variance =
            ss / static_cast<double>(rs.estimates.size() - 1);
        // Variance gain of this set relative to the first listed one.
        const double ratio = variance_ratio(sets.front(), rs);
        csv << fmt(rs.gamma) << ',' << rs.method << ',' << fmt(mean) << ','
            << fmt(variance) << ',' << fmt(ratio) << '\n';
    }
    const std::string path = out_path(g, "compare.csv");
    atomic_write_text(path, csv.str());
    manifest.add_output(path);
    manifest.write();
    std::cout << "wrote " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOpts {
    std::string samples;
    std::string model;
    int k = 4;
    int components = 2;
};

int run_analyze(const GlobalOpts& g, const AnalyzeOpts& o,
                const std::vector<std::string>& argv) {
    auto samples = load_failure_samples(o.samples);
    FailureSet fset = scenario_matrix(samples);
    if (!g.config_path.empty()) {
        const Config cfg = load_config(g.config_path);
        if (cfg.space.param_dim() == fset.points[0].size()) {
            fset.feature_names = scenario_feature_names(cfg.space);
        }
    }
    if (fset.feature_names.empty()) {
        for (std::size_t j = 0; j < fset.points[0].size(); ++j) {
            fset.feature_names.push_back("x" + std::to_string(j));
        }
    }

    ManifestScope manifest("analyze", g, argv);
    const PcaResult pca = pca_project(fset, o.components);
    const KmeansResult km = kmeans_cluster(pca.projected, o.k, g.seed);

    std::ostringstream csv;
    csv << "id";
    for (int c = 1; c <= o.components; ++c) csv << ",pc" << c;
    csv << ",cluster\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        csv << samples[i].id;
        for (int c = 0; c < o.components; ++c) {
            csv << ',' << fmt(pca.projected[i][static_cast<std::size_t>(c)]);
        }
        csv << ',' << km.labels[i] << '\n';
    }
    const std::string csv_path = out_path(g, "analyze.csv");
    atomic_write_text(csv_path, csv.str());
    manifest.add_output(csv_path);

    ordered_json summary;
    summary["n_points"] = samples.size();
    ordered_json kept = ordered_json::array();
    for (int idx : pca.kept_columns) {
        kept.push_back(fset.feature_names[static_cast<std::size_t>(idx)]);
    }
    ordered_json dropped = ordered_json::array();
    {
        std::set<int> kept_set(pca.kept_columns.begin(),
                               pca.kept_columns.end());
        for (std::size_t j = 0; j < fset.feature_names.size(); ++j) {
            if (!kept_set.count(static_cast<int>(j))) {
                dropped.push_back(fset.feature_names[j]);
            }
        }
    }
    summary["kept_columns"] = std::move(kept);
    summary["dropped_columns"] = std::move(dropped);
    summary["explained"] = pca.explained;
    summary["k"] = o.k;
    summary["inertia"] = km.inertia;
    {
        std::vector<std::size_t> sizes(static_cast<std::size_t>(o.k), 0);
        for (int l : km.labels) ++sizes[static_cast<std::size_t>(l)];
        summary["cluster_sizes"] = sizes;
    }
    summary["centroids"] = km.centroids;
    if (!o.model.empty()) {
        const FlowModel flow = load_flow_model(o.model);
        const auto report =
            cluster_likelihoods(km.labels, flow, latent_matrix(samples));
        ordered_json clusters = ordered_json::array();
        for (const auto& c : report.clusters) {
            ordered_json cj;
            cj["cluster"] = c.cluster;
            cj["size"] = c.size;
            cj["median_log_prob"] = c.median_log_prob;
            clusters.push_back(std::move(cj));
        }
        ordered_json lik;
        lik["clusters"] = std::move(clusters);
        lik["ratio"] = report.ratio;
        summary["likelihoods"] = std::move(lik);
    }
    const std::string sum_path = out_path(g, "summary.json");
    atomic_write_text(sum_path, summary.dump(2) + "\n");
    manifest.add_output(sum_path);
    manifest.write();
    std::cout << "wrote " << csv_path << " and " << sum_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// protocol endpoints

int serve_protocol(const ObjectiveFn& objective, long crash_after) {
    std::string line;
    long served = 0;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        EvalRequest req;
        try {
            req = decode_request(line);
        } catch (const std::exception& e) {
            std::cerr << "protocol error: " << e.what() << "\n";
            return 2;
        }
        const auto t0 = std::chrono::steady_clock::now();
        const double f = objective(req.latent, req.scenario);
        const auto t1 = std::chrono::steady_clock::now();
        EvalResponse resp;
        resp.id = req.id;
        resp.objective = f;
        resp.wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0)
                .count();
        // One flushed line per request; buffering would deadlock the pool.
        std::cout << encode_response(resp) << std::endl;
        ++served;
        if (crash_after > 0 && served >= crash_after) {
            return 3;
        }
    }
    return 0;
}

int run_echo_sim(long crash_after) {
    const ObjectiveFn echo = [](const std::vector<double>&,
                                const std::vector<double>& scenario) {
        return scenario.empty() ? 0.0 : scenario[0];
    };
    return serve_protocol(echo, crash_after);
}

int run_worker(const GlobalOpts& g) {
    const Config cfg = require_config(g);
    return serve_protocol(make_objective(cfg), 0);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rare-event probability estimation for simulated scenarios"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path,
                   "run configuration (space + objective) JSON file");
    app.add_option("--seed", g.seed, "master seed (default 0)");
    app.add_option("--workers", g.workers, "worker count (default 1)");
    app.add_option("--out-dir", g.out_dir,
                   "directory for output files (default .)");
    app.add_option("--backend", g.backend,
                   "in_process | command:<cmd> | tcp:<host:port>");
    app.add_option("--timeout-ms", g.timeout_ms,
                   "per-worker progress timeout");
    app.add_option("--max-retries", g.max_retries,
                   "per-request retry budget");

    auto* sample = app.add_subcommand("sample", "draw scenarios from the space");
    std::uint64_t sample_n = 100;
    sample->add_option("--n", sample_n, "number of draws");
    sample->fallthrough();

    auto* simulate =
        app.add_subcommand("simulate", "roll out one highway scenario");
    simulate->fallthrough();

    auto* estimate = app.add_subcommand(
        "estimate", "estimate the failure probability (naive or ams)");
    EstimateOpts eo;
    estimate->add_option("--method", eo.method, "naive | ams")->required();
    estimate->add_option("--gamma", eo.gamma, "failure threshold")
        ->required();
    estimate->add_option("--n", eo.n,
                         "draws (naive) or particles (ams, default 1000)");
    estimate->add_option("--repeats", eo.repeats,
                         "independent runs; > 1 writes a run set");
    estimate->add_option("--delta", eo.delta, "discard fraction per level");
    estimate->add_option("--t-mcmc", eo.t_mcmc,
                         "transitions per revived particle");
    estimate->add_option("--beta", eo.beta, "proposal mixing parameter");
    estimate->add_flag("--no-adapt-beta", eo.no_adapt_beta,
                       "freeze beta across levels");
    estimate->add_option("--max-iters", eo.max_iters, "level cap");
    estimate->add_option("--failures-out", eo.failures_out,
                         "also write survivor particles (single ams run)");
    estimate->fallthrough();

    auto* train = app.add_subcommand(
        "train-flow", "fit a sampling model to failure samples");
    TrainOpts to;
    train->add_option("--samples", to.samples, "failure-sample file")
        ->required();
    train->add_option("--model-out", to.model_out,
                      "model file name (default flow.json)");
    train->add_option("--epochs", to.cfg.epochs, "training epochs");
    train->add_option("--batch-size", to.cfg.batch_size, "minibatch size");
    train->add_option("--learning-rate", to.cfg.learning_rate,
                      "base step size");
    train->add_option("--layers", to.cfg.n_layers, "coupling layers");
    train->add_option("--hidden1", to.cfg.hidden1, "first hidden width");
    train->add_option("--hidden2", to.cfg.hidden2, "second hidden width");
    train->add_option("--val-fraction", to.cfg.val_fraction,
                      "holdout fraction for checkpointing");
    train->add_option("--clip-norm", to.cfg.clip_norm,
                      "gradient norm clip (0 disables)");
    train->add_option("--s-max", to.cfg.s_max, "log-scale bound");
    train->fallthrough();

    auto* is_est = app.add_subcommand(
        "is-estimate", "importance-sampling estimate under a trained model");
    IsOpts io;
    is_est->add_option("--model", io.model, "model file")->required();
    is_est->add_option("--gamma", io.gamma, "failure threshold")->required();
    is_est->add_option("--m", io.m, "proposal draws");
    is_est->add_option("--alpha", io.alpha,
                       "defensive mixture weight in [0, 1]");
    is_est->add_option("--repeats", io.repeats,
                       "independent runs; > 1 writes a run set");
    is_est->add_option(
        "--charge-evals", io.charge_evals,
        "training evaluations charged to this run set's declared budget");
    is_est->fallthrough();

    auto* compare = app.add_subcommand(
        "compare", "tabulate run sets against the first one");
    std::vector<std::string> compare_files;
    compare->add_option("files", compare_files, "run set JSON files")
        ->expected(-1);
    compare->fallthrough();

    auto* analyze = app.add_subcommand(
        "analyze", "project and cluster failure samples");
    AnalyzeOpts ao;
    analyze->add_option("--samples", ao.samples, "failure-sample file")
        ->required();
    analyze->add_option("--model", ao.model,
                        "optional flow model for cluster likelihoods");
    analyze->add_option("--k", ao.k, "cluster count (default 4)");
    analyze->add_option("--components", ao.components,
                        "projection dimensions (default 2)");
    analyze->fallthrough();

    auto* echo = app.add_subcommand(
        "echo-sim", "reference protocol worker: objective = first "
                    "scenario coordinate");
    long crash_after = 0;
    echo->add_option("--crash-after", crash_after,
                     "exit abruptly after this many responses");
    echo->fallthrough();

    auto* worker = app.add_subcommand(
        "worker", "serve the configured objective over the line protocol");
    worker->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << "error: " << e.what() << "\n"
                  << "run with --help for usage\n";
        return 1;
    }

    const std::vector<std::string> argv_copy(argv, argv + argc);
    try {
        if (!app.get_subcommand(echo)->parsed() &&
            !app.get_subcommand(worker)->parsed()) {
            fs::create_directories(g.out_dir);
        }
        if (sample->parsed()) return run_sample(g, sample_n, argv_copy);
        if (simulate->parsed()) return run_simulate(g, argv_copy);
        if (estimate->parsed()) return run_estimate(g, eo, argv_copy);
        if (train->parsed()) return run_train_flow(g, to, argv_copy);
        if (is_est->parsed()) return run_is_estimate(g, io, argv_copy);
        if (compare->parsed())
            return run_compare(g, compare_files, argv_copy);
        if (analyze->parsed()) return run_analyze(g, ao, argv_copy);
        if (echo->parsed()) return run_echo_sim(crash_after);
        if (worker->parsed()) return run_worker(g);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const RuntimeFailure& f) {
        std::cerr << f.diagnostic << "\n";
        return 2;
    } catch (const EvalError& e) {
        std::cerr << e.diagnostic() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        nlohmann::ordered_json diag;
        diag["error"] = e.what();
        std::cerr << diag.dump() << "\n";
        return 2;
    }
}
