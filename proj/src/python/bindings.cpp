#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "riskeval/ams.hpp"
#include "riskeval/analysis.hpp"
#include "riskeval/config.hpp"
#include "riskeval/estimate.hpp"
#include "riskeval/flow.hpp"
#include "riskeval/harness.hpp"
#include "riskeval/objectives.hpp"
#include "riskeval/param_space.hpp"
#include "riskeval/rng.hpp"
#include "riskeval/serde.hpp"
#include "riskeval/stats.hpp"

namespace py = pybind11;

namespace {

using namespace riskeval;

// Python entry points run the in-process backend only; external workers are
// the CLI's business.
PoolConfig pool_for(int workers) {
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    PoolConfig pc;
    pc.backend = PoolBackend::InProcess;
    pc.n_workers = workers;
    return pc;
}

py::dict estimate_dict(const Estimate& e) {
    py::dict d;
    d["method"] = e.method;
    d["gamma"] = e.gamma;
    d["p_hat"] = e.p_hat;
    d["log_p_hat"] = e.log_p_hat;
    d["std_err"] = e.std_err;
    d["ci_lo"] = e.ci_lo;
    d["ci_hi"] = e.ci_hi;
    d["n_evals"] = e.n_evals;
    d["hits"] = e.hits;
    d["ess"] = e.ess;
    return d;
}

const char* termination_name(AmsTermination t) {
    switch (t) {
        case AmsTermination::Converged: return "converged";
        case AmsTermination::Stalled: return "stalled";
        default: return "max_iters";
    }
}

py::dict ams_dict(const AmsResult& r, double gamma) {
    py::dict d;
    d["p_hat"] = r.p_hat;
    d["log_p"] = r.log_p;
    d["std_err_log"] = r.std_err_log;
    d["n_evals"] = r.n_evals;
    d["terminated"] = termination_name(r.terminated);
    d["final_beta"] = r.final_beta;
    py::list levels;
    for (const auto& lv : r.levels) {
        py::dict l;
        l["iter"] = lv.iter;
        l["level"] = lv.level;
        l["p_k"] = lv.p_k;
        l["acc_rate"] = lv.acc_rate;
        l["n_killed"] = lv.n_killed;
        l["beta"] = lv.beta;
        levels.append(std::move(l));
    }
    d["levels"] = std::move(levels);
    py::list survivors;
    for (const auto& p : r.survivors) {
        py::dict s;
        s["id"] = p.id;
        s["u"] = p.latent;
        s["x"] = p.scenario;
        s["f"] = p.f;
        survivors.append(std::move(s));
    }
    d["survivors"] = std::move(survivors);
    d["estimate"] = estimate_dict(to_estimate(r, gamma));
    return d;
}

py::dict trace_dict(const RolloutTrace& tr) {
    py::dict d;
    d["dt"] = tr.dt;
    d["veh_length"] = tr.veh_length;
    d["veh_width"] = tr.veh_width;
    d["ttc_cap"] = tr.ttc_cap;
    d["collided"] = tr.collided;
    d["min_ttc"] = tr.min_ttc;
    py::list frames;
    for (const auto& fr : tr.frames) {
        py::dict f;
        f["time"] = fr.time;
        py::list vehicles;
        for (const auto& v : fr.vehicles) {
            py::dict b;
            b["s"] = v.s;
            b["t"] = v.t;
            b["v"] = v.v;
            b["v_lat"] = v.v_lat;
            vehicles.append(std::move(b));
        }
        f["vehicles"] = std::move(vehicles);
        frames.append(std::move(f));
    }
    d["frames"] = std::move(frames);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Rare-event risk estimation: scenario spaces, splitting, "
              "flow-based importance sampling, failure-mode analysis.";
#ifdef RISKEVAL_VERSION
    m.attr("__version__") = RISKEVAL_VERSION;
#else
    m.attr("__version__") = "unknown";
#endif

    // Scalar utilities.
    m.def("normal_cdf", &normal_cdf, py::arg("x"),
          "Standard normal CDF.");
    m.def("normal_quantile", &normal_quantile, py::arg("p"),
          "Standard normal quantile; p must lie strictly inside (0, 1).");
    m.def("wilson_interval",
          [](std::uint64_t hits, std::uint64_t n) {
              return wilson_interval(static_cast<std::size_t>(hits),
                                     static_cast<std::size_t>(n));
          },
          py::arg("hits"), py::arg("n"),
          "Wilson 95% interval for a binomial proportion, as (lo, hi).");
    m.def("required_samples", &required_samples, py::arg("p"),
          py::arg("rel_err"),
          "Plain Monte Carlo draws needed for the given relative standard "
          "error at failure probability p.");
    m.def("derive_seed",
          [](std::uint64_t master, const std::vector<std::uint64_t>& path) {
              return derive_seed_range(master, path.begin(), path.end());
          },
          py::arg("master"), py::arg("path"),
          "Child seed for a (master, path) pair; equal inputs give equal "
          "seeds across platforms.");

    // Configuration: a scenario space plus the objective evaluated on it.
    py::class_<Config>(m, "Config",
                       "Parsed run configuration. Construct with load_config "
                       "or parse_config.")
        .def_property_readonly(
            "objective_kind",
            [](const Config& c) { return c.objective_kind; })
        .def_property_readonly(
            "latent_dim",
            [](const Config& c) { return c.space.latent_dim(); })
        .def_property_readonly(
            "param_dim",
            [](const Config& c) { return c.space.param_dim(); })
        .def_property_readonly(
            "feature_names",
            [](const Config& c) { return scenario_feature_names(c.space); },
            "One name per scenario coordinate, multi-dimensional laws "
            "suffixed _0, _1, ...")
        .def("to_params",
             [](const Config& c, const std::vector<double>& latent) {
                 return c.space.to_params(latent);
             },
             py::arg("latent"),
             "Deterministic latent -> scenario map.")
        .def("log_density_latent",
             [](const Config& c, const std::vector<double>& latent) {
                 return c.space.log_density_latent(latent);
             },
             py::arg("latent"),
             "log N(0, I) density of a latent point.")
        .def("sample_latents",
             [](const Config& c, std::size_t n, std::uint64_t seed) {
                 std::vector<std::vector<double>> out;
                 out.reserve(n);
                 for (std::size_t i = 0; i < n; ++i) {
                     Stream s(derive_seed(seed,
                                          {stream_tag::kSampleCli, i}));
                     out.push_back(c.space.sample_latent(s));
                 }
                 return out;
             },
             py::arg("n"), py::arg("seed"),
             "n latent draws, one derived stream per index; identical to "
             "the sample subcommand's draws for the same seed.")
        .def("objective",
             [](const Config& c, const std::vector<double>& latent) {
                 auto fn = make_objective(c);
                 auto x = c.space.to_params(latent);
                 return fn(latent, x);
             },
             py::arg("latent"),
             "Objective value at one latent point.");

    m.def("load_config",
          [](const std::string& path) { return load_config(path); },
          py::arg("path"), "Parse a configuration file (strict).");
    m.def("parse_config",
          [](const std::string& text) {
              return parse_config(nlohmann::json::parse(text));
          },
          py::arg("text"), "Parse a configuration document from a string.");

    // Estimators. Heavy loops release the GIL; results come back as plain
    // dicts mirroring the CLI's output files.
    m.def("estimate_naive",
          [](const Config& cfg, double gamma, std::uint64_t n,
             std::uint64_t seed, int workers) {
              Estimate e;
              {
                  py::gil_scoped_release release;
                  EvalPool pool(pool_for(workers), make_objective(cfg));
                  e = estimate_naive(cfg.space, pool, gamma, n, seed);
              }
              return estimate_dict(e);
          },
          py::arg("config"), py::arg("gamma"), py::arg("n"),
          py::arg("seed") = 0, py::arg("workers") = 1,
          "Plain Monte Carlo estimate of P(f(X) < gamma) with a Wilson "
          "interval.");

    m.def("run_ams",
          [](const Config& cfg, double gamma, std::size_t n_particles,
             double delta, int t_mcmc, double beta, bool adapt_beta,
             int max_iters, std::uint64_t seed, int workers) {
              AmsConfig ac;
              ac.n_particles = n_particles;
              ac.delta = delta;
              ac.t_mcmc = t_mcmc;
              ac.beta = beta;
              ac.adapt_beta = adapt_beta;
              ac.max_iters = max_iters;
              ac.gamma = gamma;
              ac.seed = seed;
              AmsResult r;
              {
                  py::gil_scoped_release release;
                  EvalPool pool(pool_for(workers), make_objective(cfg));
                  r = run_ams(cfg.space, pool, ac);
              }
              return ams_dict(r, gamma);
          },
          py::arg("config"), py::arg("gamma"), py::arg("n_particles") = 1000,
          py::arg("delta") = 0.1, py::arg("t_mcmc") = 10,
          py::arg("beta") = 0.3, py::arg("adapt_beta") = true,
          py::arg("max_iters") = 10000, py::arg("seed") = 0,
          py::arg("workers") = 1,
          "Adaptive multilevel splitting run. The dict carries the level "
          "ladder, the surviving particles, and an estimate view; "
          "terminated is one of converged / stalled / max_iters.");

    // Normalizing flow over latent points.
    py::class_<FlowModel>(m, "FlowModel",
                          "Affine coupling flow with a data-derived "
                          "standardizer; densities live on the latent space.")
        .def_property_readonly("dim", &FlowModel::dim)
        .def("log_prob", &FlowModel::log_prob, py::arg("point"),
             "log density of the flow at one latent point.")
        .def("forward", &FlowModel::forward, py::arg("z"),
             "Map a base normal draw through the flow.")
        .def("inverse", &FlowModel::inverse, py::arg("point"),
             "Exact inverse of forward.")
        .def("sample",
             [](const FlowModel& fm, std::size_t n, std::uint64_t seed) {
                 Stream s(derive_seed(seed, {stream_tag::kFlowSample}));
                 std::vector<std::vector<double>> out;
                 out.reserve(n);
                 for (std::size_t i = 0; i < n; ++i) out.push_back(fm.sample(s));
                 return out;
             },
             py::arg("n"), py::arg("seed"),
             "n flow draws from one seeded stream.")
        .def("history",
             [](const FlowModel& fm) {
                 py::list out;
                 for (const auto& st : fm.history()) {
                     py::dict d;
                     d["epoch"] = st.epoch;
                     d["train_nll"] = st.train_nll;
                     d["val_nll"] = st.val_nll;
                     out.append(std::move(d));
                 }
                 return out;
             },
             "Per-epoch train / validation negative log likelihoods of the "
             "fit that produced this model.")
        .def("to_json", [](const FlowModel& fm) { return fm.to_json().dump(); },
             "Serialize to the same document the train-flow subcommand "
             "writes.")
        .def_static("from_json",
                    [](const std::string& text) {
                        return FlowModel::from_json(nlohmann::json::parse(text));
                    },
                    py::arg("text"))
        .def_static("load",
                    [](const std::string& path) {
                        std::ifstream in(path);
                        if (!in)
                            throw std::invalid_argument(
                                "flow model: cannot open " + path);
                        std::ostringstream ss;
                        ss << in.rdbuf();
                        return FlowModel::from_json(
                            nlohmann::json::parse(ss.str()));
                    },
                    py::arg("path"));

    m.def("fit_flow",
          [](const std::vector<std::vector<double>>& samples, int epochs,
             int batch_size, double learning_rate, int n_layers, int hidden1,
             int hidden2, double val_fraction, double clip_norm, double s_max,
             std::uint64_t seed) {
              FlowConfig fc;
              fc.epochs = epochs;
              fc.batch_size = batch_size;
              fc.learning_rate = learning_rate;
              fc.n_layers = n_layers;
              fc.hidden1 = hidden1;
              fc.hidden2 = hidden2;
              fc.val_fraction = val_fraction;
              fc.clip_norm = clip_norm;
              fc.s_max = s_max;
              fc.seed = seed;
              py::gil_scoped_release release;
              return fit_flow(samples, fc);
          },
          py::arg("samples"), py::arg("epochs") = 100,
          py::arg("batch_size") = 128, py::arg("learning_rate") = 0.05,
          py::arg("n_layers") = 6, py::arg("hidden1") = 32,
          py::arg("hidden2") = 16, py::arg("val_fraction") = 0.2,
          py::arg("clip_norm") = 5.0, py::arg("s_max") = 4.0,
          py::arg("seed") = 0,
          "Maximum-likelihood fit; the result carries the best validation "
          "checkpoint, never worse than the identity initialization.");

    m.def("mixture_log_weight", &mixture_log_weight, py::arg("flow"),
          py::arg("u"), py::arg("alpha"),
          "log of the importance weight against the defensive mixture "
          "alpha * phi + (1 - alpha) * q_flow.");

    m.def("estimate_importance",
          [](const Config& cfg, const FlowModel& flow, double gamma,
             std::uint64_t n, double alpha, std::uint64_t seed, int workers) {
              Estimate e;
              {
                  py::gil_scoped_release release;
                  EvalPool pool(pool_for(workers), make_objective(cfg));
                  e = estimate_importance(cfg.space, pool, flow, gamma, n,
                                          alpha, seed);
              }
              return estimate_dict(e);
          },
          py::arg("config"), py::arg("flow"), py::arg("gamma"), py::arg("n"),
          py::arg("alpha") = 0.1, py::arg("seed") = 0, py::arg("workers") = 1,
          "Importance sampling under the defensive mixture proposal; for "
          "alpha > 0 the weights are bounded by 1 / alpha.");

    // Deterministic rollout behind the highway objective.
    m.def("simulate_highway",
          [](const Config& cfg, const std::vector<double>& scenario) {
              if (cfg.objective_kind != "highway")
                  throw std::invalid_argument(
                      "simulate_highway: config objective is not highway");
              return trace_dict(simulate_highway(cfg.sim, scenario));
          },
          py::arg("config"), py::arg("scenario"),
          "Full rollout trace of one scenario vector; equal scenarios give "
          "bit-equal traces.");

    // Failure-mode analysis.
    m.def("pca_project",
          [](const std::vector<std::vector<double>>& points,
             const std::vector<std::string>& feature_names, int k) {
              FailureSet fs;
              fs.points = points;
              fs.feature_names = feature_names;
              PcaResult r = pca_project(fs, k);
              py::dict d;
              d["kept_columns"] = r.kept_columns;
              d["column_mean"] = r.column_mean;
              d["column_sd"] = r.column_sd;
              d["components"] = r.components;
              d["explained"] = r.explained;
              d["projected"] = r.projected;
              return d;
          },
          py::arg("points"), py::arg("feature_names") = std::vector<std::string>{},
          py::arg("k") = 2,
          "Principal axes of the standardized point matrix; constant columns "
          "are dropped and kept_columns records the survivors.");

    m.def("kmeans_cluster",
          [](const std::vector<std::vector<double>>& points, int k,
             std::uint64_t seed) {
              KmeansResult r;
              {
                  py::gil_scoped_release release;
                  r = kmeans_cluster(points, k, seed);
              }
              py::dict d;
              d["labels"] = r.labels;
              d["centroids"] = r.centroids;
              d["inertia"] = r.inertia;
              d["inertia_path"] = r.inertia_path;
              return d;
          },
          py::arg("points"), py::arg("k"), py::arg("seed") = 0,
          "Best-of-20-restarts Lloyd clustering, deterministic in "
          "(points, k, seed).");

    m.def("cluster_likelihoods",
          [](const std::vector<int>& labels, const FlowModel& flow,
             const std::vector<std::vector<double>>& latents) {
              ClusterLikelihoodReport r =
                  cluster_likelihoods(labels, flow, latents);
              py::list clusters;
              for (const auto& c : r.clusters) {
                  py::dict d;
                  d["cluster"] = c.cluster;
                  d["size"] = c.size;
                  d["median_log_prob"] = c.median_log_prob;
                  clusters.append(std::move(d));
              }
              py::dict d;
              d["clusters"] = std::move(clusters);
              d["ratio"] = r.ratio;
              return d;
          },
          py::arg("labels"), py::arg("flow"), py::arg("latents"),
          "Median flow log density per cluster plus the pairwise likelihood "
          "ratio matrix.");
}
