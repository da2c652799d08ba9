#include "riskeval/serde.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>

namespace riskeval {

namespace {

nlohmann::ordered_json log_field(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

double log_field_back(const nlohmann::json& v, const char* key) {
    if (v.is_null()) return -std::numeric_limits<double>::infinity();
    if (!v.is_number()) {
        throw std::invalid_argument(std::string("estimate: '") + key +
                                    "' must be a number or null");
    }
    return v.get<double>();
}

void check_fields(const nlohmann::json& obj, const char* what,
                  const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw std::invalid_argument(std::string(what) +
                                        ": unknown field '" + it.key() +
                                        "'");
        }
    }
}

const nlohmann::json& need(const nlohmann::json& obj, const char* what,
                           const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw std::invalid_argument(std::string(what) +
                                    ": missing field '" + key + "'");
    }
    return *it;
}

double finite_number(const nlohmann::json& v, const char* what,
                     const char* key) {
    if (!v.is_number()) {
        throw std::invalid_argument(std::string(what) + ": '" + key +
                                    "' must be a number");
    }
    const double x = v.get<double>();
    if (!std::isfinite(x)) {
        throw std::invalid_argument(std::string(what) + ": '" + key +
                                    "' must be finite");
    }
    return x;
}

std::vector<double> finite_vector(const nlohmann::json& v, const char* what,
                                  const char* key) {
    if (!v.is_array()) {
        throw std::invalid_argument(std::string(what) + ": '" + key +
                                    "' must be an array");
    }
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& e : v) {
        out.push_back(finite_number(e, what, key));
    }
    return out;
}

const char* termination_name(AmsTermination t) {
    switch (t) {
        case AmsTermination::Converged:
            return "converged";
        case AmsTermination::Stalled:
            return "stalled";
        case AmsTermination::MaxIters:
            return "max_iters";
    }
    return "unknown";
}

}  // namespace

nlohmann::ordered_json estimate_to_json(const Estimate& e) {
    nlohmann::ordered_json j;
    j["method"] = e.method;
    j["gamma"] = e.gamma;
    j["p_hat"] = e.p_hat;
    j["log_p_hat"] = log_field(e.log_p_hat);
    j["std_err"] = e.std_err;
    j["ci_lo"] = e.ci_lo;
    j["ci_hi"] = e.ci_hi;
    j["n_evals"] = e.n_evals;
    j["hits"] = e.hits;
    j["ess"] = e.ess;
    return j;
}

Estimate estimate_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw std::invalid_argument("estimate: expected an object");
    }
    check_fields(j, "estimate",
                 {"method", "gamma", "p_hat", "log_p_hat", "std_err",
                  "ci_lo", "ci_hi", "n_evals", "hits", "ess"});
    Estimate e;
    const auto& method = need(j, "estimate", "method");
    if (!method.is_string()) {
        throw std::invalid_argument("estimate: 'method' must be a string");
    }
    e.method = method.get<std::string>();
    e.gamma = finite_number(need(j, "estimate", "gamma"), "estimate",
                            "gamma");
    e.p_hat = finite_number(need(j, "estimate", "p_hat"), "estimate",
                            "p_hat");
    e.log_p_hat = log_field_back(need(j, "estimate", "log_p_hat"),
                                 "log_p_hat");
    e.std_err = finite_number(need(j, "estimate", "std_err"), "estimate",
                              "std_err");
    e.ci_lo = finite_number(need(j, "estimate", "ci_lo"), "estimate",
                            "ci_lo");
    e.ci_hi = finite_number(need(j, "estimate", "ci_hi"), "estimate",
                            "ci_hi");
    const auto& n_evals = need(j, "estimate", "n_evals");
    const auto& hits = need(j, "estimate", "hits");
    if (!n_evals.is_number_unsigned() && !n_evals.is_number_integer()) {
        throw std::invalid_argument("estimate: 'n_evals' must be an integer");
    }
    if (!hits.is_number_unsigned() && !hits.is_number_integer()) {
        throw std::invalid_argument("estimate: 'hits' must be an integer");
    }
    e.n_evals = n_evals.get<std::uint64_t>();
    e.hits = hits.get<std::uint64_t>();
    e.ess = finite_number(need(j, "estimate", "ess"), "estimate", "ess");
    return e;
}

nlohmann::ordered_json ams_result_to_json(const AmsResult& r) {
    nlohmann::ordered_json j;
    j["method"] = "ams";
    j["p_hat"] = r.p_hat;
    j["log_p"] = log_field(r.log_p);
    j["std_err_log"] = r.std_err_log;
    j["n_evals"] = r.n_evals;
    j["terminated"] = termination_name(r.terminated);
    j["final_beta"] = r.final_beta;
    j["n_survivors"] = r.survivors.size();
    nlohmann::ordered_json levels = nlohmann::ordered_json::array();
    for (const auto& lv : r.levels) {
        nlohmann::ordered_json rec;
        rec["iter"] = lv.iter;
        rec["level"] = lv.level;
        rec["p_k"] = lv.p_k;
        rec["acc_rate"] = lv.acc_rate;
        rec["n_killed"] = lv.n_killed;
        rec["beta"] = lv.beta;
        levels.push_back(std::move(rec));
    }
    j["levels"] = std::move(levels);
    return j;
}

nlohmann::ordered_json run_set_to_json(const RunSet& rs) {
    nlohmann::ordered_json j;
    j["method"] = rs.method;
    j["gamma"] = rs.gamma;
    j["budget"] = rs.budget;
    nlohmann::ordered_json estimates = nlohmann::ordered_json::array();
    for (const auto& e : rs.estimates) {
        estimates.push_back(estimate_to_json(e));
    }
    j["estimates"] = std::move(estimates);
    return j;
}

RunSet run_set_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw std::invalid_argument("run set: expected an object");
    }
    check_fields(j, "run set", {"method", "gamma", "budget", "estimates"});
    const auto& estimates = need(j, "run set", "estimates");
    if (!estimates.is_array() || estimates.empty()) {
        throw std::invalid_argument(
            "run set: 'estimates' must be a non-empty array");
    }
    std::vector<Estimate> es;
    es.reserve(estimates.size());
    for (const auto& e : estimates) {
        es.push_back(estimate_from_json(e));
    }
    const double budget = finite_number(need(j, "run set", "budget"),
                                        "run set", "budget");
    RunSet rs = make_run_set(std::move(es), budget);
    const auto& method = need(j, "run set", "method");
    if (!method.is_string() || method.get<std::string>() != rs.method) {
        throw std::invalid_argument(
            "run set: 'method' does not match the estimates");
    }
    if (finite_number(need(j, "run set", "gamma"), "run set", "gamma") !=
        rs.gamma) {
        throw std::invalid_argument(
            "run set: 'gamma' does not match the estimates");
    }
    return rs;
}

void write_failure_samples(std::ostream& out,
                           const std::vector<Particle>& particles) {
    for (const auto& p : particles) {
        nlohmann::ordered_json j;
        j["id"] = p.id;
        j["u"] = p.latent;
        j["x"] = p.scenario;
        j["f"] = p.f;
        out << j.dump() << '\n';
    }
}

std::vector<FailureSample> read_failure_samples(std::istream& in) {
    std::vector<FailureSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::invalid_argument(
                "failure samples: line " + std::to_string(lineno) +
                " is not valid JSON: " + e.what());
        }
        if (!j.is_object()) {
            throw std::invalid_argument("failure samples: line " +
                                        std::to_string(lineno) +
                                        " is not an object");
        }
        check_fields(j, "failure samples", {"id", "u", "x", "f"});
        FailureSample s;
        const auto& id = need(j, "failure samples", "id");
        if (!id.is_number_integer() && !id.is_number_unsigned()) {
            throw std::invalid_argument(
                "failure samples: 'id' must be an integer");
        }
        s.id = id.get<std::int64_t>();
        s.u = finite_vector(need(j, "failure samples", "u"),
                            "failure samples", "u");
        s.x = finite_vector(need(j, "failure samples", "x"),
                            "failure samples", "x");
        s.f = finite_number(need(j, "failure samples", "f"),
                            "failure samples", "f");
        if (s.u.empty() || s.x.empty()) {
            throw std::invalid_argument(
                "failure samples: empty coordinate vectors");
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) {
        throw std::invalid_argument("failure samples: no records");
    }
    return out;
}

FailureSet scenario_matrix(const std::vector<FailureSample>& samples) {
    FailureSet fs;
    fs.points.reserve(samples.size());
    for (const auto& s : samples) {
        fs.points.push_back(s.x);
    }
    return fs;
}

std::vector<std::vector<double>> latent_matrix(
    const std::vector<FailureSample>& samples) {
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(s.u);
    }
    return out;
}

std::vector<std::string> scenario_feature_names(const ParamSpace& space) {
    std::vector<std::string> names;
    names.reserve(space.param_dim());
    for (const auto& coord : space.coords()) {
        const std::size_t width = law_param_dim(coord.law);
        if (width == 1) {
            names.push_back(coord.name);
        } else {
            for (std::size_t i = 0; i < width; ++i) {
                names.push_back(coord.name + "_" + std::to_string(i));
            }
        }
    }
    return names;
}

nlohmann::ordered_json manifest_to_json(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["subcommand"] = m.subcommand;
    j["config"] = m.config_path;
    j["seed"] = m.seed;
    j["version"] = m.version;
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    j["argv"] = m.argv;
    j["outputs"] = m.outputs;
    return j;
}

std::string iso8601_utc_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void atomic_write_text(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path dir =
        target.parent_path().empty() ? fs::path(".") : target.parent_path();
    fs::path tmp = dir / (target.filename().string() + ".tmp." +
                          std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write '" + tmp.string() + "'");
        }
        out << content;
        out.flush();
        if (!out) {
            throw std::runtime_error("short write to '" + tmp.string() +
                                     "'");
        }
    }
    fs::rename(tmp, target);
}

}  // namespace riskeval
