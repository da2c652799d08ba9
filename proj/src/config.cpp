#include "riskeval/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace riskeval {

namespace {

void check_fields(const nlohmann::json& obj, const char* where,
                  const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw std::invalid_argument(std::string("config: unknown field '") +
                                        it.key() + "' in " + where);
        }
    }
}

double num_or(const nlohmann::json& obj, const char* key, double fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number()) {
        throw std::invalid_argument(std::string("config: '") + key +
                                    "' must be a number");
    }
    const double x = v.get<double>();
    if (!std::isfinite(x)) {
        throw std::invalid_argument(std::string("config: '") + key +
                                    "' must be finite");
    }
    return x;
}

int int_or(const nlohmann::json& obj, const char* key, int fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) {
        throw std::invalid_argument(std::string("config: '") + key +
                                    "' must be an integer");
    }
    return v.get<int>();
}

SimConfig parse_sim(const nlohmann::json& obj) {
    check_fields(obj, "objective.sim",
                 {"n_vehicles", "dt", "horizon", "ttc_cap", "n_lanes",
                  "lane_width", "veh_length", "veh_width", "min_spawn_gap",
                  "sensor_range", "headway", "standoff", "max_accel",
                  "max_decel", "k_gap", "k_rel", "k_speed", "k_lat",
                  "rel_smoothing", "env_follow_range", "env_max_accel",
                  "env_max_decel", "noise"});
    SimConfig sim;
    sim.n_vehicles = int_or(obj, "n_vehicles", sim.n_vehicles);
    sim.dt = num_or(obj, "dt", sim.dt);
    sim.horizon = num_or(obj, "horizon", sim.horizon);
    sim.ttc_cap = num_or(obj, "ttc_cap", sim.ttc_cap);
    sim.n_lanes = int_or(obj, "n_lanes", sim.n_lanes);
    sim.lane_width = num_or(obj, "lane_width", sim.lane_width);
    sim.veh_length = num_or(obj, "veh_length", sim.veh_length);
    sim.veh_width = num_or(obj, "veh_width", sim.veh_width);
    sim.min_spawn_gap = num_or(obj, "min_spawn_gap", sim.min_spawn_gap);
    sim.sensor_range = num_or(obj, "sensor_range", sim.sensor_range);
    sim.headway = num_or(obj, "headway", sim.headway);
    sim.standoff = num_or(obj, "standoff", sim.standoff);
    sim.max_accel = num_or(obj, "max_accel", sim.max_accel);
    sim.max_decel = num_or(obj, "max_decel", sim.max_decel);
    sim.k_gap = num_or(obj, "k_gap", sim.k_gap);
    sim.k_rel = num_or(obj, "k_rel", sim.k_rel);
    sim.k_speed = num_or(obj, "k_speed", sim.k_speed);
    sim.k_lat = num_or(obj, "k_lat", sim.k_lat);
    sim.rel_smoothing = num_or(obj, "rel_smoothing", sim.rel_smoothing);
    sim.env_follow_range =
        num_or(obj, "env_follow_range", sim.env_follow_range);
    sim.env_max_accel = num_or(obj, "env_max_accel", sim.env_max_accel);
    sim.env_max_decel = num_or(obj, "env_max_decel", sim.env_max_decel);
    if (obj.contains("noise")) {
        const auto& n = obj.at("noise");
        if (!n.is_object()) {
            throw std::invalid_argument(
                "config: 'noise' must be an object");
        }
        check_fields(n, "objective.sim.noise",
                     {"base", "sun", "rain", "ground"});
        sim.noise.base = num_or(n, "base", sim.noise.base);
        sim.noise.sun = num_or(n, "sun", sim.noise.sun);
        sim.noise.rain = num_or(n, "rain", sim.noise.rain);
        sim.noise.ground = num_or(n, "ground", sim.noise.ground);
    }
    if (sim.n_vehicles < 1 || sim.dt <= 0.0 || sim.horizon <= 0.0 ||
        sim.ttc_cap <= 0.0) {
        throw std::invalid_argument("config: invalid simulator settings");
    }
    return sim;
}

}  // namespace

Config parse_config(const nlohmann::json& doc) {
    if (!doc.is_object()) {
        throw std::invalid_argument("config: document must be an object");
    }
    check_fields(doc, "the document root", {"space", "objective"});
    if (!doc.contains("space")) {
        throw std::invalid_argument("config: missing field 'space'");
    }
    if (!doc.contains("objective")) {
        throw std::invalid_argument("config: missing field 'objective'");
    }

    ParamSpace space = ParamSpace::from_json(doc.at("space"));

    const auto& obj = doc.at("objective");
    if (!obj.is_object() || !obj.contains("kind") ||
        !obj.at("kind").is_string()) {
        throw std::invalid_argument(
            "config: 'objective' needs a string field 'kind'");
    }
    const std::string kind = obj.at("kind").get<std::string>();

    if (kind == "gaussian_linear") {
        check_fields(obj, "objective", {"kind", "direction"});
        if (!obj.contains("direction") || !obj.at("direction").is_array()) {
            throw std::invalid_argument(
                "config: gaussian_linear needs a 'direction' array");
        }
        std::vector<double> dir;
        for (const auto& v : obj.at("direction")) {
            if (!v.is_number() || !std::isfinite(v.get<double>())) {
                throw std::invalid_argument(
                    "config: 'direction' entries must be finite numbers");
            }
            dir.push_back(v.get<double>());
        }
        if (dir.size() != space.latent_dim()) {
            throw std::invalid_argument(
                "config: 'direction' length must equal the latent "
                "dimension (" +
                std::to_string(space.latent_dim()) + ")");
        }
        Config cfg{std::move(space), kind, std::move(dir), SimConfig{}};
        return cfg;
    }
    if (kind == "highway") {
        check_fields(obj, "objective", {"kind", "sim"});
        SimConfig sim;
        if (obj.contains("sim")) {
            if (!obj.at("sim").is_object()) {
                throw std::invalid_argument(
                    "config: 'sim' must be an object");
            }
            sim = parse_sim(obj.at("sim"));
        }
        const std::size_t needed =
            4 + 3 * static_cast<std::size_t>(sim.n_vehicles);
        if (space.param_dim() < needed) {
            throw std::invalid_argument(
                "config: the scenario vector has " +
                std::to_string(space.param_dim()) +
                " coordinates but the simulator needs at least " +
                std::to_string(needed));
        }
        Config cfg{std::move(space), kind, {}, sim};
        return cfg;
    }
    throw std::invalid_argument("config: unknown objective kind '" + kind +
                                "'");
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("config: cannot open '" + path + "'");
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument("config: '" + path +
                                    "' is not valid JSON: " + e.what());
    }
    return parse_config(doc);
}

ObjectiveFn make_objective(const Config& cfg) {
    if (cfg.objective_kind == "gaussian_linear") {
        return make_gaussian_linear(cfg.direction);
    }
    return make_highway_min_ttc(cfg.sim);
}

}  // namespace riskeval
