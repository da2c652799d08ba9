#include "riskeval/objectives.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "riskeval/rng.hpp"

namespace riskeval {

ObjectiveFn make_gaussian_linear(std::vector<double> direction) {
    double norm2 = 0.0;
    for (const double c : direction) norm2 += c * c;
    if (!(norm2 > 0.0) || !std::isfinite(norm2))
        throw std::invalid_argument("gaussian_linear: direction must be nonzero");
    const double inv_norm = 1.0 / std::sqrt(norm2);

    return [dir = std::move(direction), inv_norm](
               const std::vector<double>& latent,
               const std::vector<double>&) -> double {
        if (latent.size() != dir.size())
            throw std::invalid_argument("gaussian_linear: latent dimension mismatch");
        double dot = 0.0;
        for (std::size_t i = 0; i < dir.size(); ++i) dot += dir[i] * latent[i];
        return dot * inv_norm;
    };
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Interval of times where |r + w * tau| <= h. Returns {entry, exit}; an
// empty interval comes back as {inf, -inf}.
std::pair<double, double> axis_contact_window(double r, double w, double h) {
    if (w == 0.0) {
        if (std::fabs(r) <= h) return {-kInf, kInf};
        return {kInf, -kInf};
    }
    const double t1 = (-h - r) / w;
    const double t2 = (h - r) / w;
    return {std::min(t1, t2), std::max(t1, t2)};
}

}  // namespace

double instantaneous_ttc(const BoxState& a, const BoxState& b,
                         double half_sum_length, double half_sum_width,
                         double cap) {
    const auto [s_in, s_out] =
        axis_contact_window(b.s - a.s, b.v - a.v, half_sum_length);
    const auto [t_in, t_out] =
        axis_contact_window(b.t - a.t, b.v_lat - a.v_lat, half_sum_width);

    const double entry = std::max({s_in, t_in, 0.0});
    const double exit = std::min(s_out, t_out);
    if (entry > exit || entry > cap) return cap;
    return entry;
}

double min_ttc(const RolloutTrace& trace) {
    const double hl = trace.veh_length;
    const double hw = trace.veh_width;
    double best = trace.ttc_cap;
    for (const auto& frame : trace.frames) {
        const auto& ego = frame.vehicles.front();
        for (std::size_t j = 1; j < frame.vehicles.size(); ++j)
            best = std::min(
                best, instantaneous_ttc(ego, frame.vehicles[j], hl, hw,
                                        trace.ttc_cap));
    }
    return best;
}

namespace {

struct EnvGains {
    double kv = 0.0;
    double kgap = 0.0;
    double krel = 0.0;
    double klat = 0.0;
    double v_off = 0.0;
    double gap_off = 0.0;
};

double clampd(double v, double lo, double hi) {
    return std::min(std::max(v, lo), hi);
}

// Center of the lane the position t currently occupies; positions beyond
// the outer lanes snap to the outermost center. A vehicle sitting on a
// center has zero lateral command, so lanes are holding patterns.
double nearest_lane_center(double t, int n_lanes, double lane_width) {
    const double half = (n_lanes - 1) / 2.0;
    double lane = std::round(t / lane_width + half);
    lane = clampd(lane, 0.0, n_lanes - 1.0);
    return (lane - half) * lane_width;
}

// Fold the scenario bytes into a seed so measurement noise is a pure
// function of the scenario, not of any caller-owned generator.
std::uint64_t scenario_noise_seed(const std::vector<double>& scenario) {
    std::uint64_t h = 0x9E3779B97F4A7C15ULL;
    for (const double d : scenario) {
        h ^= std::bit_cast<std::uint64_t>(d);
        splitmix64(h);
    }
    return h;
}

// Index of the nearest vehicle ahead of `self` in its lane corridor, or -1.
int nearest_ahead(const std::vector<BoxState>& veh, int self, double lane_width,
                  double range, double veh_length) {
    int best = -1;
    double best_gap = kInf;
    const auto& me = veh[static_cast<std::size_t>(self)];
    for (int j = 0; j < static_cast<int>(veh.size()); ++j) {
        if (j == self) continue;
        const auto& other = veh[static_cast<std::size_t>(j)];
        if (!(other.s > me.s)) continue;
        if (std::fabs(other.t - me.t) > 0.75 * lane_width) continue;
        const double gap = other.s - me.s - veh_length;
        if (gap <= range && gap < best_gap) {
            best_gap = gap;
            best = j;
        }
    }
    return best;
}

bool boxes_touch(const BoxState& a, const BoxState& b, double hl, double hw) {
    return std::fabs(b.s - a.s) <= hl && std::fabs(b.t - a.t) <= hw;
}

}  // namespace

RolloutTrace simulate_highway(const SimConfig& cfg,
                              const std::vector<double>& scenario) {
    const int n = cfg.n_vehicles;
    if (n < 1) throw std::invalid_argument("simulate_highway: n_vehicles < 1");
    if (cfg.n_lanes < 1) throw std::invalid_argument("simulate_highway: n_lanes < 1");
    if (!(cfg.dt > 0.0) || !(cfg.horizon > 0.0))
        throw std::invalid_argument("simulate_highway: dt and horizon must be positive");
    const std::size_t fixed = 4 + 3 * static_cast<std::size_t>(n);
    if (scenario.size() < fixed)
        throw std::invalid_argument(
            "simulate_highway: scenario has " + std::to_string(scenario.size()) +
            " values, needs at least " + std::to_string(fixed));

    const double ground = scenario[0];
    const double sun = scenario[1];
    const double cloud = scenario[2];
    const double precip = scenario[3];
    const double* xi = scenario.data() + fixed;
    const std::size_t xi_dim = scenario.size() - fixed;

    // Spawn: lanes round-robin, lateral offset about the lane center, then
    // per-lane shifting so every pair starts at least min_spawn_gap apart.
    std::vector<BoxState> veh(static_cast<std::size_t>(n));
    std::vector<double> v_set(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::size_t base = 4 + 3 * static_cast<std::size_t>(i);
        const int lane = i % cfg.n_lanes;
        const double center =
            (lane - (cfg.n_lanes - 1) / 2.0) * cfg.lane_width;
        auto& b = veh[static_cast<std::size_t>(i)];
        b.s = scenario[base];
        b.t = center + scenario[base + 1];
        b.v = std::max(0.0, scenario[base + 2]);
        v_set[static_cast<std::size_t>(i)] = b.v;
    }
    for (int lane = 0; lane < cfg.n_lanes; ++lane) {
        std::vector<int> members;
        for (int i = lane; i < n; i += cfg.n_lanes) members.push_back(i);
        std::sort(members.begin(), members.end(), [&](int a, int b) {
            const double sa = veh[static_cast<std::size_t>(a)].s;
            const double sb = veh[static_cast<std::size_t>(b)].s;
            return sa != sb ? sa > sb : a < b;
        });
        for (std::size_t k = 1; k < members.size(); ++k) {
            auto& cur = veh[static_cast<std::size_t>(members[k])];
            const auto& ahead = veh[static_cast<std::size_t>(members[k - 1])];
            cur.s = std::min(cur.s,
                             ahead.s - cfg.veh_length - cfg.min_spawn_gap);
        }
    }

    // Gains for other traffic: affine in the cyclically-indexed xi block,
    // clamped to keep every controller stable.
    std::vector<EnvGains> gains(static_cast<std::size_t>(n));
    for (int j = 1; j < n; ++j) {
        auto pick = [&](int i) -> double {
            if (xi_dim == 0) return 0.0;
            return xi[(6 * static_cast<std::size_t>(j - 1) + static_cast<std::size_t>(i)) % xi_dim];
        };
        auto& g = gains[static_cast<std::size_t>(j)];
        g.kv = clampd(0.5 + 0.2 * pick(0), 0.05, 2.0);
        g.kgap = clampd(0.15 + 0.1 * pick(1), 0.01, 1.0);
        g.krel = clampd(0.5 + 0.25 * pick(2), 0.0, 2.0);
        g.klat = clampd(0.6 + 0.25 * pick(3), 0.05, 2.0);
        g.v_off = 2.0 * pick(4);
        g.gap_off = 5.0 * pick(5);
    }

    const double sigma =
        cfg.noise.base +
        cfg.noise.sun * (sun / 90.0) * std::max(0.0, 1.0 - cloud / 100.0) +
        cfg.noise.rain * (precip / 100.0) + cfg.noise.ground * (ground / 50.0);
    Stream noise(scenario_noise_seed(scenario));

    RolloutTrace trace;
    trace.dt = cfg.dt;
    trace.veh_length = cfg.veh_length;
    trace.veh_width = cfg.veh_width;
    trace.ttc_cap = cfg.ttc_cap;

    const int steps = static_cast<int>(std::llround(cfg.horizon / cfg.dt));
    trace.frames.reserve(static_cast<std::size_t>(steps) + 1);
    trace.frames.push_back({0.0, veh});

    // Ego gap filter state survives across steps while a lead is held.
    bool had_meas = false;
    double prev_meas = 0.0;
    double rel_est = 0.0;

    std::vector<double> accel(static_cast<std::size_t>(n));
    std::vector<double> vlat(static_cast<std::size_t>(n));

    for (int k = 0; k < steps; ++k) {
        // Contact check on the newest frame; a touching pair ends the run.
        for (int j = 1; j < n && !trace.collided; ++j)
            trace.collided = boxes_touch(veh[0], veh[static_cast<std::size_t>(j)],
                                         cfg.veh_length, cfg.veh_width);
        if (trace.collided) break;

        // One noise draw per step, lead or not, keeps the stream aligned
        // with the frame index.
        const double eta = noise.normal();

        const int lead = nearest_ahead(veh, 0, cfg.lane_width,
                                       cfg.sensor_range, cfg.veh_length);
        if (lead >= 0) {
            const double gap =
                veh[static_cast<std::size_t>(lead)].s - veh[0].s - cfg.veh_length;
            const double meas = gap + sigma * eta;
            if (had_meas) {
                const double raw = (meas - prev_meas) / cfg.dt;
                rel_est += cfg.rel_smoothing * (raw - rel_est);
            } else {
                rel_est = 0.0;
            }
            prev_meas = meas;
            had_meas = true;
            const double d_star = cfg.standoff + cfg.headway * veh[0].v;
            accel[0] = clampd(cfg.k_gap * (meas - d_star) + cfg.k_rel * rel_est,
                              -cfg.max_decel, cfg.max_accel);
        } else {
            had_meas = false;
            rel_est = 0.0;
            accel[0] = clampd(cfg.k_speed * (v_set[0] - veh[0].v),
                              -cfg.max_decel, cfg.max_accel);
        }
        vlat[0] = clampd(
            -cfg.k_lat * (veh[0].t - nearest_lane_center(veh[0].t, cfg.n_lanes,
                                                         cfg.lane_width)),
            -1.0, 1.0);

        for (int j = 1; j < n; ++j) {
            const auto& g = gains[static_cast<std::size_t>(j)];
            const auto& me = veh[static_cast<std::size_t>(j)];
            const int lj = nearest_ahead(veh, j, cfg.lane_width,
                                         cfg.env_follow_range, cfg.veh_length);
            if (lj >= 0) {
                const auto& lv = veh[static_cast<std::size_t>(lj)];
                const double gap = lv.s - me.s - cfg.veh_length;
                const double d_star =
                    std::max(1.0, cfg.standoff + 1.2 * me.v + g.gap_off);
                accel[static_cast<std::size_t>(j)] =
                    clampd(g.kgap * (gap - d_star) + g.krel * (lv.v - me.v),
                           -cfg.env_max_decel, cfg.env_max_accel);
            } else {
                accel[static_cast<std::size_t>(j)] =
                    clampd(g.kv * (v_set[static_cast<std::size_t>(j)] + g.v_off - me.v),
                           -cfg.env_max_decel, cfg.env_max_accel);
            }
            vlat[static_cast<std::size_t>(j)] = clampd(
                -g.klat * (me.t - nearest_lane_center(me.t, cfg.n_lanes,
                                                      cfg.lane_width)),
                -1.0, 1.0);
        }

        // Synchronous update: all controls above read the pre-step state.
        for (int i = 0; i < n; ++i) {
            auto& b = veh[static_cast<std::size_t>(i)];
            b.s += b.v * cfg.dt;
            b.t += vlat[static_cast<std::size_t>(i)] * cfg.dt;
            b.v = std::max(0.0, b.v + accel[static_cast<std::size_t>(i)] * cfg.dt);
            b.v_lat = vlat[static_cast<std::size_t>(i)];
        }
        trace.frames.push_back({(k + 1) * cfg.dt, veh});
    }

    if (!trace.collided)
        for (int j = 1; j < n && !trace.collided; ++j)
            trace.collided = boxes_touch(veh[0], veh[static_cast<std::size_t>(j)],
                                         cfg.veh_length, cfg.veh_width);

    trace.min_ttc = min_ttc(trace);
    return trace;
}

ObjectiveFn make_highway_min_ttc(SimConfig cfg) {
    return [cfg](const std::vector<double>&,
                 const std::vector<double>& scenario) -> double {
        return simulate_highway(cfg, scenario).min_ttc;
    };
}

}  // namespace riskeval
