#pragma once

#include <functional>
#include <vector>

namespace riskeval {

// An objective scores one scenario; smaller is worse and the failure event
// is {f < gamma}. Objectives are pure functions of their inputs, which is
// what makes results independent of worker count and backend.
using ObjectiveFn =
    std::function<double(const std::vector<double>& latent,
                         const std::vector<double>& scenario)>;

// Benchmark objective on the latent point itself: f(u) = <c, u> / |c|, so
// the failure probability at level gamma is exactly the standard normal CDF
// of gamma, for any direction c != 0.
ObjectiveFn make_gaussian_linear(std::vector<double> direction);

// Axis-aligned box following a straight path: s along the road, t lateral,
// with independent speeds on both axes.
struct BoxState {
    double s = 0.0;
    double t = 0.0;
    double v = 0.0;
    double v_lat = 0.0;
};

struct Frame {
    double time = 0.0;
    std::vector<BoxState> vehicles;
};

struct RolloutTrace {
    double dt = 0.0;
    double veh_length = 0.0;
    double veh_width = 0.0;
    double ttc_cap = 0.0;
    bool collided = false;
    double min_ttc = 0.0;
    std::vector<Frame> frames;
};

// First time two constant-velocity boxes touch, assuming both hold their
// current velocities. `half_sum_length` / `half_sum_width` are the sums of
// the half extents on each axis. Returns a value in [0, cap]: 0 if already
// touching, cap if contact never happens before cap.
double instantaneous_ttc(const BoxState& a, const BoxState& b,
                         double half_sum_length, double half_sum_width,
                         double cap);

// Minimum over all recorded frames and all non-ego vehicles of the
// instantaneous ttc against the ego (vehicle 0).
double min_ttc(const RolloutTrace& trace);

struct WeatherNoiseModel {
    double base = 0.02;
    double sun = 0.05;
    double rain = 0.25;
    double ground = 0.10;
};

struct SimConfig {
    int n_vehicles = 6;
    double dt = 0.05;
    double horizon = 10.0;
    double ttc_cap = 10.0;
    int n_lanes = 3;
    double lane_width = 3.7;
    double veh_length = 4.5;
    double veh_width = 2.0;
    double min_spawn_gap = 10.0;
    double sensor_range = 120.0;
    // Ego gap controller.
    double headway = 1.5;
    double standoff = 2.0;
    double max_accel = 2.5;
    double max_decel = 6.0;
    double k_gap = 0.2;
    double k_rel = 0.6;
    double k_speed = 0.5;
    double k_lat = 0.8;
    double rel_smoothing = 0.3;
    // Other traffic.
    double env_follow_range = 80.0;
    double env_max_accel = 2.5;
    double env_max_decel = 5.0;
    WeatherNoiseModel noise;
};

// Deterministic rollout of the scenario vector
//   [ground, sun, cloud, precip, (s, t, v) x n_vehicles, xi...]
// under a gap-keeping ego controller (vehicle 0) and feedback-driven other
// traffic whose gains are perturbed by the xi block. The ego's measured gap
// carries weather-dependent noise drawn from a stream keyed on the scenario
// bytes, so equal scenarios give bit-equal traces. Stops early on contact.
RolloutTrace simulate_highway(const SimConfig& cfg,
                              const std::vector<double>& scenario);

// Objective wrapper: min_ttc of the rollout.
ObjectiveFn make_highway_min_ttc(SimConfig cfg);

}  // namespace riskeval
