#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "riskeval/ams.hpp"
#include "riskeval/analysis.hpp"
#include "riskeval/estimate.hpp"

namespace riskeval {

// File formats for the pipeline handoffs. Field order is part of each
// format: rerunning a command must reproduce output files byte for byte, so
// every writer uses ordered documents and the library's round-trip number
// formatting. The only non-finite value these files can carry is a -inf
// log probability, stored as null.

nlohmann::ordered_json estimate_to_json(const Estimate& e);
Estimate estimate_from_json(const nlohmann::json& j);

nlohmann::ordered_json ams_result_to_json(const AmsResult& r);

nlohmann::ordered_json run_set_to_json(const RunSet& rs);
RunSet run_set_from_json(const nlohmann::json& j);

// One survivor particle of a splitting run: latent point, scenario point,
// objective value. Serialized one object per line with fields exactly
// {"id", "u", "x", "f"}.
struct FailureSample {
    std::int64_t id = 0;
    std::vector<double> u;
    std::vector<double> x;
    double f = 0.0;
};

void write_failure_samples(std::ostream& out,
                           const std::vector<Particle>& particles);
std::vector<FailureSample> read_failure_samples(std::istream& in);

// Column views of a sample file: scenario coordinates for projection,
// latent coordinates for likelihoods under a flow.
FailureSet scenario_matrix(const std::vector<FailureSample>& samples);
std::vector<std::vector<double>> latent_matrix(
    const std::vector<FailureSample>& samples);

// Per-scenario-coordinate names for a space: a coordinate spanning several
// scenario slots gets an index suffix.
std::vector<std::string> scenario_feature_names(const ParamSpace& space);

// Record of one CLI invocation, written next to the outputs it lists.
struct RunManifest {
    std::string subcommand;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string version;
    std::string started_at;
    std::string finished_at;
    std::vector<std::string> argv;
    std::vector<std::string> outputs;
};

nlohmann::ordered_json manifest_to_json(const RunManifest& m);

std::string iso8601_utc_now();

// Writes via a temporary file in the target directory plus rename, so
// readers never observe a half-written file.
void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace riskeval
