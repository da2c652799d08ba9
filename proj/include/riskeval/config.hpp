#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "riskeval/objectives.hpp"
#include "riskeval/param_space.hpp"

namespace riskeval {

// A run configuration couples a scenario space with the objective evaluated
// on its points. The document shape is
//   { "space": [...coordinates...],
//     "objective": { "kind": "gaussian_linear", "direction": [...] } }
// or
//   { "objective": { "kind": "highway", "sim": { ...overrides... } } }
// Parsing is strict: unknown fields anywhere are errors.
struct Config {
    ParamSpace space;
    std::string objective_kind;
    // gaussian_linear: unit-normalized later, must match the latent
    // dimension.
    std::vector<double> direction;
    // highway: defaults plus any overrides from the document.
    SimConfig sim;
};

Config parse_config(const nlohmann::json& doc);
Config load_config(const std::string& path);

ObjectiveFn make_objective(const Config& cfg);

}  // namespace riskeval
