#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "riskeval/rng.hpp"

namespace riskeval {

// A scenario space is an ordered list of named coordinates, each carrying a
// sampling law. Sampling happens in an unconstrained latent space: every law
// consumes a fixed number of standard normal latents and maps them through
// its own quantile transform, so the product measure over latents is N(0, I)
// regardless of how exotic the scenario-side laws are. All estimators work
// on latents; scenarios are what simulators consume.

struct UniformScaledLaw {
    double lo = 0.0;
    double hi = 1.0;
};

struct BetaScaledLaw {
    double alpha = 2.0;
    double beta = 2.0;
    double scale = 1.0;
    double offset = 0.0;
};

// k-variate normal. `chol` is the lower Cholesky factor of `cov`, computed
// once at validation time.
struct NormalMvLaw {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    Eigen::MatrixXd chol;
};

// Two-branch scaled beta: one latent picks the branch (branch `a` iff its
// uniform image is strictly below `threshold`), a second latent drives the
// shared beta draw.
struct MixtureIndicatorLaw {
    double alpha = 2.0;
    double beta = 2.0;
    double scale_a = 1.0;
    double offset_a = 0.0;
    double scale_b = 1.0;
    double offset_b = 0.0;
    double threshold = 0.5;
};

// Derived coordinate, zero latents. The only formula so far is "gate_ge":
// value = source * 1{source >= threshold}.
struct DeterministicLaw {
    std::string formula;
    std::vector<std::string> sources;
    double threshold = 0.0;
};

using LawSpec = std::variant<UniformScaledLaw, BetaScaledLaw, NormalMvLaw,
                             MixtureIndicatorLaw, DeterministicLaw>;

struct CoordSpec {
    std::string name;
    LawSpec law;
};

std::size_t law_latent_dim(const LawSpec& law);
std::size_t law_param_dim(const LawSpec& law);

class ParamSpace {
  public:
    // Validates and indexes the coordinate list. Throws std::invalid_argument
    // with the offending coordinate named on any inconsistency.
    explicit ParamSpace(std::vector<CoordSpec> coords);

    // Parses the `space` array of a config document (strict: unknown fields
    // are errors).
    static ParamSpace from_json(const nlohmann::json& spec);

    std::size_t latent_dim() const { return latent_dim_; }
    std::size_t param_dim() const { return param_dim_; }
    const std::vector<CoordSpec>& coords() const { return coords_; }

    // Deterministic latent -> scenario map. Total for finite latents: a
    // latent far in a tail saturates at the corresponding support endpoint.
    std::vector<double> to_params(const std::vector<double>& latent) const;

    // Draws one latent point (latent_dim standard normals, in coordinate
    // order) from the given stream.
    std::vector<double> sample_latent(Stream& stream) const;

    // log density of the latent product measure N(0, I) at `latent`.
    double log_density_latent(const std::vector<double>& latent) const;

    // (offset, length) of a named coordinate inside the scenario vector.
    std::pair<std::size_t, std::size_t> param_span(const std::string& name) const;

  private:
    std::vector<CoordSpec> coords_;
    std::vector<std::size_t> latent_off_;
    std::vector<std::size_t> param_off_;
    std::vector<std::vector<std::size_t>> source_params_;
    std::size_t latent_dim_ = 0;
    std::size_t param_dim_ = 0;
};

}  // namespace riskeval
