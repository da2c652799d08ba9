#include "riskeval/param_space.hpp"

#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "riskeval/stats.hpp"

namespace riskeval {

namespace {

[[noreturn]] void fail(const std::string& coord, const std::string& what) {
    throw std::invalid_argument("coordinate '" + coord + "': " + what);
}

void require_finite(const std::string& coord, double v, const char* field) {
    if (!std::isfinite(v)) fail(coord, std::string(field) + " must be finite");
}

}  // namespace

std::size_t law_latent_dim(const LawSpec& law) {
    return std::visit(
        [](const auto& l) -> std::size_t {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, NormalMvLaw>)
                return static_cast<std::size_t>(l.mean.size());
            else if constexpr (std::is_same_v<T, MixtureIndicatorLaw>)
                return 2;
            else if constexpr (std::is_same_v<T, DeterministicLaw>)
                return 0;
            else
                return 1;
        },
        law);
}

std::size_t law_param_dim(const LawSpec& law) {
    if (const auto* mv = std::get_if<NormalMvLaw>(&law))
        return static_cast<std::size_t>(mv->mean.size());
    return 1;
}

ParamSpace::ParamSpace(std::vector<CoordSpec> coords) : coords_(std::move(coords)) {
    if (coords_.empty())
        throw std::invalid_argument("parameter space: no coordinates given");

    std::unordered_map<std::string, std::size_t> by_name;
    latent_off_.reserve(coords_.size());
    param_off_.reserve(coords_.size());
    source_params_.resize(coords_.size());

    for (std::size_t i = 0; i < coords_.size(); ++i) {
        const auto& c = coords_[i];
        if (c.name.empty()) fail("#" + std::to_string(i), "empty name");
        if (!by_name.emplace(c.name, i).second) fail(c.name, "duplicate name");

        if (const auto* u = std::get_if<UniformScaledLaw>(&c.law)) {
            require_finite(c.name, u->lo, "lo");
            require_finite(c.name, u->hi, "hi");
            if (!(u->hi > u->lo)) fail(c.name, "requires hi > lo");
        } else if (const auto* b = std::get_if<BetaScaledLaw>(&c.law)) {
            require_finite(c.name, b->scale, "scale");
            require_finite(c.name, b->offset, "offset");
            if (!(b->alpha > 0.0) || !(b->beta > 0.0))
                fail(c.name, "beta shapes must be positive");
            if (!(b->scale > 0.0)) fail(c.name, "scale must be positive");
        } else if (const auto* m = std::get_if<MixtureIndicatorLaw>(&c.law)) {
            if (!(m->alpha > 0.0) || !(m->beta > 0.0))
                fail(c.name, "beta shapes must be positive");
            if (!(m->scale_a > 0.0) || !(m->scale_b > 0.0))
                fail(c.name, "branch scales must be positive");
            if (!(m->threshold >= 0.0 && m->threshold <= 1.0))
                fail(c.name, "threshold must lie in [0, 1]");
        } else if (const auto* d = std::get_if<DeterministicLaw>(&c.law)) {
            if (d->formula != "gate_ge") fail(c.name, "unknown formula '" + d->formula + "'");
            if (d->sources.size() != 1)
                fail(c.name, "gate_ge takes exactly one source");
            require_finite(c.name, d->threshold, "threshold");
            for (const auto& src : d->sources) {
                const auto it = by_name.find(src);
                if (it == by_name.end() || it->second >= i)
                    fail(c.name, "source '" + src + "' must name an earlier coordinate");
                if (law_param_dim(coords_[it->second].law) != 1)
                    fail(c.name, "source '" + src + "' must be scalar");
                source_params_[i].push_back(param_off_[it->second]);
            }
        } else if (auto* mv = std::get_if<NormalMvLaw>(&coords_[i].law)) {
            const auto k = mv->mean.size();
            if (k < 1) fail(c.name, "dimension must be at least 1");
            if (mv->cov.rows() != k || mv->cov.cols() != k)
                fail(c.name, "covariance shape does not match mean");
            if (!mv->mean.allFinite() || !mv->cov.allFinite())
                fail(c.name, "mean and covariance must be finite");
            if (!mv->cov.isApprox(mv->cov.transpose(), 1e-12))
                fail(c.name, "covariance must be symmetric");
            Eigen::LLT<Eigen::MatrixXd> llt(mv->cov);
            if (llt.info() != Eigen::Success)
                fail(c.name, "covariance is not positive definite");
            mv->chol = llt.matrixL();
        }

        latent_off_.push_back(latent_dim_);
        param_off_.push_back(param_dim_);
        latent_dim_ += law_latent_dim(c.law);
        param_dim_ += law_param_dim(c.law);
    }

    if (latent_dim_ == 0)
        throw std::invalid_argument(
            "parameter space: needs at least one stochastic coordinate");
}

std::vector<double> ParamSpace::to_params(const std::vector<double>& latent) const {
    if (latent.size() != latent_dim_)
        throw std::invalid_argument("to_params: latent has dimension " +
                                    std::to_string(latent.size()) + ", expected " +
                                    std::to_string(latent_dim_));

    std::vector<double> out(param_dim_);
    for (std::size_t i = 0; i < coords_.size(); ++i) {
        const double* z = latent.data() + latent_off_[i];
        double* p = out.data() + param_off_[i];

        if (const auto* u = std::get_if<UniformScaledLaw>(&coords_[i].law)) {
            p[0] = u->lo + normal_cdf(z[0]) * (u->hi - u->lo);
        } else if (const auto* b = std::get_if<BetaScaledLaw>(&coords_[i].law)) {
            p[0] = b->offset + b->scale * beta_quantile(normal_cdf(z[0]), b->alpha, b->beta);
        } else if (const auto* m = std::get_if<MixtureIndicatorLaw>(&coords_[i].law)) {
            const double pick = normal_cdf(z[0]);
            const double body = beta_quantile(normal_cdf(z[1]), m->alpha, m->beta);
            p[0] = (pick < m->threshold) ? m->offset_a + m->scale_a * body
                                         : m->offset_b + m->scale_b * body;
        } else if (const auto* d = std::get_if<DeterministicLaw>(&coords_[i].law)) {
            const double src = out[source_params_[i][0]];
            p[0] = (src >= d->threshold) ? src : 0.0;
        } else {
            const auto& mv = std::get<NormalMvLaw>(coords_[i].law);
            const auto k = mv.mean.size();
            Eigen::Map<const Eigen::VectorXd> zv(z, k);
            Eigen::Map<Eigen::VectorXd>(p, k) =
                mv.mean + mv.chol * zv;
        }
    }
    return out;
}

std::vector<double> ParamSpace::sample_latent(Stream& stream) const {
    std::vector<double> latent(latent_dim_);
    for (auto& z : latent) z = stream.normal();
    return latent;
}

double ParamSpace::log_density_latent(const std::vector<double>& latent) const {
    if (latent.size() != latent_dim_)
        throw std::invalid_argument("log_density_latent: dimension mismatch");
    double ll = 0.0;
    for (const double z : latent) ll += log_normal_pdf(z);
    return ll;
}

std::pair<std::size_t, std::size_t> ParamSpace::param_span(
    const std::string& name) const {
    for (std::size_t i = 0; i < coords_.size(); ++i)
        if (coords_[i].name == name)
            return {param_off_[i], law_param_dim(coords_[i].law)};
    throw std::invalid_argument("param_span: no coordinate named '" + name + "'");
}

namespace {

using nlohmann::json;

double num_field(const json& obj, const std::string& coord, const char* key,
                 double fallback, bool required = false) {
    if (!obj.contains(key)) {
        if (required) fail(coord, std::string("missing field '") + key + "'");
        return fallback;
    }
    if (!obj[key].is_number()) fail(coord, std::string("field '") + key + "' must be a number");
    return obj[key].get<double>();
}

void check_keys(const json& obj, const std::string& coord,
                const std::set<std::string>& allowed) {
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key)) fail(coord, "unknown field '" + key + "'");
}

Eigen::MatrixXd parse_cov(const json& cov, const std::string& coord,
                          Eigen::Index dim) {
    if (cov.is_number()) {
        const double v = cov.get<double>();
        return v * Eigen::MatrixXd::Identity(dim, dim);
    }
    if (cov.is_array() && !cov.empty() && cov[0].is_array()) {
        Eigen::MatrixXd m(cov.size(), cov[0].size());
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            const auto& row = cov[static_cast<std::size_t>(r)];
            if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != m.cols())
                fail(coord, "covariance rows must have equal length");
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
        return m;
    }
    if (cov.is_array()) {
        Eigen::VectorXd d(cov.size());
        for (std::size_t i = 0; i < cov.size(); ++i) d[static_cast<Eigen::Index>(i)] = cov[i].get<double>();
        return d.asDiagonal();
    }
    fail(coord, "covariance must be a scalar, a diagonal array, or a matrix");
}

LawSpec parse_law(const json& obj, const std::string& coord) {
    if (!obj.contains("law") || !obj["law"].is_string())
        fail(coord, "missing field 'law'");
    const std::string law = obj["law"].get<std::string>();

    if (law == "uniform_scaled") {
        check_keys(obj, coord, {"name", "law", "lo", "hi"});
        return UniformScaledLaw{num_field(obj, coord, "lo", 0.0),
                                num_field(obj, coord, "hi", 0.0, true)};
    }
    if (law == "beta_scaled") {
        check_keys(obj, coord, {"name", "law", "alpha", "beta", "scale", "offset"});
        return BetaScaledLaw{num_field(obj, coord, "alpha", 2.0),
                             num_field(obj, coord, "beta", 2.0),
                             num_field(obj, coord, "scale", 0.0, true),
                             num_field(obj, coord, "offset", 0.0)};
    }
    if (law == "mixture_indicator") {
        check_keys(obj, coord,
                   {"name", "law", "alpha", "beta", "scale_a", "offset_a",
                    "scale_b", "offset_b", "threshold"});
        return MixtureIndicatorLaw{num_field(obj, coord, "alpha", 2.0),
                                   num_field(obj, coord, "beta", 2.0),
                                   num_field(obj, coord, "scale_a", 0.0, true),
                                   num_field(obj, coord, "offset_a", 0.0),
                                   num_field(obj, coord, "scale_b", 0.0, true),
                                   num_field(obj, coord, "offset_b", 0.0),
                                   num_field(obj, coord, "threshold", 0.5)};
    }
    if (law == "deterministic") {
        check_keys(obj, coord, {"name", "law", "formula", "sources", "threshold"});
        DeterministicLaw d;
        if (!obj.contains("formula") || !obj["formula"].is_string())
            fail(coord, "missing field 'formula'");
        d.formula = obj["formula"].get<std::string>();
        if (!obj.contains("sources") || !obj["sources"].is_array())
            fail(coord, "missing field 'sources'");
        for (const auto& s : obj["sources"]) d.sources.push_back(s.get<std::string>());
        d.threshold = num_field(obj, coord, "threshold", 0.0, true);
        return d;
    }
    if (law == "normal_mv") {
        check_keys(obj, coord, {"name", "law", "dim", "mean", "cov"});
        Eigen::Index dim = -1;
        if (obj.contains("dim")) {
            if (!obj["dim"].is_number_unsigned()) fail(coord, "'dim' must be a positive integer");
            dim = obj["dim"].get<Eigen::Index>();
        }
        if (obj.contains("mean") && obj["mean"].is_array() && dim < 0)
            dim = static_cast<Eigen::Index>(obj["mean"].size());
        if (obj.contains("cov") && obj["cov"].is_array() && dim < 0)
            dim = static_cast<Eigen::Index>(obj["cov"].size());
        if (dim < 1) fail(coord, "cannot infer dimension; give 'dim' or an array");

        NormalMvLaw mv;
        mv.mean = Eigen::VectorXd::Zero(dim);
        if (obj.contains("mean")) {
            if (obj["mean"].is_number())
                mv.mean.setConstant(obj["mean"].get<double>());
            else if (obj["mean"].is_array()) {
                if (static_cast<Eigen::Index>(obj["mean"].size()) != dim)
                    fail(coord, "'mean' length does not match dimension");
                for (Eigen::Index i = 0; i < dim; ++i)
                    mv.mean[i] = obj["mean"][static_cast<std::size_t>(i)].get<double>();
            } else
                fail(coord, "'mean' must be a number or an array");
        }
        mv.cov = obj.contains("cov") ? parse_cov(obj["cov"], coord, dim)
                                     : Eigen::MatrixXd::Identity(dim, dim);
        if (mv.cov.rows() != dim) fail(coord, "covariance size does not match dimension");
        return mv;
    }
    fail(coord, "unknown law '" + law + "'");
}

}  // namespace

ParamSpace ParamSpace::from_json(const nlohmann::json& spec) {
    if (!spec.is_array())
        throw std::invalid_argument("parameter space: 'space' must be an array");
    std::vector<CoordSpec> coords;
    coords.reserve(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto& obj = spec[i];
        if (!obj.is_object()) fail("#" + std::to_string(i), "must be an object");
        if (!obj.contains("name") || !obj["name"].is_string())
            fail("#" + std::to_string(i), "missing field 'name'");
        const std::string name = obj["name"].get<std::string>();
        coords.push_back({name, parse_law(obj, name)});
    }
    return ParamSpace(std::move(coords));
}

}  // namespace riskeval
