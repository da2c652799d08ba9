#include "riskeval/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "riskeval/stats.hpp"

namespace riskeval {

namespace {

constexpr double kLogTwoPi = 1.8378770664093455;
constexpr double kScaleFloor = 1e-8;
constexpr std::uint64_t kChunk = 8192;
constexpr int kModelVersion = 1;

void check_finite_point(const std::vector<double>& v, std::size_t dim,
                        const char* what) {
    if (v.size() != dim)
        throw std::invalid_argument(std::string(what) +
                                    ": dimension mismatch");
    for (const double x : v)
        if (!std::isfinite(x))
            throw std::invalid_argument(std::string(what) +
                                        ": non-finite input");
}

nlohmann::json mat_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& j, Eigen::Index rows,
                              Eigen::Index cols, const char* name) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw std::invalid_argument(std::string("flow model: field '") + name +
                                    "' has the wrong shape");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw std::invalid_argument(std::string("flow model: field '") +
                                        name + "' has the wrong shape");
        for (Eigen::Index c = 0; c < cols; ++c) {
            const auto& v = row[static_cast<std::size_t>(c)];
            if (!v.is_number())
                throw std::invalid_argument(std::string("flow model: field '") +
                                            name + "' must hold numbers");
            m(r, c) = v.get<double>();
        }
    }
    return m;
}

Eigen::VectorXd vec_from_json(const nlohmann::json& j, Eigen::Index size,
                              const char* name) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size)
        throw std::invalid_argument(std::string("flow model: field '") + name +
                                    "' has the wrong shape");
    Eigen::VectorXd v(size);
    for (Eigen::Index i = 0; i < size; ++i) {
        const auto& x = j[static_cast<std::size_t>(i)];
        if (!x.is_number())
            throw std::invalid_argument(std::string("flow model: field '") +
                                        name + "' must hold numbers");
        v(i) = x.get<double>();
    }
    return v;
}

void check_keys(const nlohmann::json& j,
                std::initializer_list<const char*> allowed,
                const char* what) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
                return key == a;
            }) == allowed.end())
            throw std::invalid_argument(std::string(what) +
                                        ": unknown field '" + key + "'");
    }
}

const nlohmann::json& need(const nlohmann::json& j, const char* key,
                           const char* what) {
    const auto it = j.find(key);
    if (it == j.end())
        throw std::invalid_argument(std::string(what) + ": missing field '" +
                                    key + "'");
    return *it;
}

// NaN losses from an aborted fit have no JSON number; they round-trip as null.
nlohmann::json loss_to_json(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

double loss_from_json(const nlohmann::json& j) {
    if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!j.is_number())
        throw std::invalid_argument("flow model: history losses must be "
                                    "numbers or null");
    return j.get<double>();
}

}  // namespace

struct FlowModel::LayerCache {
    Eigen::MatrixXd a, h1, h2, th_r, exp_neg_s, xb_out;
};

FlowModel FlowModel::init(std::size_t dim, const FlowConfig& cfg) {
    if (dim < 2)
        throw std::invalid_argument("flow: needs at least 2 dimensions");
    if (cfg.n_layers < 1)
        throw std::invalid_argument("flow: needs at least one layer");
    if (cfg.hidden1 < 1 || cfg.hidden2 < 1)
        throw std::invalid_argument("flow: hidden widths must be positive");
    if (!(cfg.s_max > 0.0))
        throw std::invalid_argument("flow: s_max must be positive");

    FlowModel m;
    m.dim_ = dim;
    m.s_max_ = cfg.s_max;
    m.mean_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
    m.scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(dim));
    m.layers_.reserve(static_cast<std::size_t>(cfg.n_layers));
    for (int k = 0; k < cfg.n_layers; ++k) {
        Layer layer;
        for (std::size_t i = 0; i < dim; ++i)
            (static_cast<int>(i % 2) == k % 2 ? layer.passive : layer.active)
                .push_back(static_cast<int>(i));
        const auto na = static_cast<Eigen::Index>(layer.passive.size());
        const auto nb = static_cast<Eigen::Index>(layer.active.size());

        Stream rng(derive_seed(cfg.seed, {stream_tag::kFlowInit,
                                          static_cast<std::uint64_t>(k)}));
        const double g1 = 1.0 / std::sqrt(static_cast<double>(na));
        layer.w1 = Eigen::MatrixXd(cfg.hidden1, na);
        for (Eigen::Index r = 0; r < layer.w1.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.w1.cols(); ++c)
                layer.w1(r, c) = g1 * rng.normal();
        layer.b1 = Eigen::VectorXd::Zero(cfg.hidden1);
        const double g2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden1));
        layer.w2 = Eigen::MatrixXd(cfg.hidden2, cfg.hidden1);
        for (Eigen::Index r = 0; r < layer.w2.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.w2.cols(); ++c)
                layer.w2(r, c) = g2 * rng.normal();
        layer.b2 = Eigen::VectorXd::Zero(cfg.hidden2);
        // Zero output layer: scale 1, shift 0, so the fresh flow is exactly
        // the base normal and training starts from a valid density.
        layer.w3 = Eigen::MatrixXd::Zero(2 * nb, cfg.hidden2);
        layer.b3 = Eigen::VectorXd::Zero(2 * nb);
        m.layers_.push_back(std::move(layer));
    }
    return m;
}

void FlowModel::conditioner(const Layer& layer, const Eigen::MatrixXd& a,
                            Eigen::MatrixXd& h1, Eigen::MatrixXd& h2,
                            Eigen::MatrixXd& th_r, Eigen::MatrixXd& t) const {
    h1 = ((layer.w1 * a).colwise() + layer.b1).array().tanh().matrix();
    h2 = ((layer.w2 * h1).colwise() + layer.b2).array().tanh().matrix();
    const Eigen::MatrixXd o = ((layer.w3 * h2).colwise() + layer.b3);
    const auto nb = static_cast<Eigen::Index>(layer.active.size());
    th_r = o.topRows(nb).array().tanh().matrix();
    t = o.bottomRows(nb);
}

Eigen::MatrixXd FlowModel::standardize(const Eigen::MatrixXd& y) const {
    Eigen::MatrixXd x = y.colwise() - mean_;
    x.array().colwise() /= scale_.array();
    return x;
}

double FlowModel::batch_nll(const Eigen::MatrixXd& y,
                            std::vector<LayerCache>* caches,
                            Eigen::MatrixXd* z_out) const {
    const Eigen::Index n = y.cols();
    Eigen::MatrixXd x = standardize(y);
    Eigen::RowVectorXd sum_s = Eigen::RowVectorXd::Zero(n);
    if (caches) caches->resize(layers_.size());

    for (std::size_t k = layers_.size(); k-- > 0;) {
        const Layer& layer = layers_[k];
        Eigen::MatrixXd a = x(layer.passive, Eigen::all);
        Eigen::MatrixXd h1, h2, th_r, t;
        conditioner(layer, a, h1, h2, th_r, t);
        const Eigen::MatrixXd s = s_max_ * th_r;
        Eigen::MatrixXd exp_neg_s = (-s.array()).exp().matrix();
        Eigen::MatrixXd xb_out =
            ((x(layer.active, Eigen::all) - t).array() * exp_neg_s.array())
                .matrix();
        x(layer.active, Eigen::all) = xb_out;
        sum_s += s.colwise().sum();
        if (caches)
            (*caches)[k] = {std::move(a),        std::move(h1),
                            std::move(h2),       std::move(th_r),
                            std::move(exp_neg_s), std::move(xb_out)};
    }

    double total = 0.0;
    for (Eigen::Index c = 0; c < n; ++c)
        total += 0.5 * x.col(c).squaredNorm() + sum_s(c);
    total += static_cast<double>(n) *
             (0.5 * static_cast<double>(dim_) * kLogTwoPi +
              scale_.array().log().sum());
    if (z_out) *z_out = std::move(x);
    return total / static_cast<double>(n);
}

double FlowModel::batch_nll_grad(const Eigen::MatrixXd& y,
                                 std::vector<double>& grad) const {
    std::vector<LayerCache> caches;
    Eigen::MatrixXd z;
    const double nll = batch_nll(y, &caches, &z);
    const double n = static_cast<double>(y.cols());

    std::size_t count = 0;
    for (const auto& layer : layers_)
        count += static_cast<std::size_t>(layer.w1.size() + layer.b1.size() +
                                          layer.w2.size() + layer.b2.size() +
                                          layer.w3.size() + layer.b3.size());
    grad.assign(count, 0.0);
    double* out = grad.data();
    const auto put_mat = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) *out++ = m(r, c) / n;
    };
    const auto put_vec = [&](const Eigen::VectorXd& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) *out++ = v(i) / n;
    };

    // The inverse pass above ran layers K-1..0, so the chain rule unwinds
    // them in index order; that matches the flat parameter layout exactly.
    Eigen::MatrixXd g = std::move(z);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const Layer& layer = layers_[k];
        const LayerCache& c = caches[k];
        const auto nb = static_cast<Eigen::Index>(layer.active.size());

        const Eigen::MatrixXd gb = g(layer.active, Eigen::all);
        // d(out_b)/ds = -out_b and the Jacobian term adds +1 per active
        // coordinate; d(out_b)/dt = -exp(-s).
        Eigen::MatrixXd d_out(2 * nb, gb.cols());
        d_out.topRows(nb) =
            ((1.0 - gb.array() * c.xb_out.array()) * s_max_ *
             (1.0 - c.th_r.array().square()))
                .matrix();
        d_out.bottomRows(nb) = (-(gb.array() * c.exp_neg_s.array())).matrix();

        const Eigen::MatrixXd gw3 = d_out * c.h2.transpose();
        const Eigen::VectorXd gb3 = d_out.rowwise().sum();
        const Eigen::MatrixXd dz2 =
            ((layer.w3.transpose() * d_out).array() *
             (1.0 - c.h2.array().square()))
                .matrix();
        const Eigen::MatrixXd gw2 = dz2 * c.h1.transpose();
        const Eigen::VectorXd gb2 = dz2.rowwise().sum();
        const Eigen::MatrixXd dz1 =
            ((layer.w2.transpose() * dz2).array() *
             (1.0 - c.h1.array().square()))
                .matrix();
        const Eigen::MatrixXd gw1 = dz1 * c.a.transpose();
        const Eigen::VectorXd gb1 = dz1.rowwise().sum();
        const Eigen::MatrixXd da = layer.w1.transpose() * dz1;

        g(layer.active, Eigen::all) =
            (gb.array() * c.exp_neg_s.array()).matrix();
        g(layer.passive, Eigen::all) = g(layer.passive, Eigen::all) + da;

        put_mat(gw1);
        put_vec(gb1);
        put_mat(gw2);
        put_vec(gb2);
        put_mat(gw3);
        put_vec(gb3);
    }
    return nll;
}

std::vector<double> FlowModel::forward(const std::vector<double>& z) const {
    check_finite_point(z, dim_, "flow forward");
    Eigen::VectorXd x =
        Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
    for (const auto& layer : layers_) {
        const auto nb = static_cast<Eigen::Index>(layer.active.size());
        Eigen::VectorXd a(layer.passive.size());
        for (std::size_t i = 0; i < layer.passive.size(); ++i)
            a(static_cast<Eigen::Index>(i)) = x(layer.passive[i]);
        const Eigen::VectorXd h1 =
            ((layer.w1 * a) + layer.b1).array().tanh().matrix();
        const Eigen::VectorXd h2 =
            ((layer.w2 * h1) + layer.b2).array().tanh().matrix();
        const Eigen::VectorXd o = (layer.w3 * h2) + layer.b3;
        for (Eigen::Index j = 0; j < nb; ++j) {
            const double s = s_max_ * std::tanh(o(j));
            const int idx = layer.active[static_cast<std::size_t>(j)];
            x(idx) = x(idx) * std::exp(s) + o(nb + j);
        }
    }
    std::vector<double> y(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
        const auto e = static_cast<Eigen::Index>(i);
        y[i] = mean_(e) + scale_(e) * x(e);
    }
    return y;
}

std::vector<double> FlowModel::inverse(const std::vector<double>& y) const {
    check_finite_point(y, dim_, "flow inverse");
    Eigen::MatrixXd ym(static_cast<Eigen::Index>(dim_), 1);
    for (std::size_t i = 0; i < dim_; ++i)
        ym(static_cast<Eigen::Index>(i), 0) = y[i];
    Eigen::MatrixXd z;
    batch_nll(ym, nullptr, &z);
    return std::vector<double>(z.data(), z.data() + z.rows());
}

double FlowModel::log_prob(const std::vector<double>& y) const {
    check_finite_point(y, dim_, "flow log_prob");
    Eigen::MatrixXd ym(static_cast<Eigen::Index>(dim_), 1);
    for (std::size_t i = 0; i < dim_; ++i)
        ym(static_cast<Eigen::Index>(i), 0) = y[i];
    return -batch_nll(ym, nullptr, nullptr);
}

std::vector<double> FlowModel::sample(Stream& stream) const {
    std::vector<double> z(dim_);
    for (auto& v : z) v = stream.normal();
    return forward(z);
}

std::vector<double> FlowModel::flat_params() const {
    std::vector<double> theta;
    for (const auto& layer : layers_) {
        const auto push_mat = [&](const Eigen::MatrixXd& m) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    theta.push_back(m(r, c));
        };
        const auto push_vec = [&](const Eigen::VectorXd& v) {
            for (Eigen::Index i = 0; i < v.size(); ++i) theta.push_back(v(i));
        };
        push_mat(layer.w1);
        push_vec(layer.b1);
        push_mat(layer.w2);
        push_vec(layer.b2);
        push_mat(layer.w3);
        push_vec(layer.b3);
    }
    return theta;
}

void FlowModel::set_flat_params(const std::vector<double>& theta) {
    std::size_t pos = 0;
    const auto pull_mat = [&](Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = theta[pos++];
    };
    const auto pull_vec = [&](Eigen::VectorXd& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = theta[pos++];
    };
    std::size_t count = 0;
    for (const auto& layer : layers_)
        count += static_cast<std::size_t>(layer.w1.size() + layer.b1.size() +
                                          layer.w2.size() + layer.b2.size() +
                                          layer.w3.size() + layer.b3.size());
    if (theta.size() != count)
        throw std::invalid_argument("flow: parameter vector size mismatch");
    for (auto& layer : layers_) {
        pull_mat(layer.w1);
        pull_vec(layer.b1);
        pull_mat(layer.w2);
        pull_vec(layer.b2);
        pull_mat(layer.w3);
        pull_vec(layer.b3);
    }
}

double FlowModel::mean_nll(const std::vector<std::vector<double>>& ys) const {
    if (ys.empty()) throw std::invalid_argument("flow: empty sample set");
    Eigen::MatrixXd y(static_cast<Eigen::Index>(dim_),
                      static_cast<Eigen::Index>(ys.size()));
    for (std::size_t c = 0; c < ys.size(); ++c) {
        check_finite_point(ys[c], dim_, "flow mean_nll");
        for (std::size_t r = 0; r < dim_; ++r)
            y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                ys[c][r];
    }
    return batch_nll(y, nullptr, nullptr);
}

std::vector<double> FlowModel::nll_gradient(
    const std::vector<std::vector<double>>& ys) const {
    if (ys.empty()) throw std::invalid_argument("flow: empty sample set");
    Eigen::MatrixXd y(static_cast<Eigen::Index>(dim_),
                      static_cast<Eigen::Index>(ys.size()));
    for (std::size_t c = 0; c < ys.size(); ++c) {
        check_finite_point(ys[c], dim_, "flow nll_gradient");
        for (std::size_t r = 0; r < dim_; ++r)
            y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                ys[c][r];
    }
    std::vector<double> grad;
    batch_nll_grad(y, grad);
    return grad;
}

void FlowModel::set_standardizer(std::vector<double> mean,
                                 std::vector<double> scale) {
    check_finite_point(mean, dim_, "flow standardizer mean");
    check_finite_point(scale, dim_, "flow standardizer scale");
    for (const double s : scale)
        if (!(s > 0.0))
            throw std::invalid_argument(
                "flow standardizer scale: entries must be positive");
    mean_ = Eigen::Map<const Eigen::VectorXd>(
        mean.data(), static_cast<Eigen::Index>(mean.size()));
    scale_ = Eigen::Map<const Eigen::VectorXd>(
        scale.data(), static_cast<Eigen::Index>(scale.size()));
}

nlohmann::json FlowModel::to_json() const {
    nlohmann::json j;
    j["format"] = "riskeval-flow";
    j["version"] = kModelVersion;
    j["dim"] = dim_;
    j["s_max"] = s_max_;
    j["mean"] = std::vector<double>(mean_.data(), mean_.data() + mean_.size());
    j["scale"] =
        std::vector<double>(scale_.data(), scale_.data() + scale_.size());
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : layers_) {
        nlohmann::json lj;
        lj["w1"] = mat_to_json(layer.w1);
        lj["b1"] = std::vector<double>(layer.b1.data(),
                                       layer.b1.data() + layer.b1.size());
        lj["w2"] = mat_to_json(layer.w2);
        lj["b2"] = std::vector<double>(layer.b2.data(),
                                       layer.b2.data() + layer.b2.size());
        lj["w3"] = mat_to_json(layer.w3);
        lj["b3"] = std::vector<double>(layer.b3.data(),
                                       layer.b3.data() + layer.b3.size());
        layers.push_back(std::move(lj));
    }
    j["layers"] = std::move(layers);
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& e : history_) {
        nlohmann::json ej;
        ej["epoch"] = e.epoch;
        ej["train_nll"] = loss_to_json(e.train_nll);
        ej["val_nll"] = loss_to_json(e.val_nll);
        hist.push_back(std::move(ej));
    }
    j["history"] = std::move(hist);
    return j;
}

FlowModel FlowModel::from_json(const nlohmann::json& j) {
    if (!j.is_object())
        throw std::invalid_argument("flow model: expected an object");
    check_keys(j,
               {"format", "version", "dim", "s_max", "mean", "scale", "layers",
                "history"},
               "flow model");
    if (need(j, "format", "flow model") != "riskeval-flow")
        throw std::invalid_argument("flow model: unrecognized format");
    if (need(j, "version", "flow model") != kModelVersion)
        throw std::invalid_argument("flow model: unsupported version");
    const auto dim = need(j, "dim", "flow model").get<std::size_t>();
    if (dim < 2) throw std::invalid_argument("flow model: dim must be >= 2");
    const auto s_max = need(j, "s_max", "flow model").get<double>();
    if (!(s_max > 0.0))
        throw std::invalid_argument("flow model: s_max must be positive");

    FlowModel m;
    m.dim_ = dim;
    m.s_max_ = s_max;
    const auto d = static_cast<Eigen::Index>(dim);
    m.mean_ = vec_from_json(need(j, "mean", "flow model"), d, "mean");
    m.scale_ = vec_from_json(need(j, "scale", "flow model"), d, "scale");
    for (Eigen::Index i = 0; i < d; ++i)
        if (!(m.scale_(i) > 0.0))
            throw std::invalid_argument("flow model: scale must be positive");

    const auto& layers = need(j, "layers", "flow model");
    if (!layers.is_array() || layers.empty())
        throw std::invalid_argument("flow model: needs at least one layer");
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& lj = layers[k];
        if (!lj.is_object())
            throw std::invalid_argument("flow model: layer must be an object");
        check_keys(lj, {"w1", "b1", "w2", "b2", "w3", "b3"}, "flow model");
        Layer layer;
        for (std::size_t i = 0; i < dim; ++i)
            (i % 2 == k % 2 ? layer.passive : layer.active)
                .push_back(static_cast<int>(i));
        const auto na = static_cast<Eigen::Index>(layer.passive.size());
        const auto nb = static_cast<Eigen::Index>(layer.active.size());
        const auto& w1j = need(lj, "w1", "flow model");
        if (!w1j.is_array() || w1j.empty())
            throw std::invalid_argument("flow model: field 'w1' has the wrong shape");
        const auto h1 = static_cast<Eigen::Index>(w1j.size());
        layer.w1 = mat_from_json(w1j, h1, na, "w1");
        layer.b1 = vec_from_json(need(lj, "b1", "flow model"), h1, "b1");
        const auto& w2j = need(lj, "w2", "flow model");
        if (!w2j.is_array() || w2j.empty())
            throw std::invalid_argument("flow model: field 'w2' has the wrong shape");
        const auto h2 = static_cast<Eigen::Index>(w2j.size());
        layer.w2 = mat_from_json(w2j, h2, h1, "w2");
        layer.b2 = vec_from_json(need(lj, "b2", "flow model"), h2, "b2");
        layer.w3 = mat_from_json(need(lj, "w3", "flow model"), 2 * nb, h2, "w3");
        layer.b3 = vec_from_json(need(lj, "b3", "flow model"), 2 * nb, "b3");
        m.layers_.push_back(std::move(layer));
    }

    const auto& hist = need(j, "history", "flow model");
    if (!hist.is_array())
        throw std::invalid_argument("flow model: history must be an array");
    for (const auto& ej : hist) {
        check_keys(ej, {"epoch", "train_nll", "val_nll"}, "flow model");
        EpochStat e;
        e.epoch = need(ej, "epoch", "flow model").get<int>();
        e.train_nll = loss_from_json(need(ej, "train_nll", "flow model"));
        e.val_nll = loss_from_json(need(ej, "val_nll", "flow model"));
        m.history_.push_back(e);
    }
    return m;
}

FlowModel fit_flow(const std::vector<std::vector<double>>& samples,
                   const FlowConfig& cfg) {
    if (samples.empty())
        throw std::invalid_argument("flow: no training samples");
    const std::size_t d = samples[0].size();
    if (d < 2)
        throw std::invalid_argument("flow: needs at least 2 dimensions");
    for (const auto& row : samples) {
        if (row.size() != d)
            throw std::invalid_argument("flow: ragged sample set");
        for (const double v : row)
            if (!std::isfinite(v))
                throw std::invalid_argument("flow: non-finite training sample");
    }
    if (cfg.epochs < 1)
        throw std::invalid_argument("flow: epochs must be positive");
    if (cfg.batch_size < 1)
        throw std::invalid_argument("flow: batch_size must be positive");
    if (!(cfg.learning_rate > 0.0))
        throw std::invalid_argument("flow: learning_rate must be positive");
    if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0))
        throw std::invalid_argument("flow: val_fraction must lie in [0, 1)");
    if (cfg.clip_norm < 0.0)
        throw std::invalid_argument("flow: clip_norm must be non-negative");

    const std::size_t n = samples.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Stream shuffle(derive_seed(cfg.seed, {stream_tag::kFlowShuffle}));
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[shuffle.below(i + 1)]);

    const auto n_val = static_cast<std::size_t>(
        std::floor(cfg.val_fraction * static_cast<double>(n)));
    const std::size_t n_train = n - n_val;

    const auto ed = static_cast<Eigen::Index>(d);
    Eigen::MatrixXd train(ed, static_cast<Eigen::Index>(n_train));
    Eigen::MatrixXd val(ed, static_cast<Eigen::Index>(n_val));
    for (std::size_t c = 0; c < n; ++c) {
        const auto& row = samples[order[c]];
        auto& dst = c < n_train ? train : val;
        const auto col = static_cast<Eigen::Index>(c < n_train ? c : c - n_train);
        for (std::size_t r = 0; r < d; ++r)
            dst(static_cast<Eigen::Index>(r), col) = row[r];
    }

    FlowModel model = FlowModel::init(d, cfg);
    model.mean_ = train.rowwise().mean();
    for (Eigen::Index r = 0; r < ed; ++r) {
        const double var = (train.row(r).array() - model.mean_(r))
                               .square()
                               .sum() /
                           static_cast<double>(n_train);
        model.scale_(r) = std::max(std::sqrt(var), kScaleFloor);
    }

    // Checkpoint baseline is the untrained model: an epoch must beat it on
    // validation to be kept, so a diverged fit still returns a sane density.
    std::vector<double> best = model.flat_params();
    double best_val = n_val > 0 ? model.batch_nll(val, nullptr, nullptr)
                                : model.batch_nll(train, nullptr, nullptr);
    std::vector<double> grad;
    std::vector<std::size_t> idx(n_train);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr =
            cfg.learning_rate / std::sqrt(static_cast<double>(epoch));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Stream es(derive_seed(cfg.seed, {stream_tag::kFlowShuffle,
                                         static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = n_train - 1; i > 0; --i)
            std::swap(idx[i], idx[es.below(i + 1)]);

        double loss_sum = 0.0;
        for (std::size_t lo = 0; lo < n_train;
             lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi =
                std::min(n_train, lo + static_cast<std::size_t>(cfg.batch_size));
            Eigen::MatrixXd batch(ed, static_cast<Eigen::Index>(hi - lo));
            for (std::size_t c = lo; c < hi; ++c)
                batch.col(static_cast<Eigen::Index>(c - lo)) =
                    train.col(static_cast<Eigen::Index>(idx[c]));
            const double nll = model.batch_nll_grad(batch, grad);
            loss_sum += nll * static_cast<double>(hi - lo);
            if (!std::isfinite(nll)) break;
            if (cfg.clip_norm > 0.0) {
                double norm2 = 0.0;
                for (const double gv : grad) norm2 += gv * gv;
                const double norm = std::sqrt(norm2);
                if (norm > cfg.clip_norm) {
                    const double shrink = cfg.clip_norm / norm;
                    for (auto& gv : grad) gv *= shrink;
                }
            }
            std::vector<double> theta = model.flat_params();
            for (std::size_t i = 0; i < theta.size(); ++i)
                theta[i] -= lr * grad[i];
            model.set_flat_params(theta);
        }

        const double train_nll = loss_sum / static_cast<double>(n_train);
        const double val_nll =
            n_val > 0 && std::isfinite(train_nll)
                ? model.batch_nll(val, nullptr, nullptr)
                : train_nll;
        model.history_.push_back({epoch, train_nll, val_nll});
        // Divergence leaves the best checkpoint in place rather than a
        // poisoned parameter set.
        if (!std::isfinite(train_nll) || !std::isfinite(val_nll)) break;
        if (val_nll < best_val) {
            best_val = val_nll;
            best = model.flat_params();
        }
    }
    model.set_flat_params(best);
    return model;
}

double mixture_log_weight(const FlowModel& flow, const std::vector<double>& u,
                          double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument(
            "mixture_log_weight: alpha must lie in [0, 1]");
    check_finite_point(u, flow.dim(), "mixture_log_weight");
    double log_phi = 0.0;
    for (const double x : u) log_phi += log_normal_pdf(x);
    if (alpha == 1.0) return 0.0;
    const double log_q = flow.log_prob(u);
    // Pure flow proposal: well-defined (the flow density is everywhere
    // positive) but with no defensive bound on the weights.
    if (alpha == 0.0) return log_phi - log_q;
    return log_phi - log_sum_exp(std::log(alpha) + log_phi,
                                 std::log1p(-alpha) + log_q);
}

Estimate estimate_importance(const ParamSpace& space, EvalPool& pool,
                             const FlowModel& flow, double gamma,
                             std::uint64_t n, double alpha,
                             std::uint64_t seed) {
    if (n == 0)
        throw std::invalid_argument("estimate_importance: n must be positive");
    if (!std::isfinite(gamma))
        throw std::invalid_argument(
            "estimate_importance: gamma must be finite");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument(
            "estimate_importance: alpha must lie in [0, 1]");
    if (flow.dim() != space.latent_dim())
        throw std::invalid_argument(
            "estimate_importance: flow dimension does not match the space");

    double sum_w = 0.0, sum_w2 = 0.0, sum_hw = 0.0, sum_hw2 = 0.0;
    std::uint64_t hits = 0;
    for (std::uint64_t lo = 0; lo < n; lo += kChunk) {
        const std::uint64_t hi = std::min(n, lo + kChunk);
        std::vector<EvalRequest> reqs;
        reqs.reserve(hi - lo);
        std::vector<double> weights(hi - lo);
        for (std::uint64_t i = lo; i < hi; ++i) {
            Stream draw(derive_seed(seed, {stream_tag::kImportance, i}));
            // Either branch consumes exactly dim() normals after the pick,
            // so draw i never depends on batching.
            const bool from_base = draw.u01() < alpha;
            EvalRequest req;
            req.id = static_cast<std::int64_t>(i);
            req.seed = derive_seed(seed, {stream_tag::kRequestSeed, i});
            req.latent =
                from_base ? space.sample_latent(draw) : flow.sample(draw);
            weights[i - lo] = std::exp(mixture_log_weight(flow, req.latent, alpha));
            req.scenario = space.to_params(req.latent);
            reqs.push_back(std::move(req));
        }
        for (const auto& resp : pool.submit_batch(reqs)) {
            const double w = weights[static_cast<std::uint64_t>(resp.id) - lo];
            sum_w += w;
            sum_w2 += w * w;
            if (resp.objective < gamma) {
                ++hits;
                sum_hw += w;
                sum_hw2 += w * w;
            }
        }
    }

    const double nn = static_cast<double>(n);
    const double p = sum_hw / nn;
    const double var = std::max(0.0, sum_hw2 / nn - p * p);
    const double se = std::sqrt(var / nn);

    Estimate est;
    est.method = "is";
    est.gamma = gamma;
    est.p_hat = p;
    est.log_p_hat =
        p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    est.std_err = se;
    est.ci_lo = std::min(std::max(0.0, p - kZ95 * se), p);
    est.ci_hi = std::max(std::min(1.0, p + kZ95 * se), p);
    est.n_evals = n;
    est.hits = hits;
    est.ess = sum_w2 > 0.0 ? sum_w * sum_w / sum_w2 : 0.0;
    return est;
}

}  // namespace riskeval
