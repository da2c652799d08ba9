#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "riskeval/estimate.hpp"
#include "riskeval/rng.hpp"

namespace riskeval {

// Affine coupling flow between the latent standard normal and an observed
// sample cloud. Forward maps noise z to data y; density queries invert. Each
// layer freezes half the coordinates by index parity (layer k passes through
// the indices with i % 2 == k % 2) and moves the other half with a scale and
// shift produced by a two-hidden-layer tanh conditioner. Scales are squashed
// to exp(s_max * tanh(raw)), so every layer stays invertible no matter what
// training does to the weights.

struct FlowConfig {
    int n_layers = 6;
    int hidden1 = 32;
    int hidden2 = 16;
    double s_max = 4.0;
    int epochs = 100;
    int batch_size = 128;
    double learning_rate = 0.05;
    // Gradient clipping threshold (global L2 norm); the likelihood surface
    // has exponential cliffs in the scale parameters, and an unclipped step
    // across one diverges. 0 disables.
    double clip_norm = 5.0;
    // Fraction of the (shuffled) sample set held out for checkpointing.
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct EpochStat {
    int epoch = 0;
    double train_nll = 0.0;
    double val_nll = 0.0;
};

class FlowModel {
  public:
    // Identity-initialized flow: hidden weights are random (seeded from
    // cfg.seed), output layers are zero, so the model starts as the exact
    // standard normal.
    static FlowModel init(std::size_t dim, const FlowConfig& cfg);

    std::size_t dim() const { return dim_; }
    double s_max() const { return s_max_; }

    std::vector<double> forward(const std::vector<double>& z) const;
    std::vector<double> inverse(const std::vector<double>& y) const;
    double log_prob(const std::vector<double>& y) const;
    // Draws dim() normals from `stream` and maps them forward.
    std::vector<double> sample(Stream& stream) const;

    // Trainable parameters as one vector (per layer: w1, b1, w2, b2, w3, b3,
    // matrices row-major). The standardizer is data-derived, not trained.
    std::vector<double> flat_params() const;
    void set_flat_params(const std::vector<double>& theta);

    // Mean negative log likelihood over a sample set, and its gradient in
    // flat_params() order.
    double mean_nll(const std::vector<std::vector<double>>& ys) const;
    std::vector<double> nll_gradient(const std::vector<std::vector<double>>& ys) const;

    void set_standardizer(std::vector<double> mean, std::vector<double> scale);
    const std::vector<EpochStat>& history() const { return history_; }

    nlohmann::json to_json() const;
    static FlowModel from_json(const nlohmann::json& j);

  private:
    friend FlowModel fit_flow(const std::vector<std::vector<double>>& samples,
                              const FlowConfig& cfg);

    struct Layer {
        std::vector<int> passive, active;
        Eigen::MatrixXd w1, w2, w3;
        Eigen::VectorXd b1, b2, b3;
    };
    struct LayerCache;

    FlowModel() = default;
    void conditioner(const Layer& layer, const Eigen::MatrixXd& a,
                     Eigen::MatrixXd& h1, Eigen::MatrixXd& h2,
                     Eigen::MatrixXd& th_r, Eigen::MatrixXd& t) const;
    Eigen::MatrixXd standardize(const Eigen::MatrixXd& y) const;
    double batch_nll(const Eigen::MatrixXd& y,
                     std::vector<LayerCache>* caches,
                     Eigen::MatrixXd* z_out) const;
    double batch_nll_grad(const Eigen::MatrixXd& y,
                          std::vector<double>& grad) const;

    std::size_t dim_ = 0;
    double s_max_ = 4.0;
    Eigen::VectorXd mean_, scale_;
    std::vector<Layer> layers_;
    std::vector<EpochStat> history_;
};

// Maximum-likelihood fit with clipped minibatch SGD at rate lr / sqrt(epoch).
// The sample set is shuffled once (seeded) before the validation split; the
// returned model carries the parameters of the best validation epoch, which
// is never worse than the identity initialization, plus the full epoch
// history. A non-finite epoch loss stops training at that checkpoint.
FlowModel fit_flow(const std::vector<std::vector<double>>& samples,
                   const FlowConfig& cfg);

// log of phi(u) / (alpha phi(u) + (1 - alpha) q_flow(u)): the importance
// weight against the defensive mixture proposal. Bounded by -log(alpha)
// whenever alpha > 0; alpha = 0 is the undefended pure-flow proposal.
double mixture_log_weight(const FlowModel& flow, const std::vector<double>& u,
                          double alpha);

// Self-normalizing-free importance sampling under the defensive mixture:
// with probability alpha each draw comes from the base law, otherwise from
// the flow, and for alpha > 0 weights stay below 1 / alpha regardless of how
// badly the flow fits. alpha = 1 degenerates to plain Monte Carlo with a
// normal-theory interval.
Estimate estimate_importance(const ParamSpace& space, EvalPool& pool,
                             const FlowModel& flow, double gamma,
                             std::uint64_t n, double alpha,
                             std::uint64_t seed);

}  // namespace riskeval
