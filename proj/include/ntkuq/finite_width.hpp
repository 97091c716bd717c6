#pragma once

// Finite-width erf MLPs: critical initialization, full-batch gradient descent
// with the per-layer learning-rate tensor, minibatch Adam, early stopping and
// seed ensembles.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ntkuq/common.hpp"
#include "ntkuq/infwidth.hpp"
#include "ntkuq/kernels.hpp"
#include "ntkuq/parallel.hpp"

namespace ntkuq {

/// Weights of layer l have shape n_l x n_{l-1}; biases have length n_l.
struct MlpState {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    int depth() const noexcept { return static_cast<int>(weights.size()); }
    Index input_dim() const { return weights.front().cols(); }
    Index output_dim() const { return weights.back().rows(); }

    bool operator==(const MlpState &other) const {
        if (weights.size() != other.weights.size()) { return false; }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != other.weights[l].rows() || weights[l].cols() != other.weights[l].cols() ||
                weights[l] != other.weights[l] || biases[l] != other.biases[l]) {
                return false;
            }
        }
        return true;
    }
};

inline std::vector<Index> layer_widths(const ArchitectureConfig &arch, Index input_dim) {
    std::vector<Index> dims{input_dim};
    for (int l = 1; l < arch.depth; ++l) { dims.push_back(arch.width); }
    dims.push_back(arch.n_out);
    return dims;
}

/// Zero biases, weights ~ N(0, 1/fan_in), filled row by row from one mt19937_64 stream.
inline MlpState init_network(const ArchitectureConfig &arch, Index input_dim, std::uint64_t seed) {
    arch.validate();
    require(input_dim >= 1, ErrorCode::invalid_argument, "input dimension must be >= 1");
    const auto dims = layer_widths(arch, input_dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    MlpState net;
    for (std::size_t l = 1; l < dims.size(); ++l) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(dims[l - 1]));
        Matrix w(dims[l], dims[l - 1]);
        for (Index i = 0; i < w.rows(); ++i) {
            for (Index j = 0; j < w.cols(); ++j) { w(i, j) = stddev * normal(rng); }
        }
        net.weights.push_back(std::move(w));
        net.biases.push_back(Vector::Zero(dims[l]));
    }
    return net;
}

namespace detail {

inline Matrix erf_of(const Matrix &z) {
    return z.unaryExpr([](double v) { return std::erf(v); });
}

inline Matrix erf_prime_of(const Matrix &z) {
    const double c = 2.0 / std::sqrt(std::numbers::pi);
    return z.unaryExpr([c](double v) { return c * std::exp(-v * v); });
}

}  // namespace detail

/// Preactivations z^(1..L), each n_l x N (columns are examples).
inline std::vector<Matrix> forward_trace(const MlpState &net, const Matrix &inputs) {
    require(inputs.cols() == net.input_dim(), ErrorCode::dimension_mismatch, "input dimension does not match network");
    std::vector<Matrix> pre;
    pre.reserve(net.weights.size());
    Matrix act = inputs.transpose();
    for (int l = 0; l < net.depth(); ++l) {
        Matrix z = net.weights[static_cast<std::size_t>(l)] * act;
        z.colwise() += net.biases[static_cast<std::size_t>(l)];
        if (l + 1 < net.depth()) { act = detail::erf_of(z); }
        pre.push_back(std::move(z));
    }
    return pre;
}

/// Outputs, one row per input row.
inline Matrix forward(const MlpState &net, const Matrix &inputs) { return forward_trace(net, inputs).back().transpose(); }

struct LabeledSet {
    Matrix x;
    Matrix y;

    Index size() const noexcept { return x.rows(); }
};

struct DataSplit {
    LabeledSet train;
    LabeledSet validation;
    LabeledSet test;
};

/// (1 / (n_L N)) * sum_alpha 1/2 ||z_alpha - y_alpha||^2
inline double mse_loss(const MlpState &net, const LabeledSet &data) {
    require(data.y.rows() == data.x.rows() && data.y.cols() == net.output_dim(), ErrorCode::dimension_mismatch,
            "labels do not match data/network");
    if (data.size() == 0) { return std::numeric_limits<double>::quiet_NaN(); }
    const Matrix z = forward(net, data.x);
    return (z - data.y).squaredNorm() / (2.0 * static_cast<double>(data.y.cols()) * static_cast<double>(data.size()));
}

struct Gradients {
    std::vector<Matrix> dW;
    std::vector<Vector> db;
    double loss = 0.0;  // loss at the parameters the gradient was taken at
};

inline Gradients loss_gradients(const MlpState &net, const Matrix &x, const Matrix &y) {
    require(y.rows() == x.rows() && y.cols() == net.output_dim(), ErrorCode::dimension_mismatch,
            "labels do not match data/network");
    const auto pre = forward_trace(net, x);
    const double norm = static_cast<double>(y.cols()) * static_cast<double>(x.rows());
    const Matrix resid = pre.back() - y.transpose();
    Gradients g;
    g.loss = resid.squaredNorm() / (2.0 * norm);
    g.dW.resize(net.weights.size());
    g.db.resize(net.weights.size());
    Matrix delta = resid / norm;
    for (int l = net.depth() - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        if (l == 0) {
            g.dW[ul] = delta * x;
        } else {
            g.dW[ul] = delta * detail::erf_of(pre[ul - 1]).transpose();
        }
        g.db[ul] = delta.rowwise().sum();
        if (l > 0) { delta = (net.weights[ul].transpose() * delta).cwiseProduct(detail::erf_prime_of(pre[ul - 1])); }
    }
    return g;
}

enum class Optimizer { full_batch_gd, adam };

inline const char *to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "full_batch_gd"; }

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Index minibatch = 1000;
};

struct TrainConfig {
    std::optional<double> eta;  // unset: n_L N_D / lambda_max(Theta_A) for GD, 1e-3 for Adam
    Optimizer optimizer = Optimizer::full_batch_gd;
    AdamParams adam;
    long patience = 10000;
    long max_epochs = 100000;
    Index validation_size = 64;
    std::uint64_t seed = 0;
    long trace_stride = 100;
};

/// Step size whose function-space GD step is 1 / lambda_max(Theta_A). The
/// training loss carries 1/(n_L N_D), hence the n_L N_D factor.
inline double default_finite_width_eta(const ArchitectureConfig &arch, const Matrix &train_x) {
    const KernelPair kp = build_kernel_pair(InputSet(train_x), arch);
    const double lmax = max_eigenvalue(kp.Theta());
    require(lmax > 0.0, ErrorCode::non_psd, "NTK has no positive eigenvalue");
    return static_cast<double>(arch.n_out) * static_cast<double>(train_x.rows()) / lmax;
}

/// eta -> eta / lambda_b for lambda_b > 1 (keeps the bias-dominated NTK stable).
inline double rescale_eta_for_bias(double eta, double lambda_b) { return lambda_b > 1.0 ? eta / lambda_b : eta; }

inline double resolve_eta(const TrainConfig &cfg, const ArchitectureConfig &arch, const Matrix &train_x) {
    if (cfg.eta) { return *cfg.eta; }
    return cfg.optimizer == Optimizer::adam ? 1e-3 : default_finite_width_eta(arch, train_x);
}

/// theta_mu -= eta * lambda_mu * dL/dtheta_mu on the full training set.
/// Returns the training loss before the update.
inline double gd_step(MlpState &net, const LabeledSet &train, const ArchitectureConfig &arch, double eta) {
    const Gradients g = loss_gradients(net, train.x, train.y);
    for (int l = 0; l < net.depth(); ++l) {
        const auto ul = static_cast<std::size_t>(l);
        net.weights[ul] -= (eta * weight_learning_scale(arch, net.weights[ul].cols())) * g.dW[ul];
        net.biases[ul] -= (eta * bias_learning_scale(arch, l + 1)) * g.db[ul];
    }
    return g.loss;
}

inline MlpState gd_epoch(MlpState net, const LabeledSet &train, const ArchitectureConfig &arch,
                         const TrainConfig &cfg) {
    const double eta = resolve_eta(cfg, arch, train.x);
    const double loss = gd_step(net, train, arch, eta);
    require(std::isfinite(loss), ErrorCode::divergence, "training loss is not finite");
    return net;
}

/// First/second moment buffers plus the shuffle stream for minibatches.
struct AdamState {
    std::vector<Matrix> m_w, v_w;
    std::vector<Vector> m_b, v_b;
    long t = 0;
    std::mt19937_64 rng;
    std::vector<Index> order;
};

inline AdamState make_adam_state(const MlpState &net, std::uint64_t seed) {
    AdamState st;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        st.m_w.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
        st.v_w.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
        st.m_b.push_back(Vector::Zero(net.biases[l].size()));
        st.v_b.push_back(Vector::Zero(net.biases[l].size()));
    }
    st.rng.seed(seed);
    return st;
}

namespace detail {

template <class Param, class Grad>
void adam_update(Param &p, Param &m, Param &v, const Grad &g, const AdamParams &ap, double eta, long t) {
    m = ap.beta1 * m + (1.0 - ap.beta1) * g;
    v = ap.beta2 * v + (1.0 - ap.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(ap.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(ap.beta2, static_cast<double>(t));
    p.array() -= eta * (m.array() / c1) / ((v.array() / c2).sqrt() + ap.eps);
}

}  // namespace detail

/// One pass of plain Adam over shuffled minibatches (no learning-rate tensor).
/// Returns the mean minibatch loss of the pass.
inline double adam_pass(MlpState &net, AdamState &st, const LabeledSet &train, const TrainConfig &cfg, double eta) {
    const Index n = train.size();
    require(cfg.adam.minibatch >= 1 && cfg.adam.minibatch <= n, ErrorCode::invalid_argument,
            "Adam minibatch must be in [1, N_D]");
    if (static_cast<Index>(st.order.size()) != n) {
        st.order.resize(static_cast<std::size_t>(n));
        std::iota(st.order.begin(), st.order.end(), Index{0});
    }
    std::shuffle(st.order.begin(), st.order.end(), st.rng);
    double loss_sum = 0.0;
    long batches = 0;
    for (Index start = 0; start < n; start += cfg.adam.minibatch) {
        const Index count = std::min(cfg.adam.minibatch, n - start);
        const IndexList rows(st.order.begin() + start, st.order.begin() + start + count);
        const Matrix bx = train.x(rows, Eigen::all);
        const Matrix by = train.y(rows, Eigen::all);
        const Gradients g = loss_gradients(net, bx, by);
        ++st.t;
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            detail::adam_update(net.weights[l], st.m_w[l], st.v_w[l], g.dW[l], cfg.adam, eta, st.t);
            detail::adam_update(net.biases[l], st.m_b[l], st.v_b[l], g.db[l], cfg.adam, eta, st.t);
        }
        loss_sum += g.loss;
        ++batches;
    }
    return loss_sum / static_cast<double>(batches);
}

inline MlpState adam_epoch(MlpState net, AdamState &st, const LabeledSet &train, const TrainConfig &cfg) {
    const double eta = cfg.eta.value_or(1e-3);
    const double loss = adam_pass(net, st, train, cfg, eta);
    require(std::isfinite(loss), ErrorCode::divergence, "training loss is not finite");
    return net;
}

enum class StopReason { patience, max_epochs, divergence };

inline const char *to_string(StopReason r) {
    switch (r) {
        case StopReason::patience: return "patience";
        case StopReason::max_epochs: return "max_epochs";
        case StopReason::divergence: return "divergence";
    }
    return "unknown";
}

/// Tracks the best monitored loss; exhausted once `patience` consecutive
/// observations fail to improve on it.
class EarlyStopping {
public:
    explicit EarlyStopping(long patience) : patience_(patience) {
        require(patience >= 1, ErrorCode::invalid_argument, "patience must be >= 1");
    }

    bool observe(long epoch, double loss) {
        if (loss < best_loss_) {
            best_loss_ = loss;
            best_epoch_ = epoch;
            since_best_ = 0;
            return true;
        }
        ++since_best_;
        return false;
    }

    bool exhausted() const noexcept { return since_best_ >= patience_; }
    long best_epoch() const noexcept { return best_epoch_; }
    double best_loss() const noexcept { return best_loss_; }

private:
    long patience_;
    long since_best_ = 0;
    long best_epoch_ = -1;
    double best_loss_ = std::numeric_limits<double>::infinity();
};

struct StopOutcome {
    StopReason reason = StopReason::max_epochs;
    long epochs_run = 0;
    long best_epoch = 0;
    double best_loss = std::numeric_limits<double>::infinity();
};

/// Generic epoch loop. step(epoch) returns false on divergence; validate()
/// returns the monitored loss; on_improve(epoch) fires at every new best,
/// including the initial state (epoch 0).
template <class StepFn, class ValidateFn, class ImproveFn>
StopOutcome run_early_stopping(long max_epochs, long patience, StepFn &&step, ValidateFn &&validate,
                               ImproveFn &&on_improve) {
    EarlyStopping stopper(patience);
    if (stopper.observe(0, validate())) { on_improve(0); }
    StopOutcome out;
    for (long epoch = 1; epoch <= max_epochs; ++epoch) {
        out.epochs_run = epoch;
        if (!step(epoch)) {
            out.reason = StopReason::divergence;
            out.best_epoch = stopper.best_epoch();
            out.best_loss = stopper.best_loss();
            return out;
        }
        if (stopper.observe(epoch, validate())) {
            on_improve(epoch);
        } else if (stopper.exhausted()) {
            out.reason = StopReason::patience;
            out.best_epoch = stopper.best_epoch();
            out.best_loss = stopper.best_loss();
            return out;
        }
    }
    out.reason = StopReason::max_epochs;
    out.best_epoch = std::max(stopper.best_epoch(), 0L);
    out.best_loss = stopper.best_loss();
    return out;
}

struct EnsembleRunRecord {
    std::uint64_t seed = 0;
    double final_test_loss = std::numeric_limits<double>::quiet_NaN();
    double best_validation_loss = std::numeric_limits<double>::quiet_NaN();
    long epochs_run = 0;
    long best_epoch = 0;
    StopReason stop_reason = StopReason::max_epochs;
    double eta = 0.0;
    std::vector<double> train_trace;  // every trace_stride epochs
};

inline constexpr double kDivergenceFactor = 1e6;

/// Trains with the configured optimizer, restores the best-validation
/// parameters and evaluates the test loss once at the end.
inline EnsembleRunRecord train_with_early_stopping(MlpState net, const DataSplit &data, const ArchitectureConfig &arch,
                                                   const TrainConfig &cfg, std::optional<double> resolved_eta = {}) {
    require(cfg.max_epochs >= 0, ErrorCode::invalid_argument, "max_epochs must be >= 0");
    require(data.train.size() >= 1, ErrorCode::invalid_argument, "empty training set");
    const double eta = resolved_eta ? *resolved_eta : resolve_eta(cfg, arch, data.train.x);
    require(eta > 0.0, ErrorCode::invalid_argument, "eta must be > 0");

    EnsembleRunRecord rec;
    rec.seed = cfg.seed;
    rec.eta = eta;
    const double initial = mse_loss(net, data.train);
    const double blowup = kDivergenceFactor * std::max(initial, std::numeric_limits<double>::min());
    AdamState adam;
    if (cfg.optimizer == Optimizer::adam) { adam = make_adam_state(net, mix_seed(cfg.seed, 1)); }

    const bool has_validation = data.validation.size() > 0;
    MlpState best = net;
    const long stride = std::max(1L, cfg.trace_stride);

    auto step = [&](long epoch) {
        const double loss = cfg.optimizer == Optimizer::adam ? adam_pass(net, adam, data.train, cfg, eta)
                                                             : gd_step(net, data.train, arch, eta);
        if ((epoch - 1) % stride == 0) { rec.train_trace.push_back(loss); }
        return std::isfinite(loss) && loss <= blowup;
    };
    auto validate = [&] { return has_validation ? mse_loss(net, data.validation) : mse_loss(net, data.train); };
    auto improve = [&](long) { best = net; };

    const StopOutcome out = run_early_stopping(cfg.max_epochs, std::max(1L, cfg.patience), step, validate, improve);
    rec.epochs_run = out.epochs_run;
    rec.best_epoch = out.best_epoch;
    rec.best_validation_loss = out.best_loss;
    rec.stop_reason = out.reason;
    if (out.reason != StopReason::divergence) { rec.final_test_loss = mse_loss(best, data.test); }
    return rec;
}

struct EnsembleSummary {
    double mu_L = std::numeric_limits<double>::quiet_NaN();
    double var_L = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> eps_L;
    std::optional<double> eps_se;  // jackknife
    long n_ok = 0;
    long n_diverged = 0;
};

/// Sample mean, unbiased variance, eps = sd / mean and its leave-one-out
/// jackknife standard error over the finite losses.
inline EnsembleSummary summarize_losses(const std::vector<double> &losses, long n_diverged = 0) {
    std::vector<double> ok;
    for (double l : losses) {
        if (std::isfinite(l)) { ok.push_back(l); }
    }
    EnsembleSummary s;
    s.n_ok = static_cast<long>(ok.size());
    s.n_diverged = n_diverged;
    if (ok.size() < 2) { return s; }
    const auto moments = [](const std::vector<double> &v, std::size_t skip) {
        double n = 0.0;
        double sum = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i == skip) { continue; }
            sum += v[i];
            n += 1.0;
        }
        const double mean = sum / n;
        double ss = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i == skip) { continue; }
            ss += (v[i] - mean) * (v[i] - mean);
        }
        return std::pair{mean, ss / (n - 1.0)};
    };
    const auto [mean, var] = moments(ok, ok.size());
    s.mu_L = mean;
    s.var_L = var;
    s.eps_L = coefficient_of_variation(mean, var);
    if (ok.size() >= 3 && s.eps_L) {
        std::vector<double> loo;
        for (std::size_t i = 0; i < ok.size(); ++i) {
            const auto [m, v] = moments(ok, i);
            if (auto e = coefficient_of_variation(m, v)) { loo.push_back(*e); }
        }
        if (loo.size() == ok.size()) {
            const double n = static_cast<double>(loo.size());
            const double bar = std::accumulate(loo.begin(), loo.end(), 0.0) / n;
            double ss = 0.0;
            for (double e : loo) { ss += (e - bar) * (e - bar); }
            s.eps_se = std::sqrt((n - 1.0) / n * ss);
        }
    }
    return s;
}

struct EnsembleOptions {
    int n_members = 30;
    std::uint64_t base_seed = 0;
    bool share_seed = false;  // every member uses base_seed
    unsigned workers = 0;
};

struct EnsembleResult {
    std::vector<EnsembleRunRecord> records;
    EnsembleSummary summary;
};

inline EnsembleResult run_ensemble(const DataSplit &data, const ArchitectureConfig &arch, const TrainConfig &cfg,
                                   const EnsembleOptions &opts) {
    require(opts.n_members >= 2, ErrorCode::invalid_argument, "ensembles need at least two members");
    arch.validate();
    const double eta = resolve_eta(cfg, arch, data.train.x);
    EnsembleResult result;
    result.records.resize(static_cast<std::size_t>(opts.n_members));
    parallel_for(
        opts.n_members,
        [&](Index i) {
            TrainConfig member = cfg;
            member.seed = opts.share_seed ? opts.base_seed : opts.base_seed + static_cast<std::uint64_t>(i);
            MlpState net = init_network(arch, data.train.x.cols(), member.seed);
            result.records[static_cast<std::size_t>(i)] = train_with_early_stopping(std::move(net), data, arch, member, eta);
        },
        opts.workers);
    std::vector<double> losses;
    long diverged = 0;
    for (const auto &r : result.records) {
        if (r.stop_reason == StopReason::divergence) {
            ++diverged;
        } else {
            losses.push_back(r.final_test_loss);
        }
    }
    result.summary = summarize_losses(losses, diverged);
    return result;
}

}  // namespace ntkuq
