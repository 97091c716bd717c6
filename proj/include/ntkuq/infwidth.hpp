#pragma once

// End-of-training output distribution of an infinitely wide network trained by
// full-batch gradient descent on MSE, and the kernel (last-layer-only) variant.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <unordered_set>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "ntkuq/common.hpp"
#include "ntkuq/kernels.hpp"
#include "ntkuq/loss_stats.hpp"
#include "ntkuq/posterior.hpp"

namespace ntkuq {

inline constexpr double kMinReciprocalCondition = 1e-12;

namespace detail {

// Eigen's rcond() treats zero pivots as a pseudo-inverse, so exactly singular
// matrices can look fine; the pivot spread catches those.
inline double ldlt_rcond(const Eigen::LDLT<Matrix> &ldlt) {
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) { return 0.0; }
    const Vector d = ldlt.vectorD();
    const double dmax = d.cwiseAbs().maxCoeff();
    if (!(dmax > 0.0)) { return 0.0; }
    return std::min(ldlt.rcond(), d.cwiseAbs().minCoeff() / dmax);
}

}  // namespace detail

/// LDLT of a symmetric matrix that refuses when the reciprocal condition
/// estimate falls below kMinReciprocalCondition.
inline Eigen::LDLT<Matrix> factorize_well_conditioned(const Matrix &a, const std::string &what,
                                                       const std::string &hint) {
    Eigen::LDLT<Matrix> ldlt(a);
    const double rcond = detail::ldlt_rcond(ldlt);
    if (!(rcond >= kMinReciprocalCondition)) {
        throw Error(ErrorCode::ill_conditioned, what + " is ill-conditioned (rcond estimate " + std::to_string(rcond) +
                                                    " < 1e-12); " + hint);
    }
    return ldlt;
}

inline double reciprocal_condition(const Matrix &a) { return detail::ldlt_rcond(Eigen::LDLT<Matrix>(a)); }

inline double max_eigenvalue(const Matrix &sym) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    require(eig.info() == Eigen::Success, ErrorCode::non_psd, "eigenvalue computation failed");
    return eig.eigenvalues().maxCoeff();
}

namespace detail {

inline void check_split(const KernelPair &kp, const IndexList &train_ids, const IndexList &test_ids,
                        const Matrix &labels) {
    require(!train_ids.empty(), ErrorCode::invalid_argument, "training set is empty");
    require(!test_ids.empty(), ErrorCode::invalid_argument, "test set is empty");
    require(labels.rows() == static_cast<Index>(train_ids.size()), ErrorCode::dimension_mismatch,
            "label rows must match the number of training points");
    require(labels.cols() >= 1, ErrorCode::dimension_mismatch, "labels need at least one output column");
    require(labels.allFinite(), ErrorCode::non_finite, "training labels must be finite");
    for (Index i : train_ids) { require(i >= 0 && i < kp.size(), ErrorCode::invalid_argument, "train id out of range"); }
    for (Index i : test_ids) { require(i >= 0 && i < kp.size(), ErrorCode::invalid_argument, "test id out of range"); }
}

// Posterior of the linear predictor P = M_BA M_A^-1 with prior covariance K:
//   mean  = P y
//   Sigma = K_BB - P K_AB - K_BA P^T + P K_A P^T
// M = Theta gives the gradient-descent limit; M = K gives the GP posterior.
inline PredictivePosterior linear_predictor_posterior(const Eigen::LDLT<Matrix> &m_train, const Matrix &m_test_train,
                                                      const Matrix &k_train, const Matrix &k_test_train,
                                                      const Matrix &k_test, const Matrix &labels) {
    const Matrix pt = m_train.solve(m_test_train.transpose());  // A x B, equals P^T
    PredictivePosterior post;
    post.mean = pt.transpose() * labels;
    const Matrix cross = pt.transpose() * k_test_train.transpose();
    const Matrix cov = k_test - cross - cross.transpose() + pt.transpose() * k_train * pt;
    post.cov = tidy_covariance(cov);
    return post;
}

}  // namespace detail

inline PredictivePosterior closed_form_posterior(const KernelPair &kp, const IndexList &train_ids,
                                                 const IndexList &test_ids, const Matrix &labels) {
    detail::check_split(kp, train_ids, test_ids, labels);
    const auto ldlt = factorize_well_conditioned(kp.Theta_block(train_ids, train_ids), "training NTK",
                                                 "use the iterative gradient-descent path (gd_evolve) instead");
    auto post = detail::linear_predictor_posterior(ldlt, kp.Theta_block(test_ids, train_ids),
                                                   kp.K_block(train_ids, train_ids), kp.K_block(test_ids, train_ids),
                                                   kp.K_block(test_ids, test_ids), labels);
    post.method = PosteriorMethod::closed_form;
    post.steps_used = 0;
    post.test_ids = test_ids;
    return post;
}

inline PredictivePosterior bayesian_posterior(const KernelPair &kp, const IndexList &train_ids,
                                              const IndexList &test_ids, const Matrix &labels) {
    detail::check_split(kp, train_ids, test_ids, labels);
    const Matrix k_train = kp.K_block(train_ids, train_ids);
    const auto ldlt = factorize_well_conditioned(k_train, "training kernel",
                                                 "the Bayesian posterior requires a numerically invertible kernel");
    const Matrix k_test_train = kp.K_block(test_ids, train_ids);
    auto post = detail::linear_predictor_posterior(ldlt, k_test_train, k_train, k_test_train,
                                                   kp.K_block(test_ids, test_ids), labels);
    post.method = PosteriorMethod::bayesian;
    post.steps_used = 0;
    post.test_ids = test_ids;
    return post;
}

struct EarlyStopPolicy {
    IndexList validation_ids;  // kernel points, disjoint from the training ids
    Matrix validation_labels;  // one row per validation id
    long patience = 10;        // measured in checks
    long check_every = 100;
    long max_steps = 10'000'000;
    double converge_tol = 1e-13;
};

/// Mean and covariance of the joint outputs (train block first) at GD step `step`.
struct GdEvolutionState {
    Matrix mean;
    Matrix cov;
    long step = 0;
    double eta = 0.0;
};

/// One gradient-descent step on the joint outputs as an affine map
/// z <- M z + c, with M = I - eta Theta_{J,A} E_A and c = eta Theta_{J,A} y_A.
/// Powers of the map are formed by repeated squaring.
class GdMap {
public:
    GdMap(const Matrix &theta_joint_train, const Matrix &train_labels, double eta) {
        const Index n = theta_joint_train.rows();
        const Index a = theta_joint_train.cols();
        require(a <= n && train_labels.rows() == a, ErrorCode::dimension_mismatch, "GD map shape mismatch");
        linear_ = Matrix::Identity(n, n);
        linear_.leftCols(a) -= eta * theta_joint_train;
        shift_ = eta * theta_joint_train * train_labels;
    }

    GdMap power(long k) const {
        require(k >= 0, ErrorCode::invalid_argument, "map power must be nonnegative");
        GdMap result(Matrix::Identity(linear_.rows(), linear_.cols()), Matrix::Zero(shift_.rows(), shift_.cols()));
        GdMap base = *this;
        while (k > 0) {
            if (k & 1) { result = base.after(result); }
            k >>= 1;
            if (k > 0) { base = base.after(base); }
        }
        return result;
    }

    void apply(GdEvolutionState &state, long steps_represented = 1) const {
        state.mean = linear_ * state.mean + shift_;
        const Matrix half = linear_ * state.cov;
        state.cov = half * linear_.transpose();
        state.cov = 0.5 * (state.cov + state.cov.transpose());
        state.step += steps_represented;
    }

    const Matrix &linear() const noexcept { return linear_; }
    const Matrix &shift() const noexcept { return shift_; }

private:
    GdMap(Matrix linear, Matrix shift) : linear_(std::move(linear)), shift_(std::move(shift)) {}

    // (this ∘ first): apply `first`, then this map.
    GdMap after(const GdMap &first) const { return GdMap(linear_ * first.linear_, linear_ * first.shift_ + shift_); }

    Matrix linear_;
    Matrix shift_;
};

/// Default step size 1 / lambda_max(Theta_A); any eta < 2 / lambda_max contracts.
inline double default_gd_eta(const KernelPair &kp, const IndexList &train_ids) {
    const double lmax = max_eigenvalue(kp.Theta_block(train_ids, train_ids));
    require(lmax > 0.0, ErrorCode::non_psd, "training NTK has no positive eigenvalue");
    return 1.0 / lmax;
}

inline PredictivePosterior gd_evolve(const KernelPair &kp, const IndexList &train_ids, const IndexList &test_ids,
                                     const Matrix &labels, std::optional<double> eta_opt,
                                     const EarlyStopPolicy &stop = {}) {
    detail::check_split(kp, train_ids, test_ids, labels);
    require(stop.check_every >= 1, ErrorCode::invalid_argument, "check_every must be >= 1");
    require(stop.patience >= 1, ErrorCode::invalid_argument, "patience must be >= 1");
    require(stop.max_steps >= 0, ErrorCode::invalid_argument, "max_steps must be >= 0");
    const bool monitor = !stop.validation_ids.empty();
    if (monitor) {
        require(stop.validation_labels.rows() == static_cast<Index>(stop.validation_ids.size()) &&
                    stop.validation_labels.cols() == labels.cols(),
                ErrorCode::dimension_mismatch, "validation labels do not match validation ids");
        std::unordered_set<Index> train_set(train_ids.begin(), train_ids.end());
        for (Index v : stop.validation_ids) {
            require(v >= 0 && v < kp.size(), ErrorCode::invalid_argument, "validation id out of range");
            require(!train_set.contains(v), ErrorCode::invalid_argument, "validation ids must not overlap training ids");
        }
    }
    const double eta = eta_opt ? *eta_opt : default_gd_eta(kp, train_ids);
    require(eta >= 0.0 && std::isfinite(eta), ErrorCode::invalid_argument, "learning rate must be >= 0");

    const Index n_a = static_cast<Index>(train_ids.size());
    const Index n_b = static_cast<Index>(test_ids.size());
    const Index n_v = static_cast<Index>(stop.validation_ids.size());
    IndexList joint = train_ids;
    joint.insert(joint.end(), test_ids.begin(), test_ids.end());
    joint.insert(joint.end(), stop.validation_ids.begin(), stop.validation_ids.end());

    const GdMap step_map(kp.Theta_block(joint, train_ids), labels, eta);
    const GdMap check_map = step_map.power(stop.check_every);

    GdEvolutionState state;
    state.mean = Matrix::Zero(static_cast<Index>(joint.size()), labels.cols());
    state.cov = kp.K_block(joint, joint);
    state.eta = eta;

    auto validation_loss = [&](const GdEvolutionState &s) {
        return loss_mean(s.mean.bottomRows(n_v), s.cov.bottomRightCorner(n_v, n_v), stop.validation_labels);
    };
    auto train_loss = [&](const GdEvolutionState &s) {
        return loss_mean(s.mean.topRows(n_a), s.cov.topLeftCorner(n_a, n_a), labels);
    };

    const double watched0 = monitor ? validation_loss(state) : train_loss(state);
    const double blowup = 1e6 * std::max(watched0, std::numeric_limits<double>::min());
    double best = monitor ? watched0 : std::numeric_limits<double>::infinity();
    GdEvolutionState best_state = state;
    long since_best = 0;

    while (state.step < stop.max_steps) {
        const long remaining = stop.max_steps - state.step;
        const Matrix prev_mean = state.mean;
        const Matrix prev_cov = state.cov;
        if (remaining >= stop.check_every) {
            check_map.apply(state, stop.check_every);
        } else {
            step_map.power(remaining).apply(state, remaining);
        }
        const double watched = monitor ? validation_loss(state) : train_loss(state);
        if (!state.mean.allFinite() || !state.cov.allFinite() || !std::isfinite(watched) || watched > blowup) {
            throw Error(ErrorCode::divergence, "gradient-descent evolution diverged at step " +
                                                   std::to_string(state.step) + "; reduce eta");
        }
        if (monitor) {
            if (watched < best) {
                best = watched;
                best_state = state;
                since_best = 0;
            } else if (++since_best >= stop.patience) {
                break;
            }
        }
        const double scale = std::max({state.mean.cwiseAbs().maxCoeff(), state.cov.cwiseAbs().maxCoeff(), 1e-300});
        const double change =
            std::max((state.mean - prev_mean).cwiseAbs().maxCoeff(), (state.cov - prev_cov).cwiseAbs().maxCoeff());
        if (change <= stop.converge_tol * scale) { break; }
    }
    if (!monitor) { best_state = state; }

    PredictivePosterior post;
    post.mean = best_state.mean.middleRows(n_a, n_b);
    post.cov = tidy_covariance(best_state.cov.block(n_a, n_a, n_b, n_b));
    post.method = PosteriorMethod::iterative;
    post.steps_used = best_state.step;
    post.test_ids = test_ids;
    return post;
}

}  // namespace ntkuq
