#pragma once

// Mean and variance of the MSE test loss when the network outputs on the test
// set are Gaussian, plus a Monte Carlo estimator of the same moments.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "ntkuq/common.hpp"
#include "ntkuq/posterior.hpp"

namespace ntkuq {

struct LossStats {
    double mu_L = 0.0;
    double var_L = 0.0;
    std::optional<double> eps_L;  // empty when mu_L == 0
    Index n_test = 0;
    Index n_out = 1;
    std::string method;

    double sigma_L() const { return std::sqrt(var_L); }
};

inline constexpr double kLossVarianceClamp = 1e-12;

namespace detail {

inline void check_moment_inputs(const Matrix &mean, const Matrix &cov, const Matrix &labels) {
    require(labels.rows() == mean.rows() && labels.cols() == mean.cols(), ErrorCode::dimension_mismatch,
            "labels must match the posterior mean shape (test points x outputs)");
    require(labels.allFinite(), ErrorCode::non_finite, "labels must be finite");
    require(mean.rows() >= 1 && mean.cols() >= 1, ErrorCode::dimension_mismatch, "empty test set");
    if (cov.cols() == 1 && cov.rows() == mean.rows() && mean.rows() > 1) {
        throw Error(ErrorCode::dimension_mismatch,
                    "posterior carries only a variance vector; the full test-test covariance is required");
    }
    require(cov.rows() == mean.rows() && cov.cols() == mean.rows(), ErrorCode::dimension_mismatch,
            "covariance must be |B| x |B|");
}

}  // namespace detail

/// Delta = y - m, one row per test point.
inline Matrix residuals(const Matrix &mean, const Matrix &labels) {
    require(labels.rows() == mean.rows() && labels.cols() == mean.cols(), ErrorCode::dimension_mismatch,
            "labels must match the posterior mean shape");
    return labels - mean;
}

inline double loss_mean(const Matrix &mean, const Matrix &cov, const Matrix &labels) {
    require(labels.rows() == mean.rows() && labels.cols() == mean.cols(), ErrorCode::dimension_mismatch,
            "labels must match the posterior mean shape (test points x outputs)");
    require(labels.allFinite(), ErrorCode::non_finite, "labels must be finite");
    require(cov.rows() == mean.rows() && (cov.cols() == mean.rows() || cov.cols() == 1),
            ErrorCode::dimension_mismatch, "covariance does not match the test set");
    const double n = static_cast<double>(mean.cols());
    const double b = static_cast<double>(mean.rows());
    const double trace = cov.cols() == 1 && mean.rows() > 1 ? cov.sum() : cov.diagonal().sum();
    const double delta_sq = (labels - mean).squaredNorm();
    return (n * trace + delta_sq) / (2.0 * b * n);
}

/// Var of the test loss. With s = diag(Sigma), D_b = ||Delta_b||^2 the quartic
/// Wick sum minus mu^2 collapses to (2 n ||Sigma||_F^2 + 4 tr(Delta^T Sigma Delta)) / (2|B|n)^2,
/// which is evaluated directly to avoid the E[L^2] - mu^2 cancellation.
inline double loss_variance(const Matrix &mean, const Matrix &cov, const Matrix &labels) {
    detail::check_moment_inputs(mean, cov, labels);
    const double n = static_cast<double>(mean.cols());
    const double b = static_cast<double>(mean.rows());
    const Matrix delta = labels - mean;
    const double frob = cov.squaredNorm();
    const double bilinear = (delta.transpose() * cov * delta).trace();
    double var = (2.0 * n * frob + 4.0 * bilinear) / ((2.0 * b * n) * (2.0 * b * n));
    if (var < 0.0) {
        require(var >= -kLossVarianceClamp, ErrorCode::non_psd, "loss variance negative beyond round-off");
        var = 0.0;
    }
    return var;
}

inline double loss_mean(const PredictivePosterior &post, const Matrix &labels) {
    return loss_mean(post.mean, post.cov, labels);
}

inline double loss_variance(const PredictivePosterior &post, const Matrix &labels) {
    return loss_variance(post.mean, post.cov, labels);
}

inline std::optional<double> coefficient_of_variation(double mu, double var) {
    if (!(mu > 0.0)) { return std::nullopt; }
    return std::sqrt(var) / mu;
}

inline std::optional<double> coefficient_of_variation(const LossStats &stats) {
    return coefficient_of_variation(stats.mu_L, stats.var_L);
}

inline LossStats loss_stats(const PredictivePosterior &post, const Matrix &labels) {
    LossStats s;
    s.mu_L = loss_mean(post, labels);
    s.var_L = loss_variance(post, labels);
    s.eps_L = coefficient_of_variation(s.mu_L, s.var_L);
    s.n_test = post.n_test();
    s.n_out = post.n_out();
    s.method = to_string(post.method);
    return s;
}

struct McMoments {
    double mean = 0.0;
    double variance = 0.0;
    double mean_se = 0.0;
    double variance_se = 0.0;
    long draws = 0;
};

/// Samples outputs from the posterior (columns independent, shared covariance)
/// and returns the empirical moments of the test loss with standard errors.
inline McMoments mc_loss_moments(const PredictivePosterior &post, const Matrix &labels, long draws,
                                 std::uint64_t seed) {
    require(draws >= 1000, ErrorCode::invalid_argument, "Monte Carlo needs at least 1000 draws");
    detail::check_moment_inputs(post.mean, post.cov, labels);
    const Index B = post.n_test();
    const Index n = post.n_out();

    // PSD repair: eigenvalues floored at zero.
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (post.cov + post.cov.transpose()));
    require(eig.info() == Eigen::Success, ErrorCode::non_psd, "covariance factorization failed");
    const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Matrix factor = eig.eigenvectors() * root.asDiagonal();

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Matrix delta = labels - post.mean;
    const double norm = 1.0 / (2.0 * static_cast<double>(B) * static_cast<double>(n));

    std::vector<double> losses(static_cast<std::size_t>(draws));
    constexpr long kBatch = 256;
    Matrix xi(B, n * kBatch);
    for (long start = 0; start < draws; start += kBatch) {
        const long count = std::min(kBatch, draws - start);
        for (Index c = 0; c < n * count; ++c) {
            for (Index r = 0; r < B; ++r) { xi(r, c) = normal(rng); }
        }
        const Matrix fluct = factor * xi.leftCols(n * count);
        for (long d = 0; d < count; ++d) {
            // z - y = (m + fluct) - y = fluct - Delta
            const double sq = (fluct.middleCols(n * d, n) - delta).squaredNorm();
            losses[static_cast<std::size_t>(start + d)] = norm * sq;
        }
    }

    double mean = 0.0;
    for (double l : losses) { mean += l; }
    mean /= static_cast<double>(draws);
    double m2 = 0.0;
    double m4 = 0.0;
    for (double l : losses) {
        const double d = l - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    const double nd = static_cast<double>(draws);
    const double var = m2 / (nd - 1.0);
    m4 /= nd;

    McMoments out;
    out.mean = mean;
    out.variance = var;
    out.mean_se = std::sqrt(var / nd);
    const double var_of_var = (m4 - (nd - 3.0) / (nd - 1.0) * var * var) / nd;
    out.variance_se = std::sqrt(std::max(var_of_var, 0.0));
    out.draws = draws;
    return out;
}

}  // namespace ntkuq
