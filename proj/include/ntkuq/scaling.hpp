#pragma once

// Log-log power-law fits and the kernel/NTK matrix-element scaling scan.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ntkuq/common.hpp"
#include "ntkuq/infwidth.hpp"
#include "ntkuq/kernels.hpp"

namespace ntkuq {

struct ScalingPoint {
    double n = 0.0;      // N_D
    double value = 0.0;  // > 0
};

struct ScalingFit {
    double exponent = 0.0;  // slope of log10(value) on log10(N_D)
    double intercept = 0.0;
    double slope_sigma = 0.0;
    Index n_points = 0;
    double r_squared = 0.0;
};

/// Ordinary least squares of log10(value) on log10(N_D); slope_sigma is the
/// usual 1-sigma slope error with the residual variance at n - 2 dof.
inline ScalingFit fit_power_law(const std::vector<ScalingPoint> &points) {
    require(points.size() >= 3, ErrorCode::invalid_argument, "power-law fits need at least 3 points");
    std::set<double> seen;
    for (const auto &p : points) {
        require(p.n > 0.0 && std::isfinite(p.n), ErrorCode::invalid_argument, "N_D must be positive");
        require(p.value > 0.0 && std::isfinite(p.value), ErrorCode::invalid_argument,
                "power-law fits need strictly positive values");
        require(seen.insert(p.n).second, ErrorCode::invalid_argument, "duplicate N_D in power-law fit");
    }
    // Sort so the result does not depend on input order.
    std::vector<ScalingPoint> sorted = points;
    std::sort(sorted.begin(), sorted.end(), [](const auto &a, const auto &b) { return a.n < b.n; });

    const double n = static_cast<double>(sorted.size());
    double mx = 0.0;
    double my = 0.0;
    for (const auto &p : sorted) {
        mx += std::log10(p.n);
        my += std::log10(p.value);
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (const auto &p : sorted) {
        const double dx = std::log10(p.n) - mx;
        const double dy = std::log10(p.value) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    ScalingFit fit;
    fit.n_points = static_cast<Index>(sorted.size());
    fit.exponent = sxy / sxx;
    fit.intercept = my - fit.exponent * mx;
    double ssr = 0.0;
    for (const auto &p : sorted) {
        const double r = std::log10(p.value) - (fit.intercept + fit.exponent * std::log10(p.n));
        ssr += r * r;
    }
    fit.slope_sigma = std::sqrt(ssr / (n - 2.0) / sxx);
    fit.r_squared = syy > 0.0 ? 1.0 - ssr / syy : 1.0;
    return fit;
}

enum class FlatnessVerdict { pass, fail, indeterminate };

inline const char *to_string(FlatnessVerdict v) {
    switch (v) {
        case FlatnessVerdict::pass: return "PASS";
        case FlatnessVerdict::fail: return "FAIL";
        case FlatnessVerdict::indeterminate: return "INDETERMINATE";
    }
    return "unknown";
}

struct FlatnessReport {
    FlatnessVerdict verdict = FlatnessVerdict::indeterminate;
    double exponent = 0.0;
    double slope_sigma = 0.0;
    double threshold = 0.15;
    bool within_threshold = false;
    bool within_two_sigma = false;
};

/// PASS when |exponent| <= threshold or |exponent| <= 2 sigma; needs >= 4 points.
inline FlatnessReport epsilon_flatness_check(const ScalingFit &fit, double threshold = 0.15) {
    FlatnessReport r;
    r.exponent = fit.exponent;
    r.slope_sigma = fit.slope_sigma;
    r.threshold = threshold;
    if (fit.n_points < 4) { return r; }
    r.within_threshold = std::abs(fit.exponent) <= threshold;
    r.within_two_sigma = std::abs(fit.exponent) <= 2.0 * fit.slope_sigma;
    r.verdict = (r.within_threshold || r.within_two_sigma) ? FlatnessVerdict::pass : FlatnessVerdict::fail;
    return r;
}

/// Blocks entering the infinite-width prediction at one training-set size.
struct KernelBlocks {
    Matrix theta_test_train;
    Matrix kernel_train;
    Matrix theta_train;
};

struct MatrixElementStats {
    Index n = 0;
    double theta_test_train = 0.0;
    double kernel_train = 0.0;
    double inverse_ntk = 0.0;
    double inverse_ntk_diag = 0.0;
    double inverse_ntk_offdiag = 0.0;
};

struct MatrixScalingReport {
    std::vector<MatrixElementStats> sizes;
    std::vector<Index> excluded;  // sizes where Theta_A was not invertible
    std::optional<ScalingFit> p;  // Theta_B
    std::optional<ScalingFit> r;  // K_A
    std::optional<ScalingFit> k;  // Theta_A^-1, all elements
    std::optional<ScalingFit> k_diag;
    std::optional<ScalingFit> k_offdiag;
};

inline double mean_abs(const Matrix &m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().sum() / static_cast<double>(m.size());
}

/// Mean |element| statistics of an explicit inverse of theta_train.
inline MatrixElementStats element_stats(const KernelBlocks &blocks) {
    const Index n = blocks.theta_train.rows();
    const auto ldlt = factorize_well_conditioned(blocks.theta_train, "training NTK", "size excluded from scan");
    const Matrix inv = ldlt.solve(Matrix::Identity(n, n));
    MatrixElementStats s;
    s.n = n;
    s.theta_test_train = mean_abs(blocks.theta_test_train);
    s.kernel_train = mean_abs(blocks.kernel_train);
    s.inverse_ntk = mean_abs(inv);
    s.inverse_ntk_diag = inv.diagonal().cwiseAbs().mean();
    Matrix off = inv.cwiseAbs();
    off.diagonal().setZero();
    s.inverse_ntk_offdiag = n > 1 ? off.sum() / static_cast<double>(n * (n - 1)) : 0.0;
    return s;
}

namespace detail {

template <class Get>
std::optional<ScalingFit> fit_if_possible(const std::vector<MatrixElementStats> &stats, Get get) {
    std::vector<ScalingPoint> pts;
    for (const auto &s : stats) {
        const double v = get(s);
        if (!(v > 0.0)) { return std::nullopt; }
        pts.push_back({static_cast<double>(s.n), v});
    }
    if (pts.size() < 3) { return std::nullopt; }
    return fit_power_law(pts);
}

}  // namespace detail

/// blocks_for(N_D) returns the kernel blocks at that training-set size.
template <class BlockFn>
MatrixScalingReport matrix_element_scan(BlockFn &&blocks_for, const std::vector<Index> &sizes) {
    MatrixScalingReport report;
    for (Index n : sizes) {
        try {
            report.sizes.push_back(element_stats(blocks_for(n)));
        } catch (const Error &e) {
            if (e.code() != ErrorCode::ill_conditioned) { throw; }
            report.excluded.push_back(n);
        }
    }
    report.p = detail::fit_if_possible(report.sizes, [](const auto &s) { return s.theta_test_train; });
    report.r = detail::fit_if_possible(report.sizes, [](const auto &s) { return s.kernel_train; });
    report.k = detail::fit_if_possible(report.sizes, [](const auto &s) { return s.inverse_ntk; });
    report.k_diag = detail::fit_if_possible(report.sizes, [](const auto &s) { return s.inverse_ntk_diag; });
    report.k_offdiag = detail::fit_if_possible(report.sizes, [](const auto &s) { return s.inverse_ntk_offdiag; });
    return report;
}

/// Scan over nested prefixes of `train_pool` against a fixed test set.
inline MatrixScalingReport matrix_element_scan(const KernelPair &kp, const IndexList &train_pool,
                                               const IndexList &test_ids, const std::vector<Index> &sizes) {
    return matrix_element_scan(
        [&](Index n) {
            require(n >= 1 && n <= static_cast<Index>(train_pool.size()), ErrorCode::invalid_argument,
                    "scan size exceeds the training pool");
            const IndexList train(train_pool.begin(), train_pool.begin() + n);
            return KernelBlocks{kp.Theta_block(test_ids, train), kp.K_block(train, train), kp.Theta_block(train, train)};
        },
        sizes);
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_fit_csv_header(std::ostream &os) {
    os << "quantity,n_points,exponent,slope_sigma,intercept,r_squared\n";
}

inline void write_fit_csv_row(std::ostream &os, const std::string &quantity, const ScalingFit &fit) {
    os << quantity << ',' << fit.n_points << ',' << format_double(fit.exponent) << ','
       << format_double(fit.slope_sigma) << ',' << format_double(fit.intercept) << ','
       << format_double(fit.r_squared) << '\n';
}

inline void write_scan_csv(std::ostream &os, const MatrixScalingReport &report) {
    os << "N_D,stat_name,value\n";
    for (const auto &s : report.sizes) {
        os << s.n << ",theta_test_train," << format_double(s.theta_test_train) << '\n';
        os << s.n << ",kernel_train," << format_double(s.kernel_train) << '\n';
        os << s.n << ",inverse_ntk," << format_double(s.inverse_ntk) << '\n';
        os << s.n << ",inverse_ntk_diag," << format_double(s.inverse_ntk_diag) << '\n';
        os << s.n << ",inverse_ntk_offdiag," << format_double(s.inverse_ntk_offdiag) << '\n';
    }
}

}  // namespace ntkuq
