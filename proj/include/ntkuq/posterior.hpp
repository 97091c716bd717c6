#pragma once

#include <string>
#include <utility>

#include "ntkuq/common.hpp"

namespace ntkuq {

enum class PosteriorMethod { closed_form, iterative, bayesian };

inline const char *to_string(PosteriorMethod m) {
    switch (m) {
        case PosteriorMethod::closed_form: return "closed_form";
        case PosteriorMethod::iterative: return "iterative";
        case PosteriorMethod::bayesian: return "bayesian";
    }
    return "unknown";
}

inline constexpr double kVarianceClampTolerance = 1e-9;

/// Gaussian distribution of the trained infinite-width outputs on a test set.
/// mean is |B| x n_L; cov is the |B| x |B| covariance shared by every output
/// column (distinct output columns are uncorrelated).
struct PredictivePosterior {
    Matrix mean;
    Matrix cov;
    PosteriorMethod method = PosteriorMethod::closed_form;
    long steps_used = 0;
    IndexList test_ids;

    Index n_test() const noexcept { return mean.rows(); }
    Index n_out() const noexcept { return mean.cols(); }
};

// Symmetrizes, then zeroes diagonal entries that are negative only by round-off.
inline Matrix tidy_covariance(const Matrix &cov) {
    Matrix out = 0.5 * (cov + cov.transpose());
    for (Index i = 0; i < out.rows(); ++i) {
        if (out(i, i) < 0.0) {
            require(out(i, i) >= -kVarianceClampTolerance, ErrorCode::non_psd,
                    "posterior variance is negative beyond round-off: " + std::to_string(out(i, i)));
            out(i, i) = 0.0;
        }
    }
    return out;
}

}  // namespace ntkuq
