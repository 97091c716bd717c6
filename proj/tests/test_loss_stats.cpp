#include <gtest/gtest.h>

#include <random>

#include "ntkuq/io.hpp"
#include "ntkuq/loss_stats.hpp"
#include "oracles.hpp"

using namespace ntkuq;

namespace {

PredictivePosterior make_post(const Matrix &mean, const Matrix &cov) {
    PredictivePosterior p;
    p.mean = mean;
    p.cov = cov;
    return p;
}

struct RandomCase {
    PredictivePosterior post;
    Matrix labels;
};

RandomCase random_case(int b, int n, std::uint64_t seed, double delta_scale = 0.5) {
    std::mt19937_64 rng(seed);
    RandomCase c;
    c.post.mean = oracle::random_matrix(b, n, rng);
    c.post.cov = oracle::random_spd(b, rng, 0.1);
    c.labels = c.post.mean + oracle::random_matrix(b, n, rng, delta_scale);
    return c;
}

}  // namespace

TEST(LossMean, PerfectDeterministicPredictor) {
    const Matrix m = Matrix::Ones(3, 2);
    EXPECT_EQ(loss_mean(m, Matrix::Zero(3, 3), m), 0.0);
}

TEST(LossMean, SinglePointHalfVariance) {
    EXPECT_DOUBLE_EQ(loss_mean(Matrix::Zero(1, 1), Matrix::Constant(1, 1, 0.8), Matrix::Zero(1, 1)), 0.4);
}

TEST(LossMean, AcceptsDiagonalOnly) {
    const auto c = random_case(4, 3, 1);
    const Vector diag = c.post.cov.diagonal();
    EXPECT_DOUBLE_EQ(loss_mean(c.post.mean, diag, c.labels), loss_mean(c.post, c.labels));
}

TEST(LossVariance, ZeroCovarianceGivesZero) {
    const auto c = random_case(4, 2, 2);
    EXPECT_EQ(loss_variance(c.post.mean, Matrix::Zero(4, 4), c.labels), 0.0);
}

TEST(LossVariance, SinglePointChiSquare) {
    EXPECT_DOUBLE_EQ(loss_variance(Matrix::Zero(1, 1), Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1)), 0.5);
    EXPECT_DOUBLE_EQ(loss_variance(Matrix::Zero(1, 1), Matrix::Constant(1, 1, 3.0), Matrix::Zero(1, 1)), 4.5);
}

TEST(LossVariance, RequiresFullCovariance) {
    const auto c = random_case(4, 1, 3);
    const Vector diag = c.post.cov.diagonal();
    try {
        loss_variance(c.post.mean, diag, c.labels);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
    }
}

TEST(LossMoments, DimensionErrors) {
    const auto c = random_case(4, 2, 4);
    EXPECT_THROW(loss_mean(c.post.mean, c.post.cov, Matrix::Zero(4, 3)), Error);
    EXPECT_THROW(loss_variance(c.post.mean, Matrix::Zero(3, 3), c.labels), Error);
}

TEST(LossMoments, MatchWickQuarticSum) {
    for (int b : {1, 3, 5}) {
        for (int n : {1, 2, 3}) {
            const auto c = random_case(b, n, static_cast<std::uint64_t>(b * 10 + n));
            const auto [mu, var] = oracle::wick_loss_moments(c.post.mean, c.post.cov, c.labels);
            EXPECT_NEAR(loss_mean(c.post, c.labels), mu, 1e-12 * std::max(1.0, mu));
            EXPECT_NEAR(loss_variance(c.post, c.labels), var, 1e-10 * std::max(1.0, var));
        }
    }
}

TEST(LossMoments, AgreeWithMonteCarlo) {
    struct Shape {
        int b, n;
    };
    const Shape shapes[] = {{4, 3}, {4, 2}, {1, 1}, {6, 1}, {3, 3}};
    for (const auto &s : shapes) {
        const auto c = random_case(s.b, s.n, static_cast<std::uint64_t>(s.b * 7 + s.n));
        const auto mc = mc_loss_moments(c.post, c.labels, 200'000, 99);
        EXPECT_LE(std::abs(mc.mean - loss_mean(c.post, c.labels)), 4.0 * mc.mean_se) << s.b << 'x' << s.n;
        EXPECT_LE(std::abs(mc.variance - loss_variance(c.post, c.labels)), 4.0 * mc.variance_se) << s.b << 'x' << s.n;
    }
}

TEST(LossMoments, NlOneMatchesScalarFormula) {
    // Scalar form: mu = sum(D_b^2 + S_bb) / 2B, E[L^2] from the quartic sum at n_L = 1.
    const auto c = random_case(5, 1, 8);
    const Vector d = c.labels.col(0) - c.post.mean.col(0);
    const Matrix &S = c.post.cov;
    const double b = 5.0;
    double mu = 0.0;
    for (Index i = 0; i < 5; ++i) { mu += d(i) * d(i) + S(i, i); }
    mu /= 2.0 * b;
    double second = 0.0;
    for (Index i = 0; i < 5; ++i) {
        for (Index j = 0; j < 5; ++j) {
            second += S(i, i) * S(j, j) + 2 * S(i, j) * S(i, j) + d(i) * d(i) * S(j, j) + d(j) * d(j) * S(i, i) +
                      4 * S(i, j) * d(i) * d(j) + d(i) * d(i) * d(j) * d(j);
        }
    }
    second /= 4.0 * b * b;
    EXPECT_NEAR(loss_mean(c.post, c.labels), mu, 1e-14);
    EXPECT_NEAR(loss_variance(c.post, c.labels), second - mu * mu, 1e-12);
}

TEST(LossMoments, Nonnegative) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto c = random_case(1 + static_cast<int>(s % 6), 1 + static_cast<int>(s % 3), s);
        EXPECT_GE(loss_mean(c.post, c.labels), 0.0);
        EXPECT_GE(loss_variance(c.post, c.labels), 0.0);
    }
}

TEST(LossMoments, PermutationInvariant) {
    const auto c = random_case(6, 2, 15);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
    perm.indices() << 3, 0, 5, 1, 4, 2;
    const Matrix mean = perm * c.post.mean;
    const Matrix cov = perm * c.post.cov * perm.transpose();
    const Matrix labels = perm * c.labels;
    const auto a = loss_stats(c.post, c.labels);
    const auto b = loss_stats(make_post(mean, cov), labels);
    EXPECT_NEAR(a.mu_L, b.mu_L, 1e-12);
    EXPECT_NEAR(a.var_L, b.var_L, 1e-12);
    EXPECT_NEAR(*a.eps_L, *b.eps_L, 1e-12);
}

TEST(CoefficientOfVariation, Definition) {
    EXPECT_NEAR(*coefficient_of_variation(0.5, 0.125), 0.7071067811865476, 1e-15);
    EXPECT_EQ(*coefficient_of_variation(0.3, 0.0), 0.0);
    EXPECT_FALSE(coefficient_of_variation(0.0, 0.0).has_value());
    LossStats s;
    s.mu_L = 0.0;
    s.var_L = 1.0;
    EXPECT_FALSE(coefficient_of_variation(s).has_value());
}

TEST(CoefficientOfVariation, ScaleInvariant) {
    const auto c = random_case(5, 2, 21);
    const double k = 3.7;
    const Matrix labels = c.post.mean + k * (c.labels - c.post.mean);
    const auto base = loss_stats(c.post, c.labels);
    const auto scaled = loss_stats(make_post(c.post.mean, k * k * c.post.cov), labels);
    EXPECT_NEAR(scaled.mu_L, k * k * base.mu_L, 1e-10 * scaled.mu_L);
    EXPECT_NEAR(scaled.var_L, std::pow(k, 4) * base.var_L, 1e-10 * scaled.var_L);
    EXPECT_NEAR(*scaled.eps_L, *base.eps_L, 1e-10);
}

TEST(McMoments, DeterministicCovariance) {
    const auto c = random_case(4, 2, 30);
    const auto post = make_post(c.post.mean, Matrix::Zero(4, 4));
    const auto mc = mc_loss_moments(post, c.labels, 1000, 1);
    const double expect = (c.labels - c.post.mean).squaredNorm() / 16.0;
    EXPECT_NEAR(mc.mean, expect, 1e-13 * expect);
    EXPECT_NEAR(mc.variance, 0.0, 1e-28);
}

TEST(McMoments, SinglePointUnitVariance) {
    const auto post = make_post(Matrix::Zero(1, 1), Matrix::Ones(1, 1));
    const auto mc = mc_loss_moments(post, Matrix::Zero(1, 1), 200'000, 7);
    EXPECT_LE(std::abs(mc.mean - 0.5), 4.0 * mc.mean_se);
}

TEST(McMoments, SeededAndValidated) {
    const auto c = random_case(3, 1, 31);
    const auto a = mc_loss_moments(c.post, c.labels, 2000, 5);
    const auto b = mc_loss_moments(c.post, c.labels, 2000, 5);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.variance, b.variance);
    EXPECT_THROW(mc_loss_moments(c.post, c.labels, 999, 5), Error);
}

TEST(LossStats, JsonShape) {
    const auto c = random_case(3, 2, 40);
    const auto s = loss_stats(c.post, c.labels);
    const Json j = to_json(s);
    EXPECT_DOUBLE_EQ(j.at("mu_L").get<double>(), s.mu_L);
    EXPECT_EQ(j.at("n_test").get<Index>(), 3);
    EXPECT_EQ(j.at("n_out").get<Index>(), 2);
    EXPECT_EQ(j.at("method").get<std::string>(), "closed_form");
    LossStats zero;
    EXPECT_TRUE(to_json(zero).at("eps_L").is_null());
}
