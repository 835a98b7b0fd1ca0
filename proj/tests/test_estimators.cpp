#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "kwest/estimators.hpp"
#include "oracles.hpp"

using namespace kwest;

namespace {

Eigen::VectorXd decaying_axes(int n, double top = 4.0) {
    Eigen::VectorXd a(n);
    for (int i = 0; i < n; ++i) a(i) = std::max(top * std::pow(0.5, i), 1.0 / n);
    return a;
}

Eigen::VectorXd boundary_point(const ConvexBody& body, std::uint64_t seed) {
    return sample_boundary(body, 1, seed).front();
}

// Sum of distances, for checking geometric medians against perturbations.
double distance_sum(const Eigen::MatrixXd& B, const Eigen::VectorXd& x) {
    return (B.rowwise() - x.transpose()).rowwise().norm().sum();
}

EstimationConfig fast_config() {
    EstimationConfig cfg;
    cfg.width.max_iter_cap = 400;
    return cfg;
}

} // namespace

TEST(Schedule, LengthAndShrink) {
    EstimationConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.shrink(), 0.5);
    EXPECT_EQ(schedule_length(16.0, 0.5), 4);
    EXPECT_EQ(schedule_length(17.0, 0.5), 5);
    EXPECT_EQ(schedule_length(1.0, 0.5), 1);
    EXPECT_THROW(schedule_length(std::numeric_limits<double>::infinity(), 0.5), InvalidInput);
    cfg.L_tilde = 2.0 * kSqrt3p1;
    EXPECT_THROW(cfg.validate(), InvalidInput);
}

TEST(RunGsm, ZeroNoiseReturnsObservation) {
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(6));
    Eigen::VectorXd Y(6);
    Y << 5, -1, 0.2, 0.3, 0.1, 3;
    const EstimationResult r = run_gsm(body, Y, 0.0);
    EXPECT_TRUE(r.trace.early_return);
    EXPECT_TRUE(r.estimate == Y);
    EstimationConfig cfg;
    cfg.project_early_return = true;
    const EstimationResult p = run_gsm(body, Y, 0.0, cfg);
    EXPECT_LE(body.gauge(p.estimate), 1.0 + 1e-9);
}

TEST(RunGsm, TinyBodyStopsAtOnce) {
    const ConvexBody body = ConvexBody::ball(5, 1e-3);
    Rng rng = make_rng(1);
    const Eigen::VectorXd Y = gaussian_vector(5, rng);
    const EstimationResult r = run_gsm(body, Y, 1.0, fast_config());
    EXPECT_LE(r.trace.iterations.size(), 1u);
    EXPECT_LE(r.estimate.norm(), 2e-3);
}

TEST(RunGsm, ScheduleAndProperness) {
    const int n = 8;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n));
    const EstimationConfig cfg = fast_config();
    Rng rng = make_rng(2);
    for (double sigma : {0.1, 0.4, 1.0}) {
        const Eigen::VectorXd mu = boundary_point(body, 10);
        const Eigen::VectorXd Y = mu + sigma * gaussian_vector(n, rng);
        const EstimationResult r = run_gsm(body, Y, sigma, cfg);
        const auto& it = r.trace.iterations;
        ASSERT_FALSE(it.empty());
        EXPECT_LE(static_cast<int>(it.size()), r.trace.max_iterations);
        EXPECT_DOUBLE_EQ(it.front().dtilde, 2.0 * body.outer_radius());
        for (std::size_t j = 1; j < it.size(); ++j) EXPECT_EQ(it[j].dtilde, it[j - 1].dtilde * cfg.shrink());
        for (const auto& x : r.trace.iterates) EXPECT_LE(body.gauge(x), 1.0 + 1e-9);
        EXPECT_EQ(r.trace.iterates.size(), it.size() + 1);
        EXPECT_TRUE(r.estimate == r.trace.iterates.back());
        // Stops exactly when the next radius reaches max(2r, C sigma).
        const double last = it.back().dtilde * cfg.shrink();
        if (static_cast<int>(it.size()) < r.trace.max_iterations)
            EXPECT_LE(last, std::max(2.0 * body.inner_radius(), cfg.C * sigma));
        for (std::size_t j = 0; j + 1 < it.size(); ++j)
            EXPECT_GT(it[j].dtilde * cfg.shrink(), std::max(2.0 * body.inner_radius(), cfg.C * sigma));
        for (const auto& rec : it) {
            EXPECT_EQ(rec.m, select_width_rank(rec.dtilde, sigma, n, cfg.C));
            EXPECT_GE(rec.fail_budget, 0.0);
            if (rec.width_iterations > 0) EXPECT_GT(rec.fail_budget, 0.0);
        }
    }
}

TEST(RunGsm, BeatsIdentityAtHighNoise) {
    // With n sigma^2 far above the squared diameter the estimate must do better than Y.
    const int n = 8;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n, 1.0));
    const EstimationConfig cfg = fast_config();
    WidthCache cache;
    Rng rng = make_rng(3);
    double mse = 0.0, mse_id = 0.0;
    const int trials = 40;
    for (int t = 0; t < trials; ++t) {
        const Eigen::VectorXd mu = boundary_point(body, 100 + t);
        const Eigen::VectorXd Y = mu + 1.0 * gaussian_vector(n, rng);
        mse += (run_gsm(body, Y, 1.0, cfg, &cache).estimate - mu).squaredNorm() / trials;
        mse_id += (Y - mu).squaredNorm() / trials;
    }
    EXPECT_LT(mse, 0.5 * mse_id);
    EXPECT_LE(mse, 4.0 * body.outer_radius() * body.outer_radius());
}

TEST(RunGsm, CacheDoesNotChangeResults) {
    const int n = 6;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n));
    const EstimationConfig cfg = fast_config();
    WidthCache cache;
    Rng rng = make_rng(4);
    const Eigen::VectorXd Y = boundary_point(body, 5) + 0.2 * gaussian_vector(n, rng);
    const EstimationResult a = run_gsm(body, Y, 0.2, cfg);
    const EstimationResult b = run_gsm(body, Y, 0.2, cfg, &cache);
    const std::size_t filled = cache.size();
    const EstimationResult c = run_gsm(body, Y, 0.2, cfg, &cache);
    EXPECT_GT(filled, 0u);
    EXPECT_EQ(cache.size(), filled);
    EXPECT_TRUE(a.estimate == b.estimate);
    EXPECT_TRUE(b.estimate == c.estimate);
}

TEST(RunGsm, RejectsBadInput) {
    const ConvexBody body = ConvexBody::ball(3);
    EXPECT_THROW(run_gsm(body, Eigen::VectorXd::Zero(2), 1.0), InvalidInput);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(3);
    y(1) = std::nan("");
    EXPECT_THROW(run_gsm(body, y, 1.0), InvalidInput);
    EXPECT_THROW(run_gsm(body, Eigen::VectorXd::Zero(3), -1.0), InvalidInput);
}

TEST(RobustMean, SingleBlockIsMean) {
    Rng rng = make_rng(5);
    Eigen::MatrixXd S(7, 3);
    for (int i = 0; i < 7; ++i) S.row(i) = gaussian_vector(3, rng).transpose();
    const Eigen::VectorXd m = robust_mean(S, 1);
    EXPECT_LT((m - S.colwise().mean().transpose()).norm(), 1e-14);
}

TEST(RobustMean, SymmetricMedian) {
    Eigen::MatrixXd S(3, 1);
    S << -1, 0, 1;
    EXPECT_NEAR(robust_mean(S, 3)(0), 0.0, 1e-12);
    EXPECT_NEAR(robust_mean(S, 3, RobustMeanMethod::coordinatewise_median)(0), 0.0, 0.0);
    EXPECT_THROW(robust_mean(S, 4), InvalidInput);
    EXPECT_THROW(robust_mean(S, 0), InvalidInput);
}

TEST(RobustMean, BlocksAreBalanced) {
    // Distinct integers: the block means of 10 points in 3 blocks come from blocks of 4, 3, 3.
    Eigen::MatrixXd S(10, 1);
    for (int i = 0; i < 10; ++i) S(i, 0) = i;
    const Eigen::VectorXd m1 = robust_mean(S, 10, RobustMeanMethod::coordinatewise_median);
    EXPECT_DOUBLE_EQ(m1(0), 4.5);
    const Eigen::VectorXd m = robust_mean(S, 5, RobustMeanMethod::coordinatewise_median, 3);
    EXPECT_GE(m(0), 0.0);
    EXPECT_LE(m(0), 9.0);
}

TEST(RobustMean, PermutationInvariant) {
    Rng rng = make_rng(6);
    Eigen::MatrixXd S(41, 4);
    for (int i = 0; i < 41; ++i) S.row(i) = gaussian_vector(4, rng).transpose();
    const Eigen::VectorXd base = robust_mean(S, 7, RobustMeanMethod::geometric_median, 11);
    std::vector<int> perm(41);
    std::iota(perm.begin(), perm.end(), 0);
    for (int t = 0; t < 10; ++t) {
        std::shuffle(perm.begin(), perm.end(), rng);
        Eigen::MatrixXd P(41, 4);
        for (int i = 0; i < 41; ++i) P.row(i) = S.row(perm[static_cast<std::size_t>(i)]);
        EXPECT_LE((robust_mean(P, 7, RobustMeanMethod::geometric_median, 11) - base).norm(), 1e-9);
    }
}

TEST(RobustMean, GeometricMedianIsOptimal) {
    Rng rng = make_rng(7);
    for (int t = 0; t < 30; ++t) {
        const int k = 3 + t % 9, n = 1 + t % 4;
        Eigen::MatrixXd B(k, n);
        for (int i = 0; i < k; ++i) B.row(i) = gaussian_vector(n, rng).transpose();
        if (t % 3 == 0) B.row(1) = B.row(0);  // repeated point
        const Eigen::VectorXd x = geometric_median(B);
        const double f = distance_sum(B, x);
        for (int p = 0; p < 200; ++p)
            EXPECT_GE(distance_sum(B, x + 1e-4 * gaussian_vector(n, rng)), f - 1e-9);
    }
}

TEST(RobustMean, ResistsOutliersLikeTrimmedMean) {
    // Clean 2-d Gaussian samples plus 10% at a far point; the trimmed mean knows the outliers.
    double err = 0.0, err_trim = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng = make_rng(1000 + seed);
        const int N = 200, bad = 20;
        Eigen::MatrixXd S(N, 2);
        for (int i = 0; i < N; ++i) S.row(i) = gaussian_vector(2, rng).transpose();
        Eigen::VectorXd clean_mean = S.bottomRows(N - bad).colwise().mean().transpose();
        for (int i = 0; i < bad; ++i) S.row(i) << 50.0, -30.0;
        err += robust_mean(S, 60, RobustMeanMethod::geometric_median, seed).norm();
        err_trim += clean_mean.norm();
    }
    EXPECT_LE(err, 5.0 * err_trim);
}

TEST(RunRobust, IdenticalSamplesRecoverPoint) {
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(5));
    const Eigen::VectorXd mu = 0.7 * boundary_point(body, 3);
    Eigen::MatrixXd S = mu.transpose().replicate(40, 1);
    const EstimationResult r = run_robust(body, S, 0.5, {}, fast_config());
    EXPECT_LT((r.estimate - mu).norm(), 1e-6);
}

TEST(RunRobust, FarClusterStaysInBody) {
    const int n = 6, N = 20 * n;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n));
    const EstimationConfig cfg = fast_config();
    Rng rng = make_rng(8);
    RobustConfig rc;
    rc.contamination = 0.1;
    for (int t = 0; t < 3; ++t) {
        const Eigen::VectorXd mu = boundary_point(body, 20 + t);
        Eigen::MatrixXd S(N, n);
        for (int i = 0; i < N; ++i) S.row(i) = (mu + 0.5 * gaussian_vector(n, rng)).transpose();
        const Eigen::VectorXd far = 10.0 * body.outer_radius() * Eigen::VectorXd::Unit(n, 0);
        for (int i = 0; i < N / 10; ++i) S.row(i) = far.transpose();
        const EstimationResult r = run_robust(body, S, 0.5, rc, cfg);
        EXPECT_LE(body.gauge(r.estimate), 1.0 + 1e-9);
        for (const auto& x : r.trace.iterates) EXPECT_LE(body.gauge(x), 1.0 + 1e-9);
        EXPECT_LE(r.trace.r, body.inner_radius());
        for (const auto& rec : r.trace.iterations) {
            // Never fewer than four blocks per corrupted sample, so most blocks stay clean.
            EXPECT_GE(rec.blocks, std::min(N, 4 * (N / 10)));
            EXPECT_LE(rec.blocks, N);
        }
        const double mean_err = (S.colwise().mean().transpose() - mu).norm();
        EXPECT_LT((r.estimate - mu).norm(), 0.1 * mean_err);
    }
}

TEST(RunRobust, RejectsBadInput) {
    const ConvexBody body = ConvexBody::ball(2);
    EXPECT_THROW(run_robust(body, Eigen::MatrixXd(0, 2), 1.0), InvalidInput);
    EXPECT_THROW(run_robust(body, Eigen::MatrixXd::Zero(3, 3), 1.0), InvalidInput);
    RobustConfig rc;
    rc.contamination = 0.5;
    EXPECT_THROW(run_robust(body, Eigen::MatrixXd::Zero(3, 2), 1.0, rc), InvalidInput);
}

TEST(CenterPairs, DifferencesAndFloor) {
    RegressionData d;
    d.Z.resize(5, 2);
    d.Z << 1, 2, 3, 5, 4, 4, 10, 1, 7, 7;
    d.Y.resize(5);
    d.Y << 1, 2, 3, 4, 5;
    const RegressionData c = center_pairs(d);
    EXPECT_EQ(c.Z.rows(), 2);
    EXPECT_TRUE(c.centered);
    EXPECT_DOUBLE_EQ(c.Z(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(c.Z(1, 1), -3.0);
    EXPECT_DOUBLE_EQ(c.Y(1), 1.0);
    RegressionData one;
    one.Z = Eigen::MatrixXd::Ones(1, 2);
    one.Y = Eigen::VectorXd::Ones(1);
    EXPECT_THROW(center_pairs(one), InvalidInput);
}

TEST(CenterPairs, ConstantShiftCancels) {
    Rng rng = make_rng(9);
    RegressionData d;
    d.Z.resize(40, 3);
    const Eigen::RowVector3d z0(5.0, -2.0, 7.0);
    for (int i = 0; i < 40; ++i) d.Z.row(i) = z0 + gaussian_vector(3, rng).transpose();
    d.Y = Eigen::VectorXd::Zero(40);
    const RegressionData c = center_pairs(d);
    for (int i = 0; i < c.Z.rows(); ++i) {
        const Eigen::RowVectorXd w = d.Z.row(2 * i + 1) - d.Z.row(2 * i);
        EXPECT_LT((c.Z.row(i) - w).norm(), 1e-12);
    }
}

TEST(RunRegression, NoiselessIdentityDesign) {
    const int n = 5;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n, 2.0));
    const Eigen::VectorXd beta = 0.9 * boundary_point(body, 4);
    RegressionData d;
    d.Z = Eigen::MatrixXd::Identity(n, n);
    d.Y = beta;
    EstimationConfig cfg = fast_config();
    cfg.regression_min_ratio = 1.0;
    EXPECT_LT((run_regression(body, d, cfg, 0.0).estimate - beta).norm(), 1e-4);
    d.Y.setZero();
    EXPECT_LT(run_regression(body, d, cfg, 0.0).estimate.norm(), 1e-6);
}

TEST(RunRegression, NoiselessMatchesAfterDifferencing) {
    const int n = 4, N = 40;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n, 1.0));
    const Eigen::VectorXd beta = 0.8 * boundary_point(body, 6);
    Rng rng = make_rng(10);
    RegressionData d;
    d.Z.resize(N, n);
    for (int i = 0; i < N; ++i) d.Z.row(i) = gaussian_vector(n, rng).transpose();
    d.Y = d.Z * beta;
    const Eigen::VectorXd b1 = run_regression(body, d, fast_config(), 0.0).estimate;
    const Eigen::VectorXd b2 = run_regression(body, center_pairs(d), fast_config(), 0.0).estimate;
    EXPECT_LT((b1 - b2).norm(), 1e-6);
    EXPECT_LT((b1 - beta).norm(), 1e-6);
}

TEST(RunRegression, NoisyFitIsProperAndImproves) {
    const int n = 6;
    const ConvexBody body = ConvexBody::ellipsoid(decaying_axes(n, 1.0));
    const EstimationConfig cfg = fast_config();
    WidthCache cache;
    Rng rng = make_rng(11);
    double err_small = 0.0, err_large = 0.0;
    for (int t = 0; t < 10; ++t) {
        const Eigen::VectorXd beta = boundary_point(body, 50 + t);
        for (int N : {2 * n, 32 * n}) {
            RegressionData d;
            d.Z.resize(N, n);
            for (int i = 0; i < N; ++i) d.Z.row(i) = gaussian_vector(n, rng).transpose();
            d.Y = d.Z * beta + gaussian_vector(N, rng);
            const EstimationResult r = run_regression(body, d, cfg, 1.0, &cache);
            EXPECT_LE(body.gauge(r.estimate), 1.0 + 1e-9);
            EXPECT_LE(r.trace.r, 0.5 * std::sqrt(static_cast<double>(n) / N) + 1e-15);
            (N == 2 * n ? err_small : err_large) += (r.estimate - beta).squaredNorm();
        }
    }
    EXPECT_LT(err_large, err_small);
}

TEST(RunRegression, RejectsBadDesigns) {
    const ConvexBody body = ConvexBody::ball(3);
    RegressionData d;
    d.Z = Eigen::MatrixXd::Zero(8, 3);
    d.Z.col(0).setOnes();
    d.Z.col(1).setOnes();
    d.Z(0, 2) = 1.0;
    d.Y = Eigen::VectorXd::Zero(8);
    EXPECT_THROW(run_regression(body, d), IllConditionedDesign);
    d.Z = Eigen::MatrixXd::Identity(3, 3);
    d.Y = Eigen::VectorXd::Zero(3);
    EXPECT_THROW(run_regression(body, d), InvalidInput);
}
