// Mean estimation from heavy-tailed samples with a planted cluster of outliers.

#include <cmath>
#include <cstdio>

#include "kwest/estimators.hpp"
#include "kwest/harness.hpp"

using namespace kwest;

int main() {
    const int n = 8, N = 20 * n;
    const ConvexBody body = ConvexBody::ellipsoid(ellipsoid_suite_axes(n));
    const Eigen::VectorXd mu = 0.8 * sample_boundary(body, 1, 5).front();

    Rng rng = make_rng(21);
    Eigen::MatrixXd S(N, n);
    for (int i = 0; i < N; ++i) {
        Eigen::VectorXd g(n);
        for (int c = 0; c < n; ++c) g(c) = student_t(3.0, rng) / std::sqrt(3.0);
        S.row(i) = (mu + g).transpose();
    }
    RobustConfig rc;
    rc.contamination = 0.1;
    const Eigen::VectorXd far = 10.0 * body.outer_radius() * Eigen::VectorXd::Unit(n, 0);
    for (int i = 0; i < N / 10; ++i) S.row(i) = far.transpose();

    EstimationConfig cfg;
    cfg.seed = 1;
    const EstimationResult r = run_robust(body, S, 1.0, rc, cfg);
    const Eigen::VectorXd mean = S.colwise().mean().transpose();

    std::printf("squared error, sample mean: %.4f\n", (mean - mu).squaredNorm());
    std::printf("squared error, robust:      %.4f\n", (r.estimate - mu).squaredNorm());
    std::printf("blocks per iteration:");
    for (const auto& it : r.trace.iterations) std::printf(" %d", it.blocks);
    std::printf("\ngauge of the estimate: %.6f\n", body.gauge(r.estimate));
    return 0;
}
