// Denoise one observation Y = mu + sigma g over an ellipsoid and compare with the
// identity estimator and the best linear minimax risk.

#include <cstdio>

#include "kwest/estimators.hpp"
#include "kwest/harness.hpp"

using namespace kwest;

int main() {
    const int n = 16;
    const Eigen::VectorXd axes = ellipsoid_suite_axes(n);
    const ConvexBody body = ConvexBody::ellipsoid(axes);
    const double sigma = 0.2;

    const Eigen::VectorXd mu = 0.9 * sample_boundary(body, 1, 7).front();
    Rng rng = make_rng(11);
    const Eigen::VectorXd Y = mu + sigma * gaussian_vector(n, rng);

    EstimationConfig cfg;
    cfg.seed = 3;
    const EstimationResult r = run_gsm(body, Y, sigma, cfg);

    std::printf("iteration  dtilde    m  width value\n");
    for (const auto& it : r.trace.iterations)
        std::printf("%9d  %6.3f  %3d  %.4g%s\n", it.j, it.dtilde, it.m, it.oracle_value, it.width_capped ? " (capped)" : "");
    std::printf("\nsquared error, GSM:      %.4f\n", (r.estimate - mu).squaredNorm());
    std::printf("squared error, identity: %.4f\n", (Y - mu).squaredNorm());
    std::printf("linear minimax risk:     %.4f\n", pinsker_risk(axes, sigma));
    std::printf("gauge of the estimate:   %.6f\n", body.gauge(r.estimate));
    return 0;
}
