#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "caps_proj.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "qfm.hpp"
#include "rng.hpp"
#include "symmetric_matrix.hpp"

namespace kwest {

struct WidthSdpConfig {
    double C = 8.0;
    int max_iter_cap = 0;            ///< 0: 20 (n - m) C^2
    double gamma = 0.0;              ///< 0: 1 / (kappa C^2)
    double oracle_fail_prob = 1e-3;  ///< q per oracle call
    std::function<void(int, const SymmetricMatrix&)> on_iterate;  ///< sees each projected iterate

    void validate() const {
        detail::require(C >= 1.0, "width config: C must be >= 1");
        detail::require(max_iter_cap >= 0, "width config: max_iter_cap must be >= 1 (0 selects the default)");
        detail::require(gamma >= 0.0 && std::isfinite(gamma), "width config: gamma must be > 0 (0 selects the default)");
        detail::require(oracle_fail_prob > 0.0 && oracle_fail_prob < 1.0, "width config: fail_prob must lie in (0, 1)");
    }
};

struct WidthSdpResult {
    SymmetricMatrix X_star2;  ///< best iterate, 0 <= X <= I, tr X = n - m
    SymmetricMatrix A_star2;  ///< (I - X)^{1/2}
    double best_value = 0.0;  ///< oracle value at X_star2
    int m = 0;
    int iterations_run = 0;
    double theoretical_iterations = 0.0;  ///< 4 (n - m) C^4 kappa^2
    int iteration_budget = 0;             ///< min(theoretical, cap)
    bool capped = false;                  ///< the cap was binding
    bool degenerate = false;              ///< the oracle returned p ~ 0
    double nominal_fail_budget = 0.0;     ///< iterations_run * q
    std::vector<double> best_history;     ///< running best value per iteration
};

/// m = min(ceil((dtilde / (C sigma_eff))^2), n); sigma_eff = 0 gives n.
inline int select_width_rank(double dtilde, double sigma_eff, int n, double C = 8.0) {
    detail::require(n >= 1, "select_width_rank: n must be >= 1");
    detail::require(dtilde >= 0.0 && sigma_eff >= 0.0 && C > 0.0, "select_width_rank: arguments must be >= 0");
    if (sigma_eff == 0.0) return n;
    const double ratio = dtilde / (C * sigma_eff);
    const double x = ratio * ratio;
    if (!(x < static_cast<double>(n))) return n;
    // Absorb rounding in the ratio so that an exact integer is not bumped up.
    return std::min(n, static_cast<int>(std::ceil(x * (1.0 - 1e-12))));
}

/// (I - X)^{1/2} for 0 <= X <= I; eigenvalues within 1e-8 outside [0,1] are clamped.
inline SymmetricMatrix shrinkage_matrix(const SymmetricMatrix& X) {
    const Spectral& s = X.spectral();
    constexpr double band = 1e-8;
    if (s.values.size() > 0 && (s.values.maxCoeff() > 1.0 + band || s.values.minCoeff() < -band))
        throw InvalidInput("shrinkage_matrix: eigenvalues must lie in [0, 1]");
    return X.apply([](double l) { return std::sqrt(1.0 - std::clamp(l, 0.0, 1.0)); });
}

/**
 * @brief Projected subgradient descent for min over {0 <= X <= I, tr X = n - m} of max_{p in K} p^T X p.
 *
 * One oracle call per iteration: the returned p both scores the current iterate and gives the
 * subgradient p p^T. Step gamma / |p|^2, then projection onto the capped spectahedron.
 */
inline WidthSdpResult solve_width_sdp(const ConvexBody& body, int m, const QfmOracle& oracle,
                                      const WidthSdpConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int n = body.dim();
    detail::require(m >= 0 && m <= n, "solve_width_sdp: need 0 <= m <= n");
    detail::require(oracle.body().dim() == n, "solve_width_sdp: oracle dimension mismatch");
    const double kappa = std::isnan(oracle.kappa()) ? 1.0 : oracle.kappa();
    const int k = n - m;
    oracle.reset();

    WidthSdpResult res;
    res.m = m;
    res.theoretical_iterations = 4.0 * k * std::pow(cfg.C, 4) * kappa * kappa;
    const double cap = cfg.max_iter_cap > 0 ? cfg.max_iter_cap : 20.0 * k * cfg.C * cfg.C;
    res.capped = res.theoretical_iterations > cap;
    res.iteration_budget = static_cast<int>(std::max(1.0, std::ceil(std::min(res.theoretical_iterations, cap))));

    if (k == 0 || k == n) {
        res.X_star2 = k == 0 ? SymmetricMatrix::zero(n) : SymmetricMatrix::identity(n);
        res.A_star2 = k == 0 ? SymmetricMatrix::identity(n) : SymmetricMatrix::zero(n);
        res.best_value = k == 0 ? 0.0 : oracle.maximize(res.X_star2, derive_seed(seed, 0), cfg.oracle_fail_prob).value;
        return res;
    }

    const double gamma = cfg.gamma > 0.0 ? cfg.gamma : 1.0 / (kappa * cfg.C * cfg.C);
    SymmetricMatrix X = SymmetricMatrix::identity(n);
    X = SymmetricMatrix(X.matrix() * (static_cast<double>(k) / n));
    SymmetricMatrix best_X = X;
    double best = std::numeric_limits<double>::infinity();
    res.best_history.reserve(static_cast<std::size_t>(res.iteration_budget));

    for (int j = 0; j < res.iteration_budget; ++j) {
        const QfmResult o = oracle.maximize(X, derive_seed(seed, static_cast<std::uint64_t>(j)), cfg.oracle_fail_prob);
        ++res.iterations_run;
        if (o.value < best) {
            best = o.value;
            best_X = X;
        }
        res.best_history.push_back(best);
        const double pn2 = o.point.squaredNorm();
        if (!(std::sqrt(pn2) >= 1e-14)) {
            res.degenerate = true;
            break;
        }
        Eigen::MatrixXd Y = X.matrix() - (gamma / pn2) * (o.point * o.point.transpose());
        X = project_spectahedron(SymmetricMatrix(std::move(Y)), k);
        if (cfg.on_iterate) cfg.on_iterate(j, X);
    }
    res.best_value = best;
    res.X_star2 = best_X;
    res.A_star2 = shrinkage_matrix(best_X);
    res.nominal_fail_budget = res.iterations_run * cfg.oracle_fail_prob;
    return res;
}

/// Width solve with the oracle matched to the body.
inline WidthSdpResult solve_width_sdp(const ConvexBody& body, int m, const WidthSdpConfig& cfg = {},
                                      std::uint64_t seed = 0) {
    return solve_width_sdp(body, m, *make_oracle(body), cfg, seed);
}

/// q = M^{-1} / (1 + dtilde^3 / sigma^3), the per-call failure budget.
inline double width_fail_prob(double iterations, double dtilde, double sigma) {
    detail::require(iterations >= 1.0, "width_fail_prob: iterations must be >= 1");
    const double r = sigma > 0.0 ? dtilde / sigma : std::numeric_limits<double>::infinity();
    const double q = 1.0 / (iterations * (1.0 + r * r * r));
    return std::clamp(q, 1e-300, 0.5);
}

} // namespace kwest
