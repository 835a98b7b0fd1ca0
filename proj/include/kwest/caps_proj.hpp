#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "symmetric_matrix.hpp"

namespace kwest {

struct CappedSimplexResult {
    Eigen::VectorXd w;
    double theta = 0.0;
};

namespace detail {

inline double capped_sum(const Eigen::VectorXd& v, double theta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += std::clamp(v(i) - theta, 0.0, 1.0);
    return s;
}

// f(theta) is continuous and non-increasing; f(min v - 1) = n, f(max v) = 0.
inline double capped_theta_bisect(const Eigen::VectorXd& v, int k) {
    double lo = v.minCoeff() - 1.0, hi = v.maxCoeff();
    for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo) + std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        if (capped_sum(v, mid) > k) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace detail

/**
 * @brief Euclidean projection of v onto {w in [0,1]^n : sum w = k} by a breakpoint scan.
 *
 * Breakpoints are v_i - 1 and v_i. On each interval between consecutive breakpoints
 * the capped sum is affine in theta, so the root is solved in closed form there.
 */
inline CappedSimplexResult project_capped_simplex(const Eigen::VectorXd& v, int k) {
    const Eigen::Index n = v.size();
    detail::require(k >= 0 && k <= n, "project_capped_simplex: k must lie in {0..n}");
    detail::require(v.allFinite(), "project_capped_simplex: non-finite input");

    CappedSimplexResult out;
    if (n == 0) {
        out.w = Eigen::VectorXd(0);
        return out;
    }
    if (k == n) {
        out.w = Eigen::VectorXd::Ones(n);
        out.theta = v.minCoeff() - 1.0;
        return out;
    }
    if (k == 0) {
        out.w = Eigen::VectorXd::Zero(n);
        out.theta = v.maxCoeff();
        return out;
    }

    constexpr double tol = 1e-12;
    std::vector<double> b;
    b.reserve(static_cast<std::size_t>(2 * n));
    for (Eigen::Index i = 0; i < n; ++i) {
        b.push_back(v(i) - 1.0);
        b.push_back(v(i));
    }
    std::sort(b.begin(), b.end());
    std::vector<double> bp;
    for (double x : b)
        if (bp.empty() || x - bp.back() > tol) bp.push_back(x);
    bp.push_back(std::numeric_limits<double>::infinity());

    double theta = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = 0; j + 1 < bp.size(); ++j) {
        const double lo = bp[j], hi = bp[j + 1];
        // Membership is read off the interior of the interval; at the left endpoint a
        // coordinate with v_i - 1 == b_j is saturated only at that single point.
        const double probe = std::isfinite(hi) ? 0.5 * (lo + hi) : lo + 1.0;
        int n0 = 0, n1 = 0;
        double s1 = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double d = v(i) - probe;
            if (d >= 1.0) ++n0;
            else if (d > 0.0) {
                ++n1;
                s1 += v(i);
            }
        }
        if (n1 == 0) {
            if (n0 == k) {
                theta = lo;
                break;
            }
            continue;
        }
        const double t = (s1 + n0 - k) / n1;
        if (t >= lo - tol && t < hi + tol) {
            theta = t;
            break;
        }
    }
    if (!std::isfinite(theta)) theta = detail::capped_theta_bisect(v, k);

    out.w.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) out.w(i) = std::clamp(v(i) - theta, 0.0, 1.0);

    // With every coordinate saturated or zero the capped sum is flat around theta and any
    // point of that stretch is a root; report its right end, the largest root.
    bool flat = true;
    double right = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n && flat; ++i) {
        if (out.w(i) >= 1.0 - tol) right = std::min(right, v(i) - 1.0);
        else if (out.w(i) > tol) flat = false;
    }
    out.theta = flat && std::isfinite(right) ? std::max(theta, right) : theta;
    return out;
}

/// Frobenius projection onto {0 <= W <= I, tr W = k}: keep eigenvectors, project eigenvalues.
inline SymmetricMatrix project_spectahedron(const SymmetricMatrix& x, int k) {
    detail::require(k >= 0 && k <= x.size(), "project_spectahedron: k must lie in {0..n}");
    Spectral s = x.spectral();
    s.values = project_capped_simplex(s.values, k).w;
    return SymmetricMatrix::from_spectral(std::move(s));
}

} // namespace kwest
