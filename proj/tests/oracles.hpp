#pragma once
// Independent reference computations used only by the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "kwest/rng.hpp"

namespace oracle {

inline double capped_sum(const Eigen::VectorXd& v, double theta) {
    double s = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += std::min(1.0, std::max(0.0, v(i) - theta));
    return s;
}

/// Capped-simplex projection by a fine theta grid followed by bisection on the bracketing cell.
inline Eigen::VectorXd capped_simplex_scan(const Eigen::VectorXd& v, int k, int grid = 1000000) {
    const Eigen::Index n = v.size();
    if (k == 0) return Eigen::VectorXd::Zero(n);
    if (k == n) return Eigen::VectorXd::Ones(n);
    const double a = v.minCoeff() - 1.0, b = v.maxCoeff();
    double lo = a, hi = b;
    const double h = (b - a) / grid;
    for (int i = 0; i <= grid; ++i) {
        const double t = a + h * i;
        if (capped_sum(v, t) <= k) {
            hi = t;
            lo = std::max(a, t - h);
            break;
        }
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (capped_sum(v, mid) > k) lo = mid;
        else hi = mid;
    }
    const double theta = 0.5 * (lo + hi);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w(i) = std::min(1.0, std::max(0.0, v(i) - theta));
    return w;
}

inline Eigen::MatrixXd random_orthogonal(int n, kwest::Rng& rng) {
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = kwest::standard_normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    return q;
}

/// Convex combination of random k-subset indicators: always in the capped simplex.
inline Eigen::VectorXd random_capped_feasible(int n, int k, kwest::Rng& rng) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    const int parts = 1 + static_cast<int>(rng() % 4);
    double total = 0;
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int p = 0; p < parts; ++p) {
        const double wgt = kwest::uniform01(rng) + 1e-3;
        total += wgt;
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = n - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[rng() % (i + 1)]);
        for (int i = 0; i < k; ++i) d(idx[static_cast<std::size_t>(i)]) += wgt;
    }
    return d / total;
}

inline Eigen::MatrixXd random_feasible_spectahedron(int n, int k, kwest::Rng& rng) {
    const Eigen::MatrixXd q = random_orthogonal(n, rng);
    return q * random_capped_feasible(n, k, rng).asDiagonal() * q.transpose();
}

inline Eigen::MatrixXd random_symmetric(int n, kwest::Rng& rng, double scale = 1.0) {
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = scale * kwest::standard_normal(rng);
    return 0.5 * (g + g.transpose());
}

inline Eigen::MatrixXd random_psd(int n, kwest::Rng& rng, int rank = -1) {
    const int r = rank < 0 ? n : rank;
    Eigen::MatrixXd g(n, r);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) g(i, j) = kwest::standard_normal(rng);
    return g * g.transpose() / r;
}

/// Exact ellipsoid projection by bisection on the multiplier.
inline Eigen::VectorXd ellipsoid_projection_bisect(const Eigen::VectorXd& a, const Eigen::VectorXd& z) {
    auto x_of = [&](double lam) {
        Eigen::VectorXd x(z.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) x(i) = a(i) * a(i) * z(i) / (a(i) * a(i) + lam);
        return x;
    };
    auto g = [&](const Eigen::VectorXd& x) { return (x.array() / a.array()).matrix().squaredNorm(); };
    if (g(z) <= 1) return z;
    double lo = 0, hi = 1;
    while (g(x_of(hi)) > 1) hi *= 2;
    for (int it = 0; it < 300; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (g(x_of(mid)) > 1) lo = mid;
        else hi = mid;
    }
    return x_of(hi);
}

/// max over all 2^n box vertices of x^T X x.
inline double box_vertex_max(const Eigen::VectorXd& h, const Eigen::MatrixXd& X) {
    const int n = static_cast<int>(h.size());
    double best = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd x(n);
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        for (int i = 0; i < n; ++i) x(i) = ((mask >> i) & 1) ? h(i) : -h(i);
        best = std::max(best, x.dot(X * x));
    }
    return best;
}

/// 1-d minimax linear risk by grid search: min_c max_{|mu|<=a} E(cY - mu)^2.
inline double minimax_linear_1d(double a, double sigma, int grid = 1000) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= grid; ++i) {
        const double c = static_cast<double>(i) / grid;
        double worst = 0;
        for (int j = 0; j <= grid; ++j) {
            const double mu = a * j / grid;
            worst = std::max(worst, c * c * sigma * sigma + (1 - c) * (1 - c) * mu * mu);
        }
        best = std::min(best, worst);
    }
    return best;
}

/// max of x^T X x over {gauge <= 1}: random directions scaled to the boundary, then
/// shrinking random local search around the best few.
inline double boundary_sample_max(const std::function<double(const Eigen::VectorXd&)>& gauge, int n,
                                  const Eigen::MatrixXd& X, int count, std::uint64_t seed) {
    kwest::Rng rng = kwest::make_rng(seed);
    auto value = [&](Eigen::VectorXd d) {
        const double g = gauge(d);
        if (!(g > 0)) return -1.0;
        d /= g;
        return d.dot(X * d);
    };
    std::vector<std::pair<double, Eigen::VectorXd>> top;
    for (int s = 0; s < count; ++s) {
        Eigen::VectorXd d = kwest::gaussian_vector(n, rng);
        const double v = value(d);
        top.emplace_back(v, d / d.norm());
        if (top.size() > 64) {
            std::nth_element(top.begin(), top.begin() + 8, top.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            top.resize(8);
        }
    }
    double best = -1.0;
    for (auto& [v, d] : top) {
        double cur = v;
        Eigen::VectorXd x = d;
        for (double step = 0.1; step > 1e-7; step *= 0.7) {
            for (int t = 0; t < 40; ++t) {
                Eigen::VectorXd y = x + step * kwest::gaussian_vector(n, rng);
                y /= y.norm();
                const double vy = value(y);
                if (vy > cur) {
                    cur = vy;
                    x = y;
                }
            }
        }
        best = std::max(best, cur);
    }
    return best;
}

} // namespace oracle
