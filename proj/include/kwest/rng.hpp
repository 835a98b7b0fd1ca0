#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace kwest {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for stream `a` (and optionally `b`) derived from a parent seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0xD1B54A32D192ED03ULL));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

// std::normal_distribution is implementation-defined; Box-Muller keeps streams portable.
inline double standard_normal(Rng& rng) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline Eigen::VectorXd gaussian_vector(Eigen::Index n, Rng& rng) {
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) g(i) = standard_normal(rng);
    return g;
}

inline double rademacher(Rng& rng) { return (rng() >> 63) ? 1.0 : -1.0; }

/// Student-t with `dof` degrees of freedom (ratio of normal and chi).
inline double student_t(double dof, Rng& rng) {
    const int k = static_cast<int>(dof);
    double chi2 = 0.0;
    for (int i = 0; i < k; ++i) {
        const double z = standard_normal(rng);
        chi2 += z * z;
    }
    return standard_normal(rng) / std::sqrt(chi2 / dof);
}

} // namespace kwest
