#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "estimators.hpp"
#include "geometry.hpp"
#include "rng.hpp"
#include "symmetric_matrix.hpp"

namespace kwest {

// ---------------------------------------------------------------------------
// Ellipsoid references
// ---------------------------------------------------------------------------

namespace detail {

inline void require_axes(const Eigen::VectorXd& a, const char* what) {
    require(a.size() >= 1, std::string(what) + ": need at least one semi-axis");
    require(a.allFinite() && a.minCoeff() > 0.0, std::string(what) + ": semi-axes must be finite and > 0");
}

/// Semi-axes of an axis-aligned ellipsoid body, or an empty vector.
inline Eigen::VectorXd ellipsoid_axes(const ConvexBody& body) {
    if (body.kind() != BodyKind::ellipsoid || !body.spec()) return {};
    return std::get<EllipsoidSpec>(body.spec()->shape).semi_axes;
}

} // namespace detail

/// Kolmogorov m-width of the axis-aligned ellipsoid with descending semi-axes a: a_{m+1}, 0 at m = n.
inline double exact_width_ellipsoid(const Eigen::VectorXd& a, int m) {
    detail::require_axes(a, "exact_width_ellipsoid");
    const int n = static_cast<int>(a.size());
    detail::require(m >= 0 && m <= n, "exact_width_ellipsoid: need 0 <= m <= n");
    for (int i = 1; i < n; ++i)
        detail::require(a(i) <= a(i - 1), "exact_width_ellipsoid: semi-axes must be sorted descending");
    return m == n ? 0.0 : a(m);
}

struct PinskerSolution {
    double risk = 0.0;
    double level = 0.0;       ///< water level kappa: weights are (1 - kappa / a_i)_+
    Eigen::VectorXd weights;  ///< linear minimax estimator is weights .* Y
};

/**
 * @brief Linear minimax risk over {sum x_i^2 / a_i^2 <= 1} under N(0, sigma^2 I) noise.
 *
 * The level solves sigma^2 sum (1/a_i)(1 - kappa/a_i)_+ = kappa, found by bisection to 1e-10
 * relative; the risk is sigma^2 sum (1 - kappa/a_i)_+.
 */
inline PinskerSolution pinsker(const Eigen::VectorXd& a, double sigma) {
    detail::require_axes(a, "pinsker_risk");
    detail::require(sigma >= 0.0 && std::isfinite(sigma), "pinsker_risk: sigma must be >= 0");
    PinskerSolution out;
    out.weights = Eigen::VectorXd::Zero(a.size());
    if (sigma == 0.0) {
        out.weights.setOnes();
        return out;
    }
    const double s2 = sigma * sigma;
    auto excess = [&](double k) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < a.size(); ++i) s += std::max(0.0, 1.0 - k / a(i)) / a(i);
        return s2 * s - k;
    };
    double lo = 0.0, hi = a.maxCoeff();
    if (!(excess(lo) > 0.0) || !(excess(hi) < 0.0)) throw NumericError("pinsker_risk: bisection bracket failed");
    for (int it = 0; it < 400 && hi - lo > 1e-10 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (excess(mid) > 0.0 ? lo : hi) = mid;
    }
    // On the active set {a_i > kappa} the level has a closed form; evaluating the risk through it
    // avoids the cancellation in 1 - kappa/a_i when sigma is large.
    const double approx = 0.5 * (lo + hi);
    double k = 0.0, a1 = 0.0, a2 = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (a(i) > approx || a(i) == a.maxCoeff()) {
            k += 1.0;
            a1 += 1.0 / a(i);
            a2 += 1.0 / (a(i) * a(i));
        }
    double spread = 0.0;  // k a2 - a1^2 = k sum (1/a_i - mean)^2
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (a(i) > approx || a(i) == a.maxCoeff()) spread += std::pow(1.0 / a(i) - a1 / k, 2);
    spread *= k;
    out.level = s2 * a1 / (1.0 + s2 * a2);
    for (Eigen::Index i = 0; i < a.size(); ++i) out.weights(i) = std::max(0.0, 1.0 - out.level / a(i));
    out.risk = s2 * (k + s2 * spread) / (1.0 + s2 * a2);
    return out;
}

inline double pinsker_risk(const Eigen::VectorXd& a, double sigma) { return pinsker(a, sigma).risk; }

struct TruncatedSeries {
    int m = 0;  ///< number of kept coordinates
    Eigen::VectorXd estimate;
};

/// Keeps the m largest-axis coordinates of Y, with m the first minimizer of a_(m+1)^2 + m sigma^2.
inline TruncatedSeries baseline_truncated_series(const Eigen::VectorXd& a, const Eigen::VectorXd& Y, double sigma) {
    detail::require_axes(a, "baseline_truncated_series");
    detail::require(Y.size() == a.size(), "baseline_truncated_series: dimension mismatch");
    detail::require(sigma >= 0.0 && std::isfinite(sigma), "baseline_truncated_series: sigma must be >= 0");
    const int n = static_cast<int>(a.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return a(i) > a(j); });
    TruncatedSeries out;
    double best = std::numeric_limits<double>::infinity();
    for (int m = 0; m <= n; ++m) {
        const double bias = m < n ? a(order[static_cast<std::size_t>(m)]) : 0.0;
        const double proxy = bias * bias + m * sigma * sigma;
        if (proxy < best) {
            best = proxy;
            out.m = m;
        }
    }
    out.estimate = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < out.m; ++i) {
        const int c = order[static_cast<std::size_t>(i)];
        out.estimate(c) = Y(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fixture checks
// ---------------------------------------------------------------------------

struct Type2Report {
    int n = 0;
    int trials = 0;
    int max_batch = 0;
    double max_ratio = 0.0;   ///< over batches of E_eps rho^2(sum eps_i x_i) / sum rho^2(x_i)
    double mean_ratio = 0.0;
    double bound = 0.0;       ///< constant * log n
    bool pass = false;
};

/**
 * @brief Checks the type-2 inequality with constant `constant * log n` on random batches.
 *
 * Each trial draws a batch of 1..max_batch Gaussian vectors with log-normal scales and averages
 * over every sign pattern exactly (sign flips of the whole batch are folded).
 */
inline Type2Report check_qco_type2(const ConvexBody& body, int trials, std::uint64_t seed, int max_batch = 8,
                                   double constant = 8.0) {
    detail::require(trials >= 1, "check_qco_type2: trials must be >= 1");
    detail::require(max_batch >= 1 && max_batch <= 20, "check_qco_type2: max_batch must lie in [1, 20]");
    const int n = body.dim();
    Type2Report rep;
    rep.n = n;
    rep.trials = trials;
    rep.max_batch = max_batch;
    rep.bound = constant * std::max(1.0, std::log(static_cast<double>(n)));
    Rng rng = make_rng(seed);
    double total = 0.0;
    Eigen::MatrixXd X(n, max_batch);
    for (int t = 0; t < trials; ++t) {
        const int m = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_batch));
        double denom = 0.0;
        for (int i = 0; i < m; ++i) {
            X.col(i) = gaussian_vector(n, rng) * std::exp(standard_normal(rng));
            const double g = body.gauge(X.col(i));
            denom += g * g;
        }
        double num = 0.0;
        const std::uint64_t patterns = std::uint64_t{1} << (m - 1);
        Eigen::VectorXd s(n);
        for (std::uint64_t bits = 0; bits < patterns; ++bits) {
            s = X.col(0);
            for (int i = 1; i < m; ++i) s += ((bits >> (i - 1)) & 1u ? -1.0 : 1.0) * X.col(i);
            const double g = body.gauge(s);
            num += g * g;
        }
        const double ratio = num / static_cast<double>(patterns) / denom;
        rep.max_ratio = std::max(rep.max_ratio, ratio);
        total += ratio;
    }
    rep.mean_ratio = total / trials;
    rep.pass = rep.max_ratio <= rep.bound;
    return rep;
}

struct NonQcoWitness {
    int n = 0;
    Eigen::VectorXd u, v, w;  ///< u, v on the unit sphere of the norm; w their squared-coordinate midpoint
    double norm_u = 0.0, norm_v = 0.0;
    double norm_w_sq = 0.0;
    double expected = 0.0;  ///< (n + 2) / (n + 1)
    bool pass = false;
};

/**
 * @brief Witness that the unit ball of (||x||_2^2 + ||x||_1^2 / n)^{1/2} is not quadratically convex.
 *
 * u = e1 / c, v = e2 / c with c = (1 + 1/n)^{1/2} lie on the unit sphere, while
 * w = sqrt((u^2 + v^2) / 2) has squared norm (n + 2) / (n + 1) > 1.
 */
inline NonQcoWitness check_non_qco_witness(int n) {
    detail::require(n >= 2, "check_non_qco_witness: n must be >= 2");
    NonQcoWitness out;
    out.n = n;
    const double c = std::sqrt(1.0 + 1.0 / n);
    out.u = Eigen::VectorXd::Unit(n, 0) / c;
    out.v = Eigen::VectorXd::Unit(n, 1) / c;
    out.w = ((out.u.array().square() + out.v.array().square()) / 2.0).sqrt().matrix();
    out.norm_u = detail::mixed_norm(out.u);
    out.norm_v = detail::mixed_norm(out.v);
    // Extended precision so that the rounded result is the double nearest to the exact value.
    const long double cl = std::sqrt(1.0L + 1.0L / n);
    const long double wi = 1.0L / (cl * std::sqrt(2.0L));
    const long double l1 = 2.0L * wi;
    out.norm_w_sq = static_cast<double>(2.0L * wi * wi + l1 * l1 / n);
    out.expected = static_cast<double>(n + 2) / static_cast<double>(n + 1);
    out.pass = out.norm_w_sq == out.expected && std::abs(out.norm_u - 1.0) <= 1e-12 && std::abs(out.norm_v - 1.0) <= 1e-12;
    return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo risk
// ---------------------------------------------------------------------------

enum class Suite { gsm, robust, regression };
enum class SignalRule { boundary, interior, fixed };
enum class NoiseModel { gaussian, student_t3 };
enum class Adversary { none, far_cluster, mean_shift, top_eigenvector };

inline const char* to_string(Suite s) {
    switch (s) {
    case Suite::gsm: return "gsm";
    case Suite::robust: return "robust";
    case Suite::regression: return "regression";
    }
    return "?";
}
inline const char* to_string(SignalRule s) {
    switch (s) {
    case SignalRule::boundary: return "boundary";
    case SignalRule::interior: return "interior";
    case SignalRule::fixed: return "fixed";
    }
    return "?";
}
inline const char* to_string(NoiseModel s) { return s == NoiseModel::gaussian ? "gaussian" : "student_t3"; }
inline const char* to_string(Adversary s) {
    switch (s) {
    case Adversary::none: return "none";
    case Adversary::far_cluster: return "far_cluster";
    case Adversary::mean_shift: return "mean_shift";
    case Adversary::top_eigenvector: return "top_eigenvector";
    }
    return "?";
}

namespace detail {

template <class E, std::size_t K>
E parse_enum(std::string_view s, const E (&all)[K], const char* what) {
    for (E e : all)
        if (s == to_string(e)) return e;
    throw InvalidInput(std::string("unknown ") + what + ": " + std::string(s));
}

} // namespace detail

inline Suite parse_suite(std::string_view s) {
    static constexpr Suite all[] = {Suite::gsm, Suite::robust, Suite::regression};
    return detail::parse_enum(s, all, "suite");
}
inline SignalRule parse_signal_rule(std::string_view s) {
    static constexpr SignalRule all[] = {SignalRule::boundary, SignalRule::interior, SignalRule::fixed};
    return detail::parse_enum(s, all, "signal rule");
}
inline NoiseModel parse_noise_model(std::string_view s) {
    static constexpr NoiseModel all[] = {NoiseModel::gaussian, NoiseModel::student_t3};
    return detail::parse_enum(s, all, "noise model");
}
inline Adversary parse_adversary(std::string_view s) {
    static constexpr Adversary all[] = {Adversary::none, Adversary::far_cluster, Adversary::mean_shift,
                                        Adversary::top_eigenvector};
    return detail::parse_enum(s, all, "adversary");
}

/// Estimator ids accepted by each suite. The first one is the suite's own estimator, the second the raw baseline.
inline const std::vector<std::string>& suite_estimators(Suite s) {
    static const std::vector<std::string> gsm{"gsm", "identity", "projection", "pinsker", "truncated_series"};
    static const std::vector<std::string> robust{"robust", "mean", "gsm_matched"};
    static const std::vector<std::string> regression{"regression", "ols"};
    switch (s) {
    case Suite::gsm: return gsm;
    case Suite::robust: return robust;
    case Suite::regression: return regression;
    }
    return gsm;
}

struct NamedBody {
    std::string id;
    ConvexBody body;
};

struct ExperimentPlan {
    Suite suite = Suite::gsm;
    std::vector<NamedBody> bodies;
    std::vector<double> sigmas{1.0};
    std::vector<int> sample_sizes{1};       ///< robust and regression N grid
    std::vector<double> contaminations{0.0};
    std::vector<Adversary> adversaries{Adversary::none};
    std::vector<std::string> estimators;    ///< empty: every estimator of the suite
    int trials = 200;
    std::uint64_t seed = 0;
    SignalRule signal = SignalRule::boundary;
    Eigen::VectorXd fixed_signal;
    NoiseModel noise = NoiseModel::gaussian;
    RobustMeanMethod robust_method = RobustMeanMethod::geometric_median;
    EstimationConfig config;                ///< its seed is replaced by one derived from `seed`
    int threads = 1;                        ///< 0: hardware concurrency

    std::vector<std::string> resolved_estimators() const {
        return estimators.empty() ? suite_estimators(suite) : estimators;
    }

    void validate() const {
        using detail::require;
        require(!bodies.empty(), "plan: no bodies");
        require(!sigmas.empty() && !sample_sizes.empty() && !contaminations.empty() && !adversaries.empty(),
                "plan: grids must be non-empty");
        require(trials >= 30, "plan: trials must be >= 30");
        require(threads >= 0, "plan: threads must be >= 0");
        for (double s : sigmas) require(s >= 0.0 && std::isfinite(s), "plan: sigma must be >= 0");
        for (int N : sample_sizes) require(N >= 1, "plan: sample sizes must be >= 1");
        for (double e : contaminations) require(e >= 0.0 && e < 0.5, "plan: contamination must lie in [0, 0.5)");
        const auto& known = suite_estimators(suite);
        for (const auto& e : resolved_estimators())
            require(std::find(known.begin(), known.end(), e) != known.end(),
                    "plan: estimator '" + e + "' is not part of the " + to_string(suite) + " suite");
        for (const auto& b : bodies) {
            require(!b.id.empty(), "plan: body id must be non-empty");
            if (signal == SignalRule::fixed) {
                require(fixed_signal.size() == b.body.dim(), "plan: fixed signal has the wrong dimension");
                require(b.body.contains(fixed_signal), "plan: fixed signal lies outside body " + b.id);
            }
        }
        if (suite == Suite::robust)
            for (double s : sigmas) require(s > 0.0, "plan: robust suite needs sigma > 0");
        config.validate();
    }
};

struct RiskRow {
    std::string body;
    std::string estimator;
    double sigma = 0.0;
    int N = 1;
    double contamination = 0.0;
    Adversary adversary = Adversary::none;
    int trials = 0;
    int failed = 0;
    double mse = 0.0;
    double std_error = 0.0;  ///< sample std / sqrt(successful trials)
    double pinsker = std::numeric_limits<double>::quiet_NaN();
    double ratio_pinsker = std::numeric_limits<double>::quiet_NaN();
    double ratio_raw = std::numeric_limits<double>::quiet_NaN();  ///< against identity / mean / OLS
    double max_gauge = 0.0;
    long trap_pairs = 0;  ///< (trial, iteration) pairs with a trace
    long trapped = 0;     ///< of which ||mu_{j+1} - mu|| <= d_{j+1}
    double seconds = 0.0;
};

struct RiskReport {
    std::vector<RiskRow> rows;

    const RiskRow* find(std::string_view body, std::string_view est, double sigma, int N = 1, double eps = 0.0,
                        Adversary adv = Adversary::none) const {
        for (const auto& r : rows)
            if (r.body == body && r.estimator == est && r.sigma == sigma && r.N == N && r.contamination == eps &&
                r.adversary == adv)
                return &r;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal; NaN becomes an empty field.
inline std::string format_double(double x) {
    if (std::isnan(x)) return {};
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

/// RFC 4180 field quoting.
inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline void write_csv_row(std::ostream& os, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) os << ',';
        os << csv_field(fields[i]);
    }
    os << '\n';
}

/// Writes the report; the wall-clock column is opt-in so that repeated runs are byte-identical.
inline void write_csv(std::ostream& os, const RiskReport& rep, bool timing = false) {
    std::vector<std::string> header{"body",      "estimator", "sigma",      "N",          "epsilon",
                                    "adversary", "trials",    "failed",     "mse",        "std_error",
                                    "pinsker",   "ratio_pinsker", "ratio_raw", "max_gauge", "trap_pairs",
                                    "trapped"};
    if (timing) header.push_back("seconds");
    write_csv_row(os, header);
    for (const auto& r : rep.rows) {
        std::vector<std::string> f{r.body,
                                   r.estimator,
                                   format_double(r.sigma),
                                   std::to_string(r.N),
                                   format_double(r.contamination),
                                   to_string(r.adversary),
                                   std::to_string(r.trials),
                                   std::to_string(r.failed),
                                   format_double(r.mse),
                                   format_double(r.std_error),
                                   format_double(r.pinsker),
                                   format_double(r.ratio_pinsker),
                                   format_double(r.ratio_raw),
                                   format_double(r.max_gauge),
                                   std::to_string(r.trap_pairs),
                                   std::to_string(r.trapped)};
        if (timing) f.push_back(format_double(r.seconds));
        write_csv_row(os, f);
    }
}

// ---------------------------------------------------------------------------
// Trial generation
// ---------------------------------------------------------------------------

struct KahanSum {
    double sum = 0.0, comp = 0.0;
    void add(double x) {
        const double y = x - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

namespace detail {

inline double noise_draw(NoiseModel m, Rng& rng) {
    // t(3) has variance 3.
    return m == NoiseModel::gaussian ? standard_normal(rng) : student_t(3.0, rng) / std::sqrt(3.0);
}

inline Eigen::VectorXd noise_vector(NoiseModel m, Eigen::Index n, Rng& rng) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = noise_draw(m, rng);
    return v;
}

inline Eigen::VectorXd draw_signal(const ExperimentPlan& plan, const ConvexBody& body, std::uint64_t seed) {
    switch (plan.signal) {
    case SignalRule::fixed: return plan.fixed_signal;
    case SignalRule::boundary: return sample_boundary(body, 1, seed).front();
    case SignalRule::interior: {
        Rng rng = make_rng(derive_seed(seed, 1));
        const double s = std::pow(uniform01(rng), 1.0 / body.dim());
        return s * sample_boundary(body, 1, seed).front();
    }
    }
    return {};
}

/// Point the adversary places its corrupted samples at.
inline Eigen::VectorXd adversary_point(Adversary adv, const ConvexBody& body, const Eigen::VectorXd& mu,
                                       const SymmetricMatrix* top) {
    const int n = body.dim();
    const double far = 10.0 * body.outer_radius();
    switch (adv) {
    case Adversary::none: return mu;
    case Adversary::far_cluster: return far * Eigen::VectorXd::Unit(n, 0);
    case Adversary::mean_shift: {
        const double nm = mu.norm();
        return mu + far * (nm > 0.0 ? Eigen::VectorXd(mu / nm) : Eigen::VectorXd::Unit(n, 0));
    }
    case Adversary::top_eigenvector: return mu + far * top->spectral().vectors.col(0);
    }
    return mu;
}

struct EstimatorOutcome {
    bool failed = false;
    double sq_error = 0.0;
    double gauge = 0.0;
    int trap_pairs = 0;
    int trapped = 0;
    double seconds = 0.0;
};

inline void score_trace(const EstimationTrace& tr, const Eigen::VectorXd& truth, double shrink,
                        EstimatorOutcome& out) {
    for (std::size_t j = 0; j < tr.iterations.size() && j + 1 < tr.iterates.size(); ++j) {
        ++out.trap_pairs;
        if ((tr.iterates[j + 1] - truth).norm() <= tr.iterations[j].dtilde * shrink) ++out.trapped;
    }
}

struct Cell {
    std::size_t body = 0;
    double sigma = 0.0;
    int N = 1;
    double eps = 0.0;
    Adversary adv = Adversary::none;
};

inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& Z, const Eigen::VectorXd& Y) {
    if (Z.rows() < Z.cols()) throw IllConditionedDesign("ols: fewer samples than unknowns");
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
    if (qr.rank() < Z.cols()) throw IllConditionedDesign("ols: rank-deficient design");
    return qr.solve(Y);
}

/// Runs every estimator of the plan on one trial of one cell.
inline std::vector<EstimatorOutcome> run_trial(const ExperimentPlan& plan, const std::vector<std::string>& ests,
                                               const Cell& cell, std::uint64_t trial_seed,
                                               const EstimationConfig& cfg, WidthCache& cache,
                                               const SymmetricMatrix* top) {
    const ConvexBody& body = plan.bodies[cell.body].body;
    const int n = body.dim();
    const Eigen::VectorXd mu = draw_signal(plan, body, derive_seed(trial_seed, 1));
    Rng noise = make_rng(derive_seed(trial_seed, 2));
    const Eigen::VectorXd axes = ellipsoid_axes(body);

    Eigen::VectorXd Y;
    Eigen::MatrixXd samples;
    RegressionData reg;
    switch (plan.suite) {
    case Suite::gsm: Y = mu + cell.sigma * noise_vector(plan.noise, n, noise); break;
    case Suite::robust: {
        samples.resize(cell.N, n);
        for (int i = 0; i < cell.N; ++i)
            samples.row(i) = (mu + cell.sigma * noise_vector(plan.noise, n, noise)).transpose();
        const int bad = static_cast<int>(std::floor(cell.eps * cell.N));
        if (bad > 0 && cell.adv != Adversary::none) {
            const Eigen::VectorXd p = adversary_point(cell.adv, body, mu, top);
            for (int i = 0; i < bad; ++i) samples.row(i) = p.transpose();
        }
        break;
    }
    case Suite::regression: {
        reg.Z.resize(cell.N, n);
        for (int i = 0; i < cell.N; ++i) reg.Z.row(i) = gaussian_vector(n, noise).transpose();
        reg.Y = reg.Z * mu + cell.sigma * noise_vector(plan.noise, cell.N, noise);
        break;
    }
    }

    std::vector<EstimatorOutcome> out(ests.size());
    for (std::size_t e = 0; e < ests.size(); ++e) {
        const std::string& id = ests[e];
        EstimatorOutcome& o = out[e];
        const auto t0 = std::chrono::steady_clock::now();
        try {
            Eigen::VectorXd est;
            if (id == "gsm") {
                const EstimationResult r = run_gsm(body, Y, cell.sigma, cfg, &cache);
                score_trace(r.trace, mu, cfg.shrink(), o);
                est = r.estimate;
            } else if (id == "identity") {
                est = Y;
            } else if (id == "projection") {
                est = weak_project(body, Y, 1e-6 * body.outer_radius()).p;
            } else if (id == "pinsker") {
                if (axes.size() == 0) throw InvalidInput("pinsker estimator needs an ellipsoid body");
                est = pinsker(axes, cell.sigma).weights.cwiseProduct(Y);
            } else if (id == "truncated_series") {
                if (axes.size() == 0) throw InvalidInput("truncated_series estimator needs an ellipsoid body");
                est = baseline_truncated_series(axes, Y, cell.sigma).estimate;
            } else if (id == "robust") {
                RobustConfig rc;
                rc.contamination = cell.eps;
                rc.method = plan.robust_method;
                const EstimationResult r = run_robust(body, samples, cell.sigma, rc, cfg, &cache);
                score_trace(r.trace, mu, cfg.shrink(), o);
                est = r.estimate;
            } else if (id == "mean") {
                est = samples.colwise().mean().transpose();
            } else if (id == "gsm_matched") {
                Rng g = make_rng(derive_seed(trial_seed, 3));
                const double s = cell.sigma / std::sqrt(static_cast<double>(cell.N));
                const EstimationResult r = run_gsm(body, mu + s * gaussian_vector(n, g), s, cfg, &cache);
                score_trace(r.trace, mu, cfg.shrink(), o);
                est = r.estimate;
            } else if (id == "regression") {
                const EstimationResult r = run_regression(body, reg, cfg, cell.sigma, &cache);
                score_trace(r.trace, mu, cfg.shrink(), o);
                est = r.estimate;
            } else if (id == "ols") {
                est = least_squares(reg.Z, reg.Y);
            }
            o.sq_error = (est - mu).squaredNorm();
            o.gauge = body.gauge(est);
            if (!std::isfinite(o.sq_error)) o.failed = true;
        } catch (const IllConditionedDesign&) {
            o.failed = true;
        } catch (const ToleranceNotMet&) {
            o.failed = true;
        } catch (const NumericError&) {
            o.failed = true;
        }
        o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return out;
}

inline std::vector<Cell> plan_cells(const ExperimentPlan& plan) {
    std::vector<Cell> cells;
    for (std::size_t b = 0; b < plan.bodies.size(); ++b)
        for (double s : plan.sigmas)
            for (int N : plan.sample_sizes)
                for (double e : plan.contaminations)
                    for (std::size_t k = 0; k < plan.adversaries.size(); ++k) {
                        const Adversary a = plan.adversaries[k];
                        if (plan.suite != Suite::robust) {
                            if (e == 0.0 && k == 0) cells.push_back({b, s, N, 0.0, Adversary::none});
                            continue;
                        }
                        // A clean cell is shared by all adversaries.
                        if (e == 0.0) {
                            if (k == 0) cells.push_back({b, s, N, 0.0, Adversary::none});
                        } else if (a != Adversary::none) {
                            cells.push_back({b, s, N, e, a});
                        }
                    }
    return cells;
}

} // namespace detail

/**
 * @brief Monte Carlo risk of each estimator on each grid cell.
 *
 * Trial t of cell c draws from derive_seed(seed, c, t), so results do not depend on the thread
 * count; width solves are shared across trials through one cache.
 */
inline RiskReport mc_risk(const ExperimentPlan& plan, WidthCache* shared_cache = nullptr) {
    plan.validate();
    const auto ests = plan.resolved_estimators();
    // The raw baseline of the suite is always computed for ratio_raw.
    std::vector<std::string> all = ests;
    const std::string raw = suite_estimators(plan.suite)[1];
    if (std::find(all.begin(), all.end(), raw) == all.end()) all.push_back(raw);
    const std::size_t raw_index =
        static_cast<std::size_t>(std::find(all.begin(), all.end(), raw) - all.begin());

    EstimationConfig cfg = plan.config;
    cfg.seed = derive_seed(plan.seed, 0x6b77);
    WidthCache local;
    WidthCache& cache = shared_cache ? *shared_cache : local;
    const int threads = plan.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : plan.threads;

    RiskReport rep;
    const auto cells = detail::plan_cells(plan);
    for (std::size_t c = 0; c < cells.size(); ++c) {
        const detail::Cell& cell = cells[c];
        const ConvexBody& body = plan.bodies[cell.body].body;
        std::optional<SymmetricMatrix> top;
        if (cell.adv == Adversary::top_eigenvector && cell.eps > 0.0)
            top = robust_first_width(body, cell.N, cell.sigma, cfg, &cache);

        std::vector<std::vector<detail::EstimatorOutcome>> results(static_cast<std::size_t>(plan.trials));
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int t; (t = next.fetch_add(1)) < plan.trials;)
                results[static_cast<std::size_t>(t)] = detail::run_trial(
                    plan, all, cell, derive_seed(plan.seed, c, static_cast<std::uint64_t>(t)), cfg, cache,
                    top ? &*top : nullptr);
        };
        if (threads <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }

        const Eigen::VectorXd axes = detail::ellipsoid_axes(body);
        double pinsker_ref = std::numeric_limits<double>::quiet_NaN();
        if (axes.size() > 0 && plan.suite != Suite::regression)
            pinsker_ref = pinsker_risk(axes, plan.suite == Suite::gsm
                                                 ? cell.sigma
                                                 : cell.sigma / std::sqrt(static_cast<double>(cell.N)));

        std::vector<RiskRow> rows(all.size());
        for (std::size_t e = 0; e < all.size(); ++e) {
            RiskRow& row = rows[e];
            row.body = plan.bodies[cell.body].id;
            row.estimator = all[e];
            row.sigma = cell.sigma;
            row.N = cell.N;
            row.contamination = cell.eps;
            row.adversary = cell.adv;
            row.trials = plan.trials;
            KahanSum s1, s2, secs;
            int ok = 0;
            for (const auto& trial : results) {
                const auto& o = trial[e];
                secs.add(o.seconds);
                row.trap_pairs += o.trap_pairs;
                row.trapped += o.trapped;
                if (o.failed) {
                    ++row.failed;
                    continue;
                }
                ++ok;
                s1.add(o.sq_error);
                row.max_gauge = std::max(row.max_gauge, o.gauge);
            }
            row.seconds = secs.sum;
            if (ok > 0) {
                row.mse = s1.sum / ok;
                for (const auto& trial : results)
                    if (!trial[e].failed) s2.add((trial[e].sq_error - row.mse) * (trial[e].sq_error - row.mse));
                row.std_error = ok > 1 ? std::sqrt(s2.sum / (ok - 1)) / std::sqrt(static_cast<double>(ok)) : 0.0;
            } else {
                row.mse = std::numeric_limits<double>::quiet_NaN();
            }
            row.pinsker = pinsker_ref;
            if (pinsker_ref > 0.0) row.ratio_pinsker = row.mse / pinsker_ref;
        }
        for (std::size_t e = 0; e < all.size(); ++e) {
            if (rows[raw_index].mse > 0.0) rows[e].ratio_raw = rows[e].mse / rows[raw_index].mse;
            if (e == raw_index && std::find(ests.begin(), ests.end(), raw) == ests.end()) continue;
            rep.rows.push_back(rows[e]);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Standard suites
// ---------------------------------------------------------------------------

/// Semi-axes 4, 2, 1, 1/2, ... floored at 1/n.
inline Eigen::VectorXd ellipsoid_suite_axes(int n) {
    detail::require(n >= 1, "ellipsoid_suite_axes: n must be >= 1");
    Eigen::VectorXd a(n);
    for (int i = 0; i < n; ++i) a(i) = std::max(4.0 * std::ldexp(1.0, -i), 1.0 / n);
    return a;
}

/// Eight noise levels 0.01 * 2^k.
inline std::vector<double> suite_sigma_grid() {
    std::vector<double> s;
    for (int k = 0; k < 8; ++k) s.push_back(0.01 * std::ldexp(1.0, k));
    return s;
}

inline ExperimentPlan gsm_suite_plan(int n = 32, int trials = 200, std::uint64_t seed = 1) {
    ExperimentPlan p;
    p.suite = Suite::gsm;
    p.bodies = {{"ellipsoid" + std::to_string(n), ConvexBody::ellipsoid(ellipsoid_suite_axes(n))}};
    p.sigmas = suite_sigma_grid();
    p.estimators = {"gsm", "identity", "pinsker", "truncated_series"};
    p.trials = trials;
    p.seed = seed;
    return p;
}

inline ExperimentPlan robust_suite_plan(int n = 16, int trials = 100, std::uint64_t seed = 2) {
    ExperimentPlan p;
    p.suite = Suite::robust;
    p.bodies = {{"ellipsoid" + std::to_string(n), ConvexBody::ellipsoid(ellipsoid_suite_axes(n))}};
    p.sigmas = {1.0};
    p.sample_sizes = {20 * n};
    p.contaminations = {0.0, 0.05, 0.1};
    p.adversaries = {Adversary::none, Adversary::far_cluster, Adversary::mean_shift, Adversary::top_eigenvector};
    p.noise = NoiseModel::student_t3;
    p.trials = trials;
    p.seed = seed;
    return p;
}

inline ExperimentPlan regression_suite_plan(int n = 16, int trials = 200, std::uint64_t seed = 3) {
    ExperimentPlan p;
    p.suite = Suite::regression;
    p.bodies = {{"ellipsoid" + std::to_string(n), ConvexBody::ellipsoid(ellipsoid_suite_axes(n))}};
    p.sigmas = {1.0};
    p.sample_sizes = {2 * n, 4 * n, 8 * n, 16 * n};
    p.trials = trials;
    p.seed = seed;
    return p;
}

/// Least-squares slope of log y against log x.
inline double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
    detail::require(x.size() == y.size() && x.size() >= 2, "log_log_slope: need two or more points");
    const std::size_t k = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        detail::require(x[i] > 0.0 && y[i] > 0.0, "log_log_slope: values must be > 0");
        mx += std::log(x[i]) / k;
        my += std::log(y[i]) / k;
    }
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

} // namespace kwest
