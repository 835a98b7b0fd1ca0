#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "geometry.hpp"
#include "qfm.hpp"
#include "rng.hpp"
#include "symmetric_matrix.hpp"
#include "width_sdp.hpp"

namespace kwest {

inline constexpr double kSqrt3p1 = 2.7320508075688772935;  // sqrt(3) + 1

struct EstimationConfig {
    double C = 8.0;                       ///< width constant
    double L_tilde = 4.0 * kSqrt3p1;      ///< shrink = 2 (sqrt3 + 1) / L_tilde
    double C_pilot = 16.0;                ///< robust pilot radius d_1 = min(2R, C_pilot sigma)
    WidthSdpConfig width;                 ///< C is overridden by the field above
    QfmOptions oracle;                    ///< rounding budget etc. for the width oracles
    bool project_early_return = false;    ///< return Pi_K Y instead of Y when sigma <= r / sqrt(n)
    double regression_min_ratio = 2.0;    ///< require N >= ratio * n
    int inner_max_iter = 10000;           ///< regression inner solver cap
    std::uint64_t seed = 0;

    double shrink() const { return 2.0 * kSqrt3p1 / L_tilde; }
    double L() const { return kSqrt3p1 * L_tilde; }

    void validate() const {
        detail::require(C >= 1.0, "estimation config: C must be >= 1");
        detail::require(L_tilde > 2.0 * kSqrt3p1, "estimation config: L_tilde must exceed 2 (sqrt(3) + 1)");
        detail::require(C_pilot > 0.0, "estimation config: C_pilot must be > 0");
        detail::require(regression_min_ratio > 0.0, "estimation config: regression_min_ratio must be > 0");
        detail::require(inner_max_iter >= 1, "estimation config: inner_max_iter must be >= 1");
        width.validate();
    }
};

struct IterationRecord {
    int j = 0;
    double dtilde = 0.0;
    int m = 0;
    double oracle_value = 0.0;     ///< best width-SDP value
    double step_norm = 0.0;        ///< |mu_{j+1} - mu_j|
    double fail_budget = 0.0;      ///< nominal oracle failure budget of this width solve
    int width_iterations = 0;
    bool width_capped = false;
    int blocks = 0;                ///< robust: block count
    int inner_iterations = 0;      ///< regression: inner solver iterations
};

struct EstimationTrace {
    std::vector<IterationRecord> iterations;
    std::vector<Eigen::VectorXd> iterates;  ///< mu_1, mu_2, ...; mu_j is the input of iteration j
    Eigen::VectorXd estimate;
    double r = 0.0;                         ///< inner radius after any overwrite
    int max_iterations = 0;                 ///< M
    bool early_return = false;
    bool aborted = false;
    std::string abort_reason;

    double fail_budget() const {
        double s = 0.0;
        for (const auto& it : iterations) s += it.fail_budget;
        return s;
    }
};

struct EstimationResult {
    Eigen::VectorXd estimate;
    EstimationTrace trace;
};

enum class RobustMeanMethod { geometric_median, coordinatewise_median };

struct RobustConfig {
    double contamination = 0.0;  ///< fraction of corrupted samples, in [0, 1/2)
    RobustMeanMethod method = RobustMeanMethod::geometric_median;

    void validate() const {
        detail::require(contamination >= 0.0 && contamination < 0.5, "robust config: contamination must lie in [0, 0.5)");
    }
};

struct RegressionData {
    Eigen::MatrixXd Z;  ///< N x n design, one row per sample
    Eigen::VectorXd Y;  ///< N responses
    bool centered = false;  ///< rows are pair differences, so any constant design shift has cancelled

    int samples() const { return static_cast<int>(Z.rows()); }
    int dim() const { return static_cast<int>(Z.cols()); }

    void validate() const {
        detail::require(Z.rows() >= 1 && Z.cols() >= 1, "regression data: need N >= 1 and n >= 1");
        detail::require(Y.size() == Z.rows(), "regression data: Y and Z row counts differ");
        detail::require(Z.allFinite() && Y.allFinite(), "regression data: non-finite entries");
    }
};

/// M = ceil(log_{1/shrink}(ratio)), at least 1.
inline int schedule_length(double ratio, double shrink) {
    if (!(ratio > 1.0)) return 1;
    if (!std::isfinite(ratio)) throw InvalidInput("schedule_length: unbounded iteration count (r = 0?)");
    return std::max(1, static_cast<int>(std::ceil(std::log(ratio) / std::log(1.0 / shrink) - 1e-12)));
}

// ---------------------------------------------------------------------------
// Width solves shared across runs
// ---------------------------------------------------------------------------

/// Memo of width solves keyed by (body, radius, m, configuration, seed). A width solve depends
/// on nothing else, so Monte Carlo trials on one body reuse them. Thread-safe.
class WidthCache {
public:
    struct Entry {
        SymmetricMatrix A;
        double best_value = 0.0;
        int iterations = 0;
        bool capped = false;
        bool degenerate = false;
        double fail_budget = 0.0;
    };

    std::shared_ptr<const Entry> find(const std::string& key) const {
        std::lock_guard lock(mutex_);
        auto it = map_.find(key);
        return it == map_.end() ? nullptr : it->second;
    }
    std::shared_ptr<const Entry> insert(const std::string& key, Entry e) {
        std::lock_guard lock(mutex_);
        auto [it, fresh] = map_.emplace(key, std::make_shared<const Entry>(std::move(e)));
        return it->second;
    }
    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return map_.size();
    }

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<const Entry>> map_;
};

namespace detail {

inline bool cacheable(const ConvexBody& body) { return body.key().find("custom:") == std::string::npos; }

/// Width solve for K cap B(c) with rank m and the per-call failure probability for (dtilde, sigma_eff).
inline std::shared_ptr<const WidthCache::Entry> width_step(const ConvexBody& body, double c, int m, double dtilde,
                                                           double sigma_eff, const EstimationConfig& cfg,
                                                           std::uint64_t seed, WidthCache* cache) {
    WidthSdpConfig wc = cfg.width;
    wc.C = cfg.C;
    const auto oracle = make_oracle(body, cfg.oracle)->intersect(c);
    // The iteration budget does not depend on q, so q can be fixed from it up front.
    const int k = body.dim() - m;
    const double kappa = std::isnan(oracle->kappa()) ? 1.0 : oracle->kappa();
    const double cap = wc.max_iter_cap > 0 ? wc.max_iter_cap : 20.0 * k * wc.C * wc.C;
    const double budget = std::ceil(std::min(4.0 * k * std::pow(wc.C, 4) * kappa * kappa, cap));
    wc.oracle_fail_prob = width_fail_prob(std::max(1.0, budget), dtilde, sigma_eff);

    std::string key;
    if (cache && cacheable(body)) {
        std::ostringstream os;
        os << std::hexfloat << body.key() << '|' << c << '|' << m << '|' << wc.C << '|' << wc.max_iter_cap << '|'
           << wc.gamma << '|' << wc.oracle_fail_prob << '|' << cfg.oracle.box_slack << '|'
           << cfg.oracle.fixed_rounds << '|' << cfg.oracle.brute_starts << '|' << cfg.oracle.relax_iters << '|'
           << cfg.oracle.dual_iters << '|' << seed;
        key = os.str();
        if (auto hit = cache->find(key)) return hit;
    }
    const WidthSdpResult w = solve_width_sdp(oracle->body(), m, *oracle, wc, seed);
    WidthCache::Entry e{w.A_star2, w.best_value, w.iterations_run, w.capped, w.degenerate, w.nominal_fail_budget};
    if (!key.empty()) return cache->insert(key, std::move(e));
    return std::make_shared<const WidthCache::Entry>(std::move(e));
}

/// mu_bar = Pi_{K_(j)} mu_tilde (eps = d/L), then mu_{j+1} = Pi_K(2 mu_bar + mu_j) (eps = 2d/L_tilde).
inline Eigen::VectorXd refine(const ConvexBody& body, const Eigen::VectorXd& mu_tilde, const Eigen::VectorXd& mu,
                              double dtilde, const EstimationConfig& cfg) {
    const ConvexBody local = localize(body, dtilde / 2.0);
    const Eigen::VectorXd bar = weak_project(local, mu_tilde, dtilde / cfg.L()).p;
    return weak_project(body, 2.0 * bar + mu, 2.0 * dtilde / cfg.L_tilde).p;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Gaussian sequence model
// ---------------------------------------------------------------------------

/**
 * @brief Estimates mu in K from Y = mu + sigma g.
 *
 * Localizes geometrically: at radius d_j it shrinks the residual Y - mu_j with the width matrix of
 * K cap B(d_j/2), projects onto that cap and lifts back to K, then halves d_j (at the default
 * L_tilde) until d_j <= max(2r, C sigma).
 */
inline EstimationResult run_gsm(const ConvexBody& body, const Eigen::VectorXd& Y, double sigma,
                                const EstimationConfig& cfg = {}, WidthCache* cache = nullptr) {
    cfg.validate();
    const int n = body.dim();
    detail::require(Y.size() == n, "run_gsm: dimension mismatch");
    detail::require(Y.allFinite(), "run_gsm: non-finite observation");
    detail::require(sigma >= 0.0 && std::isfinite(sigma), "run_gsm: sigma must be >= 0");

    EstimationResult res;
    EstimationTrace& tr = res.trace;
    const double r = body.inner_radius(), R = body.outer_radius();
    tr.r = r;
    tr.max_iterations = schedule_length(R / r, cfg.shrink());

    if (sigma <= r / std::sqrt(static_cast<double>(n))) {
        tr.early_return = true;
        res.estimate = Y;
        if (cfg.project_early_return && !body.contains(Y, 0.0))
            res.estimate = weak_project(body, Y, std::max(sigma * std::sqrt(static_cast<double>(n)), 1e-12 * R)).p;
        tr.estimate = res.estimate;
        return res;
    }

    Eigen::VectorXd mu = Eigen::VectorXd::Zero(n);
    double d = 2.0 * R;
    tr.iterates.push_back(mu);
    for (int j = 1; j <= tr.max_iterations; ++j) {
        IterationRecord rec;
        rec.j = j;
        rec.dtilde = d;
        rec.m = select_width_rank(d, sigma, n, cfg.C);
        const auto w = detail::width_step(body, d / 2.0, rec.m, d, sigma, cfg, derive_seed(cfg.seed, 1, j), cache);
        rec.oracle_value = w->best_value;
        rec.fail_budget = w->fail_budget;
        rec.width_iterations = w->iterations;
        rec.width_capped = w->capped;
        if (w->degenerate) {
            tr.iterations.push_back(rec);
            tr.aborted = true;
            tr.abort_reason = "width solve degenerate";
            break;
        }
        const Eigen::VectorXd mu_tilde = w->A.matrix() * (Y - mu) / 2.0;
        const Eigen::VectorXd next = detail::refine(body, mu_tilde, mu, d, cfg);
        rec.step_norm = (next - mu).norm();
        mu = next;
        tr.iterations.push_back(rec);
        tr.iterates.push_back(mu);
        d *= cfg.shrink();
        if (d <= std::max(2.0 * r, cfg.C * sigma)) break;
    }
    res.estimate = mu;
    tr.estimate = mu;
    return res;
}

// ---------------------------------------------------------------------------
// Robust mean
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t row_hash(const Eigen::MatrixXd& X, Eigen::Index i, std::uint64_t seed) {
    std::uint64_t h = splitmix64(seed);
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        double v = X(i, c);
        if (v == 0.0) v = 0.0;  // fold -0
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        h = splitmix64(h ^ bits);
    }
    return h;
}

/// Samples ordered by a seeded hash of their contents (ties lexicographic), so the order does
/// not depend on how the input was arranged.
inline std::vector<Eigen::Index> canonical_order(const Eigen::MatrixXd& X, std::uint64_t seed) {
    std::vector<std::uint64_t> h(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) h[static_cast<std::size_t>(i)] = row_hash(X, i, seed);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(X.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (h[static_cast<std::size_t>(a)] != h[static_cast<std::size_t>(b)])
            return h[static_cast<std::size_t>(a)] < h[static_cast<std::size_t>(b)];
        for (Eigen::Index c = 0; c < X.cols(); ++c)
            if (X(a, c) != X(b, c)) return X(a, c) < X(b, c);
        return false;
    });
    return idx;
}

inline Eigen::VectorXd coordinatewise_median(const Eigen::MatrixXd& B) {
    Eigen::VectorXd out(B.cols());
    std::vector<double> col(static_cast<std::size_t>(B.rows()));
    for (Eigen::Index c = 0; c < B.cols(); ++c) {
        for (Eigen::Index i = 0; i < B.rows(); ++i) col[static_cast<std::size_t>(i)] = B(i, c);
        std::sort(col.begin(), col.end());
        const std::size_t k = col.size();
        out(c) = k % 2 ? col[k / 2] : 0.5 * (col[k / 2 - 1] + col[k / 2]);
    }
    return out;
}

} // namespace detail

/**
 * @brief Geometric median of the rows of B by Weiszfeld iterations with the Vardi-Zhang rule at
 * data points. Throws ToleranceNotMetWith<VectorXd> (carrying the last iterate) if the step does
 * not fall below tol * scale within max_iter iterations.
 */
inline Eigen::VectorXd geometric_median(const Eigen::MatrixXd& B, double tol = 1e-9, int max_iter = 10000) {
    detail::require(B.rows() >= 1, "geometric_median: no points");
    Eigen::VectorXd x = detail::coordinatewise_median(B);
    if (B.rows() <= 2) return B.colwise().mean().transpose();
    const double scale = std::max((B.rowwise() - x.transpose()).rowwise().norm().maxCoeff(), 1e-300);
    const double tiny = 1e-14 * scale;
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd num = Eigen::VectorXd::Zero(B.cols()), pull = Eigen::VectorXd::Zero(B.cols());
        double den = 0.0;
        int at = 0;
        for (Eigen::Index i = 0; i < B.rows(); ++i) {
            const Eigen::VectorXd diff = B.row(i).transpose() - x;
            const double di = diff.norm();
            if (di <= tiny) {
                ++at;
                continue;
            }
            num += B.row(i).transpose() / di;
            pull += diff / di;
            den += 1.0 / di;
        }
        if (den == 0.0) return x;
        Eigen::VectorXd next = num / den;
        if (at > 0) {
            const double pn = pull.norm();
            if (pn <= at) return x;  // x is a data point satisfying the optimality condition
            const double t = at / pn;
            next = (1.0 - t) * next + t * x;
        }
        const double step = (next - x).norm();
        x = std::move(next);
        if (step <= tol * scale) return x;
    }
    throw ToleranceNotMetWith<Eigen::VectorXd>("geometric_median: Weiszfeld did not converge", x);
}

/**
 * @brief Median of k block means. Samples are rows; they are ordered canonically by a seeded
 * content hash and dealt round-robin into the k blocks.
 */
inline Eigen::VectorXd robust_mean(const Eigen::MatrixXd& samples, int k,
                                   RobustMeanMethod method = RobustMeanMethod::geometric_median,
                                   std::uint64_t seed = 0) {
    const Eigen::Index N = samples.rows();
    detail::require(N >= 1, "robust_mean: no samples");
    detail::require(samples.allFinite(), "robust_mean: non-finite sample");
    detail::require(k >= 1 && k <= N, "robust_mean: need 1 <= k <= N");
    const auto order = detail::canonical_order(samples, seed);
    Eigen::MatrixXd means = Eigen::MatrixXd::Zero(k, samples.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t t = 0; t < order.size(); ++t) {
        const std::size_t b = t % static_cast<std::size_t>(k);
        means.row(static_cast<Eigen::Index>(b)) += samples.row(order[t]);
        ++counts[b];
    }
    for (int b = 0; b < k; ++b) means.row(b) /= counts[static_cast<std::size_t>(b)];
    if (k == 1) return means.row(0).transpose();
    return method == RobustMeanMethod::geometric_median ? geometric_median(means)
                                                         : detail::coordinatewise_median(means);
}

inline Eigen::MatrixXd stack_rows(const std::vector<Eigen::VectorXd>& v) {
    detail::require(!v.empty(), "stack_rows: empty list");
    Eigen::MatrixXd M(static_cast<Eigen::Index>(v.size()), v.front().size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        detail::require(v[i].size() == M.cols(), "stack_rows: ragged input");
        M.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
    }
    return M;
}

/**
 * @brief Estimates mu in K from N samples (rows) with a contaminated fraction and covariance
 * at most sigma^2 I. The output always lies in K.
 */
inline EstimationResult run_robust(const ConvexBody& body, const Eigen::MatrixXd& samples, double sigma,
                                   const RobustConfig& rcfg = {}, const EstimationConfig& cfg = {},
                                   WidthCache* cache = nullptr) {
    cfg.validate();
    rcfg.validate();
    const int n = body.dim();
    const Eigen::Index N = samples.rows();
    detail::require(N >= 1, "run_robust: no samples");
    detail::require(samples.cols() == n, "run_robust: dimension mismatch");
    detail::require(samples.allFinite(), "run_robust: non-finite sample");
    detail::require(sigma > 0.0 && std::isfinite(sigma), "run_robust: sigma must be > 0");

    EstimationResult res;
    EstimationTrace& tr = res.trace;
    const double Nd = static_cast<double>(N);
    const double r = std::min(body.inner_radius(),
                              std::max(std::sqrt(n / Nd) * sigma, std::sqrt(rcfg.contamination) * sigma));
    const double R = body.outer_radius();
    tr.r = r;
    double d = std::min(2.0 * R, cfg.C_pilot * sigma);
    tr.max_iterations = schedule_length(d / (2.0 * r), cfg.shrink());

    Eigen::VectorXd mu =
        weak_project(body, robust_mean(samples, static_cast<int>(N), rcfg.method, derive_seed(cfg.seed, 3, 0)), sigma)
            .p;
    tr.iterates.push_back(mu);
    const double sigma_eff = sigma / std::sqrt(Nd);
    for (int j = 1; j <= tr.max_iterations; ++j) {
        IterationRecord rec;
        rec.j = j;
        rec.dtilde = d;
        rec.m = select_width_rank(d, sigma_eff, n, cfg.C);
        const double u = std::ceil(Nd * d * d / (cfg.C * cfg.C * sigma * sigma) * (1.0 - 1e-12));
        // Keep at most a quarter of the blocks corrupted; the median's bias blows up near one half.
        const double floor_k = 4.0 * std::ceil(rcfg.contamination * Nd);
        rec.blocks = static_cast<int>(std::clamp(std::max(u, floor_k), 1.0, Nd));
        const auto w = detail::width_step(body, d / 2.0, rec.m, d, sigma_eff, cfg, derive_seed(cfg.seed, 1, j), cache);
        rec.oracle_value = w->best_value;
        rec.fail_budget = w->fail_budget;
        rec.width_iterations = w->iterations;
        rec.width_capped = w->capped;
        if (w->degenerate) {
            tr.iterations.push_back(rec);
            tr.aborted = true;
            tr.abort_reason = "width solve degenerate";
            break;
        }
        const Eigen::MatrixXd shrunk = samples * w->A.matrix();
        const Eigen::VectorXd f = robust_mean(shrunk, rec.blocks, rcfg.method, derive_seed(cfg.seed, 3, j));
        const Eigen::VectorXd mu_tilde = (f - w->A.matrix() * mu) / 2.0;
        const Eigen::VectorXd next = detail::refine(body, mu_tilde, mu, d, cfg);
        rec.step_norm = (next - mu).norm();
        mu = next;
        tr.iterations.push_back(rec);
        tr.iterates.push_back(mu);
        d *= cfg.shrink();
        if (d <= std::max(2.0 * r, cfg.C * sigma / std::sqrt(Nd))) break;
    }
    res.estimate = mu;
    tr.estimate = mu;
    return res;
}

/// Width matrix run_robust uses at its first iteration. It does not depend on the samples.
inline SymmetricMatrix robust_first_width(const ConvexBody& body, int N, double sigma, const EstimationConfig& cfg = {},
                                          WidthCache* cache = nullptr) {
    cfg.validate();
    detail::require(N >= 1, "robust_first_width: no samples");
    detail::require(sigma > 0.0 && std::isfinite(sigma), "robust_first_width: sigma must be > 0");
    const double d = std::min(2.0 * body.outer_radius(), cfg.C_pilot * sigma);
    const double sigma_eff = sigma / std::sqrt(static_cast<double>(N));
    const int m = select_width_rank(d, sigma_eff, body.dim(), cfg.C);
    return detail::width_step(body, d / 2.0, m, d, sigma_eff, cfg, derive_seed(cfg.seed, 1, 1), cache)->A;
}

inline EstimationResult run_robust(const ConvexBody& body, const std::vector<Eigen::VectorXd>& samples, double sigma,
                                   const RobustConfig& rcfg = {}, const EstimationConfig& cfg = {},
                                   WidthCache* cache = nullptr) {
    detail::require(!samples.empty(), "run_robust: no samples");
    return run_robust(body, stack_rows(samples), sigma, rcfg, cfg, cache);
}

// ---------------------------------------------------------------------------
// Constrained linear regression
// ---------------------------------------------------------------------------

/// floor(N/2) differences of consecutive pairs (Y_{2i} - Y_{2i-1}, Z_{2i} - Z_{2i-1}).
inline RegressionData center_pairs(const RegressionData& data) {
    data.validate();
    const Eigen::Index N = data.Z.rows();
    detail::require(N >= 2, "center_pairs: need N >= 2");
    const Eigen::Index P = N / 2;
    RegressionData out;
    out.Z.resize(P, data.Z.cols());
    out.Y.resize(P);
    for (Eigen::Index i = 0; i < P; ++i) {
        out.Z.row(i) = data.Z.row(2 * i + 1) - data.Z.row(2 * i);
        out.Y(i) = data.Y(2 * i + 1) - data.Y(2 * i);
    }
    out.centered = true;
    return out;
}

struct LeastSquaresResult {
    Eigen::VectorXd x;
    double objective = 0.0;
    int iterations = 0;
};

/**
 * @brief min over x in K of |b - D x|^2 by accelerated projected gradient (step 1/lipschitz,
 * weak projection with tolerance proj_eps each step) with function-value restarts. Stops when
 * an accepted step improves the objective by less than `improve_tol` or after max_iter steps.
 */
inline LeastSquaresResult constrained_least_squares(const ConvexBody& K, const Eigen::MatrixXd& D,
                                                    const Eigen::VectorXd& b, double lipschitz, double improve_tol,
                                                    double proj_eps, int max_iter, Eigen::VectorXd x0) {
    auto f = [&](const Eigen::VectorXd& x) { return (b - D * x).squaredNorm(); };
    auto proj = [&](const Eigen::VectorXd& z) { return weak_project(K, z, proj_eps).p; };
    const double step = 1.0 / (2.0 * lipschitz);
    LeastSquaresResult out;
    Eigen::VectorXd x = proj(x0), y = x, x_prev = x;
    double fx = f(x);
    double mom = 1.0;
    int stalls = 0;
    for (int it = 0; it < max_iter; ++it) {
        out.iterations = it + 1;
        const Eigen::VectorXd g = -2.0 * D.transpose() * (b - D * y);
        Eigen::VectorXd xn = proj(y - step * g);
        const double fn = f(xn);
        if (fn > fx) {
            if (mom == 1.0) break;
            y = x;
            mom = 1.0;
            continue;
        }
        const double gain = fx - fn;
        x_prev = x;
        x = std::move(xn);
        fx = fn;
        // Momentum makes single small gains common; require two in a row.
        stalls = gain < improve_tol ? stalls + 1 : 0;
        if (stalls >= 2) break;
        const double mom_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * mom * mom));
        y = x + ((mom - 1.0) / mom_next) * (x - x_prev);
        mom = mom_next;
    }
    out.x = x;
    out.objective = fx;
    return out;
}

/**
 * @brief Estimates beta in K from Y_i = Z_i^T beta + xi_i with noise scale sigma (1 in the
 * unit-noise model).
 *
 * Each step fits (Y - Z beta_j)/2 ~ Z A nu over nu in K cap B(d_j/2), takes A nu as the step
 * estimate and refines it as in the sequence model. With sigma = 0 the constrained least-squares
 * fit over K is returned directly.
 */
inline EstimationResult run_regression(const ConvexBody& body, const RegressionData& data,
                                       const EstimationConfig& cfg = {}, double sigma = 1.0,
                                       WidthCache* cache = nullptr) {
    cfg.validate();
    data.validate();
    const int n = body.dim();
    const Eigen::Index N = data.Z.rows();
    detail::require(data.Z.cols() == n, "run_regression: dimension mismatch");
    detail::require(N >= cfg.regression_min_ratio * n, "run_regression: need N >= regression_min_ratio * n");
    detail::require(sigma >= 0.0 && std::isfinite(sigma), "run_regression: sigma must be >= 0");
    const Eigen::MatrixXd G = data.Z.transpose() * data.Z;
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G, Eigen::EigenvaluesOnly).eigenvalues();
    if (!(ev.minCoeff() >= 1e-10 * ev.maxCoeff()) || !(ev.maxCoeff() > 0.0))
        throw IllConditionedDesign("run_regression: Z^T Z is numerically singular");
    const double lmax = ev.maxCoeff();

    EstimationResult res;
    EstimationTrace& tr = res.trace;
    const double Nd = static_cast<double>(N);
    const double R = body.outer_radius();
    const double r = std::min(body.inner_radius(), 0.5 * sigma * std::sqrt(n / Nd));
    tr.r = r;

    if (sigma == 0.0) {
        // Exact data: the schedule would never reach r = 0, and the fit over K is exact.
        tr.early_return = true;
        const auto ls = constrained_least_squares(body, data.Z, data.Y, lmax, 0.0, 1e-14 * R,
                                                  100 * cfg.inner_max_iter, Eigen::VectorXd::Zero(n));
        res.estimate = ls.x;
        tr.estimate = ls.x;
        tr.iterates.push_back(ls.x);
        return res;
    }

    tr.max_iterations = schedule_length(R / r, cfg.shrink());
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(n);
    double d = 2.0 * R;
    tr.iterates.push_back(beta);
    const double sigma_eff = sigma / std::sqrt(Nd);
    for (int j = 1; j <= tr.max_iterations; ++j) {
        IterationRecord rec;
        rec.j = j;
        rec.dtilde = d;
        rec.m = select_width_rank(d, sigma_eff, n, cfg.C);
        const auto w = detail::width_step(body, d / 2.0, rec.m, d, sigma_eff, cfg, derive_seed(cfg.seed, 1, j), cache);
        rec.oracle_value = w->best_value;
        rec.fail_budget = w->fail_budget;
        rec.width_iterations = w->iterations;
        rec.width_capped = w->capped;
        if (w->degenerate) {
            tr.iterations.push_back(rec);
            tr.aborted = true;
            tr.abort_reason = "width solve degenerate";
            break;
        }
        const ConvexBody local = localize(body, d / 2.0);
        const Eigen::MatrixXd ZA = data.Z * w->A.matrix();
        const Eigen::VectorXd b = (data.Y - data.Z * beta) / 2.0;
        // Target accuracy eps = sqrt(N) d / C_pilot on the square-root scale of the objective.
        const double eps = std::sqrt(Nd) * d / cfg.C_pilot;
        const auto ls = constrained_least_squares(local, ZA, b, lmax, eps * eps / 10.0, d / (10.0 * cfg.L()),
                                                  cfg.inner_max_iter, Eigen::VectorXd::Zero(n));
        rec.inner_iterations = ls.iterations;
        const Eigen::VectorXd beta_tilde = w->A.matrix() * ls.x;
        const Eigen::VectorXd next = detail::refine(body, beta_tilde, beta, d, cfg);
        rec.step_norm = (next - beta).norm();
        beta = next;
        tr.iterations.push_back(rec);
        tr.iterates.push_back(beta);
        d *= cfg.shrink();
        if (d <= std::max(2.0 * r, cfg.C * sigma_eff)) break;
    }
    res.estimate = beta;
    tr.estimate = beta;
    return res;
}

} // namespace kwest
