#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "geometry.hpp"
#include "rng.hpp"
#include "symmetric_matrix.hpp"

namespace kwest {

/// Feasible point of a quadratic-form maximization and its certificates.
struct QfmResult {
    Eigen::VectorXd point;  ///< gauge(point) <= 1
    double value = 0.0;     ///< point^T X point, a lower bound on the maximum
    double relax_upper = std::numeric_limits<double>::infinity();  ///< upper bound on the maximum
    double kappa = 1.0;     ///< declared approximation factor (NaN: unknown)
    double fail_prob = 0.0; ///< declared failure probability (NaN: unknown)
};

/// Relaxed solution W >= 0 with f(W) <= 1 and its objective history.
struct RelaxationState {
    SymmetricMatrix W;
    std::vector<double> history;  ///< <X, W> per accepted iterate
};

inline constexpr double kUnknown = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kRoundingBoost = 64.0;  ///< t in rounds = ceil(t log(1/q))

inline int rounds_for_fail_prob(double q, double t = kRoundingBoost) {
    detail::require(q > 0.0 && q < 1.0, "fail_prob must lie in (0, 1)");
    return std::max(1, static_cast<int>(std::ceil(t * std::log(1.0 / q))));
}
inline double fail_prob_for_rounds(int rounds, double t = kRoundingBoost) {
    return std::exp(-static_cast<double>(rounds) / t);
}

struct QfmOptions {
    double box_slack = kBoxKappaSlack;  ///< delta in kappa = pi/2 (1 + delta)
    int fixed_rounds = 0;               ///< > 0 overrides the fail_prob-derived budget
    int brute_starts = 16;              ///< starts for the brute-force oracle
    int relax_iters = 3000;             ///< ascent iterations for norm-image relaxations
    int dual_iters = 200;               ///< multiplicative dual refinement steps
};

namespace detail {

inline void require_psd_input(const SymmetricMatrix& X, Eigen::Index n, const char* who) {
    if (X.size() != n) throw InvalidInput(std::string(who) + ": matrix dimension mismatch");
    if (!X.matrix().allFinite()) throw InvalidInput(std::string(who) + ": non-finite matrix");
}

/// Top eigenpairs of the pencil (X, N), N positive definite; vectors satisfy p^T N p = 1.
struct PencilTop {
    Eigen::VectorXd values;   ///< descending
    Eigen::MatrixXd vectors;  ///< N-orthonormal columns
};

inline PencilTop pencil_top(const Eigen::MatrixXd& X, const Eigen::MatrixXd& N, int count) {
    Eigen::LLT<Eigen::MatrixXd> llt(N);
    if (llt.info() != Eigen::Success) throw NumericError("pencil: normalizing matrix is not positive definite");
    const Eigen::MatrixXd Li = llt.matrixL().solve(Eigen::MatrixXd::Identity(N.rows(), N.cols()));
    const Spectral s = eigen_descending(Li * X * Li.transpose());
    const int k = std::min<int>(count, static_cast<int>(s.values.size()));
    PencilTop out;
    out.values = s.values.head(k);
    out.vectors = Li.transpose() * s.vectors.leftCols(k);
    return out;
}

/// Diagonal N: scaling instead of a factorization.
inline PencilTop pencil_top_diag(const Eigen::MatrixXd& X, const Eigen::VectorXd& nd, int count) {
    const Eigen::VectorXd s = nd.cwiseSqrt().cwiseInverse();
    const Spectral sp = eigen_descending(s.asDiagonal() * X * s.asDiagonal());
    const int k = std::min<int>(count, static_cast<int>(sp.values.size()));
    PencilTop out;
    out.values = sp.values.head(k);
    out.vectors = s.asDiagonal() * sp.vectors.leftCols(k);
    return out;
}

inline bool is_diagonal(const Eigen::MatrixXd& m) {
    return (m - Eigen::MatrixXd(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
}

inline QfmResult make_result(const Eigen::VectorXd& p, const SymmetricMatrix& X, double upper, double kappa,
                             double fail_prob) {
    QfmResult r;
    r.point = p;
    r.value = X.quadratic(p);
    r.relax_upper = upper;
    r.kappa = kappa;
    r.fail_prob = fail_prob;
    return r;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

namespace detail {

struct EllipsoidBallSolve {
    Eigen::VectorXd point;
    double value = -1.0;
    double upper = std::numeric_limits<double>::infinity();
    double alpha = 1.0;
};

/// Max of x^T X x over {x^T M x <= 1, |x| <= c} by a search over the pencil X - phi (alpha M + (1 - alpha) I / c^2).
class EllipsoidBallProblem {
public:
    /// `newton`: probes decompose fully to get psi'' (meant for small reduced problems).
    EllipsoidBallProblem(const Eigen::MatrixXd& M, bool diag, double c, const Eigen::MatrixXd& X, bool newton = false)
        : newton_(newton), M_(M), diag_(diag), md_(M.diagonal()), c_(c), ball_(std::isfinite(c)), ic2_(ball_ ? 1.0 / (c * c) : 0.0),
          X_(X) {}

    struct Probe {
        double alpha = 1.0, psi = 0.0, slope = 0.0;
        double curv = 0.0;  ///< psi'', 0 when not computed
        PencilTop t;
    };

    PencilTop top(double alpha, int count) const {
        if (diag_) return pencil_top_diag(X_, (alpha * md_.array() + (1.0 - alpha) * ic2_).matrix(), count);
        Eigen::MatrixXd N = alpha * M_;
        N.diagonal().array() += (1.0 - alpha) * ic2_;
        return pencil_top(X_, N, count);
    }

    // psi(alpha) = 1 / lambda_max(X, N(alpha)) = min_p p^T N(alpha) p / p^T X p is concave, with
    // psi' = h(p) / p^T X p at the top pencil vector and psi'' = -2 sum_j (u_1^T D u_j)^2 / (l_1 - l_j)
    // over the other pencil pairs, D = M - I/c^2.
    Probe probe(double a, int keep = 2) const {
        Probe pr;
        pr.alpha = a;
        pr.t = top(a, newton_ ? static_cast<int>(X_.rows()) : keep);
        const double phi = pr.t.values(0);
        if (phi > 0.0) {
            pr.psi = 1.0 / phi;
            pr.slope = h(pr.t.vectors.col(0)) / phi;
        } else {
            pr.psi = std::numeric_limits<double>::infinity();
        }
        if (newton_ && phi > 0.0 && pr.t.values.size() > 1) {
            const Eigen::VectorXd& u = pr.t.vectors.col(0);
            const Eigen::RowVectorXd q =
                (M_ * u - ic2_ * u).transpose() * pr.t.vectors.rightCols(pr.t.values.size() - 1);
            const Eigen::ArrayXd gaps = phi - pr.t.values.tail(pr.t.values.size() - 1).array();
            pr.curv = gaps.minCoeff() > 0.0 ? -2.0 * (q.array().square().transpose() / gaps).sum() : 0.0;
        }
        if (pr.t.values.size() > keep) {
            pr.t.values.conservativeResize(keep);
            pr.t.vectors.conservativeResize(Eigen::NoChange, keep);
        }
        return pr;
    }

    /// p^T (M - I/c^2) p: positive while the ellipsoid constraint is the binding one.
    double h(const Eigen::VectorXd& p) const { return p.dot(M_ * p) - ic2_ * p.squaredNorm(); }

    double gauge(const Eigen::VectorXd& x) const {
        const double e = std::sqrt(std::max(0.0, x.dot(M_ * x)));
        return ball_ ? std::max(e, x.norm() / c_) : e;
    }
    bool ball() const { return ball_; }

    /// Keeps the better of x / gauge(x).
    void consider(const Eigen::VectorXd& x, EllipsoidBallSolve& out) const {
        const double g = gauge(x);
        if (!(g > 0.0)) return;
        const Eigen::VectorXd v = x / g;
        const double val = v.dot(X_ * v);
        if (val > out.value) {
            out.value = val;
            out.point = v;
        }
    }

    /// Both vectors and the points of their span where both constraints are tight.
    void consider_span(const Eigen::VectorXd& u1, const Eigen::VectorXd& u2, EllipsoidBallSolve& out) const {
        consider(u1, out);
        consider(u2, out);
        const double q11 = h(u1), q22 = h(u2);
        const double q12 = u1.dot(M_ * u2) - ic2_ * u1.dot(u2);
        // q11 + 2 q12 t + q22 t^2 = 0 for v = u1 + t u2.
        if (q22 != 0.0) {
            const double disc = q12 * q12 - q11 * q22;
            if (disc >= 0.0)
                for (double sg : {-1.0, 1.0}) consider(u1 + ((-q12 + sg * std::sqrt(disc)) / q22) * u2, out);
        } else if (q12 != 0.0) {
            consider(u1 - (q11 / (2.0 * q12)) * u2, out);
        }
    }

    void consider_probe(const Probe& pr, EllipsoidBallSolve& out) const {
        consider(pr.t.vectors.col(0), out);
        if (ball_ && pr.t.vectors.cols() > 1) consider_span(pr.t.vectors.col(0), pr.t.vectors.col(1), out);
    }

    /// Newton (when psi'' is known) or Illinois regula falsi on the slope of psi, which is decreasing
    /// in alpha, with a bisection whenever two steps fail to halve the bracket. `guess` is probed first when given. Stops once
    /// the best primal point is within tol of 1 / max psi or of the tangent-intersection bound.
    EllipsoidBallSolve solve(const Probe& at1, const Probe* at0 = nullptr, double tol = 1e-13,
                             double guess = -1.0) const {
        EllipsoidBallSolve out;
        Probe hi = at1;
        Probe best = hi;
        if (!ball_ || !(hi.slope < 0.0)) return finish(best, nullptr, nullptr, out);
        Probe lo = at0 ? *at0 : probe(0.0);
        if (!(lo.slope > 0.0)) return finish(lo.psi > best.psi ? lo : best, nullptr, nullptr, out);
        if (lo.psi > best.psi) best = lo;
        consider_probe(lo, out);
        consider_probe(hi, out);
        double slo = lo.slope, shi = hi.slope;
        int side = 0;
        double w2 = 2.0;
        const Probe* last = nullptr;
        double prev_slope = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 200; ++it) {
            consider_span(lo.t.vectors.col(0), hi.t.vectors.col(0), out);
            if (out.value >= (1.0 - tol) / best.psi) break;
            const double w = hi.alpha - lo.alpha;
            const double at = (hi.psi - lo.psi + lo.slope * lo.alpha - hi.slope * hi.alpha) / (lo.slope - hi.slope);
            const double bound = lo.psi + lo.slope * (at - lo.alpha);
            if (bound - best.psi <= tol * best.psi || w <= 1e-15) break;
            double a = lo.alpha + w * slo / (slo - shi);
            const bool newton = last && last->curv < 0.0 && std::abs(last->slope) < 0.5 * prev_slope;
            if (newton) a = last->alpha - last->slope / last->curv;
            if (it == 0 && guess > lo.alpha && guess < hi.alpha) a = guess;
            else if (!newton && it % 2 == 0 && w > 0.5 * w2) a = 0.5 * (lo.alpha + hi.alpha);
            if (it % 2 == 0) w2 = w;
            if (last) prev_slope = std::abs(last->slope);
            if (!(a > lo.alpha && a < hi.alpha)) a = 0.5 * (lo.alpha + hi.alpha);
            a = std::clamp(a, lo.alpha + 1e-9 * w, hi.alpha - 1e-9 * w);
            Probe mid = probe(a);
            consider_probe(mid, out);
            if (mid.psi > best.psi) best = mid;
            if (mid.slope == 0.0) break;
            const bool up = mid.slope > 0.0;
            if (up) {
                slo = mid.slope;
                if (side == 1) shi *= 0.5;
                side = 1;
                lo = std::move(mid);
            } else {
                shi = mid.slope;
                if (side == -1) slo *= 0.5;
                side = -1;
                hi = std::move(mid);
            }
            last = up ? &lo : &hi;
        }
        return finish(best, &lo, &hi, out);
    }

private:
    EllipsoidBallSolve& finish(const Probe& best, const Probe* lo, const Probe* hi, EllipsoidBallSolve& out) const {
        out.alpha = best.alpha;
        out.upper = best.t.values(0);
        consider_probe(best, out);
        if (lo && hi) consider_span(lo->t.vectors.col(0), hi->t.vectors.col(0), out);
        return out;
    }

    bool newton_;
    const Eigen::MatrixXd& M_;
    bool diag_;
    Eigen::VectorXd md_;
    double c_;
    bool ball_;
    double ic2_;
    const Eigen::MatrixXd& X_;
};

} // namespace detail

/// Subspace and multiplier carried between calls on slowly changing X.
inline constexpr Eigen::Index kWarmColumns = 8;
inline constexpr int kGrowColumns = 4;

struct EllipsoidBallWarm {
    Eigen::MatrixXd basis;
    double alpha = -1.0;
};

/**
 * @brief Exact maximizer of x^T X x over {x : x^T M x <= 1}, optionally also |x| <= c.
 *
 * Without the ball this is the top generalized eigenvector. With it, the maximum equals
 * min over alpha in [0,1] of lambda_max(X, alpha M + (1 - alpha) I / c^2) and a maximizer lies
 * in the span of the top two pencil vectors at the minimizing alpha. In higher dimension the
 * alpha search runs on the Rayleigh-Ritz reduction to the span of the pencil vectors seen so
 * far; each round certifies the reduced answer with one full eigensolve and adds its vectors.
 * `warm` seeds the subspace from a previous call and receives the final one.
 */
inline QfmResult qfm_ellipsoid_ball(const SymmetricMatrix& M, double c, const SymmetricMatrix& X,
                                    EllipsoidBallWarm* warm = nullptr) {
    const Eigen::Index n = M.size();
    detail::require_psd_input(X, n, "qfm_ellipsoid");
    if (!(M.min_eigenvalue() > 1e-12)) throw InvalidInput("qfm_ellipsoid: M is not positive definite");
    detail::require(c > 0.0, "qfm_ellipsoid: ball radius must be > 0");
    const detail::EllipsoidBallProblem full(M.matrix(), detail::is_diagonal(M.matrix()), c, X.matrix());
    auto done = [&](const detail::EllipsoidBallSolve& s) {
        const Eigen::VectorXd p = s.point.size() ? s.point : Eigen::VectorXd::Zero(n);
        QfmResult r = detail::make_result(p, X, s.upper, 1.0, 0.0);
        r.relax_upper = std::max(r.relax_upper, r.value);
        return r;
    };
    if (!full.ball() || n <= 8) return done(full.solve(full.probe(1.0)));

    detail::EllipsoidBallSolve best;
    Eigen::MatrixXd basis;
    double guess = -1.0;
    if (warm && warm->basis.rows() == n && warm->basis.cols() > 0) {
        basis = warm->basis;
        guess = warm->alpha;
    } else {
        const auto at1 = full.probe(1.0);
        if (!(at1.slope < 0.0)) return done(full.solve(at1));
        const auto at0 = full.probe(0.0);
        if (!(at0.slope > 0.0)) return done(full.solve(at1, &at0));
        best.upper = std::min(1.0 / at1.psi, 1.0 / at0.psi);
        full.consider_probe(at1, best);
        full.consider_probe(at0, best);
        basis.resize(n, 4);
        basis << at1.t.vectors, at0.t.vectors;
    }
    for (int round = 0; round < 12; ++round) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis);
        const Eigen::Index k = qr.rank();
        Eigen::MatrixXd V = Eigen::MatrixXd(qr.householderQ()).leftCols(k);
        // Rotate V so that the reduced M is diagonal.
        const Spectral ms = eigen_descending(V.transpose() * M.matrix() * V);
        V = V * ms.vectors;
        const Eigen::MatrixXd Mr = ms.values.asDiagonal();
        const Eigen::MatrixXd Xr = V.transpose() * X.matrix() * V;
        const detail::EllipsoidBallProblem reduced(Mr, true, c, Xr, true);
        const detail::EllipsoidBallSolve rs = reduced.solve(reduced.probe(1.0), nullptr, 1e-13, guess);
        guess = rs.alpha;
        if (rs.point.size()) full.consider(V * rs.point, best);
        const auto pr = full.probe(rs.alpha, kGrowColumns);
        best.upper = std::min(best.upper, pr.t.values(0));
        full.consider_probe(pr, best);
        const bool closed = best.upper - best.value <= 1e-11 * best.upper;
        if (closed && warm) {
            const Eigen::Index keep = std::min<Eigen::Index>(k, kWarmColumns);
            warm->basis.resize(n, 1 + pr.t.vectors.cols() + keep);
            warm->basis << best.point, pr.t.vectors, V.leftCols(keep);
            warm->alpha = rs.alpha;
        }
        if (closed) return done(best);
        Eigen::MatrixXd grown(n, k + pr.t.vectors.cols());
        grown << V, pr.t.vectors;
        basis = std::move(grown);
        if (basis.cols() > n) break;
    }
    if (warm) *warm = {};
    detail::EllipsoidBallSolve direct = full.solve(full.probe(1.0));
    if (best.value > direct.value) {
        direct.value = best.value;
        direct.point = best.point;
    }
    direct.upper = std::min(direct.upper, best.upper);
    return done(direct);
}

/// Exact maximizer of x^T X x over the ellipsoid {x^T M x <= 1}.
inline QfmResult qfm_ellipsoid(const SymmetricMatrix& M, const SymmetricMatrix& X) {
    return qfm_ellipsoid_ball(M, std::numeric_limits<double>::infinity(), X);
}

// ---------------------------------------------------------------------------
// Box: semidefinite relaxation with sign rounding
// ---------------------------------------------------------------------------

namespace detail {

// Minimizes lambda_max(Y^{-1/2} Xs Y^{-1/2}) * sum(y) over y > 0 by multiplicative steps;
// every y gives a valid upper bound on max <Xs, W> subject to diag(W) <= 1.
inline double box_dual_bound(const Eigen::MatrixXd& Xs, Eigen::VectorXd y, int iters) {
    const Eigen::Index n = Xs.rows();
    const double floor = 1e-12 * std::max(1e-300, Xs.diagonal().cwiseAbs().maxCoeff());
    y = y.cwiseMax(floor);
    auto eval = [&](const Eigen::VectorXd& yy, Eigen::VectorXd* p) {
        PencilTop t = pencil_top_diag(Xs, yy, 1);
        if (p) *p = t.vectors.col(0);
        return std::max(0.0, t.values(0)) * yy.sum();
    };
    Eigen::VectorXd p;
    double g = eval(y, &p);
    double eta = 0.5;
    for (int it = 0; it < iters && eta > 1e-6; ++it) {
        const double s = y.sum();
        Eigen::VectorXd step(n);
        for (Eigen::Index i = 0; i < n; ++i) step(i) = y(i) / s - y(i) * p(i) * p(i);
        Eigen::VectorXd yn = (y.array() * (-eta * step.array() * static_cast<double>(n)).exp()).matrix();
        yn = yn.cwiseMax(floor);
        Eigen::VectorXd pn;
        const double gn = eval(yn, &pn);
        if (gn < g) {
            g = gn;
            y = yn;
            p = pn;
            eta = std::min(2.0, eta * 1.2);
        } else {
            eta *= 0.5;
        }
    }
    return g;
}

} // namespace detail

/**
 * @brief Box oracle: max <X', W> over {W >= 0, diag(W) <= 1}, X' = H X H, then sign rounding.
 *
 * The relaxation is solved in factored form W = V V^T with unit rows (block coordinate
 * ascent); sign(V g) has the law of sign(W^{1/2} g). The upper bound comes from the dual
 * min sum(y) s.t. Diag(y) >= X', started at the complementary-slackness point.
 */
inline QfmResult qfm_box_sdp(const Eigen::VectorXd& halfwidths, const SymmetricMatrix& X, int rounds,
                             std::uint64_t seed, double slack = kBoxKappaSlack) {
    const Eigen::Index n = halfwidths.size();
    detail::require(n >= 1 && halfwidths.minCoeff() > 0.0, "qfm_box_sdp: half-widths must be > 0");
    detail::require_psd_input(X, n, "qfm_box_sdp");
    detail::require(rounds >= 1, "qfm_box_sdp: rounds must be >= 1");
    const Eigen::MatrixXd Xs = halfwidths.asDiagonal() * X.matrix() * halfwidths.asDiagonal();
    const double kappa = std::numbers::pi / 2.0 * (1.0 + slack);
    const double q = fail_prob_for_rounds(rounds);

    const Eigen::Index k = n;
    Rng rng = make_rng(derive_seed(seed, 0x5eed));
    Eigen::MatrixXd V(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        V.row(i) = gaussian_vector(k, rng).transpose();
        V.row(i).normalize();
    }
    auto objective = [&] { return (V.transpose() * Xs * V).trace(); };
    double obj = objective();
    for (int sweep = 0; sweep < 2000; ++sweep) {
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::RowVectorXd g = Xs.row(i) * V - Xs(i, i) * V.row(i);
            const double gn = g.norm();
            if (gn > 0.0) V.row(i) = g / gn;
        }
        const double next = objective();
        const bool stalled = next - obj <= 1e-13 * std::max(1.0, std::abs(next));
        obj = next;
        if (stalled) break;
    }

    // Complementary slackness: y_i = (X' W)_ii = v_i . (X' V)_i.
    const Eigen::MatrixXd XV = Xs * V;
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = V.row(i).dot(XV.row(i));
    const double upper = std::max(detail::box_dual_bound(Xs, y, 100), obj);

    Eigen::VectorXd best = halfwidths;
    double best_val = X.quadratic(best);
    auto consider = [&](const Eigen::VectorXd& s) {
        Eigen::VectorXd p(n);
        for (Eigen::Index i = 0; i < n; ++i) p(i) = (s(i) >= 0.0 ? 1.0 : -1.0) * halfwidths(i);
        const double v = X.quadratic(p);
        if (v > best_val) {
            best_val = v;
            best = p;
        }
    };
    for (int r = 0; r < rounds; ++r) {
        Rng rr = make_rng(derive_seed(seed, 1, static_cast<std::uint64_t>(r)));
        consider(V * gaussian_vector(k, rr));
    }
    consider(eigen_descending(Xs).vectors.col(0));
    return detail::make_result(best, X, std::max(upper, best_val), kappa, q);
}

// ---------------------------------------------------------------------------
// Norm-image bodies: covariance relaxation with Gaussian rounding
// ---------------------------------------------------------------------------

namespace detail {

/// f(W) = max(||d||_q, tr(W)/c^2), d = diag(A W A^T), with q = p/2 (or the symmetric mixed form).
struct CovarianceConstraint {
    Eigen::MatrixXd A;
    InnerNorm inner = InnerNorm::lp;
    double q = 1.0;  ///< p/2
    double c = std::numeric_limits<double>::infinity();

    double norm_part(const Eigen::VectorXd& d) const {
        if (inner == InnerNorm::mixed) {
            const double s = d.cwiseMax(0.0).cwiseSqrt().sum();
            return d.sum() + s * s / static_cast<double>(d.size());
        }
        return lp_norm(d.cwiseMax(0.0), q);
    }

    double value_factored(const Eigen::MatrixXd& V) const {
        const Eigen::MatrixXd AV = A * V;
        const Eigen::VectorXd d = AV.rowwise().squaredNorm();
        if (!d.allFinite()) throw NumericError("relaxation: non-finite diag(A W A^T)");
        double f = norm_part(d);
        if (std::isfinite(c)) f = std::max(f, V.squaredNorm() / (c * c));
        return f;
    }

    // Gradient of a smoothed f with respect to W, scaled so that <G, W> = f(W).
    Eigen::MatrixXd gradient_factored(const Eigen::MatrixXd& V) const {
        const Eigen::MatrixXd AV = A * V;
        const Eigen::VectorXd d = AV.rowwise().squaredNorm().cwiseMax(1e-14);
        Eigen::VectorXd wd(d.size());
        double fn;
        if (inner == InnerNorm::mixed) {
            const Eigen::VectorXd sd = d.cwiseSqrt();
            const double s = sd.sum();
            const double m = static_cast<double>(d.size());
            fn = d.sum() + s * s / m;
            wd = (1.0 + (s / m) * sd.cwiseInverse().array()).matrix();
        } else {
            const double qs = std::min(q, 64.0);
            fn = lp_norm(d, qs);
            wd = (d / fn).array().pow(qs - 1.0).matrix();
        }
        Eigen::MatrixXd G = A.transpose() * wd.asDiagonal() * A;
        if (std::isfinite(c)) {
            const double fb = V.squaredNorm() / (c * c);
            const double s = 32.0;
            const double F = std::pow(std::pow(fn, s) + std::pow(fb, s), 1.0 / s);
            const double w1 = std::pow(fn / F, s - 1.0), w2 = std::pow(fb / F, s - 1.0);
            G = w1 * G;
            G.diagonal().array() += w2 / (c * c);
        }
        return G;
    }

    double gauge(const Eigen::VectorXd& x) const {
        const Eigen::VectorXd y = A * x;
        double g = inner == InnerNorm::mixed ? mixed_norm(y) : lp_norm(y, 2.0 * q);
        if (std::isfinite(c)) g = std::max(g, x.norm() / c);
        return g;
    }
};

// Dual bound for the convex (l_p) case: for u >= 0, u0 >= 0,
// max <X, W> <= lambda_max(X, A^T D_u A + u0 I / c^2) * (||u||_{q*} + u0).
inline double covariance_dual_bound(const CovarianceConstraint& K, const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& W, int iters) {
    const Eigen::Index m = K.A.rows();
    const bool ball = std::isfinite(K.c);
    const double qstar = K.q == 1.0 ? std::numeric_limits<double>::infinity()
                        : (std::isinf(K.q) ? 1.0 : K.q / (K.q - 1.0));
    const Eigen::VectorXd d = (K.A * W * K.A.transpose()).diagonal().cwiseMax(1e-14);

    Eigen::VectorXd u(m);
    if (std::isinf(K.q)) {
        u = (d / d.maxCoeff()).array().pow(32.0).matrix();
    } else {
        u = (d / lp_norm(d, K.q)).array().pow(K.q - 1.0).matrix();
    }
    u = u.cwiseMax(1e-12 * u.maxCoeff());
    double u0 = 0.0;
    if (ball) {
        const double fb = W.trace() / (K.c * K.c);
        const double fn = lp_norm(d, K.q);
        u0 = fb >= fn ? 1.0 : 1e-3;
        if (fb < 0.5 * fn) u0 = 1e-6;
    }

    auto eval = [&](const Eigen::VectorXd& uu, double uu0, Eigen::VectorXd* p) {
        Eigen::MatrixXd N = K.A.transpose() * uu.asDiagonal() * K.A;
        if (ball) N.diagonal().array() += uu0 / (K.c * K.c);
        const PencilTop t = pencil_top(X, N, 1);
        if (p) *p = t.vectors.col(0);
        return std::max(0.0, t.values(0)) * (lp_norm(uu, qstar) + (ball ? uu0 : 0.0));
    };
    Eigen::VectorXd p;
    double g;
    try {
        g = eval(u, u0, &p);
    } catch (const NumericError&) {
        return std::numeric_limits<double>::infinity();
    }
    double eta = 0.3;
    const bool fixed_u = std::isinf(qstar);  // l_2 inner norm: u = 1 is optimal up to scale
    for (int it = 0; it < iters && eta > 1e-7; ++it) {
        const double nu = lp_norm(u, qstar) + (ball ? u0 : 0.0);
        Eigen::VectorXd gu(m);
        const Eigen::VectorXd Ap = K.A * p;
        Eigen::VectorXd du = fixed_u ? Eigen::VectorXd::Zero(m) : lp_norm_gradient(u, qstar);
        for (Eigen::Index i = 0; i < m; ++i) gu(i) = fixed_u ? 0.0 : u(i) * (du(i) / nu - Ap(i) * Ap(i));
        double g0 = ball ? u0 * (1.0 / nu - p.squaredNorm() / (K.c * K.c)) : 0.0;
        Eigen::VectorXd un = (u.array() * (-eta * gu.array()).exp()).matrix();
        const double u0n = ball ? u0 * std::exp(-eta * g0) : 0.0;
        Eigen::VectorXd pn;
        double gn;
        try {
            gn = eval(un, u0n, &pn);
        } catch (const NumericError&) {
            eta *= 0.5;
            continue;
        }
        if (gn < g) {
            g = gn;
            u = un;
            u0 = u0n;
            p = pn;
            eta = std::min(5.0, eta * 1.3);
        } else {
            eta *= 0.5;
        }
    }
    return g;
}

} // namespace detail

/**
 * @brief Maximizes <X, W> over {W >= 0, f(W) <= 1} in factored form W = V V^T.
 *
 * Ascent on the ratio <X, W> / f(W) with f degree-1 homogeneous, so every iterate is
 * rescaled to f = 1 exactly.
 */
inline RelaxationState solve_covariance_relaxation(const detail::CovarianceConstraint& K, const SymmetricMatrix& X,
                                                   int iters, std::uint64_t seed) {
    const Eigen::Index n = K.A.cols();
    Rng rng = make_rng(derive_seed(seed, 0xA11));
    Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) V(i, j) += 0.1 * standard_normal(rng);
    auto normalize = [&](Eigen::MatrixXd& M) {
        const double f = K.value_factored(M);
        if (!(f > 0.0) || !std::isfinite(f)) throw NumericError("relaxation: degenerate iterate");
        M /= std::sqrt(f);
    };
    normalize(V);
    auto ratio = [&](const Eigen::MatrixXd& M) { return (M.transpose() * X.matrix() * M).trace(); };
    RelaxationState st;
    double phi = ratio(V);
    st.history.push_back(phi);
    const double scale = std::max(X.max_eigenvalue(), 1e-300);
    double gamma = 0.5 / scale;
    int stall = 0;
    for (int it = 0; it < iters; ++it) {
        const Eigen::MatrixXd G = K.gradient_factored(V);
        const Eigen::MatrixXd D = (X.matrix() - phi * G) * V;
        Eigen::MatrixXd Vn = V + gamma * D;
        normalize(Vn);
        const double pn = ratio(Vn);
        if (pn > phi) {
            const bool small = pn - phi <= 1e-12 * std::abs(pn);
            V = std::move(Vn);
            phi = pn;
            st.history.push_back(phi);
            gamma *= 1.5;
            stall = small ? stall + 1 : 0;
            if (stall >= 20) break;
        } else {
            gamma *= 0.5;
            if (gamma < 1e-14 / scale) break;
        }
    }
    st.W = SymmetricMatrix(V * V.transpose());
    return st;
}

/**
 * @brief Oracle for {x : ||A x|| <= 1} (optionally also |x| <= c) by relaxation and Gaussian rounding.
 *
 * Candidates are p = V g / gauge(V g) with V V^T = W; the best of `rounds` draws is kept.
 * For an l_p inner norm the upper bound is certified by the dual; for the mixed norm the
 * ellipsoid {|A x|_2 <= 1} containing K supplies it.
 */
inline QfmResult qfm_norm_image(const Eigen::MatrixXd& A, InnerNorm inner, double p, const SymmetricMatrix& X,
                                int rounds, std::uint64_t seed, double c = std::numeric_limits<double>::infinity(),
                                double kappa = kUnknown, const QfmOptions& opt = {}) {
    const Eigen::Index n = A.cols();
    detail::require(A.rows() >= n && n >= 1, "qfm_norm_image: A must be m x n with m >= n");
    detail::require_psd_input(X, n, "qfm_norm_image");
    detail::require(rounds >= 1, "qfm_norm_image: rounds must be >= 1");
    const double q = fail_prob_for_rounds(rounds);
    const SymmetricMatrix M(A.transpose() * A);
    if (inner == InnerNorm::lp && p == 2.0) {
        QfmResult r = qfm_ellipsoid_ball(M, c, X);
        r.kappa = std::isnan(kappa) ? 1.0 : kappa;
        return r;
    }
    if (std::isnan(kappa)) {
        kappa = ConvexBody::norm_image(A, inner, p).kappa_bound();
        if (std::isfinite(c)) kappa *= 2.0;
    }
    detail::CovarianceConstraint K{A, inner, p / 2.0, c};
    const RelaxationState st = solve_covariance_relaxation(K, X, opt.relax_iters, seed);

    double upper;
    if (inner == InnerNorm::lp) {
        upper = detail::covariance_dual_bound(K, X.matrix(), st.W.matrix(), opt.dual_iters);
    } else {
        upper = qfm_ellipsoid_ball(M, c, X).relax_upper;
    }

    // Factor W = V V^T for rounding.
    const Spectral& sw = st.W.spectral();
    const Eigen::MatrixXd V = sw.vectors * sw.values.cwiseMax(0.0).cwiseSqrt().asDiagonal();
    Eigen::VectorXd best = Eigen::VectorXd::Zero(n);
    double best_val = -1.0;
    auto consider = [&](const Eigen::VectorXd& x) {
        const double g = K.gauge(x);
        if (!(g > 0.0)) return;
        const Eigen::VectorXd pnt = x / g;
        const double v = X.quadratic(pnt);
        if (v > best_val) {
            best_val = v;
            best = pnt;
        }
    };
    for (int r = 0; r < rounds; ++r) {
        Rng rr = make_rng(derive_seed(seed, 2, static_cast<std::uint64_t>(r)));
        consider(V * gaussian_vector(n, rr));
    }
    consider(X.spectral().vectors.col(0));
    for (Eigen::Index j = 0; j < n; ++j) consider(sw.vectors.col(j));
    return detail::make_result(best, X, std::max(upper, best_val), kappa, q);
}

// ---------------------------------------------------------------------------
// Brute force reference
// ---------------------------------------------------------------------------

namespace detail {

// Largest t >= 0 with gauge(x + t d) <= 1, for x in K.
inline double boundary_step(const ConvexBody& body, const Eigen::VectorXd& x, const Eigen::VectorXd& d) {
    double hi = 2.0 * body.outer_radius() / std::max(d.norm(), 1e-300) + 1.0;
    double lo = 0.0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (body.gauge(x + mid * d) <= 1.0) lo = mid;
        else hi = mid;
    }
    return lo;
}

} // namespace detail

/**
 * @brief Multi-start ascent for max x^T X x over K; a heuristic reference.
 *
 * From boundary samples: x <- boundary(x + gamma X x) until stall, then one step through the
 * projection P_K, alternated with coordinate moves to the ends of the feasible chord.
 */
inline QfmResult qfm_bruteforce(const ConvexBody& body, const SymmetricMatrix& X, int starts, std::uint64_t seed) {
    const Eigen::Index n = body.dim();
    detail::require_psd_input(X, n, "qfm_bruteforce");
    detail::require(starts >= 1, "qfm_bruteforce: starts must be >= 1");
    const double lmax = std::max(X.max_eigenvalue(), 1e-300);
    const double gamma = 2.0 / lmax;
    const double eps = 1e-7 * body.outer_radius();

    std::vector<Eigen::VectorXd> init = sample_boundary(body, starts, seed);
    init.push_back(body.to_boundary(X.spectral().vectors.col(0)));

    auto project_step = [&](const Eigen::VectorXd& y) {
        try {
            return body.to_boundary(weak_project(body, y, eps).p);
        } catch (const ToleranceNotMetWith<WeakProjection>& e) {
            return body.to_boundary(e.best().p);
        }
    };
    auto ascend = [&](Eigen::VectorXd x) {
        double val = X.quadratic(x);
        bool radial = true;
        for (int it = 0; it < 5000; ++it) {
            const Eigen::VectorXd y = x + gamma * (X.matrix() * x);
            const Eigen::VectorXd xn = radial ? body.to_boundary(y) : project_step(y);
            const double vn = X.quadratic(xn);
            if (!(vn > val * (1.0 + 1e-13))) {
                if (vn > val) {
                    x = xn;
                    val = vn;
                }
                if (!radial) break;
                radial = false;
                continue;
            }
            x = xn;
            val = vn;
            radial = true;
        }
        return x;
    };
    auto polish = [&](Eigen::VectorXd& x) {
        double val = X.quadratic(x);
        bool improved = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (double sg : {1.0, -1.0}) {
                Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
                d(i) = sg;
                const double t = detail::boundary_step(body, x, d);
                const Eigen::VectorXd xn = x + t * d;
                const double vn = X.quadratic(xn);
                if (vn > val * (1.0 + 1e-12)) {
                    x = xn;
                    val = vn;
                    improved = true;
                }
            }
        }
        return improved;
    };

    Eigen::VectorXd best = init.front();
    double best_val = -1.0;
    for (auto x : init) {
        for (int round = 0; round < 20; ++round) {
            x = ascend(std::move(x));
            if (!polish(x)) break;
        }
        const double g = body.gauge(x);
        if (g > 1.0) x /= g;
        const double v = X.quadratic(x);
        if (v > best_val) {
            best_val = v;
            best = x;
        }
    }
    return detail::make_result(best, X, std::numeric_limits<double>::infinity(), kUnknown, kUnknown);
}

// ---------------------------------------------------------------------------
// Oracle objects
// ---------------------------------------------------------------------------

/// O_K(X): a feasible p with p^T X p >= max_{q in K} q^T X q / kappa, except with probability fail_prob.
class QfmOracle {
public:
    virtual ~QfmOracle() = default;
    virtual QfmResult maximize(const SymmetricMatrix& X, std::uint64_t seed, double fail_prob) const = 0;
    virtual double kappa() const = 0;
    virtual const ConvexBody& body() const = 0;
    /// Oracle for K cap cB (this oracle itself when the ball contains K).
    virtual std::shared_ptr<const QfmOracle> intersect(double c) const = 0;
    /// Drops any state carried between calls, so a solve does not depend on earlier ones.
    virtual void reset() const {}

    QfmResult maximize(const SymmetricMatrix& X, std::uint64_t seed = 0) const {
        return maximize(X, seed, 1e-3);
    }
};

namespace detail {

inline int rounds_from(const QfmOptions& opt, double fail_prob) {
    return opt.fixed_rounds > 0 ? opt.fixed_rounds : rounds_for_fail_prob(fail_prob);
}

class EllipsoidOracle final : public QfmOracle, public std::enable_shared_from_this<EllipsoidOracle> {
public:
    EllipsoidOracle(ConvexBody body, SymmetricMatrix M, double c = std::numeric_limits<double>::infinity())
        : body_(std::move(body)), M_(std::move(M)), c_(c) {}
    QfmResult maximize(const SymmetricMatrix& X, std::uint64_t, double) const override {
        std::lock_guard lock(mutex_);
        return qfm_ellipsoid_ball(M_, c_, X, &warm_);
    }
    void reset() const override {
        std::lock_guard lock(mutex_);
        warm_ = {};
    }
    double kappa() const override { return 1.0; }
    const ConvexBody& body() const override { return body_; }
    std::shared_ptr<const QfmOracle> intersect(double c) const override {
        if (c >= body_.outer_radius()) return shared_from_this();
        return std::make_shared<EllipsoidOracle>(localize(body_, c), M_, std::min(c, c_));
    }

private:
    ConvexBody body_;
    SymmetricMatrix M_;
    double c_;
    mutable std::mutex mutex_;
    mutable EllipsoidBallWarm warm_;
};

class BoxOracle final : public QfmOracle, public std::enable_shared_from_this<BoxOracle> {
public:
    BoxOracle(ConvexBody body, Eigen::VectorXd h, QfmOptions opt)
        : body_(std::move(body)), h_(std::move(h)), opt_(opt) {}
    QfmResult maximize(const SymmetricMatrix& X, std::uint64_t seed, double fail_prob) const override {
        return qfm_box_sdp(h_, X, rounds_from(opt_, fail_prob), seed, opt_.box_slack);
    }
    double kappa() const override { return std::numbers::pi / 2.0 * (1.0 + opt_.box_slack); }
    const ConvexBody& body() const override { return body_; }
    std::shared_ptr<const QfmOracle> intersect(double c) const override;

private:
    ConvexBody body_;
    Eigen::VectorXd h_;
    QfmOptions opt_;
};

class NormImageOracle final : public QfmOracle, public std::enable_shared_from_this<NormImageOracle> {
public:
    NormImageOracle(ConvexBody body, Eigen::MatrixXd A, InnerNorm inner, double p, double c, double kappa,
                    QfmOptions opt)
        : body_(std::move(body)), A_(std::move(A)), inner_(inner), p_(p), c_(c), kappa_(kappa), opt_(opt) {}
    QfmResult maximize(const SymmetricMatrix& X, std::uint64_t seed, double fail_prob) const override {
        return qfm_norm_image(A_, inner_, p_, X, rounds_from(opt_, fail_prob), seed, c_, kappa_, opt_);
    }
    double kappa() const override { return kappa_; }
    const ConvexBody& body() const override { return body_; }
    std::shared_ptr<const QfmOracle> intersect(double c) const override {
        if (c >= body_.outer_radius()) return shared_from_this();
        const double k = kappa_ == 1.0 ? 1.0 : 2.0 * kappa_;
        return std::make_shared<NormImageOracle>(localize(body_, c), A_, inner_, p_, std::min(c, c_), k, opt_);
    }

private:
    ConvexBody body_;
    Eigen::MatrixXd A_;
    InnerNorm inner_;
    double p_, c_, kappa_;
    QfmOptions opt_;
};

inline std::shared_ptr<const QfmOracle> BoxOracle::intersect(double c) const {
    if (c >= body_.outer_radius()) return shared_from_this();
    const Eigen::MatrixXd A = h_.cwiseInverse().asDiagonal();
    return std::make_shared<NormImageOracle>(localize(body_, c), A, InnerNorm::lp,
                                             std::numeric_limits<double>::infinity(), c, 2.0 * kappa(), opt_);
}

class BruteForceOracle final : public QfmOracle, public std::enable_shared_from_this<BruteForceOracle> {
public:
    BruteForceOracle(ConvexBody body, QfmOptions opt) : body_(std::move(body)), opt_(opt) {}
    QfmResult maximize(const SymmetricMatrix& X, std::uint64_t seed, double) const override {
        return qfm_bruteforce(body_, X, opt_.brute_starts, seed);
    }
    double kappa() const override { return kUnknown; }
    const ConvexBody& body() const override { return body_; }
    std::shared_ptr<const QfmOracle> intersect(double c) const override {
        if (c >= body_.outer_radius()) return shared_from_this();
        return std::make_shared<BruteForceOracle>(localize(body_, c), opt_);
    }

private:
    ConvexBody body_;
    QfmOptions opt_;
};

} // namespace detail

/// Oracle matched to the body: exact for ellipsoids and l_2 images, relaxations otherwise.
inline std::shared_ptr<const QfmOracle> make_oracle(const ConvexBody& body, const QfmOptions& opt = {}) {
    const auto& spec = body.spec();
    if (body.kind() == BodyKind::intersection && body.base()) {
        return make_oracle(*body.base(), opt)->intersect(body.ball_radius());
    }
    if (!spec) return std::make_shared<detail::BruteForceOracle>(body, opt);
    if (const auto* e = std::get_if<EllipsoidSpec>(&spec->shape)) {
        const Eigen::VectorXd inv = e->semi_axes.array().square().inverse().matrix();
        return std::make_shared<detail::EllipsoidOracle>(body, SymmetricMatrix::diagonal(inv));
    }
    if (const auto* b = std::get_if<BoxSpec>(&spec->shape)) {
        return std::make_shared<detail::BoxOracle>(body, b->half_widths, opt);
    }
    if (const auto* pb = std::get_if<PBallSpec>(&spec->shape)) {
        if (std::isinf(pb->p))
            return std::make_shared<detail::BoxOracle>(body, Eigen::VectorXd::Constant(pb->n, pb->radius), opt);
        const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(pb->n, pb->n) / pb->radius;
        if (pb->p == 2.0)
            return std::make_shared<detail::EllipsoidOracle>(body, SymmetricMatrix(A.transpose() * A));
        return std::make_shared<detail::NormImageOracle>(body, A, InnerNorm::lp, pb->p,
                                                         std::numeric_limits<double>::infinity(),
                                                         body.kappa_bound(), opt);
    }
    if (const auto* ni = std::get_if<NormImageSpec>(&spec->shape)) {
        if (ni->inner == InnerNorm::lp && ni->p == 2.0)
            return std::make_shared<detail::EllipsoidOracle>(body, SymmetricMatrix(ni->A.transpose() * ni->A));
        return std::make_shared<detail::NormImageOracle>(body, ni->A, ni->inner, ni->p,
                                                         std::numeric_limits<double>::infinity(),
                                                         body.kappa_bound(), opt);
    }
    return std::make_shared<detail::BruteForceOracle>(body, opt);
}

/// The oracle of `base` applied to K cap cB.
inline QfmResult qfm_intersection(const QfmOracle& base, double c, const SymmetricMatrix& X, double fail_prob,
                                  std::uint64_t seed) {
    detail::require(c > 0.0, "qfm_intersection: c must be > 0");
    return base.intersect(c)->maximize(X, seed, fail_prob);
}

} // namespace kwest
