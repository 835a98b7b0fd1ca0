#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "rng.hpp"

namespace kwest {

enum class BodyKind { ellipsoid, box, pball, norm_image, intersection, custom };

inline const char* to_string(BodyKind k) {
    switch (k) {
    case BodyKind::ellipsoid: return "ellipsoid";
    case BodyKind::box: return "box";
    case BodyKind::pball: return "pball";
    case BodyKind::norm_image: return "norm_image";
    case BodyKind::intersection: return "intersection";
    case BodyKind::custom: return "custom";
    }
    return "?";
}

/// Inner norm of a norm-image body {x : ||Ax|| <= 1}.
enum class InnerNorm {
    lp,    ///< ||y||_p, p >= 2
    mixed  ///< (||y||_2^2 + ||y||_1^2 / m)^{1/2}, a symmetric norm that is not quadratically convex
};

// ---------------------------------------------------------------------------
// Serializable body descriptions
// ---------------------------------------------------------------------------

struct BodySpec;

struct EllipsoidSpec {
    Eigen::VectorXd semi_axes;
};
struct BoxSpec {
    Eigen::VectorXd half_widths;
};
struct PBallSpec {
    int n = 1;
    double p = 2.0;  ///< may be +infinity
    double radius = 1.0;
};
struct NormImageSpec {
    Eigen::MatrixXd A;  ///< m x n, m >= n, full column rank
    InnerNorm inner = InnerNorm::lp;
    double p = 2.0;
};
struct IntersectionSpec {
    std::shared_ptr<const BodySpec> base;
    double radius = 1.0;
};

struct BodySpec {
    std::variant<EllipsoidSpec, BoxSpec, PBallSpec, NormImageSpec, IntersectionSpec> shape;
    std::optional<double> t2_bound;     ///< overrides the built-in declared constant
    std::optional<double> kappa_bound;  ///< likewise
};

inline int spec_dimension(const BodySpec& s) {
    return std::visit(
        [](const auto& v) -> int {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EllipsoidSpec>) return static_cast<int>(v.semi_axes.size());
            else if constexpr (std::is_same_v<T, BoxSpec>) return static_cast<int>(v.half_widths.size());
            else if constexpr (std::is_same_v<T, PBallSpec>) return v.n;
            else if constexpr (std::is_same_v<T, NormImageSpec>) return static_cast<int>(v.A.cols());
            else return v.base ? spec_dimension(*v.base) : 0;
        },
        s.shape);
}

/// Throws InvalidInput when a spec violates its invariants.
inline void validate(const BodySpec& s) {
    using detail::require;
    std::visit(
        [](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EllipsoidSpec>) {
                require(v.semi_axes.size() >= 1, "ellipsoid: need at least one semi-axis");
                require(v.semi_axes.allFinite() && v.semi_axes.minCoeff() > 0.0,
                        "ellipsoid: semi-axes must be finite and > 0");
            } else if constexpr (std::is_same_v<T, BoxSpec>) {
                require(v.half_widths.size() >= 1, "box: need at least one half-width");
                require(v.half_widths.allFinite() && v.half_widths.minCoeff() > 0.0,
                        "box: half-widths must be finite and > 0");
            } else if constexpr (std::is_same_v<T, PBallSpec>) {
                require(v.n >= 1, "pball: dimension must be >= 1");
                require(v.p >= 2.0, "pball: exponent p must be >= 2");
                require(std::isfinite(v.radius) && v.radius > 0.0, "pball: radius must be > 0");
            } else if constexpr (std::is_same_v<T, NormImageSpec>) {
                require(v.A.cols() >= 1 && v.A.rows() >= v.A.cols(),
                        "norm_image: A must be m x n with m >= n >= 1");
                require(v.A.allFinite(), "norm_image: A has non-finite entries");
                if (v.inner == InnerNorm::lp) require(v.p >= 2.0, "norm_image: exponent p must be >= 2");
                Eigen::JacobiSVD<Eigen::MatrixXd> svd(v.A);
                require(svd.singularValues().minCoeff() > 1e-10, "norm_image: A is not full rank");
            } else {
                require(static_cast<bool>(v.base), "intersection: missing base body");
                validate(*v.base);
                require(std::isfinite(v.radius) && v.radius > 0.0, "intersection: radius must be > 0");
            }
        },
        s.shape);
    if (s.t2_bound) require(*s.t2_bound >= 1.0, "t2_bound must be >= 1");
    if (s.kappa_bound) require(*s.kappa_bound >= 1.0, "kappa_bound must be >= 1");
}

// ---------------------------------------------------------------------------
// Gauge implementations
// ---------------------------------------------------------------------------

namespace detail {

/// ||y||_p computed with scaling so that large p does not overflow.
inline double lp_norm(const Eigen::VectorXd& y, double p) {
    const double mx = y.cwiseAbs().maxCoeff();
    if (mx == 0.0 || std::isinf(p)) return mx;
    if (p == 2.0) return y.norm();
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) s += std::pow(std::abs(y(i)) / mx, p);
    return mx * std::pow(s, 1.0 / p);
}

inline Eigen::VectorXd lp_norm_gradient(const Eigen::VectorXd& y, double p) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(y.size());
    const double nrm = lp_norm(y, p);
    if (nrm == 0.0) return g;
    if (std::isinf(p)) {
        Eigen::Index i;
        y.cwiseAbs().maxCoeff(&i);
        g(i) = y(i) > 0 ? 1.0 : -1.0;
        return g;
    }
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double t = std::abs(y(i)) / nrm;
        g(i) = (y(i) >= 0 ? 1.0 : -1.0) * std::pow(t, p - 1.0);
    }
    return g;
}

inline double mixed_norm(const Eigen::VectorXd& y) {
    const double l1 = y.lpNorm<1>();
    return std::sqrt(y.squaredNorm() + l1 * l1 / static_cast<double>(y.size()));
}

inline Eigen::VectorXd mixed_norm_gradient(const Eigen::VectorXd& y) {
    const double nrm = mixed_norm(y);
    if (nrm == 0.0) return Eigen::VectorXd::Zero(y.size());
    const double l1 = y.lpNorm<1>();
    Eigen::VectorXd s = y.unaryExpr([](double t) { return t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0); });
    return (y + (l1 / static_cast<double>(y.size())) * s) / nrm;
}

class Shape {
public:
    virtual ~Shape() = default;
    virtual double gauge(const Eigen::VectorXd& x) const = 0;

    // Central differences; exact shapes override.
    virtual Eigen::VectorXd gradient(const Eigen::VectorXd& x) const {
        const Eigen::Index n = x.size();
        Eigen::VectorXd g(n);
        const double h = 1e-7 * std::max(1.0, x.norm());
        Eigen::VectorXd y = x;
        for (Eigen::Index i = 0; i < n; ++i) {
            y(i) = x(i) + h;
            const double fp = gauge(y);
            y(i) = x(i) - h;
            const double fm = gauge(y);
            y(i) = x(i);
            g(i) = (fp - fm) / (2.0 * h);
        }
        return g;
    }

    /// Exact Euclidean projection for z outside the body, when one is available.
    virtual std::optional<Eigen::VectorXd> project(const Eigen::VectorXd&) const { return std::nullopt; }

    /// Subgradients s of gauges dominated by this one, taken at x. Each gives the
    /// supporting halfspace K <= {y : <s, y> <= 1}. Nonsmooth shapes report every
    /// nearly active piece.
    virtual void cuts(const Eigen::VectorXd& x, std::vector<Eigen::VectorXd>& out) const {
        out.push_back(gradient(x));
    }
};

class EllipsoidShape final : public Shape {
public:
    explicit EllipsoidShape(Eigen::VectorXd a) : a_(std::move(a)), a2_(a_.array().square()) {}

    double gauge(const Eigen::VectorXd& x) const override {
        return (x.array() / a_.array()).matrix().norm();
    }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        const double g = gauge(x);
        if (g == 0.0) return Eigen::VectorXd::Zero(x.size());
        return (x.array() / a2_.array()).matrix() / g;
    }

    // x(lambda)_i = a_i^2 z_i / (a_i^2 + lambda); Newton on phi(lambda) = |x(lambda)/a|^2 - 1,
    // which is convex and decreasing, so iterates from a lower bound increase monotonically.
    std::optional<Eigen::VectorXd> project(const Eigen::VectorXd& z) const override {
        const Eigen::ArrayXd az2 = (a2_.array() * z.array().square());
        double lam = std::max(0.0, std::sqrt(az2.sum()) - a2_.maxCoeff());
        for (int it = 0; it < 500; ++it) {
            const Eigen::ArrayXd d = a2_.array() + lam;
            const double phi = (az2 / d.square()).sum() - 1.0;
            const double dphi = -2.0 * (az2 / d.cube()).sum();
            if (phi <= 0.0 || dphi == 0.0) break;
            const double step = -phi / dphi;
            lam += step;
            if (step <= 1e-16 * std::max(1.0, lam)) break;
        }
        return (a2_.array() * z.array() / (a2_.array() + lam)).matrix();
    }

    const Eigen::VectorXd& axes() const { return a_; }

private:
    Eigen::VectorXd a_, a2_;
};

class BoxShape final : public Shape {
public:
    explicit BoxShape(Eigen::VectorXd h) : h_(std::move(h)) {}

    double gauge(const Eigen::VectorXd& x) const override {
        return (x.array().abs() / h_.array()).maxCoeff();
    }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
        Eigen::Index i;
        (x.array().abs() / h_.array()).maxCoeff(&i);
        if (x(i) != 0.0) g(i) = (x(i) > 0 ? 1.0 : -1.0) / h_(i);
        return g;
    }
    std::optional<Eigen::VectorXd> project(const Eigen::VectorXd& z) const override {
        return z.cwiseMax(-h_).cwiseMin(h_);
    }
    void cuts(const Eigen::VectorXd& x, std::vector<Eigen::VectorXd>& out) const override {
        const Eigen::ArrayXd t = x.array().abs() / h_.array();
        const double mx = t.maxCoeff();
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            if (t(i) < (1.0 - 1e-6) * mx || x(i) == 0.0) continue;
            Eigen::VectorXd s = Eigen::VectorXd::Zero(x.size());
            s(i) = (x(i) > 0 ? 1.0 : -1.0) / h_(i);
            out.push_back(std::move(s));
        }
    }

private:
    Eigen::VectorXd h_;
};

class NormImageShape final : public Shape {
public:
    NormImageShape(Eigen::MatrixXd A, InnerNorm inner, double p)
        : A_(std::move(A)), inner_(inner), p_(p) {}

    double gauge(const Eigen::VectorXd& x) const override { return outer(A_ * x); }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        const Eigen::VectorXd y = A_ * x;
        const Eigen::VectorXd gy =
            inner_ == InnerNorm::mixed ? mixed_norm_gradient(y) : lp_norm_gradient(y, p_);
        return A_.transpose() * gy;
    }

    double outer(const Eigen::VectorXd& y) const {
        return inner_ == InnerNorm::mixed ? mixed_norm(y) : lp_norm(y, p_);
    }

private:
    Eigen::MatrixXd A_;
    InnerNorm inner_;
    double p_;
};

class PBallShape final : public Shape {
public:
    PBallShape(double p, double radius) : p_(p), radius_(radius) {}
    double gauge(const Eigen::VectorXd& x) const override { return lp_norm(x, p_) / radius_; }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        return lp_norm_gradient(x, p_) / radius_;
    }

private:
    double p_, radius_;
};

class CustomShape final : public Shape {
public:
    using Gauge = std::function<double(const Eigen::VectorXd&)>;
    using Gradient = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

    CustomShape(Gauge g, Gradient d) : g_(std::move(g)), d_(std::move(d)) {}
    double gauge(const Eigen::VectorXd& x) const override { return g_(x); }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        return d_ ? d_(x) : Shape::gradient(x);
    }

private:
    Gauge g_;
    Gradient d_;
};

class IntersectionShape;

} // namespace detail

// ---------------------------------------------------------------------------
// ConvexBody
// ---------------------------------------------------------------------------

/**
 * @brief Origin-symmetric convex body r*B2 <= K <= R*B2 accessed through its gauge.
 *
 * Immutable; copies share the underlying gauge implementation.
 */
class ConvexBody {
public:
    using Gauge = detail::CustomShape::Gauge;
    using Gradient = detail::CustomShape::Gradient;

    static ConvexBody from_spec(const BodySpec& spec);

    static ConvexBody ellipsoid(const Eigen::VectorXd& semi_axes) {
        return from_spec(BodySpec{EllipsoidSpec{semi_axes}, {}, {}});
    }
    static ConvexBody ball(int n, double radius = 1.0) {
        return ellipsoid(Eigen::VectorXd::Constant(n, radius));
    }
    static ConvexBody box(const Eigen::VectorXd& half_widths) {
        return from_spec(BodySpec{BoxSpec{half_widths}, {}, {}});
    }
    static ConvexBody pball(int n, double p, double radius = 1.0) {
        return from_spec(BodySpec{PBallSpec{n, p, radius}, {}, {}});
    }
    static ConvexBody norm_image(const Eigen::MatrixXd& A, InnerNorm inner, double p = 2.0) {
        return from_spec(BodySpec{NormImageSpec{A, inner, p}, {}, {}});
    }

    /// Body given only by a gauge oracle; the caller vouches for the declared constants.
    /// Without `gradient`, central differences stand in for it and the certificate of
    /// weak_project becomes approximate near kinks of the gauge.
    static ConvexBody custom(int n, Gauge gauge, double r, double R, double t2_bound,
                             double kappa_bound, std::string name, Gradient gradient = {}) {
        detail::require(n >= 1, "custom body: dimension must be >= 1");
        detail::require(r > 0.0 && R >= r, "custom body: need 0 < r <= R");
        detail::require(t2_bound >= 1.0 && kappa_bound >= 1.0, "custom body: constants must be >= 1");
        ConvexBody b;
        b.n_ = n;
        b.r_ = r;
        b.R_ = R;
        b.t2_ = t2_bound;
        b.kappa_ = kappa_bound;
        b.kind_ = BodyKind::custom;
        b.key_ = "custom:" + name;
        b.shape_ = std::make_shared<detail::CustomShape>(std::move(gauge), std::move(gradient));
        return b;
    }

    /// K intersected with the Euclidean ball of radius c (requires c >= r).
    ConvexBody intersect_ball(double c) const;

    int dim() const { return n_; }
    double inner_radius() const { return r_; }
    double outer_radius() const { return R_; }
    double t2_bound() const { return t2_; }
    double kappa_bound() const { return kappa_; }
    BodyKind kind() const { return kind_; }
    const std::optional<BodySpec>& spec() const { return spec_; }
    /// Stable identifier, usable as a cache key.
    const std::string& key() const { return key_; }

    /// For intersections: the base body and ball radius.
    const ConvexBody* base() const { return base_.get(); }
    double ball_radius() const { return ball_; }

    double gauge(const Eigen::VectorXd& x) const {
        check_dim(x, "gauge");
        return shape_->gauge(x);
    }
    Eigen::VectorXd gauge_gradient(const Eigen::VectorXd& x) const {
        check_dim(x, "gauge_gradient");
        return shape_->gradient(x);
    }
    bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const { return gauge(x) <= 1.0 + tol; }

    /// Exact Euclidean projection when the body admits one, else nullopt.
    std::optional<Eigen::VectorXd> exact_projection(const Eigen::VectorXd& z) const {
        check_dim(z, "exact_projection");
        if (shape_->gauge(z) <= 1.0) return z;
        return shape_->project(z);
    }

    /// Appends supporting-halfspace normals taken at x (see detail::Shape::cuts).
    void supporting_cuts(const Eigen::VectorXd& x, std::vector<Eigen::VectorXd>& out) const {
        check_dim(x, "supporting_cuts");
        shape_->cuts(x, out);
    }

    /// Rescale x onto the boundary (x / gauge(x)); zero stays zero.
    Eigen::VectorXd to_boundary(const Eigen::VectorXd& x) const {
        const double g = gauge(x);
        return g > 0.0 ? Eigen::VectorXd(x / g) : x;
    }

private:
    friend class detail::IntersectionShape;

    void check_dim(const Eigen::VectorXd& x, const char* who) const {
        if (x.size() != n_) {
            std::ostringstream os;
            os << who << ": dimension mismatch (got " << x.size() << ", body has " << n_ << ")";
            throw InvalidInput(os.str());
        }
    }

    int n_ = 0;
    double r_ = 0.0, R_ = 0.0, t2_ = 1.0, kappa_ = 1.0;
    BodyKind kind_ = BodyKind::custom;
    std::optional<BodySpec> spec_;
    std::string key_;
    std::shared_ptr<const detail::Shape> shape_;
    std::shared_ptr<const ConvexBody> base_;
    double ball_ = std::numeric_limits<double>::infinity();
};

namespace detail {

class IntersectionShape final : public Shape {
public:
    IntersectionShape(std::shared_ptr<const ConvexBody> base, double c) : base_(std::move(base)), c_(c) {}

    double gauge(const Eigen::VectorXd& x) const override {
        return std::max(base_->shape_->gauge(x), x.norm() / c_);
    }
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const override {
        const double gb = base_->shape_->gauge(x), gc = x.norm() / c_;
        if (gb >= gc) return base_->shape_->gradient(x);
        return gc > 0.0 ? Eigen::VectorXd(x / (x.norm() * c_)) : Eigen::VectorXd::Zero(x.size());
    }
    void cuts(const Eigen::VectorXd& x, std::vector<Eigen::VectorXd>& out) const override {
        base_->shape_->cuts(x, out);
        if (x.norm() > 0.0) out.push_back(x / (x.norm() * c_));
    }

    // min 1/2|x - z|^2 + mu/2 (|x|^2 - c^2) over the base body is solved by
    // x(mu) = P_base(z / (1 + mu)); |x(mu)| decreases in mu, so bisect for |x(mu)| = c.
    std::optional<Eigen::VectorXd> project(const Eigen::VectorXd& z) const override {
        auto pb = [&](const Eigen::VectorXd& y) -> std::optional<Eigen::VectorXd> {
            if (base_->shape_->gauge(y) <= 1.0) return y;
            return base_->shape_->project(y);
        };
        auto x0 = pb(z);
        if (!x0) return std::nullopt;
        if (x0->norm() <= c_) return x0;
        double lo = 0.0, hi = z.norm() / c_ - 1.0;
        Eigen::VectorXd best = *pb(z / (1.0 + hi));
        for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + hi); ++it) {
            const double mid = 0.5 * (lo + hi);
            Eigen::VectorXd x = *pb(z / (1.0 + mid));
            if (x.norm() > c_) lo = mid;
            else {
                hi = mid;
                best = std::move(x);
            }
        }
        return best;
    }

private:
    std::shared_ptr<const ConvexBody> base_;
    double c_;
};

inline double t2_lp(double p, double m) {
    const double log_bound = std::sqrt(2.0 * std::log(2.0 * m));
    return std::max(1.0, std::isinf(p) ? log_bound : std::min(std::sqrt(p - 1.0), log_bound));
}

inline double kappa_from_t2(double t2, double m) {
    return std::max(1.0, 8.0 * std::exp(1.0) * t2 * t2 * std::log(std::max(m, 2.0)));
}

inline std::string spec_key(const BodySpec& s) {
    std::ostringstream os;
    os << std::hexfloat;
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EllipsoidSpec>) os << "E" << v.semi_axes.transpose();
            else if constexpr (std::is_same_v<T, BoxSpec>) os << "B" << v.half_widths.transpose();
            else if constexpr (std::is_same_v<T, PBallSpec>) os << "P" << v.n << ',' << v.p << ',' << v.radius;
            else if constexpr (std::is_same_v<T, NormImageSpec>)
                os << "N" << static_cast<int>(v.inner) << ',' << v.p << ',' << v.A.rows() << 'x'
                   << v.A.cols() << ':' << v.A.reshaped().transpose();
            else os << "I(" << spec_key(*v.base) << ")" << v.radius;
        },
        s.shape);
    if (s.t2_bound) os << "|t" << *s.t2_bound;
    if (s.kappa_bound) os << "|k" << *s.kappa_bound;
    return os.str();
}

} // namespace detail

/// Declared approximation factor for the box oracle: pi/2 (1 + delta).
inline constexpr double kBoxKappaSlack = 0.05;

inline ConvexBody ConvexBody::from_spec(const BodySpec& spec) {
    validate(spec);
    if (const auto* is = std::get_if<IntersectionSpec>(&spec.shape)) {
        ConvexBody b = from_spec(*is->base).intersect_ball(is->radius);
        if (spec.t2_bound) b.t2_ = *spec.t2_bound;
        if (spec.kappa_bound) b.kappa_ = *spec.kappa_bound;
        b.spec_ = spec;
        b.key_ = detail::spec_key(spec);
        return b;
    }

    ConvexBody b;
    b.n_ = spec_dimension(spec);
    b.spec_ = spec;
    b.key_ = detail::spec_key(spec);
    const double n = b.n_;
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EllipsoidSpec>) {
                b.kind_ = BodyKind::ellipsoid;
                b.r_ = v.semi_axes.minCoeff();
                b.R_ = v.semi_axes.maxCoeff();
                b.t2_ = 1.0;
                b.kappa_ = 1.0;
                b.shape_ = std::make_shared<detail::EllipsoidShape>(v.semi_axes);
            } else if constexpr (std::is_same_v<T, BoxSpec>) {
                b.kind_ = BodyKind::box;
                b.r_ = v.half_widths.minCoeff();
                b.R_ = v.half_widths.norm();
                b.t2_ = detail::t2_lp(std::numeric_limits<double>::infinity(), n);
                b.kappa_ = std::numbers::pi / 2.0 * (1.0 + kBoxKappaSlack);
                b.shape_ = std::make_shared<detail::BoxShape>(v.half_widths);
            } else if constexpr (std::is_same_v<T, PBallSpec>) {
                b.kind_ = BodyKind::pball;
                b.r_ = v.radius;
                b.R_ = v.radius * (std::isinf(v.p) ? std::sqrt(n) : std::pow(n, 0.5 - 1.0 / v.p));
                b.t2_ = detail::t2_lp(v.p, n);
                b.kappa_ = detail::kappa_from_t2(b.t2_, n);
                if (std::isinf(v.p))
                    b.shape_ = std::make_shared<detail::BoxShape>(Eigen::VectorXd::Constant(v.n, v.radius));
                else
                    b.shape_ = std::make_shared<detail::PBallShape>(v.p, v.radius);
            } else if constexpr (std::is_same_v<T, NormImageSpec>) {
                b.kind_ = BodyKind::norm_image;
                Eigen::JacobiSVD<Eigen::MatrixXd> svd(v.A);
                const double smax = svd.singularValues().maxCoeff();
                const double smin = svd.singularValues().minCoeff();
                const double m = static_cast<double>(v.A.rows());
                if (v.inner == InnerNorm::lp) {
                    b.r_ = 1.0 / smax;
                    b.R_ = (std::isinf(v.p) ? std::sqrt(m) : std::pow(m, 0.5 - 1.0 / v.p)) / smin;
                    b.t2_ = detail::t2_lp(v.p, m);
                    b.kappa_ = detail::kappa_from_t2(b.t2_, m);
                } else {
                    b.r_ = 1.0 / (std::sqrt(2.0) * smax);
                    b.R_ = 1.0 / smin;
                    b.t2_ = std::sqrt(2.0);
                    const double t = b.t2_;
                    b.kappa_ = 2.0 * std::pow(t, 10.0) * std::pow(std::log(std::exp(1.0) * t), 4.0);
                }
                b.shape_ = std::make_shared<detail::NormImageShape>(v.A, v.inner, v.p);
            }
        },
        spec.shape);
    if (spec.t2_bound) b.t2_ = *spec.t2_bound;
    if (spec.kappa_bound) b.kappa_ = *spec.kappa_bound;
    return b;
}

inline ConvexBody ConvexBody::intersect_ball(double c) const {
    if (!(std::isfinite(c) && c >= r_)) {
        std::ostringstream os;
        os << "intersect_ball: radius " << c << " is below the inner radius " << r_;
        throw InvalidInput(os.str());
    }
    ConvexBody b;
    b.n_ = n_;
    b.kind_ = BodyKind::intersection;
    b.r_ = std::min(r_, c);
    b.R_ = std::min(R_, c);
    b.t2_ = std::sqrt(2.0) * t2_;
    // An exact base oracle stays exact; otherwise the rounding constant doubles.
    b.kappa_ = kappa_ == 1.0 ? 1.0 : 2.0 * kappa_;
    b.base_ = std::make_shared<const ConvexBody>(*this);
    b.ball_ = c;
    if (spec_) {
        BodySpec s{IntersectionSpec{std::make_shared<const BodySpec>(*spec_), c}, {}, {}};
        b.spec_ = s;
        b.key_ = detail::spec_key(s);
    } else {
        std::ostringstream os;
        os << std::hexfloat << "I(" << key_ << ")" << c;
        b.key_ = os.str();
    }
    b.shape_ = std::make_shared<detail::IntersectionShape>(b.base_, c);
    return b;
}

/// K itself when c >= r, else the ball of radius c (which then lies inside K).
inline ConvexBody localize(const ConvexBody& body, double c) {
    if (c >= body.inner_radius()) return body.intersect_ball(c);
    return ConvexBody::ball(body.dim(), c);
}

// ---------------------------------------------------------------------------
// Weak projection
// ---------------------------------------------------------------------------

struct WeakProjection {
    Eigen::VectorXd p;
    double w = 0.0;  ///< upper bound on |z - p|; w - eps <= dist(z, K)
};

struct WeakProjectOptions {
    int max_outer = 60;      ///< bisection steps on the multiplier
    int max_inner = 2000;    ///< gradient steps per multiplier
    int max_cuts = 400;      ///< cutting-plane refinements
};

namespace detail {

// Minimizes F(x) = 1/2|x - z|^2 + t*gauge(x) by accelerated gradient with backtracking
// and function-value restarts, starting from x.
inline double prox_gauge(const ConvexBody& body, const Eigen::VectorXd& z, double t, Eigen::VectorXd& x,
                         double grad_tol, int max_iter, Eigen::VectorXd& grad) {
    auto F = [&](const Eigen::VectorXd& y) { return 0.5 * (y - z).squaredNorm() + t * body.gauge(y); };
    auto dF = [&](const Eigen::VectorXd& y) -> Eigen::VectorXd { return (y - z) + t * body.gauge_gradient(y); };
    double L = 1.0;
    Eigen::VectorXd y = x, x_prev = x;
    double fx = F(x);
    double mom = 1.0;
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd gy = dF(y);
        const double fy = F(y);
        Eigen::VectorXd xn;
        double fn;
        for (;;) {
            xn = y - gy / L;
            fn = F(xn);
            if (fn <= fy - 0.5 / L * gy.squaredNorm() + 1e-15 * std::abs(fy) || L > 1e16) break;
            L *= 2.0;
        }
        if (fn > fx) {
            if (mom == 1.0) break;  // no progress even without momentum
            y = x;
            mom = 1.0;
            continue;
        }
        x_prev = x;
        x = xn;
        fx = fn;
        grad = dF(x);
        if (grad.norm() <= grad_tol) break;
        const double mom_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * mom * mom));
        y = x + ((mom - 1.0) / mom_next) * (x - x_prev);
        mom = mom_next;
        L = std::max(1.0, 0.7 * L);
    }
    grad = dF(x);
    return fx;
}

/// Lawson-Hanson active-set solver for min |A x - b| subject to x >= 0.
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int max_iter = 0) {
    const Eigen::Index m = A.cols();
    if (max_iter <= 0) max_iter = static_cast<int>(3 * m + 30);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
    std::vector<bool> passive(static_cast<std::size_t>(m), false);
    const double tol = 1e-13 * std::max(1.0, A.cwiseAbs().maxCoeff() * std::max(1.0, b.cwiseAbs().maxCoeff()));

    auto solve_passive = [&](std::vector<Eigen::Index>& idx) {
        idx.clear();
        for (Eigen::Index j = 0; j < m; ++j)
            if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
        Eigen::MatrixXd Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(static_cast<Eigen::Index>(k)) = A.col(idx[k]);
        return Eigen::VectorXd(Ap.colPivHouseholderQr().solve(b));
    };

    std::vector<Eigen::Index> idx;
    for (int outer = 0; outer < max_iter; ++outer) {
        const Eigen::VectorXd w = A.transpose() * (b - A * x);
        Eigen::Index t = -1;
        double wmax = tol;
        for (Eigen::Index j = 0; j < m; ++j)
            if (!passive[static_cast<std::size_t>(j)] && w(j) > wmax) {
                wmax = w(j);
                t = j;
            }
        if (t < 0) break;
        passive[static_cast<std::size_t>(t)] = true;
        for (int inner = 0; inner <= m; ++inner) {
            const Eigen::VectorXd zp = solve_passive(idx);
            bool feasible = true;
            for (Eigen::Index k = 0; k < zp.size(); ++k)
                if (zp(k) <= 0.0) feasible = false;
            if (feasible) {
                x.setZero();
                for (std::size_t k = 0; k < idx.size(); ++k) x(idx[k]) = zp(static_cast<Eigen::Index>(k));
                break;
            }
            double alpha = 1.0;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                const double zk = zp(static_cast<Eigen::Index>(k));
                if (zk <= 0.0) alpha = std::min(alpha, x(idx[k]) / (x(idx[k]) - zk));
            }
            for (std::size_t k = 0; k < idx.size(); ++k) {
                const Eigen::Index j = idx[k];
                x(j) += alpha * (zp(static_cast<Eigen::Index>(k)) - x(j));
                if (x(j) <= tol) {
                    x(j) = 0.0;
                    passive[static_cast<std::size_t>(j)] = false;
                }
            }
        }
    }
    return x;
}

// Projection of z onto the polyhedron {y : <s_i, y> <= 1}, posed as a least-distance
// problem and solved through NNLS. Returns the dual value at the recovered multipliers,
// a lower bound on 1/2 dist(z, polyhedron)^2 whatever the solver accuracy.
inline double project_polyhedron(const std::vector<Eigen::VectorXd>& cuts, const Eigen::VectorXd& z,
                                 Eigen::VectorXd& x) {
    const Eigen::Index n = z.size();
    const Eigen::Index m = static_cast<Eigen::Index>(cuts.size());
    // min |u| s.t. E u >= f with E = -S, f = S z - 1.
    Eigen::MatrixXd M(n + 1, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        M.col(i).head(n) = -cuts[static_cast<std::size_t>(i)];
        M(n, i) = cuts[static_cast<std::size_t>(i)].dot(z) - 1.0;
    }
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n + 1);
    e(n) = 1.0;
    const Eigen::VectorXd lam = nnls(M, e);
    const Eigen::VectorXd r = M * lam - e;
    if (r(n) >= 0.0) {  // should not happen: the origin is feasible
        x = z;
        return 0.0;
    }
    const Eigen::VectorXd mu = lam / (-r(n));
    x = z - r.head(n) / r(n);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    double lin = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        v += mu(i) * cuts[static_cast<std::size_t>(i)];
        lin += mu(i) * (cuts[static_cast<std::size_t>(i)].dot(z) - 1.0);
    }
    return lin - 0.5 * v.squaredNorm();
}

} // namespace detail

inline WeakProjection weak_project(const ConvexBody& body, const Eigen::VectorXd& z, double eps,
                                   const WeakProjectOptions& opt);

namespace detail {

// K = base cap cB without an exact base projection. The minimizer of
// 1/2|x - z|^2 + mu/2 (|x|^2 - c^2) over the base is P_base(z / (1 + mu)); its value
// q(mu) <= 1/2 dist(z, K)^2 is bounded below from the base certificate.
inline WeakProjection weak_project_intersection(const ConvexBody& body, const Eigen::VectorXd& z, double eps,
                                                const WeakProjectOptions& opt) {
    const ConvexBody& base = *body.base();
    const double c = body.ball_radius();
    const double zn = z.norm();
    // A distance accurate to eb pins the base point only to about sqrt(eb * dist), so the
    // base tolerance is taken quadratically small.
    const double eb = std::max(std::min(eps / (4.0 * std::max(1.0, zn / c)), eps * eps / (8.0 * std::max(zn, c))),
                               1e-10 * (1.0 + zn));
    auto clip = [&](Eigen::VectorXd x) {
        const double g = body.gauge(x);
        if (g > 1.0) x /= g;
        const double w = (z - x).norm();
        return WeakProjection{std::move(x), w};
    };

    WeakProjection p0 = weak_project(base, z, eb, opt);
    WeakProjection best = clip(p0.p);
    double lb = std::max(0.0, p0.w - eb);
    if (best.w - lb <= eps) return best;

    // Base points on either side of the sphere |x| = c; the chord between them crosses
    // it inside the base, which gives a feasible candidate without radial shrinking.
    Eigen::VectorXd outside = p0.p, inside;
    double lo = 0.0, hi = std::max(0.0, zn / c - 1.0);
    for (int it = 0; it < 200; ++it) {
        const double mu = 0.5 * (lo + hi);
        const Eigen::VectorXd y = z / (1.0 + mu);
        WeakProjection pm = weak_project(base, y, eb, opt);
        const double d = std::max(0.0, pm.w - eb);
        const double q = 0.5 * (1.0 + mu) * d * d + 0.5 * zn * zn * mu / (1.0 + mu) - 0.5 * mu * c * c;
        if (q > 0.0) lb = std::max(lb, std::sqrt(2.0 * q));
        if (pm.p.norm() > c) {
            lo = mu;
            outside = pm.p;
        } else {
            hi = mu;
            inside = pm.p;
        }
        WeakProjection cand = clip(pm.p);
        if (cand.w < best.w) best = std::move(cand);
        if (inside.size() > 0) {
            // |inside + s (outside - inside)| = c for s in [0, 1].
            const Eigen::VectorXd dv = outside - inside;
            const double A = dv.squaredNorm(), B = 2.0 * inside.dot(dv), C = inside.squaredNorm() - c * c;
            if (A > 0.0) {
                const double sc = (-B + std::sqrt(std::max(0.0, B * B - 4.0 * A * C))) / (2.0 * A);
                WeakProjection chord = clip(inside + std::clamp(sc, 0.0, 1.0) * dv);
                if (chord.w < best.w) best = std::move(chord);
            }
        }
        if (best.w - lb <= eps || hi - lo <= 1e-15 * (1.0 + hi)) break;
    }
    if (best.w - lb <= eps) return best;
    std::ostringstream os;
    os << "weak_project: certified gap " << best.w - lb << " exceeds eps " << eps;
    throw ToleranceNotMetWith<WeakProjection>(os.str(), best);
}

} // namespace detail

/**
 * @brief eps-accurate Euclidean projection onto K.
 *
 * Returns p in K with w >= |z - p| and w - eps <= dist(z, K). Ellipsoids, boxes and their
 * intersections with balls are projected exactly. Other bodies first follow the multiplier
 * path (minimize 1/2|x - z|^2 + t*gauge(x), bisect t until the gauge reaches 1), then
 * refine with supporting halfspaces; projecting z onto the halfspace polyhedron bounds
 * dist(z, K) from below, which certifies w.
 */
inline WeakProjection weak_project(const ConvexBody& body, const Eigen::VectorXd& z, double eps,
                                   const WeakProjectOptions& opt = {}) {
    detail::require(eps > 0.0, "weak_project: eps must be > 0");
    detail::require(z.allFinite(), "weak_project: non-finite input");
    const double gz = body.gauge(z);
    if (gz <= 1.0) return {z, 0.0};

    auto finish = [&](Eigen::VectorXd p) {
        const double g = body.gauge(p);
        if (g > 1.0) p /= g;
        const double w = (z - p).norm();
        return WeakProjection{std::move(p), w};
    };

    if (auto p = body.exact_projection(z)) return finish(std::move(*p));
    if (body.base()) return detail::weak_project_intersection(body, z, eps, opt);

    std::vector<Eigen::VectorXd> cuts;
    WeakProjection best = finish(z / gz);
    body.supporting_cuts(best.p, cuts);
    double lb = 0.0;
    auto done = [&] { return best.w - lb <= eps; };

    // Multiplier path: t in [0, hi]; the minimizer is z at t = 0 and 0 once t >= |z| R.
    double lo = 0.0, hi = std::max(1e-12, z.norm() * body.outer_radius());
    Eigen::VectorXd x = best.p, grad;
    const double gtol = std::max(1e-3 * eps, 1e-14 * (1.0 + z.norm()));
    for (int it = 0; it < opt.max_outer && !done(); ++it) {
        const double t = 0.5 * (lo + hi);
        const double Ft = detail::prox_gauge(body, z, t, x, gtol, opt.max_inner, grad);
        const double lb2 = 2.0 * (Ft - 0.5 * grad.squaredNorm() - t);
        if (lb2 > 0.0) lb = std::max(lb, std::sqrt(lb2));
        if (body.gauge(x) > 1.0) lo = t;
        else hi = t;
        WeakProjection cand = finish(x);
        if (cand.w < best.w) best = std::move(cand);
        if (hi - lo <= 1e-15 * hi) break;
    }

    // Cutting-plane refinement.
    body.supporting_cuts(best.p, cuts);
    Eigen::VectorXd xp;
    for (int it = 0; it < opt.max_cuts && !done(); ++it) {
        const double dual = detail::project_polyhedron(cuts, z, xp);
        if (dual > 0.0) lb = std::max(lb, std::sqrt(2.0 * dual));
        if (done()) break;
        const double g = body.gauge(xp);
        WeakProjection cand = finish(xp);
        if (cand.w < best.w) best = cand;
        if (g <= 1.0) break;
        const std::size_t before = cuts.size();
        body.supporting_cuts(cand.p, cuts);
        if (cuts.size() == before) break;
    }
    if (done()) return best;
    std::ostringstream os;
    os << "weak_project: certified gap " << best.w - lb << " exceeds eps " << eps;
    throw ToleranceNotMetWith<WeakProjection>(os.str(), best);
}

/// `count` boundary points: Gaussian directions rescaled to gauge 1.
inline std::vector<Eigen::VectorXd> sample_boundary(const ConvexBody& body, int count, std::uint64_t seed) {
    detail::require(count >= 1, "sample_boundary: count must be >= 1");
    Rng rng = make_rng(seed);
    std::vector<Eigen::VectorXd> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        Eigen::VectorXd g = gaussian_vector(body.dim(), rng);
        const double rho = body.gauge(g);
        if (rho > 0.0) out.push_back(g / rho);
    }
    return out;
}

} // namespace kwest
