#include <gtest/gtest.h>

#include <cmath>

#include "kwest/geometry.hpp"
#include "oracles.hpp"

using namespace kwest;

namespace {

std::vector<ConvexBody> shipped_bodies() {
    Rng rng = make_rng(3);
    Eigen::MatrixXd A(7, 5);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 5; ++j) A(i, j) = standard_normal(rng);
    Eigen::VectorXd axes(5);
    axes << 3, 2, 1, 0.5, 0.25;
    return {
        ConvexBody::ellipsoid(axes),
        ConvexBody::box(Eigen::VectorXd::LinSpaced(5, 0.5, 2.0)),
        ConvexBody::pball(5, 4.0, 1.5),
        ConvexBody::pball(5, std::numeric_limits<double>::infinity()),
        ConvexBody::norm_image(A, InnerNorm::lp, 3.0),
        ConvexBody::norm_image(A, InnerNorm::mixed),
        ConvexBody::ellipsoid(axes).intersect_ball(1.2),
    };
}

} // namespace

TEST(Gauge, Examples) {
    EXPECT_DOUBLE_EQ(ConvexBody::ball(2).gauge(Eigen::Vector2d(3, 4)), 5.0);
    EXPECT_DOUBLE_EQ(ConvexBody::ellipsoid(Eigen::Vector2d(2, 1)).gauge(Eigen::Vector2d(2, 0)), 1.0);
    EXPECT_DOUBLE_EQ(ConvexBody::box(Eigen::Vector2d(1, 1)).gauge(Eigen::Vector2d(0.5, -0.25)), 0.5);
    EXPECT_EQ(ConvexBody::ball(3).gauge(Eigen::Vector3d::Zero()), 0.0);
}

TEST(Gauge, DimensionMismatch) {
    EXPECT_THROW(ConvexBody::ball(2).gauge(Eigen::Vector3d(1, 2, 3)), InvalidInput);
}

TEST(Gauge, NormAxiomsOnShippedBodies) {
    Rng rng = make_rng(4);
    for (const auto& body : shipped_bodies()) {
        const int n = body.dim();
        for (int trial = 0; trial < 10000; ++trial) {
            const Eigen::VectorXd x = gaussian_vector(n, rng), y = gaussian_vector(n, rng);
            const double t = 3.0 * standard_normal(rng);
            const double gx = body.gauge(x);
            EXPECT_NEAR(body.gauge(t * x), std::abs(t) * gx, 1e-9 * (1 + std::abs(t) * gx));
            EXPECT_NEAR(body.gauge(-x), gx, 1e-12 * (1 + gx));
            EXPECT_LE(body.gauge(x + y), gx + body.gauge(y) + 1e-9);
            const double radial = 1.0 / body.gauge(x / x.norm());
            EXPECT_GE(radial, body.inner_radius() - 1e-9) << to_string(body.kind());
            EXPECT_LE(radial, body.outer_radius() + 1e-9) << to_string(body.kind());
        }
    }
}

TEST(Gauge, RadiiAndConstants) {
    auto e = ConvexBody::ellipsoid(Eigen::Vector3d(4, 1, 2));
    EXPECT_EQ(e.inner_radius(), 1.0);
    EXPECT_EQ(e.outer_radius(), 4.0);
    EXPECT_EQ(e.kappa_bound(), 1.0);
    EXPECT_EQ(e.kind(), BodyKind::ellipsoid);
    auto p = ConvexBody::pball(16, 4.0);
    EXPECT_NEAR(p.outer_radius(), std::pow(16.0, 0.25), 1e-12);
    EXPECT_NEAR(p.t2_bound(), std::sqrt(3.0), 1e-12);
}

TEST(Spec, ValidationErrors) {
    EXPECT_THROW(ConvexBody::ellipsoid(Eigen::Vector2d(1, 0)), InvalidInput);
    EXPECT_THROW(ConvexBody::box(Eigen::Vector2d(-1, 1)), InvalidInput);
    EXPECT_THROW(ConvexBody::pball(3, 1.5), InvalidInput);
    Eigen::MatrixXd rank_deficient(3, 2);
    rank_deficient << 1, 2, 2, 4, 3, 6;
    EXPECT_THROW(ConvexBody::norm_image(rank_deficient, InnerNorm::lp, 2.0), InvalidInput);
}

TEST(IntersectBall, Examples) {
    // c below the inner radius is rejected; localize covers that case with the smaller ball.
    EXPECT_THROW(ConvexBody::ball(2, 2.0).intersect_ball(1.0), InvalidInput);
    auto b = localize(ConvexBody::ball(2, 2.0), 1.0);
    Eigen::Vector2d x(0.3, -0.7);
    EXPECT_DOUBLE_EQ(b.gauge(x), x.norm());
    auto e = ConvexBody::ellipsoid(Eigen::Vector2d(4, 1)).intersect_ball(2.0);
    EXPECT_DOUBLE_EQ(e.gauge(Eigen::Vector2d(3, 0)), 1.5);
    EXPECT_EQ(e.inner_radius(), 1.0);
    EXPECT_EQ(e.outer_radius(), 2.0);
    EXPECT_NEAR(e.t2_bound(), std::sqrt(2.0), 1e-15);
    EXPECT_THROW(ConvexBody::ellipsoid(Eigen::Vector2d(4, 1)).intersect_ball(0.5), InvalidInput);
}

TEST(IntersectBall, PointwiseMaxAndInactiveAtR) {
    Rng rng = make_rng(5);
    for (const auto& body : shipped_bodies()) {
        if (body.kind() == BodyKind::intersection) continue;
        const double c = 0.5 * (body.inner_radius() + body.outer_radius());
        auto kc = body.intersect_ball(c);
        auto kr = body.intersect_ball(body.outer_radius());
        for (int t = 0; t < 1000; ++t) {
            const Eigen::VectorXd x = gaussian_vector(body.dim(), rng);
            EXPECT_EQ(kc.gauge(x), std::max(body.gauge(x), x.norm() / c));
            EXPECT_NEAR(kr.gauge(x), body.gauge(x), 1e-12 * body.gauge(x));
        }
    }
}

TEST(WeakProject, InteriorPointIsFixed) {
    auto body = ConvexBody::ellipsoid(Eigen::Vector2d(2, 1));
    Eigen::Vector2d z(0.5, 0.1);
    auto r = weak_project(body, z, 1e-6);
    EXPECT_EQ(r.p, z);
    EXPECT_EQ(r.w, 0.0);
}

TEST(WeakProject, BallIsRadial) {
    auto r = weak_project(ConvexBody::ball(2), Eigen::Vector2d(3, 0), 1e-6);
    EXPECT_NEAR(r.p(0), 1.0, 1e-12);
    EXPECT_NEAR(r.p(1), 0.0, 1e-12);
    EXPECT_NEAR(r.w, 2.0, 1e-12);
}

TEST(WeakProject, EllipsoidMatchesMultiplierBisection) {
    Eigen::Vector2d a(2, 1);
    auto r = weak_project(ConvexBody::ellipsoid(a), Eigen::Vector2d(4, 4), 1e-9);
    auto ref = oracle::ellipsoid_projection_bisect(a, Eigen::Vector2d(4, 4));
    EXPECT_LE((r.p - ref).norm(), 1e-9);
    Rng rng = make_rng(6);
    for (int t = 0; t < 200; ++t) {
        Eigen::VectorXd ax = (gaussian_vector(6, rng).array().abs() + 0.05).matrix();
        Eigen::VectorXd z = 5.0 * gaussian_vector(6, rng);
        auto p = weak_project(ConvexBody::ellipsoid(ax), z, 1e-9).p;
        EXPECT_LE((p - oracle::ellipsoid_projection_bisect(ax, z)).norm(), 1e-8);
    }
}

TEST(WeakProject, GenericPathAgreesWithExactEllipsoid) {
    // A diagonal norm image with the l2 inner norm is an ellipsoid but takes the generic route.
    Eigen::VectorXd a(4);
    a << 3, 2, 1, 0.5;
    auto image = ConvexBody::norm_image(Eigen::MatrixXd(a.cwiseInverse().asDiagonal()), InnerNorm::lp, 2.0);
    Rng rng = make_rng(7);
    for (int t = 0; t < 30; ++t) {
        Eigen::VectorXd z = 4.0 * gaussian_vector(4, rng);
        const double eps = 1e-6;
        auto r = weak_project(image, z, eps);
        const Eigen::VectorXd exact = oracle::ellipsoid_projection_bisect(a, z);
        const double dist = (z - exact).norm();
        EXPECT_LE(image.gauge(r.p), 1.0 + 1e-12);
        EXPECT_GE(r.w + 1e-12, (z - r.p).norm());
        EXPECT_LE(r.w - eps, dist + 1e-12);
        EXPECT_LE((r.p - exact).norm(), std::sqrt(eps * (eps + 2 * dist)) + 1e-9);
    }
}

TEST(WeakProject, IntersectionMatchesGenericPath) {
    Eigen::Vector3d a(4, 1, 0.5);
    auto exact_body = ConvexBody::ellipsoid(a).intersect_ball(1.5);
    auto ge = [a](const Eigen::VectorXd& x) { return (x.array() / a.array()).matrix().norm(); };
    auto custom = ConvexBody::custom(
        3, [ge](const Eigen::VectorXd& x) { return std::max(ge(x), x.norm() / 1.5); }, 0.5, 1.5, 1.0, 1.0,
        "ellipsoid-ball", [a, ge](const Eigen::VectorXd& x) -> Eigen::VectorXd {
            if (x.norm() == 0.0) return Eigen::VectorXd::Zero(3);
            if (ge(x) >= x.norm() / 1.5) return (x.array() / a.array().square()).matrix() / ge(x);
            return x / (1.5 * x.norm());
        });
    Rng rng = make_rng(8);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd z = 3.0 * gaussian_vector(3, rng);
        auto pe = weak_project(exact_body, z, 1e-9);
        auto pg = weak_project(custom, z, 1e-7);
        EXPECT_LE(pe.w, pg.w + 1e-9);
        EXPECT_LE(pg.w - 1e-7, pe.w + 1e-9);
    }
}

TEST(WeakProject, QuasiNonExpansive) {
    Rng rng = make_rng(9);
    for (const auto& body : shipped_bodies()) {
        for (int t = 0; t < 20; ++t) {
            const Eigen::VectorXd z = 3.0 * gaussian_vector(body.dim(), rng);
            const double eps = 1e-4;
            auto r = weak_project(body, z, eps);
            EXPECT_LE(body.gauge(r.p), 1.0 + 1e-9);
            EXPECT_GE(r.w + 1e-12, (z - r.p).norm());
            for (const auto& nu : sample_boundary(body, 20, 100 + t)) {
                const Eigen::VectorXd v = nu * uniform01(rng);
                const double d = (z - v).norm();
                EXPECT_LE((r.p - v).norm(), d + std::sqrt(eps * eps + 2 * eps * d) + 1e-9);
            }
        }
    }
}

TEST(WeakProject, RejectsNonPositiveEps) {
    EXPECT_THROW(weak_project(ConvexBody::ball(2), Eigen::Vector2d(3, 0), 0.0), InvalidInput);
}

TEST(SampleBoundary, OnBoundaryAndDeterministic) {
    auto b2 = sample_boundary(ConvexBody::ball(4), 3, 42);
    ASSERT_EQ(b2.size(), 3u);
    for (const auto& x : b2) EXPECT_NEAR(x.norm(), 1.0, 1e-12);
    for (const auto& body : shipped_bodies()) {
        auto s1 = sample_boundary(body, 50, 7), s2 = sample_boundary(body, 50, 7);
        for (std::size_t i = 0; i < s1.size(); ++i) {
            EXPECT_NEAR(body.gauge(s1[i]), 1.0, 1e-12);
            EXPECT_EQ(s1[i], s2[i]);
        }
    }
    EXPECT_THROW(sample_boundary(ConvexBody::ball(2), 0, 1), InvalidInput);
}

TEST(Localize, FallsBackToBallBelowInnerRadius) {
    auto body = ConvexBody::ellipsoid(Eigen::Vector2d(2, 1));
    auto small = localize(body, 0.5);
    EXPECT_NEAR(small.gauge(Eigen::Vector2d(0.5, 0)), 1.0, 1e-15);
    EXPECT_EQ(localize(body, 1.5).kind(), BodyKind::intersection);
}

TEST(WeakProject, GenericIntersectionAgreesWithExact) {
    Eigen::VectorXd a(4);
    a << 3, 2, 1, 0.5;
    auto image = ConvexBody::norm_image(Eigen::MatrixXd(a.cwiseInverse().asDiagonal()), InnerNorm::lp, 2.0);
    auto generic = image.intersect_ball(1.5);
    auto exact = ConvexBody::ellipsoid(a).intersect_ball(1.5);
    Rng rng = make_rng(10);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd z = 4.0 * gaussian_vector(4, rng);
        const double eps = 1e-6;
        auto pg = weak_project(generic, z, eps);
        auto pe = weak_project(exact, z, 1e-12);
        EXPECT_LE(generic.gauge(pg.p), 1.0 + 1e-12);
        EXPECT_LE(pg.w - eps, pe.w + 1e-12);
        EXPECT_GE(pg.w + 1e-12, pe.w);
    }
}
