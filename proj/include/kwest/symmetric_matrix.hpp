#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace kwest {

/// Eigenpairs with eigenvalues sorted in descending order.
struct Spectral {
    Eigen::VectorXd values;
    Eigen::MatrixXd vectors;  ///< column i pairs with values(i)

    void sort_descending() {
        const Eigen::Index n = values.size();
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        std::stable_sort(idx.begin(), idx.end(),
                         [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });
        Eigen::VectorXd v(n);
        Eigen::MatrixXd u(vectors.rows(), n);
        for (Eigen::Index i = 0; i < n; ++i) {
            v(i) = values(idx[static_cast<std::size_t>(i)]);
            u.col(i) = vectors.col(idx[static_cast<std::size_t>(i)]);
        }
        values = std::move(v);
        vectors = std::move(u);
    }

    Eigen::MatrixXd reconstruct() const {
        return vectors * values.asDiagonal() * vectors.transpose();
    }
};

/// Dense symmetric eigendecomposition, descending order.
inline Spectral eigen_descending(const Eigen::MatrixXd& a) {
    const Eigen::Index n = a.rows();
    Spectral s;
    if (n == 0) return s;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    if (es.info() != Eigen::Success) {
        std::ostringstream os;
        os << "eigensolver did not converge (n=" << n << ", |A|_F=" << a.norm()
           << ", finite=" << a.allFinite() << ")";
        throw NumericError(os.str());
    }
    s.values = es.eigenvalues().reverse();
    s.vectors = es.eigenvectors().rowwise().reverse();
    return s;
}

/**
 * @brief Dense symmetric matrix with a lazily computed, cached spectral decomposition.
 *
 * The stored matrix is always exactly symmetric: input is replaced by (A + A^T)/2.
 */
class SymmetricMatrix {
public:
    SymmetricMatrix() = default;

    explicit SymmetricMatrix(const Eigen::MatrixXd& a) : cache_(std::make_shared<Cache>()) {
        if (a.rows() != a.cols()) throw InvalidInput("SymmetricMatrix: matrix is not square");
        m_ = 0.5 * (a + a.transpose());
    }

    static SymmetricMatrix identity(Eigen::Index n) {
        return SymmetricMatrix(Eigen::MatrixXd::Identity(n, n));
    }
    static SymmetricMatrix zero(Eigen::Index n) {
        return SymmetricMatrix(Eigen::MatrixXd::Zero(n, n));
    }
    static SymmetricMatrix diagonal(const Eigen::VectorXd& d) {
        return SymmetricMatrix(Eigen::MatrixXd(d.asDiagonal()));
    }

    /// U diag(values) U^T; the decomposition is kept as the cache.
    static SymmetricMatrix from_spectral(Spectral s) {
        s.sort_descending();
        SymmetricMatrix out(s.reconstruct());
        std::call_once(out.cache_->once, [&] { out.cache_->spectral = std::move(s); });
        return out;
    }

    Eigen::Index size() const { return m_.rows(); }
    const Eigen::MatrixXd& matrix() const { return m_; }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

    const Spectral& spectral() const {
        if (!cache_) cache_ = std::make_shared<Cache>();
        std::call_once(cache_->once, [&] { cache_->spectral = eigen_descending(m_); });
        return cache_->spectral;
    }
    const Eigen::VectorXd& eigenvalues() const { return spectral().values; }
    double max_eigenvalue() const { return size() ? eigenvalues()(0) : 0.0; }
    double min_eigenvalue() const { return size() ? eigenvalues()(size() - 1) : 0.0; }
    double trace() const { return m_.trace(); }

    double quadratic(const Eigen::VectorXd& x) const { return x.dot(m_ * x); }

    /// f(A) = U f(Λ) U^T for a scalar function f.
    template <class F>
    SymmetricMatrix apply(F f) const {
        Spectral s = spectral();
        for (Eigen::Index i = 0; i < s.values.size(); ++i) s.values(i) = f(s.values(i));
        return from_spectral(std::move(s));
    }

private:
    struct Cache {
        std::once_flag once;
        Spectral spectral;
    };

    Eigen::MatrixXd m_;
    // Copies share the cache; it is written exactly once.
    mutable std::shared_ptr<Cache> cache_;
};

} // namespace kwest
