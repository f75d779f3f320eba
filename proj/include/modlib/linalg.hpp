// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels used across the toolkit: a row-major f64 matrix, Householder QR,
// one-sided Jacobi SVD, the factored SVD of a*b^T, cosine similarity, truncated-SVD
// scores and seeded k-means.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modlib/error.hpp"
#include "modlib/rng.hpp"

namespace modlib {

using Vector = std::vector<double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                                 std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("Matrix::from_rows: ragged rows");
            }
            std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return m;
    }

    static Matrix column(std::span<const double> v) {
        return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }
    double operator()(std::size_t i, std::size_t j) const noexcept {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    Vector col(std::size_t j) const {
        Vector out(rows_);
        for (std::size_t i = 0; i < rows_; ++i) {
            out[i] = (*this)(i, j);
        }
        return out;
    }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    Matrix& operator+=(const Matrix& o) {
        check_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += o.data_[i];
        }
        return *this;
    }

    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) {
            v *= s;
        }
        return *this;
    }

    /// this += s * o
    void add_scaled(const Matrix& o, double s) {
        check_same(o, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += s * o.data_[i];
        }
    }

    friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    void check_same(const Matrix& o, const char* op) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string("Matrix ") + op + ": shape mismatch");
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            t(j, i) = m(i, j);
        }
    }
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ");
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < b.cols(); ++j) {
                c(i, j) += aik * b(k, j);
            }
        }
    }
    return c;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: column counts differ");
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                s += a(i, k) * b(j, k);
            }
            c(i, j) = s;
        }
    }
    return c;
}

/// out = m * x
inline void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) noexcept {
    assert(x.size() == m.cols() && out.size() == m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* r = m.data().data() + i * m.cols();
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            s += r[j] * x[j];
        }
        out[i] = s;
    }
}

inline Vector matvec(const Matrix& m, std::span<const double> x) {
    if (x.size() != m.cols()) {
        throw DimensionError("matvec: vector length " + std::to_string(x.size()) + " != cols " +
                             std::to_string(m.cols()));
    }
    Vector out(m.rows());
    matvec(m, x, out);
    return out;
}

/// out = m^T * x
inline void matvec_t(const Matrix& m, std::span<const double> x, std::span<double> out) noexcept {
    assert(x.size() == m.rows() && out.size() == m.cols());
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double xi = x[i];
        const double* r = m.data().data() + i * m.cols();
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out[j] += r[j] * xi;
        }
    }
}

inline Vector matvec_t(const Matrix& m, std::span<const double> x) {
    if (x.size() != m.rows()) {
        throw DimensionError("matvec_t: vector length mismatch");
    }
    Vector out(m.cols());
    matvec_t(m, x, out);
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

inline double frobenius(const Matrix& m) noexcept { return norm2(m.data()); }

inline bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Factorizations

struct QrResult {
    Matrix q;  // m x n, orthonormal columns
    Matrix r;  // n x n, upper triangular
};

/// Reduced Householder QR of an m x n matrix with m >= n. Rank-deficient inputs
/// still yield orthonormal Q (R then carries zeros on its diagonal).
inline QrResult householder_qr(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (m < n) {
        throw DimensionError("householder_qr: expects rows >= cols");
    }
    Matrix work = a;
    std::vector<Vector> reflectors;
    reflectors.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        Vector v(m - k);
        for (std::size_t i = k; i < m; ++i) {
            v[i - k] = work(i, k);
        }
        const double alpha = norm2(v);
        if (alpha == 0.0) {
            reflectors.emplace_back();
            continue;
        }
        v[0] += v[0] >= 0.0 ? alpha : -alpha;
        const double vnorm = norm2(v);
        for (double& x : v) {
            x /= vnorm;
        }
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < m; ++i) {
                s += v[i - k] * work(i, j);
            }
            for (std::size_t i = k; i < m; ++i) {
                work(i, j) -= 2.0 * s * v[i - k];
            }
        }
        reflectors.push_back(std::move(v));
    }

    QrResult out{Matrix(m, n), Matrix(n, n)};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            out.r(i, j) = work(i, j);
        }
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    for (std::size_t j = 0; j < n; ++j) {
        out.q(j, j) = 1.0;
    }
    for (std::size_t kk = n; kk-- > 0;) {
        const Vector& v = reflectors[kk];
        if (v.empty()) {
            continue;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = kk; i < m; ++i) {
                s += v[i - kk] * out.q(i, j);
            }
            for (std::size_t i = kk; i < m; ++i) {
                out.q(i, j) -= 2.0 * s * v[i - kk];
            }
        }
    }
    return out;
}

struct SvdResult {
    Matrix u;                     // d x k
    Vector singular_values;       // k, descending
    Matrix v;                     // d x k
    std::size_t rank() const noexcept { return singular_values.size(); }
};

namespace detail {

/// One-sided (Hestenes) Jacobi on the columns of an m x n matrix, m >= n.
/// On return `g` holds U*Sigma column-wise and `v` the n x n right factor.
inline void jacobi_orthogonalize(Matrix& g, Matrix& v) {
    const std::size_t m = g.rows();
    const std::size_t n = g.cols();
    v = Matrix::identity(n);
    constexpr double eps = std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    alpha += gp * gp;
                    beta += gq * gq;
                    gamma += gp * gq;
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    g(i, p) = c * gp - s * gq;
                    g(i, q) = s * gp + c * gq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }
}

/// Flip (u_j, v_j) so the largest-magnitude entry of v_j is positive (first index on ties).
inline void canonicalize_signs(Matrix& u, Matrix& v) {
    for (std::size_t j = 0; j < v.cols(); ++j) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t i = 0; i < v.rows(); ++i) {
            if (std::abs(v(i, j)) > best_abs) {
                best_abs = std::abs(v(i, j));
                best = i;
            }
        }
        if (v(best, j) < 0.0) {
            for (std::size_t i = 0; i < v.rows(); ++i) {
                v(i, j) = -v(i, j);
            }
            for (std::size_t i = 0; i < u.rows(); ++i) {
                u(i, j) = -u(i, j);
            }
        }
    }
}

struct ThinSvd {
    Matrix u_sigma;  // m x n, columns are sigma_j * u_j, sorted by sigma
    Vector sigma;    // n, descending
    Matrix v;        // n x n
};

inline ThinSvd thin_svd(const Matrix& a) {
    Matrix g = a;
    Matrix v;
    jacobi_orthogonalize(g, v);
    const std::size_t n = a.cols();
    Vector sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.rows(); ++i) {
            s += g(i, j) * g(i, j);
        }
        sigma[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });
    ThinSvd out{Matrix(g.rows(), n), Vector(n), Matrix(n, n)};
    for (std::size_t jj = 0; jj < n; ++jj) {
        const std::size_t j = order[jj];
        out.sigma[jj] = sigma[j];
        for (std::size_t i = 0; i < g.rows(); ++i) {
            out.u_sigma(i, jj) = g(i, j);
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.v(i, jj) = v(i, j);
        }
    }
    return out;
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) {
        throw NumericError(std::string(what) + ": non-finite input");
    }
}

}  // namespace detail

/// SVD of a*b^T for d x r factors without forming the d x d product: reduced QR
/// of both factors, then Jacobi SVD of the r x r core R_a R_b^T. Singular values
/// at or below 1e-12 * sigma_max (or exactly zero) are dropped, so rank() is the
/// numerical rank. Singular vector pairs are sign-canonicalized.
inline SvdResult low_rank_svd(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("low_rank_svd: factors must share shape");
    }
    if (a.cols() > a.rows()) {
        throw DimensionError("low_rank_svd: rank exceeds dimension");
    }
    detail::require_finite(a, "low_rank_svd");
    detail::require_finite(b, "low_rank_svd");
    const std::size_t r = a.cols();
    const QrResult qa = householder_qr(a);
    const QrResult qb = householder_qr(b);
    const Matrix core = matmul_nt(qa.r, qb.r);
    const detail::ThinSvd core_svd = detail::thin_svd(core);

    const double smax = core_svd.sigma.empty() ? 0.0 : core_svd.sigma[0];
    std::size_t k = 0;
    while (k < r && core_svd.sigma[k] > 0.0 && core_svd.sigma[k] > 1e-12 * smax) {
        ++k;
    }
    // Left core vectors: u_sigma / sigma. Right core vectors: v.
    Matrix uc(r, k), vc(r, k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < r; ++i) {
            uc(i, j) = core_svd.u_sigma(i, j) / core_svd.sigma[j];
            vc(i, j) = core_svd.v(i, j);
        }
    }
    SvdResult out{matmul(qa.q, uc), Vector(core_svd.sigma.begin(), core_svd.sigma.begin() + static_cast<std::ptrdiff_t>(k)),
                  matmul(qb.q, vc)};
    detail::canonicalize_signs(out.u, out.v);
    return out;
}

// ---------------------------------------------------------------------------
// Similarity, reduction, clustering

struct SimilarityMatrix {
    std::size_t n = 0;
    Matrix values;
    double operator()(std::size_t i, std::size_t j) const noexcept { return values(i, j); }
};

inline SimilarityMatrix cosine_similarity_matrix(std::span<const Vector> vectors) {
    const std::size_t n = vectors.size();
    SimilarityMatrix s{n, Matrix(n, n)};
    if (n == 0) {
        return s;
    }
    const std::size_t len = vectors[0].size();
    Vector norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (vectors[i].size() != len) {
            throw DimensionError("cosine_similarity_matrix: vectors differ in length");
        }
        if (!all_finite(vectors[i])) {
            throw NumericError("cosine_similarity_matrix: non-finite vector " + std::to_string(i));
        }
        norms[i] = norm2(vectors[i]);
        if (norms[i] == 0.0) {
            throw NumericError("cosine_similarity_matrix: vector " + std::to_string(i) + " has zero norm");
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        s.values(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = std::clamp(dot(vectors[i], vectors[j]) / (norms[i] * norms[j]), -1.0, 1.0);
            s.values(i, j) = c;
            s.values(j, i) = c;
        }
    }
    return s;
}

inline SimilarityMatrix cosine_similarity_matrix(const Matrix& rows) {
    std::vector<Vector> v;
    v.reserve(rows.rows());
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        v.emplace_back(rows.row(i).begin(), rows.row(i).end());
    }
    return cosine_similarity_matrix(std::span<const Vector>(v));
}

struct ReducedScores {
    Matrix scores;              // T x k, U_k * Sigma_k
    Vector singular_values;     // k
    Matrix components;          // D x k, right singular vectors
};

/// Principal-component scores of the rows of m (no centering): the first k left
/// singular vectors scaled by their singular values.
inline ReducedScores svd_reduce_full(const Matrix& m, std::size_t k) {
    const std::size_t t = m.rows();
    const std::size_t d = m.cols();
    if (k == 0 || k > std::min(t, d)) {
        throw ContractError("svd_reduce: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(std::min(t, d)) + "]");
    }
    detail::require_finite(m, "svd_reduce");
    ReducedScores out{Matrix(t, k), Vector(k), Matrix(d, k)};
    if (t <= d) {
        // m^T (d x t) = U' S V'^T  =>  m = V' S U'^T ; scores = V' S, components = U'.
        const detail::ThinSvd s = detail::thin_svd(transpose(m));
        for (std::size_t j = 0; j < k; ++j) {
            out.singular_values[j] = s.sigma[j];
            for (std::size_t i = 0; i < t; ++i) {
                out.scores(i, j) = s.v(i, j) * s.sigma[j];
            }
            for (std::size_t i = 0; i < d; ++i) {
                out.components(i, j) = s.sigma[j] > 0.0 ? s.u_sigma(i, j) / s.sigma[j] : 0.0;
            }
        }
    } else {
        const detail::ThinSvd s = detail::thin_svd(m);
        for (std::size_t j = 0; j < k; ++j) {
            out.singular_values[j] = s.sigma[j];
            for (std::size_t i = 0; i < t; ++i) {
                out.scores(i, j) = s.u_sigma(i, j);
            }
            for (std::size_t i = 0; i < d; ++i) {
                out.components(i, j) = s.v(i, j);
            }
        }
    }
    detail::canonicalize_signs(out.scores, out.components);
    return out;
}

inline Matrix svd_reduce(const Matrix& m, std::size_t k) { return svd_reduce_full(m, k).scores; }

struct ClusterAssignment {
    std::vector<std::size_t> labels;
    std::size_t k = 0;
    double inertia = 0.0;
    std::uint64_t seed = 0;
    std::size_t iterations = 0;
    Vector inertia_history;  // after each Lloyd iteration

    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> out(k);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            out[labels[i]].push_back(i);
        }
        return out;
    }
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Renumbers labels in order of first appearance, so equal partitions compare equal.
inline void canonicalize_labels(std::vector<std::size_t>& labels, std::size_t k) {
    std::vector<std::size_t> remap(k, k);
    std::size_t next = 0;
    for (std::size_t& l : labels) {
        if (remap[l] == k) {
            remap[l] = next++;
        }
        l = remap[l];
    }
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding drawn from SplitMix64(seed). Empty
/// clusters are reseeded at the point farthest from its current centroid. Labels
/// are returned in first-appearance order.
inline ClusterAssignment kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iters = 300) {
    const std::size_t n = points.rows();
    if (k == 0 || k > n) {
        throw ContractError("kmeans: k=" + std::to_string(k) + " with n=" + std::to_string(n));
    }
    if (max_iters == 0) {
        throw ContractError("kmeans: max_iters must be >= 1");
    }
    detail::require_finite(points, "kmeans");
    const std::size_t d = points.cols();
    SplitMix64 rng(seed);

    Matrix centroids(k, d);
    {
        std::size_t first = rng.uniform_index(n);
        std::copy(points.row(first).begin(), points.row(first).end(), centroids.row(0).begin());
        Vector dist(n);
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = detail::sq_dist(points.row(i), centroids.row(0));
        }
        for (std::size_t c = 1; c < k; ++c) {
            const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
            std::size_t pick = 0;
            if (total <= 0.0) {
                // All points coincide with chosen centers; take the first unused index.
                pick = c;
            } else {
                const double target = rng.uniform() * total;
                double acc = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += dist[i];
                    if (acc > target && dist[i] > 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
            std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
            for (std::size_t i = 0; i < n; ++i) {
                dist[i] = std::min(dist[i], detail::sq_dist(points.row(i), centroids.row(c)));
            }
        }
    }

    ClusterAssignment out;
    out.k = k;
    out.seed = seed;
    out.labels.assign(n, k);
    Vector point_dist(n);

    auto assign = [&]() {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double dd = detail::sq_dist(points.row(i), centroids.row(c));
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            if (out.labels[i] != best) {
                changed = true;
                out.labels[i] = best;
            }
            point_dist[i] = best_d;
        }
        return changed;
    };

    assign();
    [[maybe_unused]] double previous = std::numeric_limits<double>::infinity();
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Update step, with farthest-point reseeding for empty clusters.
        Matrix sums(k, d);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = sums.row(out.labels[i]);
            for (std::size_t j = 0; j < d; ++j) {
                row[j] += points(i, j);
            }
            ++counts[out.labels[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) {
                    centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
                }
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) {
                continue;
            }
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[out.labels[i]] <= 1) {
                    continue;  // do not empty another cluster
                }
                const double dd = detail::sq_dist(points.row(i), centroids.row(out.labels[i]));
                if (dd > far_d) {
                    far_d = dd;
                    far = i;
                }
            }
            --counts[out.labels[far]];
            out.labels[far] = c;
            counts[c] = 1;
            std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(c).begin());
        }
        const bool changed = assign();
        double inertia = 0.0;
        for (double v : point_dist) {
            inertia += v;
        }
        assert(inertia <= previous * (1.0 + 1e-12) + 1e-12 && "kmeans inertia increased");
        previous = inertia;
        out.inertia_history.push_back(inertia);
        out.inertia = inertia;
        out.iterations = iter + 1;
        if (!changed) {
            break;
        }
    }
    detail::canonicalize_labels(out.labels, k);
    return out;
}

/// Adjusted Rand Index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) {
        throw DimensionError("adjusted_rand_index: label vectors differ in length");
    }
    const std::size_t n = a.size();
    if (n < 2) {
        return 1.0;
    }
    std::map<std::pair<std::size_t, std::size_t>, double> table;
    std::map<std::size_t, double> rows, cols;
    for (std::size_t i = 0; i < n; ++i) {
        table[{a[i], b[i]}] += 1.0;
        rows[a[i]] += 1.0;
        cols[b[i]] += 1.0;
    }
    auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, v] : table) {
        index += c2(v);
    }
    for (const auto& [key, v] : rows) {
        sum_a += c2(v);
    }
    for (const auto& [key, v] : cols) {
        sum_b += c2(v);
    }
    const double expected = sum_a * sum_b / c2(static_cast<double>(n));
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) {
        // Both partitions trivial (all singletons or one block): identical structure.
        return 1.0;
    }
    return (index - expected) / (max_index - expected);
}

}  // namespace modlib
