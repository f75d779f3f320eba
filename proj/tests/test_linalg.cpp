// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "modlib/linalg.hpp"
#include "oracles.hpp"

using namespace modlib;

TEST(LowRankSvd, MatchesDenseSvdOfProduct) {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t d = 2 + rng.uniform_index(127);
        const std::size_t r = 1 + rng.uniform_index(std::min<std::size_t>(8, d));
        const Matrix a = oracle::random_matrix(d, r, rng);
        const Matrix b = oracle::random_matrix(d, r, rng);
        const SvdResult s = low_rank_svd(a, b);

        const Eigen::MatrixXd prod = oracle::to_eigen(a) * oracle::to_eigen(b).transpose();
        Eigen::JacobiSVD<Eigen::MatrixXd> dense(prod, Eigen::ComputeThinU | Eigen::ComputeThinV);
        ASSERT_EQ(s.rank(), r);
        for (std::size_t i = 0; i < r; ++i) {
            EXPECT_NEAR(s.singular_values[i], dense.singularValues()(static_cast<Eigen::Index>(i)), 1e-9);
        }
        const Eigen::MatrixXd v1 = oracle::to_eigen(s.v).leftCols(1);
        EXPECT_LT(oracle::principal_angle(v1, dense.matrixV().leftCols(1)), 1e-6);
        const Eigen::MatrixXd u = oracle::to_eigen(s.u);
        EXPECT_LT(oracle::principal_angle(u, dense.matrixU().leftCols(static_cast<Eigen::Index>(r))), 1e-6);
    }
}

TEST(LowRankSvd, HandComputedRankOne) {
    const Matrix a = Matrix::from_rows({{3.0}, {0.0}});
    const Matrix b = Matrix::from_rows({{0.0}, {4.0}});
    const SvdResult s = low_rank_svd(a, b);
    ASSERT_EQ(s.rank(), 1u);
    EXPECT_NEAR(s.singular_values[0], 12.0, 1e-12);
    EXPECT_NEAR(std::abs(s.v(1, 0)), 1.0, 1e-12);
    EXPECT_NEAR(s.v(0, 0), 0.0, 1e-12);
}

TEST(LowRankSvd, FactorsOrthonormalAndRankDeficiencyDetected) {
    SplitMix64 rng(3);
    Matrix a = oracle::random_matrix(10, 3, rng);
    Matrix b = oracle::random_matrix(10, 3, rng);
    for (std::size_t i = 0; i < 10; ++i) {
        a(i, 2) = 2.0 * a(i, 0);  // rank 2 product
    }
    const SvdResult s = low_rank_svd(a, b);
    EXPECT_EQ(s.rank(), 2u);
    const Eigen::MatrixXd u = oracle::to_eigen(s.u), v = oracle::to_eigen(s.v);
    EXPECT_LT((u.transpose() * u - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-10);
    EXPECT_LT((v.transpose() * v - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-10);
}

TEST(LowRankSvd, ZeroProductHasRankZeroAndErrorsOnBadInput) {
    EXPECT_EQ(low_rank_svd(Matrix(5, 2), Matrix(5, 2)).rank(), 0u);
    EXPECT_THROW(low_rank_svd(Matrix(5, 2), Matrix(5, 3)), DimensionError);
    Matrix nan(4, 1);
    nan(0, 0) = std::nan("");
    EXPECT_THROW(low_rank_svd(nan, Matrix(4, 1, 1.0)), NumericError);
}

TEST(Cosine, MatrixIsSymmetricWithUnitDiagonalAndMatchesDirect) {
    SplitMix64 rng(5);
    std::vector<Vector> v;
    for (int i = 0; i < 6; ++i) {
        v.push_back(oracle::random_vector(9, rng));
    }
    const SimilarityMatrix s = cosine_similarity_matrix(std::span<const Vector>(v));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_DOUBLE_EQ(s(i, i), 1.0);
        for (std::size_t j = 0; j < 6; ++j) {
            EXPECT_DOUBLE_EQ(s(i, j), s(j, i));
            const double direct = dot(v[i], v[j]) / (norm2(v[i]) * norm2(v[j]));
            EXPECT_NEAR(s(i, j), direct, 1e-12);
        }
    }
    v[2].assign(9, 0.0);
    EXPECT_THROW(cosine_similarity_matrix(std::span<const Vector>(v)), NumericError);
}

TEST(SvdReduce, FullRankPreservesPairwiseDistances) {
    SplitMix64 rng(8);
    const Matrix m = oracle::random_matrix(7, 20, rng);
    const Matrix z = svd_reduce(m, 7);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_NEAR(std::sqrt(detail::sq_dist(z.row(i), z.row(j))), std::sqrt(detail::sq_dist(m.row(i), m.row(j))),
                        1e-8);
        }
    }
}

TEST(SvdReduce, TruncationErrorIsOptimal) {
    SplitMix64 rng(9);
    const Matrix m = oracle::random_matrix(12, 30, rng);
    const ReducedScores r = svd_reduce_full(m, 4);
    const Eigen::MatrixXd approx = oracle::to_eigen(r.scores) * oracle::to_eigen(r.components).transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> dense(oracle::to_eigen(m));
    double tail = 0.0;
    for (Eigen::Index i = 4; i < dense.singularValues().size(); ++i) {
        tail += dense.singularValues()(i) * dense.singularValues()(i);
    }
    EXPECT_NEAR((oracle::to_eigen(m) - approx).squaredNorm(), tail, 1e-8);
}

TEST(KMeans, RecoversSeparatedBlobsDeterministically) {
    SplitMix64 rng(13);
    Matrix pts(60, 3);
    std::vector<std::size_t> truth;
    for (std::size_t i = 0; i < 60; ++i) {
        const std::size_t c = i % 3;
        truth.push_back(c);
        for (std::size_t j = 0; j < 3; ++j) {
            pts(i, j) = (j == c ? 10.0 : 0.0) + rng.normal(0.0, 0.3);
        }
    }
    const ClusterAssignment a = kmeans(pts, 3, 42);
    const ClusterAssignment b = kmeans(pts, 3, 42);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_DOUBLE_EQ(adjusted_rand_index(a.labels, truth), 1.0);
    for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
        EXPECT_LE(a.inertia_history[i], a.inertia_history[i - 1] + 1e-12);
    }
}

TEST(KMeans, ContractErrors) {
    EXPECT_THROW(kmeans(Matrix(3, 2, 1.0), 0, 1), ContractError);
    EXPECT_THROW(kmeans(Matrix(3, 2, 1.0), 4, 1), ContractError);
    const ClusterAssignment one = kmeans(Matrix(5, 2, 1.0), 1, 1);
    EXPECT_EQ(one.labels, std::vector<std::size_t>(5, 0));
}

TEST(Ari, KnownValues) {
    const std::vector<std::size_t> a{0, 0, 1, 1, 2, 2};
    const std::vector<std::size_t> relabeled{2, 2, 0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(adjusted_rand_index(a, relabeled), 1.0);
    // Hand-computed: contingency [[1,1],[1,1]] over two 2-2 splits gives ARI = -0.5.
    EXPECT_NEAR(adjusted_rand_index(std::vector<std::size_t>{0, 0, 1, 1}, std::vector<std::size_t>{0, 1, 0, 1}), -0.5,
                1e-12);
}
