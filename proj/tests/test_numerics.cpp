#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ekpc/numerics.hpp"

namespace ekpc {
namespace {

TEST(CosineSimilarity, IdenticalVectors) {
    const Vector a{1, 0};
    EXPECT_DOUBLE_EQ(cosine_similarity(a, a), 1.0);
}

TEST(CosineSimilarity, OrthogonalVectors) {
    EXPECT_DOUBLE_EQ(cosine_similarity(Vector{1, 0}, Vector{0, 1}), 0.0);
}

TEST(CosineSimilarity, HandComputed) {
    // 4 / (sqrt 5 * sqrt 5)
    EXPECT_NEAR(cosine_similarity(Vector{1, 2}, Vector{2, 1}), 0.8, 1e-15);
}

TEST(CosineSimilarity, ZeroNormIsDegenerate) {
    EXPECT_THROW(cosine_similarity(Vector{0, 0}, Vector{1, 0}), DegenerateInputError);
    EXPECT_FALSE(try_cosine_similarity(Vector{1, 0}, Vector{0, 0}).has_value());
}

TEST(CosineSimilarity, LengthMismatch) {
    EXPECT_THROW(cosine_similarity(Vector{1, 0}, Vector{1, 0, 0}), DimensionError);
}

TEST(CosineSimilarity, ClampedToUnitInterval) {
    SeededRng rng(3);
    for (int i = 0; i < 200; ++i) {
        Vector a(7);
        for (double& v : a) v = rng.normal() * 1e3;
        Vector b = a;
        for (double& v : b) v *= 3.0;
        const double c = cosine_similarity(a, b);
        EXPECT_LE(c, 1.0);
        EXPECT_GE(c, -1.0);
        for (double& v : b) v = -v;
        EXPECT_GE(cosine_similarity(a, b), -1.0);
    }
}

TEST(CosineSimilarity, SymmetricAndScaleInvariant) {
    SeededRng rng(11);
    for (int i = 0; i < 100; ++i) {
        Vector a(5), b(5);
        for (double& v : a) v = rng.normal();
        for (double& v : b) v = rng.normal();
        const double lambda = rng.uniform(0.01, 100.0);
        Vector la = a;
        for (double& v : la) v *= lambda;
        EXPECT_NEAR(cosine_similarity(a, b), cosine_similarity(b, a), 1e-12);
        EXPECT_NEAR(cosine_similarity(a, b), cosine_similarity(la, b), 1e-12);
    }
}

// SplitMix64 finalizer written out independently of the engine.
std::uint64_t splitmix_oracle(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

TEST(SeededRng, MatchesCounterConstruction) {
    SeededRng rng(42);
    const std::uint64_t key = splitmix_oracle(42ULL ^ 0x6a09e667f3bcc909ULL);
    for (std::uint64_t n = 0; n < 16; ++n) {
        EXPECT_EQ(rng.next_u64(), splitmix_oracle(key + n * 0x9e3779b97f4a7c15ULL));
    }
}

TEST(SeededRng, SameSeedSameStream) {
    SeededRng a(7), b(7);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
    SeededRng c(7), d(7);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(SeededRng, DerivedStreamsDiffer) {
    SeededRng base(5);
    SeededRng a = base.derive(1), b = base.derive(2);
    int equal = 0;
    for (int i = 0; i < 100; ++i) equal += a.next_u64() == b.next_u64();
    EXPECT_EQ(equal, 0);
    SeededRng a2 = base.derive(1);
    SeededRng a3 = SeededRng(5).derive(1);
    EXPECT_EQ(a2.next_u64(), a3.next_u64());
}

TEST(SeededRng, RangesRespected) {
    SeededRng rng(9);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(rng.below(7), 7u);
    }
}

TEST(SeededRng, ShuffleIsPermutation) {
    SeededRng rng(1);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    rng.shuffle(v);
    std::vector<int> s = v;
    std::sort(s.begin(), s.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(s[static_cast<std::size_t>(i)], i);
}

TEST(SampleDiagGaussian, ZeroVarianceCopiesMean) {
    SeededRng rng(0);
    const Matrix s = sample_diag_gaussian(Vector{3}, Vector{0}, 5, rng);
    ASSERT_EQ(s.rows(), 5u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(s(i, 0), 3.0);
}

TEST(SampleDiagGaussian, NegativeVarianceRejected) {
    SeededRng rng(0);
    EXPECT_THROW(sample_diag_gaussian(Vector{0, 0}, Vector{1, -1e-12}, 3, rng), PreconditionError);
}

TEST(SampleDiagGaussian, StandardNormalMoments) {
    SeededRng rng(123);
    const std::size_t n = 100000;
    const Matrix s = sample_diag_gaussian(Vector{0}, Vector{1}, n, rng);
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += s(i, 0);
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v += (s(i, 0) - m) * (s(i, 0) - m);
    v /= static_cast<double>(n);
    EXPECT_NEAR(m, 0.0, 0.02);
    EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(SampleDiagGaussian, PerChannelStd) {
    SeededRng rng(321);
    const std::size_t n = 100000;
    const Matrix s = sample_diag_gaussian(Vector{1, 2}, Vector{4, 9}, n, rng);
    const double expect[2] = {2.0, 3.0};
    const double mean[2] = {1.0, 2.0};
    for (std::size_t k = 0; k < 2; ++k) {
        double m = 0.0, v = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += s(i, k);
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) v += (s(i, k) - m) * (s(i, k) - m);
        const double sd = std::sqrt(v / static_cast<double>(n));
        EXPECT_NEAR(sd, expect[k], 0.02 * expect[k]);
        EXPECT_NEAR(m, mean[k], 3.0 * expect[k] / std::sqrt(static_cast<double>(n)));
    }
}

TEST(SampleDiagGaussian, MeanWithinThreeSigmaInMostTrials) {
    const std::size_t n = 10000;
    int inside = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        SeededRng rng(static_cast<std::uint64_t>(1000 + t));
        const Matrix s = sample_diag_gaussian(Vector{0.5}, Vector{2.0}, n, rng);
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += s(i, 0);
        m /= static_cast<double>(n);
        inside += std::abs(m - 0.5) <= 3.0 * std::sqrt(2.0 / static_cast<double>(n));
    }
    EXPECT_GE(inside, static_cast<int>(0.99 * trials));
}

TEST(FiniteDiff, Quadratic) {
    const Vector g = finite_diff_gradient([](std::span<const double> x) { return x[0] * x[0]; }, Vector{3.0}, 1e-5);
    EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantGivesZero) {
    const Vector g = finite_diff_gradient([](std::span<const double>) { return 4.2; }, Vector{1, 2, 3}, 1e-5);
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, ProductRule) {
    const Vector g =
        finite_diff_gradient([](std::span<const double> x) { return x[0] * x[1]; }, Vector{2.0, 5.0}, 1e-5);
    EXPECT_NEAR(g[0], 5.0, 1e-6);
    EXPECT_NEAR(g[1], 2.0, 1e-6);
}

TEST(FiniteDiff, NonFiniteNamesCoordinate) {
    auto f = [](std::span<const double> x) { return x[2] > 0.5 ? std::numeric_limits<double>::infinity() : x[0]; };
    try {
        finite_diff_gradient(f, Vector{0, 0, 0.5}, 1e-3);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_EQ(e.coordinate(), 2u);
    }
}

TEST(FiniteDiff, NonPositiveStepRejected) {
    EXPECT_THROW(finite_diff_gradient([](std::span<const double>) { return 0.0; }, Vector{1}, 0.0), PreconditionError);
}

TEST(MaxRelativeError, Cases) {
    EXPECT_EQ(max_relative_error(Vector{1, 2}, Vector{1, 2}), 0.0);
    EXPECT_NEAR(max_relative_error(Vector{1.0}, Vector{1.1}), 0.1 / 1.1, 1e-15);
    // Component far below the gradient's scale is judged against 1e-3 * max|a|.
    EXPECT_NEAR(max_relative_error(Vector{100.0, 1e-9}, Vector{100.0, 2e-9}), 1e-9 / 0.1, 1e-20);
}

TEST(Matrix, ProductsAgreeWithHandValues) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
    EXPECT_EQ(matmul(a, b), Matrix::from_rows({{19, 22}, {43, 50}}));
    EXPECT_EQ(matmul_bt(a, b), Matrix::from_rows({{17, 23}, {39, 53}}));
    Matrix c(2, 2);
    add_matmul_at(a, b, c);
    EXPECT_EQ(c, Matrix::from_rows({{26, 30}, {38, 44}}));
    EXPECT_THROW(matmul(a, Matrix(3, 1)), DimensionError);
}

}  // namespace
}  // namespace ekpc
