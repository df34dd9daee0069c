// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace moep {
namespace {

using testing::random_matrix;

TEST(Matrix, InitializerListAndShape) {
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(Matrix, MatmulHandComputed) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Matrix{{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul_nt(a, b), (Matrix{{17, 23}, {39, 53}}));
  EXPECT_EQ(matmul_tn(a, b), (Matrix{{26, 30}, {38, 44}}));
}

TEST(Matrix, MatmulShapeMismatch) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(add(Matrix(2, 3), Matrix(3, 2)), ShapeError);
  EXPECT_THROW(hadamard(Matrix(1, 3), Matrix(1, 2)), ShapeError);
}

TEST(Matrix, MatmulAgainstNaiveTripleLoop) {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(9), k = 1 + rng.uniform_int(9), m = 1 + rng.uniform_int(9);
    const Matrix a = random_matrix(n, k, rng), b = random_matrix(k, m, rng);
    const Matrix c = matmul(a, b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        long double s = 0;
        for (std::size_t t = 0; t < k; ++t) s += static_cast<long double>(a(i, t)) * b(t, j);
        EXPECT_NEAR(c(i, j), static_cast<double>(s), 1e-12);
      }
  }
}

TEST(Matrix, TransposedProductsAgree) {
  SeededRng rng(4);
  const Matrix a = random_matrix(5, 7, rng), b = random_matrix(6, 7, rng), c = random_matrix(5, 3, rng);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-14);
  EXPECT_LT(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-14);
}

TEST(Softmax, MatchesExtendedPrecision) {
  SeededRng rng(5);
  const Matrix x = random_matrix(6, 9, rng, 20.0);
  const Matrix p = row_softmax(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max<long double>(mx, x(i, j));
    long double z = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += std::exp(static_cast<long double>(x(i, j)) - mx);
    double row = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      EXPECT_NEAR(p(i, j), static_cast<double>(std::exp(static_cast<long double>(x(i, j)) - mx) / z), 1e-15);
      row += p(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-14);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Matrix p = row_softmax(Matrix{{1000.0, 999.0, -1000.0}});
  EXPECT_TRUE(all_finite(p));
  EXPECT_NEAR(p(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_EQ(p(0, 2), 0.0);
}

TEST(Softmax, NonFiniteInputRejected) {
  EXPECT_THROW(row_softmax(Matrix{{1.0, std::nan("")}}), NumericalError);
  EXPECT_THROW(row_softmax(Matrix{{1.0, std::numeric_limits<double>::infinity()}}), NumericalError);
}

TEST(RmsNorm, UnitRootMeanSquare) {
  const Matrix y = rms_norm(Matrix{{3.0, 4.0}});
  const double rms = std::sqrt((9.0 + 16.0) / 2.0 + kRmsEps);
  EXPECT_NEAR(y(0, 0), 3.0 / rms, 1e-15);
  EXPECT_NEAR(y(0, 1), 4.0 / rms, 1e-15);
  EXPECT_EQ(rms_norm(Matrix(1, 3, 0.0)), Matrix(1, 3, 0.0));
}

TEST(Silu, Values) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(silu(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-16);
  EXPECT_NEAR(silu(-30.0), -30.0 * std::exp(-30.0), 1e-20);
}

TEST(Cholesky, ReconstructsAndInverts) {
  SeededRng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(10);
    const Matrix x = random_matrix(n + 5, n, rng);
    Matrix h = matmul_tn(x, x);
    for (std::size_t i = 0; i < n; ++i) h(i, i) += 0.1;
    const Matrix l = cholesky(h);
    EXPECT_LT(max_abs_diff(matmul_nt(l, l), h), 1e-10);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) EXPECT_EQ(l(i, j), 0.0);
    const Matrix inv = spd_inverse(h);
    EXPECT_LT(max_abs_diff(matmul(h, inv), Matrix::identity(n)), 1e-8);
  }
}

TEST(Cholesky, RejectsIndefinite) {
  EXPECT_THROW(cholesky(Matrix{{1, 2}, {2, 1}}), NumericalError);
  EXPECT_THROW(cholesky(Matrix{{0, 0}, {0, 1}}), NumericalError);
  EXPECT_THROW(spd_inverse(Matrix{{1, 0.5}, {0.4, 1}}), NumericalError);
  EXPECT_THROW(cholesky(Matrix(2, 3)), ShapeError);
  try {
    cholesky(Matrix{{-1.0}});
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("dampening"), std::string::npos);
  }
}

TEST(SeededRng, DeterministicPerSeed) {
  SeededRng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
  }
  EXPECT_NE(SeededRng(42).next_u64(), SeededRng(43).next_u64());
}

TEST(SeededRng, UniformRangeAndMoments) {
  SeededRng rng(1);
  double sum = 0.0, sq = 0.0;
  constexpr int kN = 200000;
  for (int i = 0; i < kN; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / kN, 0.0, 0.01);
  EXPECT_NEAR(sq / kN, 1.0, 0.02);
}

TEST(SeededRng, UniformIntCoversRange) {
  SeededRng rng(2);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[rng.uniform_int(7)];
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_THROW(rng.uniform_int(0), ConfigError);
}

TEST(SeededRng, ShuffleIsPermutation) {
  SeededRng rng(9);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

}  // namespace
}  // namespace moep
