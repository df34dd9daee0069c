// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace moep {
namespace {

using testing::random_matrix;

constexpr double kTol = 1e-6;

/// Reduces any matrix-valued Var to a scalar with fixed random weights so
/// every output entry contributes a distinct gradient.
Var weighted_sum(Tape& t, const Var& v, std::uint64_t seed = 99) {
  SeededRng rng(seed);
  const Matrix w = random_matrix(v.rows(), v.cols(), rng);
  Var wv = t.constant(w);
  return ad::mse(ad::mul(v, wv), t.constant(Matrix(v.rows(), v.cols(), 0.0)));
}

TEST(Autograd, MatmulGradient) {
  SeededRng rng(1);
  const Matrix b = random_matrix(4, 3, rng);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::matmul(x, t.constant(b))); },
                       random_matrix(5, 4, rng)),
            kTol);
  const Matrix a = random_matrix(5, 4, rng);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::matmul(t.constant(a), x)); },
                       random_matrix(4, 3, rng)),
            kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::matmul(t.constant(a), x, true)); },
                       random_matrix(6, 4, rng)),
            kTol);
}

TEST(Autograd, ElementwiseGradients) {
  SeededRng rng(2);
  const Matrix c = random_matrix(3, 4, rng);
  const Matrix x0 = random_matrix(3, 4, rng);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::add(x, t.constant(c))); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::mul(x, t.constant(c))); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::mul(x, x)); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::silu(x)); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::scale(x, -2.5)); }, x0), kTol);
}

TEST(Autograd, SoftmaxAndNormGradients) {
  SeededRng rng(3);
  const Matrix x0 = random_matrix(4, 5, rng, 2.0);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::row_softmax(x)); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::rms_norm(x)); }, x0), kTol);
}

TEST(Autograd, IndexingGradients) {
  SeededRng rng(4);
  const Matrix x0 = random_matrix(5, 3, rng);
  const std::vector<std::size_t> idx{4, 0, 0, 2};
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::gather_rows(x, idx)); }, x0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::scatter_rows(x, {1, 1, 3, 0, 2}, 4)); },
                       x0),
            kTol);
  EXPECT_LT(grad_check(
                [&](Tape& t, const Var& x) {
                  const std::vector<Var> parts{x, ad::scale(x, 2.0)};
                  return weighted_sum(t, ad::stack_rows(parts));
                },
                x0),
            kTol);
  const Matrix s = random_matrix(5, 1, rng);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::row_scale(x, t.constant(s))); }, x0),
            kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return weighted_sum(t, ad::row_scale(t.constant(x0), x)); }, s),
            kTol);
}

TEST(Autograd, LossGradients) {
  SeededRng rng(5);
  const Matrix z0 = random_matrix(4, 6, rng, 3.0);
  const std::vector<std::size_t> targets{0, 5, 2, 2};
  EXPECT_LT(grad_check([&](Tape&, const Var& x) { return ad::cross_entropy(x, targets); }, z0), kTol);
  const Matrix y = random_matrix(4, 6, rng);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return ad::mse(x, t.constant(y)); }, z0), kTol);
  EXPECT_LT(grad_check([&](Tape& t, const Var& x) { return ad::mse(t.constant(y), x); }, z0), kTol);
}

TEST(Autograd, CrossEntropyMatchesExtendedPrecision) {
  SeededRng rng(6);
  const Matrix z = random_matrix(5, 7, rng, 10.0);
  const std::vector<std::size_t> targets{1, 6, 0, 3, 3};
  Tape t;
  const double got = ad::cross_entropy(t.leaf(z), targets).value()(0, 0);
  long double want = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    long double s = 0;
    for (std::size_t j = 0; j < z.cols(); ++j) s += std::exp(static_cast<long double>(z(r, j)));
    want += std::log(s) - z(r, targets[r]);
  }
  want /= z.rows();
  EXPECT_NEAR(got, static_cast<double>(want), 1e-13);
  EXPECT_NEAR(ce_loss(z, targets), static_cast<double>(want), 1e-13);
}

TEST(Autograd, MaskedAssignBlocksGradient) {
  Tape t;
  Var x = t.leaf(Matrix{{1.0, 2.0}, {3.0, 4.0}});
  const std::vector<std::uint8_t> mask{1, 0, 0, 1};
  Var y = ad::masked_assign(x, mask, 0.0);
  EXPECT_EQ(y.value(), (Matrix{{1.0, 0.0}, {0.0, 4.0}}));
  t.backward(ad::mse(y, t.constant(Matrix(2, 2, 0.0))));
  const Matrix g = x.grad();
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_EQ(g(1, 0), 0.0);
  EXPECT_NE(g(0, 0), 0.0);
  EXPECT_NE(g(1, 1), 0.0);

  Tape t2;
  EXPECT_EQ(ad::masked_assign(t2.leaf(Matrix{{5.0}}), std::vector<std::uint8_t>{0}, kMaskedLogit).value()(0, 0),
            kMaskedLogit);
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  Tape t;
  Var x = t.leaf(Matrix{{1.0, -2.0}});
  Var loss = ad::mse(x, t.constant(Matrix(1, 2, 0.0)));
  t.backward(loss);
  const Matrix once = x.grad();
  t.backward(loss);
  EXPECT_EQ(x.grad(), scale(once, 2.0));
  t.zero_grad();
  EXPECT_EQ(x.grad(), Matrix(1, 2, 0.0));
}

TEST(Autograd, HandTracedChain) {
  // loss = mean((a*b + a)^2) with a = 2, b = 3: d/da = 2*(ab+a)*(b+1) = 64, d/db = 2*(ab+a)*a = 32
  Tape t;
  Var a = t.leaf(Matrix{{2.0}});
  Var b = t.leaf(Matrix{{3.0}});
  Var y = ad::add(ad::mul(a, b), a);
  t.backward(ad::mse(y, t.constant(Matrix{{0.0}})));
  EXPECT_EQ(a.grad()(0, 0), 64.0);
  EXPECT_EQ(b.grad()(0, 0), 32.0);
}

TEST(Autograd, Errors) {
  Tape t;
  Var x = t.leaf(Matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
  Tape other;
  Var y = other.leaf(Matrix(2, 2, 1.0));
  EXPECT_THROW(ad::add(x, y), ContractError);
  EXPECT_THROW(ad::matmul(x, t.leaf(Matrix(3, 1))), ShapeError);
  EXPECT_THROW(ad::cross_entropy(x, {0}), ShapeError);
  EXPECT_THROW(grad_check([](Tape&, const Var& v) { return v; }, Matrix(1, 1), 0.1), ConfigError);
  EXPECT_THROW(grad_check([](Tape&, const Var& v) { return v; }, Matrix(1, 1), 0.0), ConfigError);
}

TEST(Autograd, UnreachedLeafHasZeroGradient) {
  Tape t;
  Var x = t.leaf(Matrix{{1.0}});
  Var unused = t.leaf(Matrix{{5.0, 6.0}});
  t.backward(ad::mse(x, t.constant(Matrix{{0.0}})));
  EXPECT_EQ(unused.grad(), Matrix(1, 2, 0.0));
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Matrix{{2.0}});
  Var x = t.leaf(Matrix{{1.0}});
  t.backward(ad::mse(ad::mul(c, x), t.constant(Matrix{{0.0}})));
  EXPECT_FALSE(t.node(c.id()).needs_grad);
  EXPECT_EQ(c.grad()(0, 0), 0.0);
  EXPECT_EQ(x.grad()(0, 0), 8.0);
}

}  // namespace
}  // namespace moep
