// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "haaf/tensor.hpp"
#include "op_cases.hpp"
#include "support.hpp"

using namespace haaf;
using haaf::test::random_tensor;

namespace {

std::vector<real> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

// --- forward examples ------------------------------------------------------

TEST(TensorOps, SoftmaxOfEqualLogitsIsUniform) {
  auto y = softmax_lastdim(Tensor::from({3}, {0, 0, 0}));
  for (real v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(TensorOps, IdentityMatmul) {
  auto y = matmul(Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(vals(y), (std::vector<real>{1, 2, 3, 4}));
}

TEST(TensorOps, BceAtZeroLogitIsLn2) {
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(0), {1}).item(), std::log(2.0), 1e-15);
}

TEST(TensorOps, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto n = test::rand_dim(rng, 1, 7), k = test::rand_dim(rng, 1, 7), m = test::rand_dim(rng, 1, 7);
    auto a = random_tensor(rng, {n, k}), b = random_tensor(rng, {k, m});
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), s, 1e-12);
      }
  }
}

TEST(TensorOps, SliceReshapeTransposeConcat) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(vals(slice(x, 1, 1, 3)), (std::vector<real>{2, 3, 5, 6}));
  EXPECT_EQ(vals(slice(x, 0, 1, 2)), (std::vector<real>{4, 5, 6}));
  EXPECT_EQ(vals(transpose_last2(x)), (std::vector<real>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_EQ(vals(concat_lastdim({x, x})), (std::vector<real>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6}));
  EXPECT_EQ(vals(concat_rows({x, slice(x, 0, 0, 1)})), (std::vector<real>{1, 2, 3, 4, 5, 6, 1, 2, 3}));
  EXPECT_EQ(vals(mean_lastdim(x)), (std::vector<real>{2, 5}));
  EXPECT_EQ(vals(max_lastdim(x)), (std::vector<real>{3, 6}));
  EXPECT_EQ(vals(gather(x, {5, -1, 0}, {3})), (std::vector<real>{6, 0, 1}));
}

// --- errors ----------------------------------------------------------------

TEST(TensorErrors, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(broadcast_add_row(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(slice(Tensor::zeros({2, 3}), 1, 2, 2), ShapeError);
}

TEST(TensorErrors, StrictModeRejectsNonFiniteInput) {
  set_strict_finite(true);
  auto x = Tensor::from({2}, {1, std::numeric_limits<real>::quiet_NaN()});
  EXPECT_THROW(relu(x), NonFiniteError);
  set_strict_finite(false);
  EXPECT_NO_THROW(relu(x));
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2).backward(), AutodiffError);
}

TEST(Backward, SecondBackwardOnConsumedGraphThrows) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), AutodiffError);
}

// --- backward examples -----------------------------------------------------

TEST(Backward, SumOfSquares) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<real>(x.grad().begin(), x.grad().end()), (std::vector<real>{2, 4, 6}));
}

TEST(Backward, SigmoidAtZero) {
  auto w = Tensor::from({1, 1}, {0}, true);
  auto x = Tensor::from({1, 1}, {5});
  sum(sigmoid(matmul(w, x))).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 1.25);
}

TEST(Backward, LeafGradientsAccumulateUntilZeroGrad) {
  auto x = Tensor::from({2}, {1, 2}, true);
  sum(x).backward();
  sum(scale(x, 3)).backward();
  EXPECT_EQ(std::vector<real>(x.grad().begin(), x.grad().end()), (std::vector<real>{4, 4}));
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  // y = a*a where a = 2x: dy/dx = 8x.
  auto x = Tensor::from({1}, {3}, true);
  auto a = scale(x, 2);
  sum(mul(a, a)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 24.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({1}, {3}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(y.backward(), AutodiffError);
}

// --- gradient oracle -------------------------------------------------------

TEST(FiniteDiff, SumOfSquares) {
  auto e = finite_diff_check([](const Tensor& x) { return sum(mul(x, x)); }, Tensor::from({2}, {1, 2}), 1e-6);
  EXPECT_LT(e, 1e-7);
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
  auto e = finite_diff_check([](const Tensor&) { return Tensor::scalar(4); }, Tensor::from({3}, {1, 2, 3}), 1e-6);
  EXPECT_EQ(e, 0);
}

TEST(FiniteDiff, SoftmaxThenDot) {
  std::mt19937_64 rng(9);
  auto w = random_tensor(rng, {1, 6});
  auto e = finite_diff_check([w](const Tensor& x) { return sum(mul(softmax_lastdim(x), w)); },
                             random_tensor(rng, {1, 6}, -2, 2), 1e-6);
  EXPECT_LT(e, 1e-5);
}

TEST(FiniteDiff, NonDeterministicFunctionThrows) {
  int calls = 0;
  auto f = [&calls](const Tensor& x) { return scale(sum(x), real(++calls)); };
  EXPECT_THROW(finite_diff_check(f, Tensor::from({1}, {1}), 1e-6), Error);
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferencesOn100RandomCases) {
  const auto cases = test::op_cases();
  const auto& op = cases.at(GetParam());
  std::mt19937_64 rng(1000 + GetParam());
  real worst = 0;
  for (int i = 0; i < 100; ++i) {
    auto c = op.make(rng);
    worst = std::max(worst, finite_diff_check(c.f, c.point, 1e-6));
  }
  EXPECT_LT(worst, 1e-5) << op.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, test::op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           std::string n = test::op_cases()[info.param].name;
                           for (auto& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });

// --- properties ------------------------------------------------------------

TEST(TensorProperties, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    auto y = softmax_lastdim(random_tensor(rng, {test::rand_dim(rng, 1, 5), test::rand_dim(rng, 1, 9)}, -20, 20));
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < y.cols(); ++j) {
        EXPECT_GT(y.at(i, j), 0.0);
        EXPECT_LE(y.at(i, j), 1.0);
        s += y.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(TensorProperties, LayerNormRowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    auto y = layernorm_lastdim(random_tensor(rng, {test::rand_dim(rng, 1, 5), test::rand_dim(rng, 2, 40)}, -5, 5));
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0, s2 = 0;
      for (std::size_t j = 0; j < y.cols(); ++j) s += y.at(i, j);
      const double mu = s / double(y.cols());
      for (std::size_t j = 0; j < y.cols(); ++j) s2 += (y.at(i, j) - mu) * (y.at(i, j) - mu);
      EXPECT_LT(std::abs(mu), 1e-9);
      EXPECT_NEAR(s2 / double(y.cols()), 1.0, 1e-6);
    }
  }
}

TEST(TensorProperties, BceIsNonNegativeAndStableForHugeLogits) {
  for (real z : {-1e4, -50.0, -1.0, 0.0, 1.0, 50.0, 1e4})
    for (real y : {0.0, 1.0}) {
      const real l = bce_with_logits(Tensor::scalar(z), {y}).item();
      EXPECT_TRUE(std::isfinite(l));
      EXPECT_GE(l, 0.0);
    }
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(-1e4), {0}).item(), 0.0, 1e-300);
  EXPECT_NEAR(bce_with_logits(Tensor::scalar(-1e4), {1}).item(), 1e4, 1e-9);
  auto z = Tensor::from({1}, {1e4}, true);
  bce_with_logits(z, {0}).backward();
  EXPECT_TRUE(std::isfinite(z.grad()[0]));
}

TEST(TensorProperties, ForwardIsBitDeterministic) {
  std::mt19937_64 a(11), b(11);
  auto x = random_tensor(a, {4, 6}), y = random_tensor(b, {4, 6});
  auto fx = layernorm_lastdim(gelu(matmul(x, transpose_last2(x))));
  auto fy = layernorm_lastdim(gelu(matmul(y, transpose_last2(y))));
  EXPECT_EQ(vals(fx), vals(fy));
}

TEST(TensorInvariants, GradLengthMatchesValues) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(softmax_lastdim(x)).backward();
  EXPECT_EQ(x.grad().size(), x.size());
}
