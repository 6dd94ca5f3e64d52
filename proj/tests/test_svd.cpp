#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "tal/svd.hpp"

using namespace tal;
using tal::testing::random_tensor;

namespace {

oracle::Mat to_mat(const Tensor64& t) {
  oracle::Mat m(t.dim(0), t.dim(1));
  m.v.assign(t.data().begin(), t.data().end());
  return m;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

} // namespace

TEST(TopkSvd, RankOneOuterProduct) {
  Rng rng(1);
  auto u = random_tensor<double>({5}, rng);
  auto v = random_tensor<double>({7}, rng);
  const double nu = frobenius_norm(u), nv = frobenius_norm(v);
  Tensor64 x({5, 7});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) x[i * 7 + j] = u[i] / nu * v[j] / nv;
  const auto t = topk_svd(x, 2);
  ASSERT_EQ(t.size(), 1u);  // second singular value is zero
  EXPECT_NEAR(t[0].singular_value, 1.0, 1e-9);
  double du = 0, dv = 0;
  for (std::size_t i = 0; i < 5; ++i) du += t[0].left[i] * u[i] / nu;
  for (std::size_t j = 0; j < 7; ++j) dv += t[0].right[j] * v[j] / nv;
  EXPECT_NEAR(std::abs(du), 1.0, 1e-9);
  EXPECT_NEAR(du * dv, 1.0, 1e-9);  // signs agree
}

TEST(TopkSvd, DiagonalMatrix) {
  const Tensor64 x({2, 2}, {3, 0, 0, 1});
  const auto t = topk_svd(x, 2);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_NEAR(t[0].singular_value, 3.0, 1e-9);
  EXPECT_NEAR(t[1].singular_value, 1.0, 1e-9);
  const Tensor64 neg({2, 2}, {-3, 0, 0, 1});
  EXPECT_NEAR(topk_svd(neg, 1)[0].singular_value, 3.0, 1e-9);
}

TEST(TopkSvd, MatchesJacobiOracleOnRandom8x12) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>({8, 12}, rng);
    const auto ref = oracle::jacobi_svd(to_mat(x));
    const auto t = topk_svd(x, 8);
    ASSERT_EQ(t.size(), 8u);
    for (std::size_t k = 0; k < 8; ++k) {
      EXPECT_NEAR(t[k].singular_value, ref.s[k], 1e-6) << "trial " << trial << " k " << k;
    }
  }
}

TEST(TopkSvd, TripletsAreUnitOrderedAndMeetResidual) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t r = 1 + rng.below(16), c = 1 + rng.below(64);
    const auto x = random_tensor<double>({r, c}, rng);
    const auto t = topk_svd(x, std::min(r, c));
    for (std::size_t k = 0; k < t.size(); ++k) {
      EXPECT_NEAR(norm(t[k].left), 1.0, 1e-6);
      EXPECT_NEAR(norm(t[k].right), 1.0, 1e-6);
      EXPECT_GE(t[k].singular_value, 0.0);
      if (k > 0) EXPECT_GE(t[k - 1].singular_value, t[k].singular_value);
      std::vector<double> res(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) res[i] += x[i * c + j] * t[k].right[j];
        res[i] -= t[k].singular_value * t[k].left[i];
      }
      EXPECT_LE(norm(res), 1e-6 * t[0].singular_value);
    }
  }
}

TEST(TopkSvd, FullReconstruction) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 2 + rng.below(10), c = 2 + rng.below(20);
    const auto x = random_tensor<double>({r, c}, rng);
    const auto t = topk_svd(x, std::min(r, c));
    Tensor64 acc({r, c});
    for (const auto& tr : t) axpy_inplace(acc, 1.0, rank1_component(tr));
    EXPECT_LE(frobenius_norm(acc - x) / frobenius_norm(x), 1e-9);

    const auto xf = x.cast<float>();
    const auto tf = topk_svd(xf, std::min(r, c));
    Tensor accf({r, c});
    for (const auto& tr : tf) axpy_inplace(accf, 1.0f, rank1_component(tr));
    EXPECT_LE(frobenius_norm(accf - xf) / frobenius_norm(xf), 1e-5);
  }
}

TEST(TopkSvd, RankDeficientReturnsFewer) {
  Rng rng(5);
  const auto a = random_tensor<double>({6, 2}, rng);
  const auto b = random_tensor<double>({2, 9}, rng);
  const auto x = matmul(a, b);
  EXPECT_EQ(topk_svd(x, 6).size(), 2u);
  EXPECT_TRUE(topk_svd(Tensor64({3, 4}), 2).empty());
}

TEST(TopkSvd, PreconditionsAndNonConvergence) {
  const Tensor64 x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(topk_svd(x, 3), ValueError);
  EXPECT_THROW(topk_svd(x, 1, {0.0, 100}), ValueError);
  EXPECT_THROW(topk_svd(Tensor64({2, 2, 2}), 1), ShapeError);
  // Nearly equal leading singular values with a one-iteration cap.
  Rng rng(6);
  const auto hard = random_tensor<double>({16, 64}, rng);
  try {
    topk_svd(hard, 4, {1e-12, 1});
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}
