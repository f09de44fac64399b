#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "muse/rng.hpp"
#include "muse/stats.hpp"
#include "test_support.hpp"

namespace muse {
namespace {

using V = std::vector<double>;

TEST(Pearson, SelfAndAnti) {
  EXPECT_DOUBLE_EQ(pearson(V{1, 2, 3}, V{1, 2, 3}).value, 1.0);
  EXPECT_DOUBLE_EQ(pearson(V{1, 2, 3}, V{-1, -2, -3}).value, -1.0);
}

TEST(Pearson, HandExample) {
  const double expected = 3.0 / std::sqrt(2.0 * 14.0 / 3.0);
  const auto r = pearson(V{1, 2, 3}, V{1, 2, 4});
  EXPECT_NEAR(r.value, expected, 1e-15);
  EXPECT_NEAR(r.value, 0.9820, 5e-5);
  EXPECT_FALSE(r.degenerate);
}

TEST(Pearson, ZeroVarianceIsDegenerate) {
  const auto r = pearson(V{1, 1, 1}, V{1, 2, 3});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(pearson(V{1, 2, 3}, V{0.1, 0.1, 0.1}).degenerate);
}

TEST(Pearson, ConstantSeriesWithInexactMeanIsStillDegenerate) {
  const V x(7, 0.1);
  EXPECT_TRUE(pearson(x, V{1, 2, 3, 4, 5, 6, 7}).degenerate);
}

TEST(Pearson, Errors) {
  EXPECT_THROW((void)pearson(V{1, 2}, V{1, 2, 3}), Error);
  EXPECT_THROW((void)pearson(V{1}, V{1}), Error);
  EXPECT_THROW((void)pearson(V{1, std::numeric_limits<double>::quiet_NaN()}, V{1, 2}), Error);
  EXPECT_THROW((void)pearson(V{1, 2}, V{1, std::numeric_limits<double>::infinity()}), Error);
  try {
    (void)pearson(V{1, 2}, V{1, 2, 3});
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
}

TEST(Pearson, FloatInputAccumulatesInDouble) {
  const std::vector<float> x{1.0f, 2.0f, 3.0f};
  const std::vector<float> y{1.0f, 2.0f, 4.0f};
  EXPECT_NEAR(pearson(x, y).value, 3.0 / std::sqrt(2.0 * 14.0 / 3.0), 1e-15);
}

TEST(Pearson, MatchesLongDoubleOracle) {
  CounterRng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    V x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.3 * x[i] + rng.normal();
    }
    ASSERT_NEAR(pearson(x, y).value, testing::naive_pearson(x, y), 1e-12);
  }
}

TEST(Pearson, SymmetricBoundedAffineInvariant) {
  CounterRng rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    V x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(-10, 10);
      y[i] = rng.uniform(-10, 10);
    }
    const double r = pearson(x, y).value;
    ASSERT_EQ(r, pearson(y, x).value);
    ASSERT_GE(r, -1.0);
    ASSERT_LE(r, 1.0);
    const double a = rng.uniform(0.1, 10.0);
    const double b = rng.uniform(-5, 5);
    V pos(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = a * x[i] + b;
      neg[i] = -a * x[i] + b;
    }
    ASSERT_NEAR(pearson(pos, y).value, r, 1e-12);
    ASSERT_NEAR(pearson(neg, y).value, -r, 1e-12);
  }
}

TEST(Pearson, ClampsNearlyCollinear) {
  V x, y;
  for (int i = 0; i < 1000; ++i) {
    x.push_back(1e-3 * i + 1e8);
    y.push_back(1e-3 * i + 1e8);
  }
  const double r = pearson(x, y).value;
  EXPECT_LE(r, 1.0);
  EXPECT_GE(r, 0.99);
}

TEST(Ranks, Examples) {
  EXPECT_EQ(rank_average_ties(V{10, 20, 30}), (V{1, 2, 3}));
  EXPECT_EQ(rank_average_ties(V{5, 5}), (V{1.5, 1.5}));
  EXPECT_EQ(rank_average_ties(V{1, 2, 2, 3}), (V{1, 2.5, 2.5, 4}));
  EXPECT_EQ(rank_average_ties(V{3, 1, 2}), (V{3, 1, 2}));
  EXPECT_EQ(rank_average_ties(V{7, 7, 7}), (V{2, 2, 2}));
  EXPECT_THROW((void)rank_average_ties(V{1, std::numeric_limits<double>::quiet_NaN()}), Error);
}

TEST(Ranks, RanksSumToTriangularNumber) {
  CounterRng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    V x(n);
    for (auto& v : x) v = static_cast<double>(rng.below(8));
    double sum = 0;
    for (double r : rank_average_ties(x)) sum += r;
    ASSERT_DOUBLE_EQ(sum, n * (n + 1) / 2.0);
  }
}

TEST(Spearman, Examples) {
  EXPECT_DOUBLE_EQ(spearman(V{1, 2, 3, 4}, V{4, 3, 2, 1}).value, -1.0);
  EXPECT_NEAR(spearman(V{1, 2, 3, 4}, V{1, 3, 2, 4}).value, 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(spearman(V{1, 2, 3, 4}, V{1, 8, 27, 64}).value, 1.0);
  EXPECT_TRUE(spearman(V{1, 2, 3}, V{4, 4, 4}).degenerate);
}

TEST(Spearman, InvariantUnderIncreasingTransforms) {
  CounterRng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(25);
    V x(n), y(n), ex(n), cube(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(-3, 3);
      y[i] = rng.uniform(-3, 3);
      ex[i] = std::exp(x[i]);
      cube[i] = y[i] * y[i] * y[i] + 2.0;
    }
    ASSERT_DOUBLE_EQ(spearman(ex, cube).value, spearman(x, y).value);
  }
}

TEST(Spearman, EqualsPearsonOfRanks) {
  const V x{3, 1, 4, 1, 5, 9, 2, 6};
  const V y{2, 7, 1, 8, 2, 8, 1, 8};
  EXPECT_EQ(spearman(x, y).value, pearson(rank_average_ties(x), rank_average_ties(y)).value);
}

}  // namespace
}  // namespace muse
