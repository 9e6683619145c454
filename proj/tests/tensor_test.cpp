#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "uemb/tensor.hpp"

namespace uemb {
namespace {

using testing::random_matrix;
using testing::random_vector;

TEST(CosineSim, IdenticalDirectionIsOne) { EXPECT_DOUBLE_EQ(cosine_sim(RowVector{3, 0}, RowVector{3, 0}), 1.0); }

TEST(CosineSim, OrthogonalIsZero) { EXPECT_DOUBLE_EQ(cosine_sim(RowVector{1, 0}, RowVector{0, 1}), 0.0); }

TEST(CosineSim, MatchesHandOracle) {
  // dot = 2 + 2 + 4 = 8, both norms are 3.
  EXPECT_NEAR(cosine_sim(RowVector{1, 2, 2}, RowVector{2, 1, 2}), 8.0 / 9.0, 1e-15);
}

TEST(CosineSim, ZeroNormIsAnError) {
  EXPECT_THROW(cosine_sim(RowVector{0, 0}, RowVector{1, 0}), DegenerateInputError);
  EXPECT_THROW(cosine_sim(RowVector{1, 0}, RowVector{0, 0}), DegenerateInputError);
}

TEST(CosineSim, DimensionMismatch) {
  EXPECT_THROW(cosine_sim(RowVector{1, 0}, RowVector{1, 0, 0}), DimensionError);
}

TEST(CosineSim, ClampedAgainstDrift) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    auto v = random_vector(9, rng);
    const double c = cosine_sim(v, v);
    EXPECT_LE(c, 1.0);
    EXPECT_NEAR(c, 1.0, 1e-15);
  }
}

TEST(CosineSim, SymmetricAndScaleInvariant) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.below(32);
    auto a = random_vector(d, rng);
    auto b = random_vector(d, rng);
    EXPECT_LT(std::abs(cosine_sim(a, b) - cosine_sim(b, a)), 1e-15);
    const double c = std::exp(rng.uniform(-5.0, 5.0));
    RowVector scaled = a;
    for (std::size_t i = 0; i < d; ++i) scaled[i] *= c;
    EXPECT_LT(std::abs(cosine_sim(scaled, b) - cosine_sim(a, b)), 1e-12);
  }
}

TEST(SimilarityMatrix, IdentityPair) {
  const auto s = similarity_matrix(DenseMatrix::identity(2), DenseMatrix::identity(2));
  EXPECT_EQ(s, (DenseMatrix{{1, 0}, {0, 1}}));
}

TEST(SimilarityMatrix, SingleRowMatchesScalar) {
  const auto s = similarity_matrix(DenseMatrix{{1, 2, 2}}, DenseMatrix{{2, 1, 2}});
  ASSERT_EQ(s.rows(), 1u);
  ASSERT_EQ(s.cols(), 1u);
  EXPECT_NEAR(s(0, 0), 8.0 / 9.0, 1e-15);
}

TEST(SimilarityMatrix, SelfSimilarityDiagonal) {
  Rng rng(3);
  const auto q = random_matrix(3, 5, rng);
  const auto s = similarity_matrix(q, q);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s(i, i), 1.0, 1e-15);
}

TEST(SimilarityMatrix, EntriesEqualPairwiseCosine) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto q = random_matrix(1 + rng.below(6), 7, rng);
    const auto tm = random_matrix(1 + rng.below(6), 7, rng);
    const auto s = similarity_matrix(q, tm);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      for (std::size_t j = 0; j < tm.rows(); ++j) {
        EXPECT_NEAR(s(i, j), cosine_sim(q.row(i), tm.row(j)), 1e-12);
      }
    }
  }
}

TEST(SimilarityMatrix, ReportsOffendingRow) {
  DenseMatrix q{{1, 0}, {0, 0}};
  try {
    similarity_matrix(q, DenseMatrix::identity(2));
    FAIL() << "expected an error";
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("query row 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(similarity_matrix(DenseMatrix::identity(2), DenseMatrix::identity(3)), DimensionError);
}

TEST(LogSumExp, ClosedForms) {
  EXPECT_NEAR(log_sum_exp(RowVector{0, 0}), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(log_sum_exp(RowVector{50}), 50.0);
  // Oracle: 50 + log1p(exp(-50)), which rounds to exactly 50 in doubles.
  EXPECT_DOUBLE_EQ(log_sum_exp(RowVector{50, 0}), 50.0 + std::log1p(std::exp(-50.0)));
}

TEST(LogSumExp, FiniteWhereNaiveSumOverflows) {
  // 1024 logits of 1/0.02 * 15 = 750: exp(750) overflows a double.
  std::vector<double> v(1024, 750.0);
  ASSERT_TRUE(std::isinf(std::exp(750.0)));
  EXPECT_NEAR(log_sum_exp(v), 750.0 + std::log(1024.0), 1e-12);
}

TEST(LogSumExp, EmptyIsAnError) { EXPECT_THROW(log_sum_exp(std::vector<double>{}), DegenerateInputError); }

TEST(LogSumExp, BoundedByMaxAndLogLength) {
  Rng rng(13);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(1 + rng.below(50));
    for (double& x : v) x = rng.uniform(-100.0, 100.0);
    const double m = *std::max_element(v.begin(), v.end());
    const double l = log_sum_exp(v);
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GE(l, m);
    EXPECT_LE(l, m + std::log(static_cast<double>(v.size())) + 1e-12);
  }
}

TEST(L2Normalize, Examples) {
  const auto a = l2_normalize(RowVector{3, 4});
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(a[1], 0.8, 1e-15);
  EXPECT_EQ(l2_normalize(RowVector{0, 1, 0}), (RowVector{0, 1, 0}));
  const auto b = l2_normalize(RowVector{2, 2, 2, 2});
  for (double x : b) EXPECT_DOUBLE_EQ(x, 0.5);
  EXPECT_THROW(l2_normalize(RowVector{0, 0}), DegenerateInputError);
}

TEST(L2Normalize, UnitNorm) {
  Rng rng(17);
  for (int t = 0; t < 500; ++t) {
    const auto v = l2_normalize(random_vector(1 + rng.below(64), rng));
    EXPECT_NEAR(l2_norm(v), 1.0, 1e-12);
  }
}

TEST(DenseMatrix, RejectsNonFiniteAndBadShapes) {
  EXPECT_THROW(DenseMatrix(1, 2, std::vector<double>{1.0, std::nan("")}), DegenerateInputError);
  EXPECT_THROW(DenseMatrix(2, 2, std::vector<double>{1.0}), DimensionError);
  EXPECT_THROW((RowVector{1.0, std::numeric_limits<double>::infinity()}), DegenerateInputError);
}

}  // namespace
}  // namespace uemb
