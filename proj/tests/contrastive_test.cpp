#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "uemb/contrastive.hpp"

namespace uemb {
namespace {

using testing::random_matrix;
using testing::rel_err;

LossConfig cfg_at(double tau, bool masking = true) {
  LossConfig c;
  c.temperature = tau;
  c.false_negative_masking = masking;
  return c;
}

ContrastiveBatch single_query(DenseMatrix q, DenseMatrix targets) {
  return {std::move(q), std::move(targets), {0}, {}, {}, {}};
}

// Product form: -log(phi+ / (phi+ + sum phi-)), phi = exp(cos / tau).
// Test-only oracle; representable only for moderate temperatures.
double product_form_loss(const ContrastiveBatch& b, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < b.queries.rows(); ++i) {
    const double pos = std::exp(cosine_sim(b.queries.row(i), b.targets.row(b.positive_index[i])) / tau);
    double denom = 0.0;
    for (std::size_t j = 0; j < b.targets.rows(); ++j) {
      if (!b.excluded.empty() && b.excluded[i * b.targets.rows() + j]) continue;
      denom += std::exp(cosine_sim(b.queries.row(i), b.targets.row(j)) / tau);
    }
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(b.queries.rows());
}

ContrastiveBatch random_batch(Rng& rng, std::size_t b, std::size_t m, std::size_t d) {
  ContrastiveBatch batch{random_matrix(b, d, rng), random_matrix(m, d, rng), {}, {}, {}, {}};
  for (std::size_t i = 0; i < b; ++i) batch.positive_index.push_back(i % m);
  return batch;
}

TEST(InfoNceForward, EqualLogitsGiveLogK) {
  for (std::size_t k : {2u, 4u, 16u}) {
    DenseMatrix targets(k, 2);
    for (std::size_t j = 0; j < k; ++j) targets(j, 1) = 1.0;  // all orthogonal to the query
    for (double tau : {1.0, 0.1, 0.02}) {
      EXPECT_NEAR(info_nce_forward(single_query(DenseMatrix{{1, 0}}, targets), cfg_at(tau)),
                  std::log(static_cast<double>(k)), 1e-12);
    }
  }
}

TEST(InfoNceForward, EqualCosineAnyValue) {
  for (double c : {-0.9, -0.3, 0.0, 0.5, 0.99}) {
    const double s = std::sqrt(1 - c * c);
    DenseMatrix targets{{c, s}, {c, -s}};
    EXPECT_NEAR(info_nce_forward(single_query(DenseMatrix{{1, 0}}, targets), cfg_at(0.02)), std::log(2.0),
                1e-12);
  }
}

TEST(InfoNceForward, TwoCandidateSoftmaxOracle) {
  // logits 1 and 0: -log(e / (e + 1)) = log(1 + e^-1).
  const double got = info_nce_forward(single_query(DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}, {0, 1}}), cfg_at(1.0));
  EXPECT_NEAR(got, std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(got, 0.313262, 1e-6);
}

TEST(InfoNceForward, MatchesProductForm) {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    auto b = random_batch(rng, 1 + rng.below(8), 2 + rng.below(10), 1 + rng.below(16));
    for (double tau : {0.2, 0.5, 1.0, 5.0}) {
      EXPECT_NEAR(info_nce_forward(b, cfg_at(tau)), product_form_loss(b, tau), 1e-10);
    }
  }
}

TEST(InfoNceForward, FiniteAtSmallTemperatureWithManyTargets) {
  Rng rng(2);
  auto b = random_batch(rng, 64, 1024, 16);
  // Aligning the positives drives logits to 1 / 0.02 = 50.
  for (std::size_t i = 0; i < 64; ++i) {
    std::copy(b.queries.row(i).begin(), b.queries.row(i).end(), b.targets.row(b.positive_index[i]).begin());
  }
  const auto out = info_nce_backward(b, cfg_at(0.02));
  EXPECT_TRUE(std::isfinite(out.loss));
  for (double v : out.d_query.values()) ASSERT_TRUE(std::isfinite(v));
  for (double v : out.d_target.values()) ASSERT_TRUE(std::isfinite(v));
}

TEST(InfoNceForward, NonNegativeAndScaleInvariant) {
  Rng rng(41);
  for (int t = 0; t < 200; ++t) {
    auto b = random_batch(rng, 1 + rng.below(6), 2 + rng.below(8), 2 + rng.below(10));
    const auto cfg = cfg_at(t % 2 ? 0.02 : 0.7);
    const double base = info_nce_forward(b, cfg);
    EXPECT_GE(base, 0.0);
    auto scaled = b;
    const double c = std::exp(rng.uniform(-3.0, 3.0));
    for (double& v : scaled.queries.row(0)) v *= c;
    for (double& v : scaled.targets.row(scaled.targets.rows() - 1)) v *= c;
    EXPECT_LT(std::abs(info_nce_forward(scaled, cfg) - base), 1e-10);
  }
}

TEST(InfoNceForward, Errors) {
  EXPECT_THROW(info_nce_forward(single_query(DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}}), cfg_at(1.0)),
               DegenerateInputError);
  EXPECT_THROW(info_nce_forward(single_query(DenseMatrix{{0, 0}}, DenseMatrix{{1, 0}, {0, 1}}), cfg_at(1.0)),
               DegenerateInputError);
  EXPECT_THROW(info_nce_forward(single_query(DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}, {0, 1}}), cfg_at(0.0)),
               ValidationError);
  ContrastiveBatch bad = single_query(DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}, {0, 1}});
  bad.positive_index = {2};
  EXPECT_THROW(info_nce_forward(bad, cfg_at(1.0)), DimensionError);
}

TEST(InfoNceBackward, SaturatedBatchHasVanishingGradient) {
  // Positive cos = 1, negatives cos = -1.
  ContrastiveBatch b{DenseMatrix{{1, 0}, {0, 1}}, DenseMatrix{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}, {0, 1}, {}, {}, {}};
  // Query 0 sees target 1 at cos 0, so give each query its own antipodal negatives only.
  b.excluded = {0, 1, 0, 1,
                1, 0, 1, 0};
  const auto out = info_nce_backward(b, cfg_at(0.02));
  double nq = 0.0, nt = 0.0;
  for (double v : out.d_query.values()) nq += v * v;
  for (double v : out.d_target.values()) nt += v * v;
  EXPECT_LT(std::sqrt(nq), 1e-10);
  EXPECT_LT(std::sqrt(nt), 1e-10);
}

TEST(InfoNceForward, SaturatedLossKeepsRelativePrecision) {
  // Positive cos 1, one negative at cos -1: loss = log1p(exp(-2 / tau)).
  for (double tau : {0.1, 0.05, 0.02, 0.01}) {
    const auto b = single_query(DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}, {-1, 0}});
    const double expect = std::log1p(std::exp(-2.0 / tau));
    EXPECT_GT(info_nce_forward(b, cfg_at(tau)), 0.0);
    EXPECT_LT(rel_err(info_nce_forward(b, cfg_at(tau)), expect, 1e-300), 1e-12) << tau;
    const auto out = info_nce_backward(b, cfg_at(tau));
    EXPECT_LT(rel_err(out.d_logits(0, 1), -out.d_logits(0, 0), 1e-300), 1e-12);
    EXPECT_GT(out.d_logits(0, 1), 0.0);
  }
}

TEST(InfoNceBackward, LogitGradientRowsSumToZero) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    auto b = random_batch(rng, 1 + rng.below(8), 2 + rng.below(12), 1 + rng.below(16));
    const auto out = info_nce_backward(b, cfg_at(t % 3 == 0 ? 0.02 : 0.3));
    for (std::size_t i = 0; i < out.d_logits.rows(); ++i) {
      double s = 0.0;
      for (double v : out.d_logits.row(i)) s += v;
      EXPECT_LT(std::abs(s), 1e-12);
    }
  }
}

// Central differences of the forward loss with respect to every embedding entry.
double max_fd_error(const ContrastiveBatch& batch, const LossConfig& cfg, double step, double floor) {
  const auto out = info_nce_backward(batch, cfg);
  double worst = 0.0;
  auto check = [&](DenseMatrix ContrastiveBatch::*which, const DenseMatrix& analytic) {
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      ContrastiveBatch plus = batch, minus = batch;
      (plus.*which).values()[k] += step;
      (minus.*which).values()[k] -= step;
      const double numeric = (info_nce_forward(plus, cfg) - info_nce_forward(minus, cfg)) / (2 * step);
      worst = std::max(worst, rel_err(analytic.values()[k], numeric, floor));
    }
  };
  check(&ContrastiveBatch::queries, out.d_query);
  check(&ContrastiveBatch::targets, out.d_target);
  return worst;
}

TEST(InfoNceBackward, MatchesFiniteDifferencesSmallBatch) {
  Rng rng(3);
  const auto b = random_batch(rng, 3, 4, 4);
  EXPECT_LT(max_fd_error(b, cfg_at(0.5), 1e-6, 1e-6), 1e-6);
}

TEST(InfoNceBackward, MatchesFiniteDifferencesAcrossTemperatures) {
  Rng rng(1234);
  for (int t = 0; t < 30; ++t) {
    for (double tau : {1.0, 0.1, 0.02}) {
      auto b = random_batch(rng, 1 + rng.below(8), 2 + rng.below(8), 1 + rng.below(16));
      EXPECT_LT(max_fd_error(b, cfg_at(tau), 1e-6, 1e-3), 1e-5) << "tau " << tau;
    }
  }
}

TEST(MaskFalseNegatives, DistinctIdsUnchanged) {
  Rng rng(1);
  auto b = random_batch(rng, 2, 3, 4);
  b.target_ids = {"x", "y", "z"};
  const auto masked = mask_false_negatives(b);
  for (auto f : masked.excluded) EXPECT_EQ(f, 0);
  EXPECT_EQ(info_nce_forward(masked, cfg_at(0.1, false)), info_nce_forward(b, cfg_at(0.1, false)));
}

TEST(MaskFalseNegatives, DuplicatePositiveLeavesDenominator) {
  // Target 1 duplicates the positive of the only query.
  ContrastiveBatch b{DenseMatrix{{1, 0}}, DenseMatrix{{1, 0}, {0.9, 0.1}, {0, 1}}, {0}, {"p", "p", "n"}, {}, {}};
  const auto masked = mask_false_negatives(b);
  EXPECT_EQ(masked.excluded, (std::vector<std::uint8_t>{0, 1, 0}));
  // With the duplicate gone only target 2 (cos 0) competes: log(1 + e^{-1/tau}).
  EXPECT_NEAR(info_nce_forward(masked, cfg_at(0.5, false)), std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(info_nce_forward(b, cfg_at(0.5, true)), std::log1p(std::exp(-2.0)), 1e-12);
}

TEST(MaskFalseNegatives, SharedPositiveLowersLoss) {
  // Two queries whose positives are copies of the same target.
  ContrastiveBatch b{DenseMatrix{{1, 0.2}, {1, -0.1}}, DenseMatrix{{1, 0}, {1, 0}, {0, 1}}, {0, 1}, {"t", "t", "u"}, {}, {}};
  const auto masked = mask_false_negatives(b);
  EXPECT_EQ(masked.excluded, (std::vector<std::uint8_t>{0, 1, 0, 1, 0, 0}));
  const double unmasked = info_nce_forward(b, cfg_at(0.1, false));
  const double with_mask = info_nce_forward(masked, cfg_at(0.1, false));
  EXPECT_LT(with_mask, unmasked);
  // Independent oracle: each query's softmax over {t, u} only.
  const double expect = 0.5 * (product_form_loss({DenseMatrix{{1, 0.2}}, DenseMatrix{{1, 0}, {0, 1}}, {0}, {}, {}, {}}, 0.1) +
                               product_form_loss({DenseMatrix{{1, -0.1}}, DenseMatrix{{1, 0}, {0, 1}}, {0}, {}, {}, {}}, 0.1));
  EXPECT_NEAR(with_mask, expect, 1e-12);
}

TEST(HardNegatives, PooledVersusPerQuery) {
  // Targets 0,1 are positives; 2 is query 0's hard negative, 3 is query 1's.
  Rng rng(6);
  ContrastiveBatch b = random_batch(rng, 2, 4, 5);
  b.positive_index = {0, 1};
  b.hard_negative_rows = {{2}, {3}};
  LossConfig pooled = cfg_at(0.3);
  LossConfig per_query = cfg_at(0.3);
  per_query.hard_negative_policy = HardNegativePolicy::per_query;

  ContrastiveBatch restricted = b;
  restricted.excluded = {0, 0, 0, 1,
                         0, 0, 1, 0};
  EXPECT_NEAR(info_nce_forward(b, per_query), product_form_loss(restricted, 0.3), 1e-12);
  EXPECT_NEAR(info_nce_forward(b, pooled), product_form_loss(b, 0.3), 1e-12);
  const auto out = info_nce_backward(b, per_query);
  EXPECT_EQ(out.d_logits(0, 3), 0.0);
  EXPECT_EQ(out.d_logits(1, 2), 0.0);
}

}  // namespace
}  // namespace uemb
