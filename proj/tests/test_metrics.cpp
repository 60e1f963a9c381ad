#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lmvcat/metrics.hpp"
#include "test_util.hpp"

using namespace lmvcat;
using namespace lmvcat::testing;

namespace {

ErrorKind error_kind(const auto& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::InvalidArgument;
}

/// Scores drawn from a small grid so ties are common.
TensorD tied_scores(std::size_t n, std::size_t c, Rng& rng) {
  TensorD s = TensorD::matrix(n, c);
  for (double& x : s.data()) x = double(rng.below(5)) / 4.0;
  return s;
}

/// Random labels with at least one positive per row.
TensorD mixed_labels(std::size_t n, std::size_t c, Rng& rng) {
  TensorD y = random_binary(n, c, rng, 0.3);
  for (std::size_t i = 0; i < n; ++i) {
    y(i, rng.below(c)) = 1.0;
  }
  return y;
}

}  // namespace

TEST(Metrics, PerfectRankingScoresOne) {
  const TensorD y = TensorD::from_rows({{1, 0, 1, 0}, {0, 1, 0, 0}, {1, 1, 0, 1}});
  TensorD s = y;
  for (double& x : s.data()) x = 0.1 + 0.8 * x;
  const auto r = evaluate_metrics(s, y);
  EXPECT_EQ(r.ap, 1.0);
  EXPECT_EQ(r.one_minus_rl, 1.0);
  EXPECT_EQ(r.auc, 1.0);
}

TEST(Metrics, SinglePositiveRankedLast) {
  const TensorD s = TensorD::from_rows({{0.9, 0.5, 0.1}});
  const TensorD y = TensorD::from_rows({{0, 0, 1}});
  EXPECT_NEAR(average_precision(s, y).value, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(one_minus_ranking_loss(s, y).value, 0.0);
}

TEST(Metrics, HandComputedAveragePrecision) {
  // Ranking: k1 (pos), k0 (neg), k3 (pos), k2 (neg) -> (1/1 + 2/3) / 2.
  const TensorD s = TensorD::from_rows({{0.6, 0.9, 0.1, 0.3}});
  const TensorD y = TensorD::from_rows({{0, 1, 0, 1}});
  EXPECT_NEAR(average_precision(s, y).value, (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  // One of four (pos, neg) pairs inverted.
  EXPECT_NEAR(one_minus_ranking_loss(s, y).value, 0.75, 1e-15);
}

TEST(Metrics, MatchBruteForceOraclesWithTies) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(49), c = 2 + rng.below(19);
    const TensorD s = trial % 2 ? tied_scores(n, c, rng) : random_tensor({n, c}, rng);
    const TensorD y = mixed_labels(n, c, rng);
    std::size_t evaluated = 0;
    EXPECT_NEAR(average_precision(s, y).value, ap_oracle(s, y, &evaluated), 1e-9) << trial;
    EXPECT_EQ(average_precision(s, y).evaluated, evaluated);
    EXPECT_NEAR(one_minus_ranking_loss(s, y).value, rl_oracle(s, y), 1e-9) << trial;
    EXPECT_NEAR(macro_auc(s, y).value, auc_oracle(s, y), 1e-9) << trial;
  }
}

TEST(Metrics, TieConventions) {
  const TensorD s = TensorD::matrix(1, 3, 0.5);
  // Equal scores rank by label index: the positive at index 2 sits at rank 3.
  EXPECT_NEAR(average_precision(s, TensorD::from_rows({{0, 0, 1}})).value, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(average_precision(s, TensorD::from_rows({{1, 0, 0}})).value, 1.0);
  EXPECT_EQ(one_minus_ranking_loss(s, TensorD::from_rows({{0, 0, 1}})).value, 0.5);
  EXPECT_EQ(macro_auc(TensorD::matrix(4, 2, 0.3), TensorD::from_rows({{1, 0}, {0, 1}, {1, 1}, {0, 0}})).value, 0.5);
}

TEST(Metrics, SkippedCounts) {
  const TensorD s = TensorD::from_rows({{0.1, 0.2}, {0.3, 0.4}, {0.8, 0.1}});
  const TensorD y = TensorD::from_rows({{0, 0}, {1, 1}, {1, 0}});
  const auto r = evaluate_metrics(s, y);
  EXPECT_EQ(r.skipped_ap, 1u);
  EXPECT_EQ(r.skipped_rl, 2u);
  EXPECT_EQ(r.skipped_auc, 0u);
  EXPECT_EQ(r.n_eval, 3u);
  EXPECT_EQ(r.n_labels, 2u);
  EXPECT_EQ(r.ap, 1.0);
}

TEST(Metrics, DegenerateInputsThrow) {
  const TensorD s = TensorD::matrix(2, 3, 0.5);
  EXPECT_EQ(error_kind([&] { average_precision(s, TensorD::matrix(2, 3)); }), ErrorKind::NoEvaluableSamples);
  EXPECT_EQ(error_kind([&] { one_minus_ranking_loss(s, TensorD::matrix(2, 3, 1.0)); }),
            ErrorKind::NoEvaluableSamples);
  EXPECT_EQ(error_kind([&] { macro_auc(s, TensorD::from_rows({{1, 1, 1}, {1, 1, 1}})); }),
            ErrorKind::NoEvaluableLabels);
  EXPECT_EQ(error_kind([&] { average_precision(s, TensorD::matrix(3, 2)); }), ErrorKind::DimensionMismatch);
}

TEST(Metrics, InvariantToStrictlyMonotoneTransform) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const TensorD s = tied_scores(20, 6, rng), y = mixed_labels(20, 6, rng);
    TensorD t = s;
    for (double& x : t.data()) x = std::exp(3.0 * x) - 7.0;
    EXPECT_EQ(evaluate_metrics(s, y), evaluate_metrics(t, y));
  }
}

TEST(Metrics, InvariantToLabelPermutation) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 15, c = 7;
    const TensorD s = random_tensor({n, c}, rng), y = mixed_labels(n, c, rng);
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    TensorD sp = TensorD::matrix(n, c), yp = TensorD::matrix(n, c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        sp(i, k) = s(i, perm[k]);
        yp(i, k) = y(i, perm[k]);
      }
    const auto a = evaluate_metrics(s, y), b = evaluate_metrics(sp, yp);
    // Untied scores make AP and RL exact; the AUC mean reorders its summands.
    EXPECT_EQ(a.ap, b.ap);
    EXPECT_EQ(a.one_minus_rl, b.one_minus_rl);
    EXPECT_NEAR(a.auc, b.auc, 1e-12);
    EXPECT_EQ(a.skipped_auc, b.skipped_auc);
  }
}

TEST(Metrics, JsonRoundTrip) {
  Rng rng(14);
  const auto r = evaluate_metrics(random_tensor({9, 5}, rng), mixed_labels(9, 5, rng));
  const auto back = metrics_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(r, back);
}
