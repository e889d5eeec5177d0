#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "vbiopsy/common/error.hpp"
#include "vbiopsy/metrics/classification.hpp"
#include "vbiopsy/metrics/trial.hpp"
#include "test_oracles.hpp"

namespace vbiopsy::metrics {
namespace {

TEST(RocAuc, Trivial) {
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, y), 0.5);
  EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), Error);
}

TEST(RocAuc, MatchesPairCountingOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto [s, y] = oracle::random_scores(rng, 20, trial % 3 == 0);
    EXPECT_EQ(roc_auc(s, y), oracle::pair_count_auc(s, y)) << trial;
  }
}

TEST(RocAuc, ComplementAndMonotoneInvariance) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto [s, y] = oracle::random_scores(rng, 30, false);
    std::vector<double> neg(s.size()), warped(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      neg[i] = -s[i];
      warped[i] = std::exp(3.0 * s[i]) + 2.0;
    }
    EXPECT_NEAR(roc_auc(s, y) + roc_auc(neg, y), 1.0, 1e-12);
    EXPECT_EQ(roc_auc(s, y), roc_auc(warped, y));
  }
}

TEST(ConfusionMetrics, HandFixture) {
  // TP=3, FN=1, TN=4, FP=2
  const std::vector<int> pred{1, 1, 1, 0, 0, 0, 0, 0, 1, 1};
  const std::vector<int> y{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  const auto r = confusion_metrics(pred, y);
  EXPECT_EQ(r.counts.tp, 3u);
  EXPECT_EQ(r.counts.fn, 1u);
  EXPECT_EQ(r.counts.tn, 4u);
  EXPECT_EQ(r.counts.fp, 2u);
  EXPECT_DOUBLE_EQ(*r.sensitivity.value, 0.75);
  EXPECT_DOUBLE_EQ(*r.specificity.value, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.balanced_accuracy.value, 17.0 / 24.0);
  EXPECT_DOUBLE_EQ(*r.f1.value, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.accuracy.value, 0.7);
  EXPECT_FALSE(r.auc.defined());
}

TEST(ConfusionMetrics, PerfectAndUndefined) {
  const std::vector<int> y{1, 0, 1, 0};
  const auto r = confusion_metrics(y, y);
  EXPECT_EQ(*r.sensitivity.value, 1.0);
  EXPECT_EQ(*r.specificity.value, 1.0);
  EXPECT_EQ(*r.balanced_accuracy.value, 1.0);
  EXPECT_EQ(*r.f1.value, 1.0);

  const std::vector<int> neg{0, 0, 0};
  const auto u = confusion_metrics(std::vector<int>{0, 1, 0}, neg);
  EXPECT_FALSE(u.sensitivity.defined());
  EXPECT_FALSE(u.sensitivity.undefined_reason.empty());
  EXPECT_FALSE(u.balanced_accuracy.defined());
  EXPECT_TRUE(u.specificity.defined());
  EXPECT_THROW(composite_score(u), Error);
  EXPECT_TRUE(to_json(u.sensitivity).contains("undefined_reason"));
}

TEST(ConfusionMetrics, BalancedAccuracyIdentity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto [s, y] = oracle::random_scores(rng, 25, true);
    const auto r = evaluate_scores(s, y, 0.5);
    EXPECT_EQ(*r.balanced_accuracy.value, (*r.sensitivity.value + *r.specificity.value) / 2.0);
    EXPECT_TRUE(r.composite_score.defined());
  }
}

TEST(CompositeScore, PaperRows) {
  EXPECT_NEAR(composite_score(0.716, 0.637, 0.472, 0.802), 0.669, 1e-3);
  EXPECT_NEAR(composite_score(0.722, 0.720, 0.706, 0.733), 0.720, 1e-3);
  EXPECT_NEAR(composite_score(0.793, 0.738, 0.765, 0.711), 0.760, 1e-3);
  EXPECT_DOUBLE_EQ(composite_score(1, 1, 1, 1), 1.0);
  EXPECT_THROW(composite_score(1.1, 0.5, 0.5, 0.5), Error);
  EXPECT_THROW(composite_score(0.5, -0.1, 0.5, 0.5), Error);
}

TEST(CompositeScore, MonotoneInEachArgument) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<double, 4> a{u(rng), u(rng), u(rng), u(rng)};
    const double base = composite_score(a[0], a[1], a[2], a[3]);
    for (std::size_t k = 0; k < 4; ++k) {
      auto b = a;
      b[k] = b[k] + (1.0 - b[k]) * u(rng);
      EXPECT_GE(composite_score(b[0], b[1], b[2], b[3]), base);
    }
  }
}

TEST(Kappa, Fixtures) {
  const std::vector<int> a{1, 1, 0, 0}, b{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(cohens_kappa(a, b).value, 0.0);
  EXPECT_DOUBLE_EQ(cohens_kappa(a, a).value, 1.0);
  EXPECT_FALSE(cohens_kappa(a, a).degenerate);
  const std::vector<int> c{1, 1, 1};
  const auto k = cohens_kappa(c, c);
  EXPECT_EQ(k.value, 1.0);
  EXPECT_TRUE(k.degenerate);
  EXPECT_THROW(cohens_kappa(a, c), Error);
  // p_o = 0.8, p_e = 0.6*0.4 + 0.4*0.6 = 0.48 -> (0.8-0.48)/0.52
  const std::vector<int> r1{1, 1, 1, 0, 0}, r2{1, 1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(cohens_kappa(r1, r2).value, (0.8 - 0.48) / 0.52);
}

TEST(Kappa, LabelSwapSymmetry) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> a(15), b(15);
    for (auto& v : a) v = static_cast<int>(rng() % 2);
    for (auto& v : b) v = static_cast<int>(rng() % 2);
    a[0] = 0, a[1] = 1, b[0] = 1, b[1] = 0;
    std::vector<int> sa(a.size()), sb(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) sa[i] = 1 - a[i], sb[i] = 1 - b[i];
    EXPECT_NEAR(cohens_kappa(a, b).value, cohens_kappa(sa, sb).value, 1e-12);
    EXPECT_NEAR(cohens_kappa(a, b).value, cohens_kappa(b, a).value, 1e-12);
    EXPECT_EQ(cohens_kappa(a, a).value, 1.0);
  }
}

TEST(TrialReport, FigureSixFixture) {
  const auto fx = oracle::figure6_fixture();
  const auto r = trial_report(fx.sessions, fx.truth, fx.ai);
  ASSERT_EQ(r.phases.size(), 2u);
  EXPECT_NEAR(r.phases.at(TrialPhase::Unaided).mean_accuracy, 0.72, 1e-12);
  EXPECT_NEAR(r.phases.at(TrialPhase::AiAssisted).mean_accuracy, 0.77, 1e-12);
  EXPECT_NEAR(r.phases.at(TrialPhase::Unaided).time.mean_minutes, 5.3, 1e-12);
  EXPECT_NEAR(r.phases.at(TrialPhase::AiAssisted).time.mean_minutes, 3.1, 1e-12);
  ASSERT_TRUE(r.ai_alone.has_value());
  EXPECT_DOUBLE_EQ(r.ai_alone->accuracy, 0.75);
  std::size_t total = 0;
  for (auto c : r.phases.at(TrialPhase::Unaided).time.histogram) total += c;
  EXPECT_EQ(total, r.phases.at(TrialPhase::Unaided).time.reads);
  const auto j = to_json(r);
  EXPECT_EQ(j["metadata"]["kappa_pairing"], "reader_vs_truth_mean");
}

TEST(TrialReport, PerfectReadersAndSinglePhase) {
  std::map<std::string, int> truth{{"a", 1}, {"b", 0}, {"c", 1}, {"d", 0}};
  ReaderSession s{"s1", "r1", ExperienceBand::Under5, TrialPhase::Unaided, {}, true};
  for (const auto& [id, y] : truth) s.entries.push_back({id, y, 318.0, false});
  const auto r = trial_report({s}, truth, {});
  ASSERT_EQ(r.phases.size(), 1u);
  EXPECT_EQ(r.phases.at(TrialPhase::Unaided).mean_accuracy, 1.0);
  EXPECT_EQ(r.phases.at(TrialPhase::Unaided).mean_kappa, 1.0);
  EXPECT_NEAR(r.phases.at(TrialPhase::Unaided).time.mean_minutes, 5.3, 1e-12);
  EXPECT_FALSE(r.ai_alone.has_value());
  EXPECT_THROW(trial_report({}, truth, {}), Error);
  s.entries.push_back({"zzz", 1, 10.0, false});
  EXPECT_THROW(trial_report({s}, truth, {}), Error);
}

TEST(TrialReport, SessionValidationAndJson) {
  ReaderSession s{"s1", "r1", ExperienceBand::Over10, TrialPhase::AiAssisted, {{"a", 1, 12.5, true}}, false};
  EXPECT_NO_THROW(s.validate());
  const auto back = session_from_json(to_json(s));
  EXPECT_EQ(back.entries[0].decision, 1);
  EXPECT_EQ(back.experience, ExperienceBand::Over10);
  s.entries[0].ai_prediction_shown = false;
  EXPECT_THROW(s.validate(), Error);
  s.entries[0] = {"a", 1, 0.0, true};
  EXPECT_THROW(s.validate(), Error);
}

}  // namespace
}  // namespace vbiopsy::metrics
