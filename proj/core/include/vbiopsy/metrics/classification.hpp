#pragma once

#include <cstddef>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vbiopsy::metrics {

/// A rate that may be undefined (e.g. sensitivity without positive labels).
/// Undefined values carry the reason instead of a silent zero.
struct MetricValue {
  std::optional<double> value;
  std::string undefined_reason;

  static MetricValue of(double v) { return {v, {}}; }
  static MetricValue undefined(std::string reason) { return {std::nullopt, std::move(reason)}; }
  bool defined() const { return value.has_value(); }
  /// Throws DegenerateInput with the stored reason when undefined.
  double get(const char* name) const;
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricsReport {
  MetricValue auc = MetricValue::undefined("not computed");
  MetricValue sensitivity;
  MetricValue specificity;
  MetricValue balanced_accuracy;
  MetricValue f1;
  MetricValue accuracy;
  MetricValue composite_score = MetricValue::undefined("not computed");
  double threshold = 0.5;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  ConfusionCounts counts;
};

inline constexpr double kDefaultThreshold = 0.5;

/// Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie). Needs both classes.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels);
/// Sensitivity, specificity, balanced accuracy, F1 and accuracy from hard
/// predictions. AUC and the composite score stay undefined.
MetricsReport confusion_metrics(std::span<const int> predictions, std::span<const int> labels);

/// Full report from probabilities: decisions are score >= threshold.
MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                              double threshold = kDefaultThreshold);

/// 0.4 AUC + 0.2 BA + 0.2 sensitivity + 0.2 specificity; inputs must lie in [0,1].
double composite_score(double auc, double balanced_accuracy, double sensitivity, double specificity);
/// Refuses (DegenerateInput) when any ingredient is undefined.
double composite_score(const MetricsReport& report);

struct KappaResult {
  double value = 0.0;
  /// Set when chance agreement is 1 and kappa was defined as 1 by convention.
  bool degenerate = false;
};

KappaResult cohens_kappa(std::span<const int> ratings_a, std::span<const int> ratings_b);

nlohmann::json to_json(const MetricValue& v);
nlohmann::json to_json(const MetricsReport& report);

}  // namespace vbiopsy::metrics
