#include "vbiopsy/metrics/classification.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::metrics {

double MetricValue::get(const char* name) const {
  require(value.has_value(), ErrorCode::DegenerateInput, std::string(name) + " is undefined: " + undefined_reason);
  return *value;
}

namespace {

void check_binary(std::span<const int> labels, const char* what) {
  for (int v : labels) {
    require(v == 0 || v == 1, ErrorCode::InvalidArgument, std::string(what) + " must be 0 or 1");
  }
}

MetricValue ratio(std::size_t num, std::size_t den, const char* reason) {
  if (den == 0) return MetricValue::undefined(reason);
  return MetricValue::of(static_cast<double>(num) / static_cast<double>(den));
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorCode::InvalidArgument, "scores and labels differ in length");
  check_binary(labels, "labels");
  std::size_t n_pos = 0;
  for (int v : labels) n_pos += static_cast<std::size_t>(v);
  const std::size_t n_neg = labels.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorCode::DegenerateInput, "roc_auc needs both classes present");
  for (double s : scores) require(std::isfinite(s), ErrorCode::NonFinite, "scores must be finite");

  // Sort once; within a tie block every positive beats the negatives below the
  // block and ties with the negatives inside it. Counts stay integral (x2).
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double twice_wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_block = 0, neg_block = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_block : neg_block) += 1;
      ++j;
    }
    twice_wins += static_cast<double>(pos_block) * (2.0 * static_cast<double>(neg_below) + static_cast<double>(neg_block));
    neg_below += neg_block;
    i = j;
  }
  return (twice_wins / 2.0) / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels) {
  require(predictions.size() == labels.size(), ErrorCode::InvalidArgument, "predictions and labels differ in length");
  check_binary(predictions, "predictions");
  check_binary(labels, "labels");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      (predictions[i] == 1 ? c.tp : c.fn) += 1;
    } else {
      (predictions[i] == 1 ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

MetricsReport confusion_metrics(std::span<const int> predictions, std::span<const int> labels) {
  const auto c = confusion(predictions, labels);
  MetricsReport r;
  r.counts = c;
  r.n_pos = c.tp + c.fn;
  r.n_neg = c.tn + c.fp;
  r.sensitivity = ratio(c.tp, c.tp + c.fn, "no positive labels");
  r.specificity = ratio(c.tn, c.tn + c.fp, "no negative labels");
  if (r.sensitivity.defined() && r.specificity.defined()) {
    r.balanced_accuracy = MetricValue::of((*r.sensitivity.value + *r.specificity.value) / 2.0);
  } else {
    r.balanced_accuracy = MetricValue::undefined("sensitivity or specificity undefined");
  }
  // Harmonic mean of precision and recall, written as 2TP / (2TP + FP + FN).
  r.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "no positive labels or predictions");
  r.accuracy = ratio(c.tp + c.tn, labels.size(), "empty input");
  return r;
}

MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels, double threshold) {
  require(scores.size() == labels.size(), ErrorCode::InvalidArgument, "scores and labels differ in length");
  std::vector<int> preds(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= threshold ? 1 : 0;
  MetricsReport r = confusion_metrics(preds, labels);
  r.threshold = threshold;
  if (r.n_pos > 0 && r.n_neg > 0) {
    r.auc = MetricValue::of(roc_auc(scores, labels));
    r.composite_score = MetricValue::of(composite_score(r));
  } else {
    r.auc = MetricValue::undefined("single-class labels");
    r.composite_score = MetricValue::undefined("auc undefined");
  }
  return r;
}

double composite_score(double auc, double balanced_accuracy, double sensitivity, double specificity) {
  for (double v : {auc, balanced_accuracy, sensitivity, specificity}) {
    require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument,
            "composite score inputs must lie in [0,1]");
  }
  return 0.4 * auc + 0.2 * balanced_accuracy + 0.2 * sensitivity + 0.2 * specificity;
}

double composite_score(const MetricsReport& report) {
  return composite_score(report.auc.get("auc"), report.balanced_accuracy.get("balanced_accuracy"),
                         report.sensitivity.get("sensitivity"), report.specificity.get("specificity"));
}

KappaResult cohens_kappa(std::span<const int> a, std::span<const int> b) {
  require(a.size() == b.size(), ErrorCode::InvalidArgument, "kappa ratings differ in length");
  require(!a.empty(), ErrorCode::InvalidArgument, "kappa needs at least one rating");
  const auto n = static_cast<double>(a.size());
  std::map<int, std::pair<std::size_t, std::size_t>> marginals;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    marginals[a[i]].first += 1;
    marginals[b[i]].second += 1;
    agree += a[i] == b[i] ? 1 : 0;
  }
  const double p_o = static_cast<double>(agree) / n;
  double p_e = 0.0;
  for (const auto& [_, m] : marginals) p_e += (static_cast<double>(m.first) / n) * (static_cast<double>(m.second) / n);
  if (p_e >= 1.0) return {1.0, true};
  return {(p_o - p_e) / (1.0 - p_e), false};
}

nlohmann::json to_json(const MetricValue& v) {
  if (v.defined()) return *v.value;
  return {{"value", nullptr}, {"undefined_reason", v.undefined_reason}};
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  nlohmann::json undefined = nlohmann::json::object();
  auto put = [&](const char* name, const MetricValue& v) {
    j[name] = v.defined() ? nlohmann::json(*v.value) : nlohmann::json(nullptr);
    if (!v.defined()) undefined[name] = v.undefined_reason;
  };
  put("auc", r.auc);
  put("sensitivity", r.sensitivity);
  put("specificity", r.specificity);
  put("balanced_accuracy", r.balanced_accuracy);
  put("f1", r.f1);
  put("accuracy", r.accuracy);
  put("composite_score", r.composite_score);
  j["threshold"] = r.threshold;
  j["n_pos"] = r.n_pos;
  j["n_neg"] = r.n_neg;
  j["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}};
  j["undefined"] = undefined;
  return j;
}

}  // namespace vbiopsy::metrics
