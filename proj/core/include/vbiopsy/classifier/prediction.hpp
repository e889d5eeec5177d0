#pragma once

#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <vector>

namespace vbiopsy::classifier {

struct RiskPrediction {
  std::string case_id;
  double probability = 0.5;
  double logit = 0.0;
  std::string model_tag;
  std::string patch_scale;
  /// Filled for ensembles: "<tag>@<scale>" of every member, in input order.
  std::vector<std::string> members;

  static RiskPrediction from_logit(std::string case_id, double logit, std::string tag, std::string scale);
};

double sigmoid(double logit);
double logit_of(double probability);

/// Arithmetic mean of member probabilities; logit is recomputed from the mean.
RiskPrediction ensemble_predict(std::span<const RiskPrediction> members);

nlohmann::json to_json(const RiskPrediction& p);
RiskPrediction prediction_from_json(const nlohmann::json& j);

}  // namespace vbiopsy::classifier
