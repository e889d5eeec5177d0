#include "vbiopsy/classifier/prediction.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::classifier {

double sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

double logit_of(double p) {
  require(p > 0.0 && p < 1.0, ErrorCode::InvalidArgument, "logit needs a probability in (0, 1)");
  return std::log(p) - std::log1p(-p);
}

RiskPrediction RiskPrediction::from_logit(std::string case_id, double logit, std::string tag, std::string scale) {
  require(std::isfinite(logit), ErrorCode::NonFinite, "non-finite logit for " + case_id);
  return {std::move(case_id), sigmoid(logit), logit, std::move(tag), std::move(scale), {}};
}

RiskPrediction ensemble_predict(std::span<const RiskPrediction> members) {
  require(!members.empty(), ErrorCode::InvalidArgument, "ensemble needs at least one prediction");
  RiskPrediction out;
  out.case_id = members.front().case_id;
  double sum = 0.0;
  std::string scales;
  for (const auto& m : members) {
    require(m.case_id == out.case_id, ErrorCode::InvalidArgument,
            "ensemble members disagree on case id: " + out.case_id + " vs " + m.case_id);
    require(m.probability >= 0.0 && m.probability <= 1.0, ErrorCode::InvalidArgument, "member probability outside [0,1]");
    sum += m.probability;
    out.members.push_back(m.model_tag + "@" + m.patch_scale);
    scales += (scales.empty() ? "" : ",") + m.patch_scale;
  }
  if (members.size() == 1) {
    out = members.front();
    out.members = {members.front().model_tag + "@" + members.front().patch_scale};
    return out;
  }
  out.probability = sum / static_cast<double>(members.size());
  // keep p == sigmoid(logit) exact enough even for saturated means
  const double p = std::clamp(out.probability, 1e-15, 1.0 - 1e-15);
  out.logit = logit_of(p);
  out.model_tag = "ensemble";
  out.patch_scale = scales;
  return out;
}

nlohmann::json to_json(const RiskPrediction& p) {
  return {{"case_id", p.case_id},   {"probability", p.probability}, {"logit", p.logit},
          {"model_tag", p.model_tag}, {"patch_scale", p.patch_scale}, {"members", p.members}};
}

RiskPrediction prediction_from_json(const nlohmann::json& j) {
  RiskPrediction p;
  p.case_id = j.at("case_id").get<std::string>();
  p.probability = j.at("probability").get<double>();
  p.logit = j.value("logit", 0.0);
  p.model_tag = j.value("model_tag", std::string());
  p.patch_scale = j.value("patch_scale", std::string());
  p.members = j.value("members", std::vector<std::string>{});
  return p;
}

}  // namespace vbiopsy::classifier
