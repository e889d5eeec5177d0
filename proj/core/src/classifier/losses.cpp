#include "vbiopsy/classifier/losses.hpp"

#include <algorithm>
#include <cmath>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::classifier {

namespace {

void check_args(double p, int y) {
  require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorCode::InvalidArgument, "loss needs a probability in [0,1]");
  require(y == 0 || y == 1, ErrorCode::InvalidArgument, "loss target must be 0 or 1");
}

}  // namespace

double focal_loss(double p, int y, double alpha, double gamma) {
  check_args(p, y);
  require(alpha >= 0.0 && alpha <= 1.0 && gamma >= 0.0, ErrorCode::InvalidArgument, "focal loss needs alpha in [0,1], gamma >= 0");
  p = std::clamp(p, kProbabilityEps, 1.0 - kProbabilityEps);
  if (y == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double weighted_bce(double p, int y, double pos_weight) {
  check_args(p, y);
  require(pos_weight > 0.0, ErrorCode::InvalidArgument, "pos_weight must be > 0");
  p = std::clamp(p, kProbabilityEps, 1.0 - kProbabilityEps);
  return y == 1 ? -pos_weight * std::log(p) : -std::log(1.0 - p);
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha, double gamma) {
  require(alpha >= 0.0 && alpha <= 1.0 && gamma >= 0.0, ErrorCode::InvalidArgument, "focal loss needs alpha in [0,1], gamma >= 0");
  const auto p = torch::sigmoid(logits).clamp(kProbabilityEps, 1.0 - kProbabilityEps);
  const auto pos = -alpha * torch::pow(1.0 - p, gamma) * torch::log(p);
  const auto neg = -(1.0 - alpha) * torch::pow(p, gamma) * torch::log(1.0 - p);
  return (targets * pos + (1.0 - targets) * neg).mean();
}

torch::Tensor weighted_bce(const torch::Tensor& logits, const torch::Tensor& targets, double pos_weight) {
  require(pos_weight > 0.0, ErrorCode::InvalidArgument, "pos_weight must be > 0");
  const auto p = torch::sigmoid(logits).clamp(kProbabilityEps, 1.0 - kProbabilityEps);
  return -(pos_weight * targets * torch::log(p) + (1.0 - targets) * torch::log(1.0 - p)).mean();
}

}  // namespace vbiopsy::classifier
