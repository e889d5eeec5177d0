#pragma once

#include <torch/torch.h>

namespace vbiopsy::classifier {

inline constexpr double kProbabilityEps = 1e-7;
inline constexpr double kFocalAlpha = 0.8;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kPosWeight = 2.342;
/// Best value of the pos-weight grid search; shipped as a preset.
inline constexpr double kPosWeightGridBest = 2.699;

/// y=1: -alpha (1-p)^gamma log p; y=0: -(1-alpha) p^gamma log(1-p). p clamped to [eps, 1-eps].
double focal_loss(double p, int y, double alpha = kFocalAlpha, double gamma = kFocalGamma);
/// -[w y log p + (1-y) log(1-p)], p clamped to [eps, 1-eps].
double weighted_bce(double p, int y, double pos_weight = kPosWeight);

/// Batch means from logits; targets are 0/1 of the logits' dtype.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha = kFocalAlpha,
                         double gamma = kFocalGamma);
torch::Tensor weighted_bce(const torch::Tensor& logits, const torch::Tensor& targets, double pos_weight = kPosWeight);

}  // namespace vbiopsy::classifier
