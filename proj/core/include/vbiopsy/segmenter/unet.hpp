#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::segmenter {

struct SegmenterConfig {
  std::vector<std::int64_t> widths{8, 16, 32};  // one entry per resolution level
  int epochs = 30;
  int batch_size = 2;
  double learning_rate = 3e-3;
  double dice_weight = 1.0;  // loss = CE + dice_weight * (1 - soft Dice)
  imaging::LabelScheme target = imaging::LabelScheme::Gland;
  Vec3 spacing{1.5, 1.5, 3.0};  // spacing the model is trained and run at
  std::uint64_t rng_seed = 0;

  void validate() const;
  std::int64_t classes() const { return imaging::max_label(target) + 1; }
};

nlohmann::json to_json(const SegmenterConfig& cfg);
SegmenterConfig segmenter_config_from_json(const nlohmann::json& j);

/// Residual conv pair with instance norm; the skip is a 1x1x1 projection when widths differ.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::InstanceNorm3d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(ResBlock);

/// In-plane pooling only: slices are thick, so z is never downsampled.
class UNet3dImpl : public torch::nn::Module {
 public:
  UNet3dImpl(std::int64_t in_channels, std::int64_t classes, const std::vector<std::int64_t>& widths);
  /// [B, C, z, y, x] -> logits [B, classes, z, y, x]; y/x must be multiples of 2^(levels-1).
  torch::Tensor forward(torch::Tensor x);
  std::int64_t divisor() const { return std::int64_t{1} << (encoders_.size() - 1); }

 private:
  std::vector<ResBlock> encoders_;
  std::vector<torch::nn::ConvTranspose3d> ups_;
  std::vector<ResBlock> decoders_;
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(UNet3d);

struct SegmenterEpoch {
  int epoch = 0;
  double loss = 0.0;
  double val_dice = 0.0;
};

struct SegmenterState {
  SegmenterConfig config;
  UNet3d net{nullptr};
  std::vector<SegmenterEpoch> curve;
  int best_epoch = -1;
};

struct SegmentationSample {
  imaging::Volume3D image;
  imaging::LabelMask target;
};

/// Untrained model with seeded initialization.
SegmenterState init_segmenter(const SegmenterConfig& cfg);

/// Adam on CE + soft Dice. Keeps the epoch with the best mean foreground DSC
/// on `val` (on `train` when `val` is empty).
SegmenterState train_segmenter(const std::vector<SegmentationSample>& train, const std::vector<SegmentationSample>& val,
                               const SegmenterConfig& cfg);

/// Argmax labels in the model's scheme, same geometry as `vol`.
imaging::LabelMask segment(const imaging::Volume3D& vol, const SegmenterState& state);

/// Mean DSC over foreground labels of `state.config.target`.
double mean_foreground_dice(const imaging::LabelMask& pred, const imaging::LabelMask& truth);

void save_segmenter(const std::filesystem::path& dir, const SegmenterState& state);
SegmenterState load_segmenter(const std::filesystem::path& dir);

}  // namespace vbiopsy::segmenter
