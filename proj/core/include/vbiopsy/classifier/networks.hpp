#pragma once

#include <torch/torch.h>

#include <array>
#include <nlohmann/json_fwd.hpp>
#include <vector>

namespace vbiopsy::classifier {

using Triple = std::array<std::int64_t, 3>;  // (x, y, z)

/// Common interface of both families: [B, C, z, y, x] (+ [B, k] clinical) -> logits [B].
class RiskNet : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& clinical) = 0;
  /// Last linear layer; zeroing it gives p = 0.5 for every input.
  virtual torch::nn::Linear output_layer() = 0;
};

struct CnnConfig {
  std::int64_t in_channels = 3;
  Triple stem_kernel{3, 3, 1};
  std::vector<Triple> strides{{2, 2, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 1}};
  std::vector<std::int64_t> widths{32, 64, 128, 256, 320};
  std::vector<std::int64_t> blocks{3, 4, 6, 3};
  Triple pool{4, 4, 4};
  std::vector<std::int64_t> head{20480, 4096, 1024, 1};
  double leaky_slope = 0.01;

  /// Checks widths.back() * prod(pool) == head[0] and head.back() == 1.
  void validate() const;
  static CnnConfig canonical() { return {}; }
  /// Same topology, narrow widths and one block per stage.
  static CnnConfig desk(std::int64_t in_channels);
};

nlohmann::json to_json(const CnnConfig& c);
CnnConfig cnn_config_from_json(const nlohmann::json& j);

/// Residual 3D block with instance norm; projects the skip when stride or width change.
class Res3dImpl : public torch::nn::Module {
 public:
  Res3dImpl(std::int64_t in, std::int64_t out, Triple stride_xyz, double slope);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::InstanceNorm3d norm1{nullptr}, norm2{nullptr};
  double slope_;
};
TORCH_MODULE(Res3d);

class CnnNetImpl : public RiskNet {
 public:
  explicit CnnNetImpl(const CnnConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& clinical) override;
  /// Pooled, flattened features fed to the head: [B, head[0]].
  torch::Tensor features(const torch::Tensor& x);
  torch::nn::Linear output_layer() override { return linears_.back(); }

 private:
  CnnConfig cfg_;
  torch::nn::Conv3d stem_{nullptr};
  torch::nn::InstanceNorm3d stem_norm_{nullptr};
  torch::nn::Sequential stages_{nullptr};
  std::vector<torch::nn::Linear> linears_;
};
TORCH_MODULE(CnnNet);

enum class Grouper { Attention, Mean };

struct FoundationConfig {
  std::int64_t in_channels = 3;
  std::vector<std::int64_t> encoder_widths{16, 32, 64};
  bool freeze_encoder = true;
  std::int64_t squeezer_dim = 512;
  Grouper grouper = Grouper::Attention;
  std::int64_t attention_dim = 128;
  std::int64_t head_hidden = 64;
  std::int64_t clinical_features = 0;
  double leaky_slope = 0.01;

  void validate() const;
};

nlohmann::json to_json(const FoundationConfig& c);
FoundationConfig foundation_config_from_json(const nlohmann::json& j);

/// Pluggable 2D slice encoder: strided convs then global max pooling, so a
/// small focal finding still moves the slice embedding.
class SliceEncoderImpl : public torch::nn::Module {
 public:
  SliceEncoderImpl(std::int64_t in_channels, const std::vector<std::int64_t>& widths, double slope = 0.01);
  /// [N, C, H, W] -> [N, out_dim()]
  torch::Tensor forward(const torch::Tensor& x);
  /// Activations after every conv layer, used as perceptual features.
  std::vector<torch::Tensor> layer_features(const torch::Tensor& x);
  std::int64_t out_dim() const { return out_dim_; }

 private:
  std::vector<torch::nn::Conv2d> convs_;
  std::int64_t out_dim_;
  double slope_;
};
TORCH_MODULE(SliceEncoder);

class FoundationNetImpl : public RiskNet {
 public:
  explicit FoundationNetImpl(const FoundationConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& clinical) override;
  /// [B, C, D, H, W] -> squeezed slice rows [B, D, squeezer_dim]
  torch::Tensor slice_embeddings(const torch::Tensor& x);
  /// Grouped embedding, clinical features appended when configured.
  torch::Tensor embedding(const torch::Tensor& x, const torch::Tensor& clinical);
  torch::nn::Linear output_layer() override { return out_; }
  SliceEncoder encoder() { return encoder_; }
  const FoundationConfig& config() const { return cfg_; }

 private:
  FoundationConfig cfg_;
  SliceEncoder encoder_{nullptr};
  torch::nn::Linear squeezer_{nullptr}, attn_v_{nullptr}, attn_w_{nullptr}, hidden_{nullptr}, out_{nullptr};
};
TORCH_MODULE(FoundationNet);

}  // namespace vbiopsy::classifier
