#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <vector>

#include "vbiopsy/classifier/networks.hpp"
#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::counterfactual {

struct LossWeights {
  double kl = 1e-6;
  double perceptual = 1e-3;
  double adversarial = 1e-2;
  int warmup_epochs = 10;
  void validate() const;
};

struct LossComponents {
  double reconstruction = 0.0;
  double kl = 0.0;
  double perceptual = 0.0;
  double adversarial = 0.0;
};

/// L_rec + w_kl L_kl + w_perc L_perc, plus w_adv L_adv once epoch >= warmup.
double vaegan_total_loss(const LossComponents& c, const LossWeights& w, int epoch);
torch::Tensor vaegan_total_loss(const torch::Tensor& rec, const torch::Tensor& kl, const torch::Tensor& perc,
                                const torch::Tensor& adv, const LossWeights& w, int epoch);

inline constexpr double kDiscEps = 1e-7;

/// Mean absolute error over all elements.
torch::Tensor l1_reconstruction(const torch::Tensor& x, const torch::Tensor& xbar);
/// KL(N(mu, exp(logvar)) || N(0, I)) summed over latent elements, averaged over
/// the batch (dim 0). Zero variance is rejected.
torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& logvar);
/// sum_l mean((phi_l(x) - phi_l(xbar))^2)
torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& fx, const std::vector<torch::Tensor>& fxbar);
/// mean log Disc(x) + mean log(1 - Disc(xbar)), eps-clamped.
torch::Tensor adversarial_term(const torch::Tensor& d_real, const torch::Tensor& d_fake);

struct VaeGanConfig {
  imaging::PatchSpec patch = imaging::PatchSpec::small();
  bool allow_patch_override = false;
  std::vector<std::int64_t> encoder_widths{16, 32};  // each level halves y and x
  std::int64_t latent_channels = 4;
  std::vector<std::int64_t> perceptual_widths{8, 16};
  std::vector<std::int64_t> discriminator_widths{8, 16};
  LossWeights weights{};
  int epochs = 1000;
  int batch_size = 4;
  int patience = 200;
  double generator_lr = 1e-4;
  double discriminator_lr = 1e-5;
  std::uint64_t rng_seed = 0;

  static VaeGanConfig desk();
  void validate() const;
};

nlohmann::json to_json(const VaeGanConfig& c);
VaeGanConfig vaegan_config_from_json(const nlohmann::json& j);

class VaeEncoderImpl : public torch::nn::Module {
 public:
  VaeEncoderImpl(const std::vector<std::int64_t>& widths, std::int64_t latent_channels);
  /// [B, 1, z, y, x] -> (mu, logvar), each [B, latent, z, y / 2^L, x / 2^L]
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv3d mu_{nullptr}, logvar_{nullptr};
};
TORCH_MODULE(VaeEncoder);

class VaeDecoderImpl : public torch::nn::Module {
 public:
  VaeDecoderImpl(const std::vector<std::int64_t>& widths, std::int64_t latent_channels);
  torch::Tensor forward(const torch::Tensor& z);

 private:
  torch::nn::Conv3d in_{nullptr}, out_{nullptr};
  std::vector<torch::nn::Conv3d> ups_;
  std::vector<torch::nn::InstanceNorm3d> norms_;
};
TORCH_MODULE(VaeDecoder);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const std::vector<std::int64_t>& widths);
  /// Likelihood of being real, in (0, 1): [B]
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Slicewise features of a frozen encoder; one entry per layer.
std::vector<torch::Tensor> perceptual_features(classifier::SliceEncoder& phi, const torch::Tensor& x);

struct VaeGanEpoch {
  int epoch = 0;
  LossComponents train{};
  double train_total = 0.0;
  LossComponents val{};
  double val_total = 0.0;
  double disc_real_mean = 0.0;
  double disc_fake_mean = 0.0;
};

struct VaeGanState {
  VaeGanConfig config;
  VaeEncoder encoder{nullptr};
  VaeDecoder decoder{nullptr};
  Discriminator discriminator{nullptr};
  classifier::SliceEncoder perceptual{nullptr};
  std::vector<VaeGanEpoch> curve;
  int best_epoch = -1;
  /// Held-out L1 of the untrained model, for before/after comparisons.
  double initial_val_l1 = 0.0;
};

VaeGanState init_vaegan(const VaeGanConfig& cfg);
/// Images are [1, z, y, x] or [z, y, x] tensors matching cfg.patch.size.
VaeGanState train_vaegan(const std::vector<torch::Tensor>& train, const std::vector<torch::Tensor>& val,
                         const VaeGanConfig& cfg);
/// Deterministic components with z = mu (no sampling), batched.
LossComponents evaluate_vaegan(VaeGanState& state, const std::vector<torch::Tensor>& images);
double mean_l1(VaeGanState& state, const std::vector<torch::Tensor>& images);

void save_vaegan(const std::filesystem::path& dir, const VaeGanState& state);
VaeGanState load_vaegan(const std::filesystem::path& dir);

}  // namespace vbiopsy::counterfactual
