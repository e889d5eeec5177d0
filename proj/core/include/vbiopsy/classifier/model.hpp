#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "vbiopsy/classifier/inputs.hpp"
#include "vbiopsy/classifier/losses.hpp"
#include "vbiopsy/classifier/networks.hpp"
#include "vbiopsy/classifier/prediction.hpp"
#include "vbiopsy/imaging/augment.hpp"

namespace vbiopsy::classifier {

enum class Family { Cnn, Foundation };
enum class LossKind { Focal, WeightedBce };
enum class OptimizerKind { Sgd, AdamW, Adam };
enum class Schedule { Cosine, Constant };

std::string_view to_string(Family f);
Family family_from_string(std::string_view name);
std::string_view to_string(LossKind k);
LossKind loss_from_string(std::string_view name);
std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view name);
std::string_view to_string(Schedule s);
Schedule schedule_from_string(std::string_view name);

/// Patch triples used on desk-scale phantoms (1.5 x 1.5 x 3 mm grids).
imaging::PatchSpec desk_patch(int scale_index);  // 0: 32, 1: 28, 2: 24 in-plane

struct ClassifierConfig {
  Family family = Family::Foundation;
  InputVariant variant = InputVariant::Gland;
  imaging::PatchSpec patch = imaging::PatchSpec::large();
  bool allow_patch_override = false;
  CnnConfig cnn = CnnConfig::canonical();
  FoundationConfig foundation{};
  int epochs = 200;
  int batch_size = 8;
  int accumulation_steps = 32;
  double learning_rate = 5e-4;
  double min_learning_rate = 0.0;
  double weight_decay = 1e-4;
  double momentum = 0.99;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  Schedule schedule = Schedule::Cosine;
  LossKind loss = LossKind::WeightedBce;
  double focal_alpha = kFocalAlpha;
  double focal_gamma = kFocalGamma;
  double pos_weight = kPosWeight;
  bool augment = false;
  imaging::AugmentationConfig augmentation{};
  std::uint64_t rng_seed = 0;

  /// Focal loss, momentum SGD lr 1e-3, wd 1e-6, cosine, 250 epochs, batch 6.
  static ClassifierConfig cnn_canonical();
  /// Weighted BCE 2.342, AdamW lr 5e-4, wd 1e-4, cosine, 200 epochs, 8 x 32 accumulation.
  static ClassifierConfig foundation_canonical();
  /// Small nets, desk patch, few epochs; the slice encoder trains because no
  /// pretrained weights exist.
  static ClassifierConfig desk(Family family, InputVariant variant, int scale_index = 0);

  void validate() const;
  /// e.g. "foundation+G"
  std::string model_tag() const;
  std::int64_t clinical_width() const { return uses_clinical(variant) ? 2 : 0; }
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

struct ClassifierSample {
  std::string case_id;
  imaging::PatchStack patch;
  std::vector<double> clinical;  // raw, standardized inside the model state
  int label = 0;
};

struct ClassifierEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> val_auc;
  double learning_rate = 0.0;
  std::size_t optimizer_steps = 0;
};

struct ClassifierState {
  ClassifierConfig config;
  std::shared_ptr<RiskNet> net;
  ClinicalStats clinical;
  std::vector<ClassifierEpoch> curve;
  int best_epoch = -1;
};

/// Samples consumed by each optimizer step in one epoch: full steps of
/// batch * accumulation samples, the remainder flushed as a final step.
std::vector<std::size_t> accumulation_plan(std::size_t samples, int batch_size, int accumulation_steps);
/// Cosine annealing from `base` at epoch 0 towards `min` at `epochs`.
double cosine_lr(double base, double min, int epoch, int epochs);

ClassifierState init_classifier(const ClassifierConfig& cfg);
/// Selects the epoch with the best validation AUC (validation loss when AUC is
/// undefined; the train split stands in for an empty validation split).
ClassifierState train_classifier(const std::vector<ClassifierSample>& train, const std::vector<ClassifierSample>& val,
                                 const ClassifierConfig& cfg);

RiskPrediction predict(const ClassifierState& state, const ClassifierSample& sample);
std::vector<RiskPrediction> predict_all(const ClassifierState& state, const std::vector<ClassifierSample>& samples);

/// Differentiable single-image logit: [1, 1, z, y, x] image -> [1] logit, with
/// the sample's prior channel and clinical row held fixed.
using TensorFn = std::function<torch::Tensor(const torch::Tensor&)>;
TensorFn bound_logit(const ClassifierState& state, const ClassifierSample& sample);

void save_classifier(const std::filesystem::path& dir, const ClassifierState& state);
ClassifierState load_classifier(const std::filesystem::path& dir);

}  // namespace vbiopsy::classifier
