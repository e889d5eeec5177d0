#pragma once

#include <array>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vbiopsy/classifier/model.hpp"
#include "vbiopsy/counterfactual/counterfactual.hpp"
#include "vbiopsy/phantom/cohort.hpp"
#include "vbiopsy/segmenter/unet.hpp"

namespace vbiopsy::orchestration {

struct TrialSettings {
  std::int64_t washout_seconds = 60 * 86400;
  std::vector<std::string> phase_order{"unaided", "ai_assisted"};
  double max_elapsed_seconds = 7200.0;
};

enum class PriorSource { Segmenter, GroundTruth };

struct PipelineConfig {
  std::filesystem::path storage_root = "vbiopsy-store";
  phantom::CohortSpec cohort{};
  std::array<double, 3> split_ratios{0.7, 0.1, 0.2};
  std::uint64_t split_seed = 0;
  /// Where crop centroids and prior channels come from outside training.
  PriorSource prior_source = PriorSource::Segmenter;
  segmenter::SegmenterConfig segmenter{};
  classifier::ClassifierConfig classifier = classifier::ClassifierConfig::foundation_canonical();
  /// One classifier per entry; more than one makes an ensemble.
  std::vector<imaging::PatchSpec> scales{imaging::PatchSpec::large(), imaging::PatchSpec::medium(),
                                         imaging::PatchSpec::small()};
  /// Scale whose classifier the counterfactual engine explains.
  std::size_t counterfactual_scale = 2;
  counterfactual::VaeGanConfig vaegan{};
  counterfactual::CounterfactualConfig counterfactual{};
  double threshold = 0.5;
  TrialSettings trial{};
  int port = 8080;

  /// Small phantoms, narrow nets and few epochs; runs on a laptop CPU.
  static PipelineConfig desk(const std::filesystem::path& root);
  void validate() const;
  classifier::ClassifierConfig classifier_for(std::size_t scale) const;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

nlohmann::json to_json(const phantom::CohortSpec& c);
phantom::CohortSpec cohort_from_json(const nlohmann::json& j);

}  // namespace vbiopsy::orchestration
