#include "vbiopsy/orchestration/config.hpp"

#include "vbiopsy/orchestration/storage.hpp"

namespace vbiopsy::orchestration {

using nlohmann::json;

PipelineConfig PipelineConfig::desk(const std::filesystem::path& root) {
  PipelineConfig c;
  c.storage_root = root;
  // darker lesions than the library default keep the desk cohort separable
  c.cohort.count = 120;
  c.cohort.base.lesion_contrast = {-0.8, -0.6};
  c.segmenter.epochs = 25;
  c.segmenter.rng_seed = 11;
  c.classifier = classifier::ClassifierConfig::desk(classifier::Family::Foundation, classifier::InputVariant::Gland, 0);
  c.classifier.rng_seed = 13;
  c.scales = {classifier::desk_patch(0), classifier::desk_patch(1), classifier::desk_patch(2)};
  c.counterfactual_scale = 0;
  c.vaegan = counterfactual::VaeGanConfig::desk();
  c.vaegan.patch = c.scales[0];
  c.vaegan.rng_seed = 17;
  c.counterfactual.alpha_max = 2.0;
  c.trial.washout_seconds = 60;
  return c;
}

void PipelineConfig::validate() const {
  require(!storage_root.empty(), ErrorCode::InvalidArgument, "storage_root is required");
  const auto parent = std::filesystem::absolute(storage_root).parent_path();
  require(std::filesystem::is_directory(parent), ErrorCode::NotFound,
          "storage_root parent " + parent.string() + " does not exist");
  require(cohort.count >= 3, ErrorCode::InvalidArgument, "cohort needs at least 3 cases");
  require(cohort.high_risk_prevalence >= 0 && cohort.high_risk_prevalence <= 1, ErrorCode::InvalidArgument,
          "prevalence must be in [0, 1]");
  cohort.base.validate();
  segmenter.validate();
  require(!scales.empty(), ErrorCode::InvalidArgument, "at least one patch scale is required");
  for (std::size_t s = 0; s < scales.size(); ++s) classifier_for(s).validate();
  require(counterfactual_scale < scales.size(), ErrorCode::InvalidArgument, "counterfactual_scale out of range");
  vaegan.validate();
  require(vaegan.patch.size == scales[counterfactual_scale].size &&
              imaging::same_spacing(vaegan.patch.target_spacing, scales[counterfactual_scale].target_spacing),
          ErrorCode::InvalidArgument, "vae-gan patch must equal the explained classifier's patch");
  counterfactual.validate();
  require(threshold > 0 && threshold < 1, ErrorCode::InvalidArgument, "threshold must be in (0, 1)");
  require(trial.washout_seconds >= 0, ErrorCode::InvalidArgument, "washout must be >= 0 seconds");
  require(trial.phase_order == std::vector<std::string>{"unaided", "ai_assisted"}, ErrorCode::InvalidArgument,
          "the only supported phase order is unaided then ai_assisted");
  require(trial.max_elapsed_seconds > 0, ErrorCode::InvalidArgument, "max_elapsed_seconds must be > 0");
  require(port > 0 && port < 65536, ErrorCode::InvalidArgument, "port out of range");
}

classifier::ClassifierConfig PipelineConfig::classifier_for(std::size_t scale) const {
  require(scale < scales.size(), ErrorCode::InvalidArgument, "scale index out of range");
  auto c = classifier;
  c.patch = scales[scale];
  c.allow_patch_override = classifier.allow_patch_override;
  return c;
}

namespace {
json spec_json(const imaging::PatchSpec& s) {
  return {{"size", {s.size.x, s.size.y, s.size.z}}, {"target_spacing", s.target_spacing}};
}
imaging::PatchSpec spec_from(const json& j) {
  const auto s = j.at("size").get<std::vector<std::int64_t>>();
  require(s.size() == 3, ErrorCode::InvalidArgument, "patch size needs three entries");
  return {{s[0], s[1], s[2]}, j.at("target_spacing").get<Vec3>()};
}
}  // namespace

json to_json(const phantom::CohortSpec& c) {
  const auto& b = c.base;
  return {{"count", c.count},
          {"seed", c.seed},
          {"high_risk_prevalence", c.high_risk_prevalence},
          {"small_lesion_probability", c.small_lesion_probability},
          {"id_prefix", c.id_prefix},
          {"grid", {b.grid.x, b.grid.y, b.grid.z}},
          {"spacing", b.spacing},
          {"lesion_radius_mm", {b.lesion_radius_mm.min, b.lesion_radius_mm.max}},
          {"lesion_contrast", {b.lesion_contrast.min, b.lesion_contrast.max}},
          {"tz_lesion_probability", b.tz_lesion_probability},
          {"high_risk_radius_mm", b.high_risk_radius_mm},
          {"noise_sigma", b.noise_sigma}};
}

phantom::CohortSpec cohort_from_json(const json& j) {
  phantom::CohortSpec c;
  c.count = j.value("count", c.count);
  c.seed = j.value("seed", c.seed);
  c.high_risk_prevalence = j.value("high_risk_prevalence", c.high_risk_prevalence);
  c.small_lesion_probability = j.value("small_lesion_probability", c.small_lesion_probability);
  c.id_prefix = j.value("id_prefix", c.id_prefix);
  auto& b = c.base;
  if (j.contains("grid")) {
    const auto g = j["grid"].get<std::vector<std::int64_t>>();
    require(g.size() == 3, ErrorCode::InvalidArgument, "grid needs three entries");
    b.grid = {g[0], g[1], g[2]};
  }
  b.spacing = j.value("spacing", b.spacing);
  if (j.contains("lesion_radius_mm")) b.lesion_radius_mm = {j["lesion_radius_mm"][0], j["lesion_radius_mm"][1]};
  if (j.contains("lesion_contrast")) b.lesion_contrast = {j["lesion_contrast"][0], j["lesion_contrast"][1]};
  b.tz_lesion_probability = j.value("tz_lesion_probability", b.tz_lesion_probability);
  b.high_risk_radius_mm = j.value("high_risk_radius_mm", b.high_risk_radius_mm);
  b.noise_sigma = j.value("noise_sigma", b.noise_sigma);
  return c;
}

json to_json(const PipelineConfig& c) {
  json scales = json::array();
  for (const auto& s : c.scales) scales.push_back(spec_json(s));
  return {{"storage_root", c.storage_root.string()},
          {"cohort", to_json(c.cohort)},
          {"split_ratios", c.split_ratios},
          {"split_seed", c.split_seed},
          {"prior_source", c.prior_source == PriorSource::Segmenter ? "segmenter" : "ground_truth"},
          {"segmenter", segmenter::to_json(c.segmenter)},
          {"classifier", classifier::to_json(c.classifier)},
          {"scales", scales},
          {"counterfactual_scale", c.counterfactual_scale},
          {"vaegan", counterfactual::to_json(c.vaegan)},
          {"counterfactual", counterfactual::to_json(c.counterfactual)},
          {"threshold", c.threshold},
          {"trial",
           {{"washout_seconds", c.trial.washout_seconds},
            {"phase_order", c.trial.phase_order},
            {"max_elapsed_seconds", c.trial.max_elapsed_seconds}}},
          {"port", c.port}};
}

static PipelineConfig parse_pipeline_config(const json& j) {
  PipelineConfig c;
  if (j.value("preset", std::string()) == "desk") c = PipelineConfig::desk(c.storage_root);
  c.storage_root = j.value("storage_root", c.storage_root.string());
  // sections are patched onto the preset, so partial documents keep its other values
  const auto patched = [&](const char* key, json base) {
    base.merge_patch(j.at(key));
    return base;
  };
  if (j.contains("cohort")) c.cohort = cohort_from_json(patched("cohort", to_json(c.cohort)));
  c.split_ratios = j.value("split_ratios", c.split_ratios);
  c.split_seed = j.value("split_seed", c.split_seed);
  const auto prior =
      j.value("prior_source", std::string(c.prior_source == PriorSource::Segmenter ? "segmenter" : "ground_truth"));
  require(prior == "segmenter" || prior == "ground_truth", ErrorCode::InvalidArgument,
          "prior_source must be 'segmenter' or 'ground_truth'");
  c.prior_source = prior == "segmenter" ? PriorSource::Segmenter : PriorSource::GroundTruth;
  if (j.contains("segmenter")) c.segmenter = segmenter::segmenter_config_from_json(patched("segmenter", segmenter::to_json(c.segmenter)));
  if (j.contains("classifier")) c.classifier = classifier::classifier_config_from_json(patched("classifier", classifier::to_json(c.classifier)));
  if (j.contains("scales")) {
    c.scales.clear();
    for (const auto& s : j["scales"]) c.scales.push_back(spec_from(s));
  }
  c.counterfactual_scale = j.value("counterfactual_scale", c.counterfactual_scale);
  if (j.contains("vaegan")) c.vaegan = counterfactual::vaegan_config_from_json(patched("vaegan", counterfactual::to_json(c.vaegan)));
  if (j.contains("counterfactual")) c.counterfactual =
        counterfactual::counterfactual_config_from_json(patched("counterfactual", counterfactual::to_json(c.counterfactual)));
  c.threshold = j.value("threshold", c.threshold);
  if (j.contains("trial")) {
    const auto& t = j["trial"];
    c.trial.washout_seconds = t.value("washout_seconds", c.trial.washout_seconds);
    c.trial.phase_order = t.value("phase_order", c.trial.phase_order);
    c.trial.max_elapsed_seconds = t.value("max_elapsed_seconds", c.trial.max_elapsed_seconds);
  }
  c.port = j.value("port", c.port);
  c.validate();
  return c;
}

PipelineConfig pipeline_config_from_json(const json& j) {
  try {
    return parse_pipeline_config(j);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed pipeline config: ") + e.what());
  }
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::NotFound, "config file " + path.string() + " not found");
  return pipeline_config_from_json(read_json(path));
}

}  // namespace vbiopsy::orchestration
