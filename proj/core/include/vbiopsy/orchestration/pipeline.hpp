#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/classifier/model.hpp"
#include "vbiopsy/classifier/prediction.hpp"
#include "vbiopsy/counterfactual/counterfactual.hpp"
#include "vbiopsy/metrics/classification.hpp"
#include "vbiopsy/orchestration/config.hpp"
#include "vbiopsy/orchestration/grid.hpp"
#include "vbiopsy/phantom/manifest.hpp"
#include "vbiopsy/segmenter/unet.hpp"

namespace vbiopsy::orchestration {

/// Directory layout under the storage root.
struct Layout {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path cases_jsonl() const { return data() / "cases.jsonl"; }
  std::filesystem::path manifest() const { return data() / "manifest.json"; }
  std::filesystem::path case_dir(const std::string& id) const { return data() / "cases" / id; }
  std::filesystem::path patches(const std::string& scale_tag) const { return data() / "patches" / scale_tag; }
  std::filesystem::path segmenter() const { return root / "models" / "segmenter"; }
  std::filesystem::path classifier(const std::string& scale_tag) const { return root / "models" / "classifier" / scale_tag; }
  std::filesystem::path vaegan() const { return root / "models" / "vaegan"; }
  std::filesystem::path predictions(const std::string& split) const { return root / "predictions" / (split + ".json"); }
  std::filesystem::path job(const std::string& id) const { return root / "counterfactual" / id; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path trial(const std::string& id) const { return root / "trials" / id; }
};

inline Layout layout(const PipelineConfig& cfg) { return {cfg.storage_root}; }

struct CaseData {
  phantom::CaseRecord record;
  imaging::Volume3D image;
  imaging::LabelMask gland;
  imaging::LabelMask zones;
};

struct PhantomGenResult {
  std::size_t cases = 0;
  std::size_t high_risk = 0;
  std::string checksum;
};

/// Writes data/cases/<id>/{image,gland,zones}.nii.gz, cases.jsonl and the split manifest.
PhantomGenResult phantom_gen(const PipelineConfig& cfg);
std::string dataset_checksum(const PipelineConfig& cfg);

std::vector<phantom::CaseRecord> load_records(const PipelineConfig& cfg);
phantom::Manifest load_split_manifest(const PipelineConfig& cfg);
CaseData load_case(const PipelineConfig& cfg, const std::string& case_id);
std::map<std::string, int> truth_labels(const PipelineConfig& cfg);

struct SegTrainResult {
  int best_epoch = -1;
  double val_dice = 0.0;
  /// Held-out (test split) gland DSC after largest-component filtering.
  double test_dice = 0.0;
  std::map<std::string, double> per_case_dice;
};
SegTrainResult train_seg(const PipelineConfig& cfg);
segmenter::SegmenterState load_seg(const PipelineConfig& cfg);

/// Gland mask used for cropping and priors: segmenter output (largest
/// component) or the reference mask, per cfg.prior_source.
imaging::LabelMask roi_gland(const PipelineConfig& cfg, const CaseData& c, const segmenter::SegmenterState* seg);

/// Patches for every case and scale under data/patches/<scale>/.
std::size_t preprocess(const PipelineConfig& cfg);
classifier::ClassifierSample load_sample(const PipelineConfig& cfg, std::size_t scale, const phantom::CaseRecord& record);
std::vector<classifier::ClassifierSample> load_samples(const PipelineConfig& cfg, std::size_t scale, const std::string& split);

struct ScaleResult {
  std::string scale_tag;
  int best_epoch = -1;
  std::optional<double> val_auc;
};
std::vector<ScaleResult> train_clf(const PipelineConfig& cfg);
classifier::ClassifierState load_clf(const PipelineConfig& cfg, std::size_t scale);

/// Ensemble predictions for a split (members kept), persisted under predictions/.
std::vector<classifier::RiskPrediction> predict_split(const PipelineConfig& cfg, const std::string& split);
std::map<std::string, classifier::RiskPrediction> read_predictions(const PipelineConfig& cfg, const std::string& split);

/// Metrics of stored predictions against truth; written to reports/metrics_<split>.json.
metrics::MetricsReport evaluate(const PipelineConfig& cfg, const std::string& split);
metrics::MetricsReport evaluate_predictions(const std::map<std::string, classifier::RiskPrediction>& predictions,
                                            const std::map<std::string, int>& truth, double threshold);

struct VaeTrainResult {
  int best_epoch = -1;
  double initial_val_l1 = 0.0;
  double final_val_l1 = 0.0;
};
VaeTrainResult train_vaegan_cmd(const PipelineConfig& cfg);
counterfactual::VaeGanState load_vae(const PipelineConfig& cfg);

/// [1, 1, z, y, x] image channel of the explained scale's patch.
torch::Tensor counterfactual_input(const classifier::ClassifierSample& sample);

struct JobResult {
  std::string job_id;
  counterfactual::CounterfactualJob job;
  counterfactual::HeatmapSet maps;
  std::filesystem::path dir;
};
/// Runs and persists one job. Throws FidelityRejected for gate failures.
JobResult run_counterfactual(const PipelineConfig& cfg, const std::string& case_id,
                             const std::optional<std::vector<double>>& alphas = std::nullopt);
std::string job_id_for(const PipelineConfig& cfg, const std::string& case_id, const std::vector<double>& alphas);

counterfactual::FidelityReport fidelity(const PipelineConfig& cfg, const std::string& split);

/// Trains the first-scale classifier with the combination applied and scores
/// it on the validation split. Nothing is persisted besides run records.
GridEvaluator grid_evaluator(const PipelineConfig& cfg);

}  // namespace vbiopsy::orchestration
