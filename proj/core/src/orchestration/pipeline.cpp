#include "vbiopsy/orchestration/pipeline.hpp"

#include <unistd.h>

#include <set>

#include "vbiopsy/classifier/inputs.hpp"
#include "vbiopsy/imaging/nifti.hpp"
#include "vbiopsy/nn/tensor.hpp"
#include "vbiopsy/orchestration/storage.hpp"
#include "vbiopsy/segmenter/postprocess.hpp"

namespace vbiopsy::orchestration {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json data_config(const PipelineConfig& cfg) {
  return {{"cohort", to_json(cfg.cohort)}, {"split_ratios", cfg.split_ratios}, {"split_seed", cfg.split_seed}};
}

json seg_config(const PipelineConfig& cfg) {
  return {{"data", data_config(cfg)}, {"segmenter", segmenter::to_json(cfg.segmenter)}};
}

json patch_config(const PipelineConfig& cfg, std::size_t scale) {
  json j{{"data", data_config(cfg)},
         {"prior_source", cfg.prior_source == PriorSource::Segmenter ? "segmenter" : "ground_truth"},
         {"variant", std::string(classifier::to_string(cfg.classifier.variant))},
         {"patch", cfg.scales[scale].scale_tag()},
         {"spacing", cfg.scales[scale].target_spacing}};
  if (cfg.prior_source == PriorSource::Segmenter) j["segmenter"] = segmenter::to_json(cfg.segmenter);
  return j;
}

json clf_config(const PipelineConfig& cfg, std::size_t scale) {
  return {{"patches", patch_config(cfg, scale)}, {"classifier", classifier::to_json(cfg.classifier_for(scale))}};
}

json vae_config(const PipelineConfig& cfg) {
  return {{"patches", patch_config(cfg, cfg.counterfactual_scale)}, {"vaegan", counterfactual::to_json(cfg.vaegan)}};
}

std::string scale_tag(const PipelineConfig& cfg, std::size_t scale) { return cfg.scales[scale].scale_tag(); }

void require_data(const PipelineConfig& cfg) {
  require(fs::exists(layout(cfg).cases_jsonl()), ErrorCode::MissingPrerequisite,
          "no dataset under " + layout(cfg).data().string() + "; run phantom-gen first");
  verify_stamp(layout(cfg).data(), "dataset", data_config(cfg));
}

}  // namespace

PhantomGenResult phantom_gen(const PipelineConfig& cfg) {
  cfg.validate();
  const auto L = layout(cfg);
  // regenerate from scratch so stale cases never leak into checksums
  fs::remove_all(L.data());
  fs::create_directories(L.data());
  PhantomGenResult r;
  std::vector<phantom::CaseRecord> records;
  for (const auto& p : phantom::cohort_params(cfg.cohort)) {
    const auto ph = phantom::generate_phantom(p);
    const auto dir = L.case_dir(ph.record.case_id);
    fs::create_directories(dir);
    imaging::write_nifti(dir / "image.nii.gz", ph.volume);
    imaging::write_nifti(dir / "gland.nii.gz", ph.gland);
    imaging::write_nifti(dir / "zones.nii.gz", ph.zones);
    auto rec = ph.record;
    rec.volume_ref = "cases/" + rec.case_id + "/image.nii.gz";
    r.high_risk += rec.risk == phantom::RiskLabel::High;
    records.push_back(rec);
  }
  phantom::save_cases_jsonl(L.cases_jsonl(), records);
  phantom::save_manifest(L.manifest(), phantom::build_manifest(records, cfg.split_ratios, "risk", cfg.split_seed));
  r.cases = records.size();
  r.checksum = tree_sha256(L.data());
  write_stamp(L.data(), "dataset", data_config(cfg));
  return r;
}

std::string dataset_checksum(const PipelineConfig& cfg) {
  const auto L = layout(cfg);
  require(fs::exists(L.cases_jsonl()), ErrorCode::MissingPrerequisite, "no dataset; run phantom-gen first");
  // the stamp carries the code version, which is not dataset content
  auto tmp = fs::temp_directory_path() / ("vbiopsy-stamp-" + std::to_string(::getpid()));
  fs::rename(L.data() / "stamp.json", tmp);
  std::string h;
  try {
    h = tree_sha256(L.data());
  } catch (...) {
    fs::rename(tmp, L.data() / "stamp.json");
    throw;
  }
  fs::rename(tmp, L.data() / "stamp.json");
  return h;
}

std::vector<phantom::CaseRecord> load_records(const PipelineConfig& cfg) {
  require_data(cfg);
  return phantom::load_cases_jsonl(layout(cfg).cases_jsonl());
}

phantom::Manifest load_split_manifest(const PipelineConfig& cfg) {
  require_data(cfg);
  return phantom::load_manifest(layout(cfg).manifest());
}

CaseData load_case(const PipelineConfig& cfg, const std::string& case_id) {
  require_safe_id(case_id, "case id");
  const auto dir = layout(cfg).case_dir(case_id);
  require(fs::exists(dir / "image.nii.gz"), ErrorCode::NotFound, "unknown case '" + case_id + "'");
  CaseData c;
  for (const auto& r : load_records(cfg))
    if (r.case_id == case_id) c.record = r;
  require(c.record.case_id == case_id, ErrorCode::NotFound, "unknown case '" + case_id + "'");
  c.image = imaging::read_volume(dir / "image.nii.gz");
  c.gland = imaging::read_mask(dir / "gland.nii.gz", imaging::LabelScheme::Gland);
  c.zones = imaging::read_mask(dir / "zones.nii.gz", imaging::LabelScheme::Zones);
  return c;
}

std::map<std::string, int> truth_labels(const PipelineConfig& cfg) {
  std::map<std::string, int> out;
  for (const auto& r : load_records(cfg)) out[r.case_id] = phantom::as_int(r.risk);
  return out;
}

namespace {

segmenter::SegmentationSample seg_sample(const PipelineConfig& cfg, const CaseData& c) {
  require(imaging::same_spacing(c.image.geometry.spacing, cfg.segmenter.spacing), ErrorCode::GeometryMismatch,
          c.record.case_id + ": volume spacing differs from the segmenter spacing");
  return {c.image, cfg.segmenter.target == imaging::LabelScheme::Gland ? c.gland : c.zones};
}

imaging::LabelMask predicted_gland(const CaseData& c, const segmenter::SegmenterState& seg) {
  auto pred = segmenter::segment(c.image, seg);
  const auto filtered = segmenter::largest_component(pred);
  return imaging::to_gland(filtered.mask);
}

}  // namespace

SegTrainResult train_seg(const PipelineConfig& cfg) {
  const auto m = load_split_manifest(cfg);
  std::vector<segmenter::SegmentationSample> train, val;
  for (const auto& id : m.split("train")) train.push_back(seg_sample(cfg, load_case(cfg, id)));
  for (const auto& id : m.split("val")) val.push_back(seg_sample(cfg, load_case(cfg, id)));
  const auto state = segmenter::train_segmenter(train, val, cfg.segmenter);
  const auto dir = layout(cfg).segmenter();
  fs::remove_all(dir);
  segmenter::save_segmenter(dir, state);
  write_stamp(dir, "segmenter", seg_config(cfg));

  SegTrainResult r;
  r.best_epoch = state.best_epoch;
  r.val_dice = state.curve.empty() ? 0.0 : state.curve[static_cast<std::size_t>(state.best_epoch)].val_dice;
  double sum = 0.0;
  for (const auto& id : m.split("test")) {
    const auto c = load_case(cfg, id);
    const double d = segmenter::dice(predicted_gland(c, state), c.gland, 1);
    r.per_case_dice[id] = d;
    sum += d;
  }
  if (!r.per_case_dice.empty()) r.test_dice = sum / static_cast<double>(r.per_case_dice.size());
  return r;
}

segmenter::SegmenterState load_seg(const PipelineConfig& cfg) {
  const auto dir = layout(cfg).segmenter();
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite, "no segmenter; run train-seg first");
  verify_stamp(dir, "segmenter", seg_config(cfg));
  return segmenter::load_segmenter(dir);
}

imaging::LabelMask roi_gland(const PipelineConfig& cfg, const CaseData& c, const segmenter::SegmenterState* seg) {
  if (cfg.prior_source == PriorSource::GroundTruth) return c.gland;
  require(seg != nullptr, ErrorCode::MissingPrerequisite, "segmenter-derived priors need a trained segmenter");
  return predicted_gland(c, *seg);
}

std::size_t preprocess(const PipelineConfig& cfg) {
  const auto records = load_records(cfg);
  std::optional<segmenter::SegmenterState> seg;
  if (cfg.prior_source == PriorSource::Segmenter) seg = load_seg(cfg);
  const auto variant = cfg.classifier.variant;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) fs::remove_all(layout(cfg).patches(scale_tag(cfg, s)));
  std::size_t written = 0;
  for (const auto& r : records) {
    const auto c = load_case(cfg, r.case_id);
    const auto gland = roi_gland(cfg, c, seg ? &*seg : nullptr);
    std::optional<imaging::LabelMask> zones;
    if (variant == classifier::InputVariant::Zones) {
      if (cfg.prior_source == PriorSource::GroundTruth) zones = c.zones;
      else {
        require(cfg.segmenter.target == imaging::LabelScheme::Zones, ErrorCode::MissingPrerequisite,
                "the Z variant needs a zonal segmenter (segmenter.target = zones)");
        auto z = segmenter::largest_component(segmenter::segment(c.image, *seg)).mask;
        zones = z;
      }
    }
    for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
      const auto patch = classifier::make_classifier_patch(c.image, gland, zones, cfg.scales[s], variant);
      imaging::write_patch_stack(layout(cfg).patches(scale_tag(cfg, s)), r.case_id, patch);
      ++written;
    }
  }
  for (std::size_t s = 0; s < cfg.scales.size(); ++s)
    write_stamp(layout(cfg).patches(scale_tag(cfg, s)), "patches", patch_config(cfg, s));
  return written;
}

classifier::ClassifierSample load_sample(const PipelineConfig& cfg, std::size_t scale, const phantom::CaseRecord& record) {
  classifier::ClassifierSample s;
  s.case_id = record.case_id;
  const auto dir = layout(cfg).patches(scale_tag(cfg, scale));
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite, "no patches at " + dir.string() + "; run preprocess first");
  s.patch = imaging::read_patch_stack(dir, record.case_id);
  if (classifier::uses_clinical(cfg.classifier.variant)) s.clinical = classifier::clinical_features(record);
  s.label = phantom::as_int(record.risk);
  return s;
}

std::vector<classifier::ClassifierSample> load_samples(const PipelineConfig& cfg, std::size_t scale, const std::string& split) {
  const auto dir = layout(cfg).patches(scale_tag(cfg, scale));
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite, "no patches at " + dir.string() + "; run preprocess first");
  verify_stamp(dir, "patches", patch_config(cfg, scale));
  std::map<std::string, phantom::CaseRecord> by_id;
  for (const auto& r : load_records(cfg)) by_id[r.case_id] = r;
  const auto manifest = load_split_manifest(cfg);
  std::vector<classifier::ClassifierSample> out;
  for (const auto& id : manifest.split(split)) out.push_back(load_sample(cfg, scale, by_id.at(id)));
  return out;
}

std::vector<ScaleResult> train_clf(const PipelineConfig& cfg) {
  std::vector<ScaleResult> out;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    const auto state =
        classifier::train_classifier(load_samples(cfg, s, "train"), load_samples(cfg, s, "val"), cfg.classifier_for(s));
    const auto dir = layout(cfg).classifier(scale_tag(cfg, s));
    fs::remove_all(dir);
    classifier::save_classifier(dir, state);
    write_stamp(dir, "classifier", clf_config(cfg, s));
    ScaleResult r{scale_tag(cfg, s), state.best_epoch, std::nullopt};
    if (state.best_epoch >= 0) r.val_auc = state.curve[static_cast<std::size_t>(state.best_epoch)].val_auc;
    out.push_back(r);
  }
  for (const auto* split : {"val", "test"}) predict_split(cfg, split);
  return out;
}

classifier::ClassifierState load_clf(const PipelineConfig& cfg, std::size_t scale) {
  const auto dir = layout(cfg).classifier(scale_tag(cfg, scale));
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite,
          "no classifier for scale " + scale_tag(cfg, scale) + "; run train-clf first");
  verify_stamp(dir, "classifier", clf_config(cfg, scale));
  return classifier::load_classifier(dir);
}

std::vector<classifier::RiskPrediction> predict_split(const PipelineConfig& cfg, const std::string& split) {
  std::vector<std::vector<classifier::RiskPrediction>> per_scale;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s)
    per_scale.push_back(classifier::predict_all(load_clf(cfg, s), load_samples(cfg, s, split)));
  std::vector<classifier::RiskPrediction> out;
  json j = json::object();
  for (std::size_t i = 0; i < per_scale.front().size(); ++i) {
    std::vector<classifier::RiskPrediction> members;
    for (const auto& p : per_scale) members.push_back(p[i]);
    out.push_back(classifier::ensemble_predict(members));
    json entry = classifier::to_json(out.back());
    entry["member_predictions"] = json::array();
    for (const auto& m : members) entry["member_predictions"].push_back(classifier::to_json(m));
    j[out.back().case_id] = entry;
  }
  json hashes = json::array();
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) hashes.push_back(config_hash(clf_config(cfg, s)));
  write_json(layout(cfg).predictions(split), {{"split", split}, {"classifier_hashes", hashes}, {"predictions", j}});
  return out;
}

std::map<std::string, classifier::RiskPrediction> read_predictions(const PipelineConfig& cfg, const std::string& split) {
  const auto path = layout(cfg).predictions(split);
  require(fs::exists(path), ErrorCode::MissingPrerequisite, "no predictions for split '" + split + "'; run train-clf first");
  const auto j = read_json(path);
  std::map<std::string, classifier::RiskPrediction> out;
  for (const auto& [id, p] : j.at("predictions").items()) out[id] = classifier::prediction_from_json(p);
  return out;
}

metrics::MetricsReport evaluate_predictions(const std::map<std::string, classifier::RiskPrediction>& predictions,
                                            const std::map<std::string, int>& truth, double threshold) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& [id, p] : predictions) {
    const auto it = truth.find(id);
    require(it != truth.end(), ErrorCode::NotFound, "no label for predicted case '" + id + "'");
    scores.push_back(p.probability);
    labels.push_back(it->second);
  }
  require(!scores.empty(), ErrorCode::InvalidArgument, "no predictions to evaluate");
  return metrics::evaluate_scores(scores, labels, threshold);
}

metrics::MetricsReport evaluate(const PipelineConfig& cfg, const std::string& split) {
  const auto report = evaluate_predictions(read_predictions(cfg, split), truth_labels(cfg), cfg.threshold);
  write_json(layout(cfg).reports() / ("metrics_" + split + ".json"), metrics::to_json(report));
  return report;
}

torch::Tensor counterfactual_input(const classifier::ClassifierSample& sample) {
  return nn::to_tensor(sample.patch).narrow(0, 0, 1).unsqueeze(0);
}

namespace {
std::vector<torch::Tensor> vae_images(const PipelineConfig& cfg, const std::string& split) {
  std::vector<torch::Tensor> out;
  for (const auto& s : load_samples(cfg, cfg.counterfactual_scale, split)) out.push_back(counterfactual_input(s).squeeze(0));
  return out;
}
}  // namespace

VaeTrainResult train_vaegan_cmd(const PipelineConfig& cfg) {
  const auto val = vae_images(cfg, "val");
  auto state = counterfactual::train_vaegan(vae_images(cfg, "train"), val, cfg.vaegan);
  const auto dir = layout(cfg).vaegan();
  fs::remove_all(dir);
  counterfactual::save_vaegan(dir, state);
  write_stamp(dir, "vaegan", vae_config(cfg));
  VaeTrainResult r;
  r.best_epoch = state.best_epoch;
  r.initial_val_l1 = state.initial_val_l1;
  r.final_val_l1 = val.empty() ? 0.0 : counterfactual::mean_l1(state, val);
  return r;
}

counterfactual::VaeGanState load_vae(const PipelineConfig& cfg) {
  const auto dir = layout(cfg).vaegan();
  require(fs::exists(dir / "stamp.json"), ErrorCode::MissingPrerequisite,
          "no vae-gan model; run train-vaegan before counterfactual");
  verify_stamp(dir, "vaegan", vae_config(cfg));
  return counterfactual::load_vaegan(dir);
}

std::string job_id_for(const PipelineConfig& cfg, const std::string& case_id, const std::vector<double>& alphas) {
  auto c = counterfactual::to_json(cfg.counterfactual);
  c["alphas"] = alphas;
  return case_id + "-" + config_hash({{"cf", c}, {"vae", vae_config(cfg)}}).substr(0, 10);
}

JobResult run_counterfactual(const PipelineConfig& cfg, const std::string& case_id,
                             const std::optional<std::vector<double>>& alphas) {
  require_safe_id(case_id, "case id");
  auto ccfg = cfg.counterfactual;
  if (alphas) ccfg.alphas = *alphas;
  ccfg.validate();
  std::optional<phantom::CaseRecord> record;
  for (const auto& r : load_records(cfg))
    if (r.case_id == case_id) record = r;
  require(record.has_value(), ErrorCode::NotFound, "unknown case '" + case_id + "'");
  auto vae = load_vae(cfg);
  const auto clf = load_clf(cfg, cfg.counterfactual_scale);
  const auto sample = load_sample(cfg, cfg.counterfactual_scale, *record);

  JobResult r;
  r.job_id = job_id_for(cfg, case_id, ccfg.schedule());
  r.job = counterfactual::generate_counterfactuals(case_id, counterfactual_input(sample),
                                                   counterfactual::latent_model(vae), classifier::bound_logit(clf, sample),
                                                   ccfg);
  r.maps = counterfactual::heatmaps(r.job, ccfg.aggregate);
  r.dir = layout(cfg).job(r.job_id);
  fs::remove_all(r.dir);
  counterfactual::save_job(r.dir, r.job, r.maps, sample.patch.geometry);
  return r;
}

counterfactual::FidelityReport fidelity(const PipelineConfig& cfg, const std::string& split) {
  auto vae = load_vae(cfg);
  const auto clf = load_clf(cfg, cfg.counterfactual_scale);
  std::vector<counterfactual::FidelityCase> cases;
  for (const auto& s : load_samples(cfg, cfg.counterfactual_scale, split))
    cases.push_back({s.case_id, counterfactual_input(s), classifier::bound_logit(clf, s)});
  const auto report = counterfactual::reconstruction_fidelity(cases, counterfactual::latent_model(vae),
                                                              cfg.counterfactual.fidelity_threshold);
  write_json(layout(cfg).reports() / ("fidelity_" + split + ".json"), counterfactual::to_json(report));
  return report;
}

GridEvaluator grid_evaluator(const PipelineConfig& cfg) {
  return [cfg](const json& combo) {
    const auto base = classifier::to_json(cfg.classifier_for(0));
    const auto ccfg = classifier::classifier_config_from_json(apply_overrides(base, combo));
    const auto state = classifier::train_classifier(load_samples(cfg, 0, "train"), load_samples(cfg, 0, "val"), ccfg);
    std::map<std::string, classifier::RiskPrediction> preds;
    for (const auto& p : classifier::predict_all(state, load_samples(cfg, 0, "val"))) preds[p.case_id] = p;
    return evaluate_predictions(preds, truth_labels(cfg), cfg.threshold);
  };
}

}  // namespace vbiopsy::orchestration
