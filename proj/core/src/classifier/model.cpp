#include "vbiopsy/classifier/model.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>

#include "vbiopsy/metrics/classification.hpp"
#include "vbiopsy/nn/tensor.hpp"
#include "vbiopsy/phantom/cohort.hpp"

namespace vbiopsy::classifier {

using nlohmann::json;

std::string_view to_string(Family f) { return f == Family::Cnn ? "cnn" : "foundation"; }
Family family_from_string(std::string_view n) {
  if (n == "cnn") return Family::Cnn;
  if (n == "foundation") return Family::Foundation;
  fail(ErrorCode::InvalidArgument, "unknown model family '" + std::string(n) + "'");
}
std::string_view to_string(LossKind k) { return k == LossKind::Focal ? "focal" : "weighted_bce"; }
LossKind loss_from_string(std::string_view n) {
  if (n == "focal") return LossKind::Focal;
  if (n == "weighted_bce" || n == "bce") return LossKind::WeightedBce;
  fail(ErrorCode::InvalidArgument, "unknown loss '" + std::string(n) + "'");
}
std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : (k == OptimizerKind::AdamW ? "adamw" : "adam");
}
OptimizerKind optimizer_from_string(std::string_view n) {
  if (n == "sgd") return OptimizerKind::Sgd;
  if (n == "adamw") return OptimizerKind::AdamW;
  if (n == "adam") return OptimizerKind::Adam;
  fail(ErrorCode::InvalidArgument, "unknown optimizer '" + std::string(n) + "'");
}
std::string_view to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }
Schedule schedule_from_string(std::string_view n) {
  if (n == "cosine") return Schedule::Cosine;
  if (n == "constant") return Schedule::Constant;
  fail(ErrorCode::InvalidArgument, "unknown schedule '" + std::string(n) + "'");
}

imaging::PatchSpec desk_patch(int scale_index) {
  static const std::int64_t sizes[3] = {32, 28, 24};
  require(scale_index >= 0 && scale_index < 3, ErrorCode::InvalidArgument, "desk scale index must be 0, 1 or 2");
  return {{sizes[scale_index], sizes[scale_index], 8}, {1.5, 1.5, 3.0}};
}

ClassifierConfig ClassifierConfig::cnn_canonical() {
  ClassifierConfig c;
  c.family = Family::Cnn;
  c.cnn = CnnConfig::canonical();
  c.epochs = 250;
  c.batch_size = 6;
  c.accumulation_steps = 1;
  c.learning_rate = 1e-3;
  c.weight_decay = 1e-6;
  c.optimizer = OptimizerKind::Sgd;
  c.loss = LossKind::Focal;
  return c;
}

ClassifierConfig ClassifierConfig::foundation_canonical() { return {}; }

ClassifierConfig ClassifierConfig::desk(Family family, InputVariant variant, int scale_index) {
  auto c = family == Family::Cnn ? cnn_canonical() : foundation_canonical();
  c.variant = variant;
  c.patch = desk_patch(scale_index);
  c.allow_patch_override = true;
  c.epochs = 25;
  c.batch_size = 4;
  c.accumulation_steps = 1;
  if (family == Family::Cnn) {
    c.cnn = CnnConfig::desk(channel_count(variant));
    c.learning_rate = 1e-2;
    c.momentum = 0.9;
  } else {
    c.foundation.freeze_encoder = false;
    c.learning_rate = 2e-3;
  }
  return c;
}

void ClassifierConfig::validate() const {
  patch.validate(allow_patch_override);
  require(epochs >= 1 && batch_size >= 1 && accumulation_steps >= 1, ErrorCode::InvalidArgument,
          "epochs, batch size and accumulation steps must be >= 1");
  require(learning_rate > 0.0 && min_learning_rate >= 0.0 && min_learning_rate <= learning_rate,
          ErrorCode::InvalidArgument, "need 0 <= min lr <= lr, lr > 0");
  require(weight_decay >= 0.0 && momentum >= 0.0 && momentum < 1.0, ErrorCode::InvalidArgument,
          "weight decay must be >= 0 and momentum in [0, 1)");
  require(focal_alpha >= 0.0 && focal_alpha <= 1.0 && focal_gamma >= 0.0, ErrorCode::InvalidArgument,
          "focal alpha in [0,1] and gamma >= 0 required");
  require(pos_weight > 0.0, ErrorCode::InvalidArgument, "pos_weight must be > 0");
  if (family == Family::Cnn) {
    require(!uses_clinical(variant), ErrorCode::InvalidArgument, "clinical fusion is only built for the foundation family");
    require(cnn.in_channels == channel_count(variant), ErrorCode::InvalidArgument,
            "cnn input channels do not match the input variant");
    cnn.validate();
  } else {
    foundation.validate();
  }
  augmentation.validate();
}

std::string ClassifierConfig::model_tag() const {
  return std::string(to_string(family)) + (variant == InputVariant::ImageOnly ? "" : "+" + std::string(to_string(variant)));
}

json to_json(const ClassifierConfig& c) {
  json j{{"family", std::string(to_string(c.family))},
         {"variant", std::string(to_string(c.variant))},
         {"patch", {{"size", {c.patch.size.x, c.patch.size.y, c.patch.size.z}}, {"target_spacing", c.patch.target_spacing}}},
         {"allow_patch_override", c.allow_patch_override},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"accumulation_steps", c.accumulation_steps},
         {"learning_rate", c.learning_rate},
         {"min_learning_rate", c.min_learning_rate},
         {"weight_decay", c.weight_decay},
         {"momentum", c.momentum},
         {"optimizer", std::string(to_string(c.optimizer))},
         {"schedule", std::string(to_string(c.schedule))},
         {"loss", std::string(to_string(c.loss))},
         {"focal_alpha", c.focal_alpha},
         {"focal_gamma", c.focal_gamma},
         {"pos_weight", c.pos_weight},
         {"augment", c.augment},
         {"augmentation_seed", c.augmentation.rng_seed},
         {"rng_seed", c.rng_seed}};
  if (c.family == Family::Cnn) j["cnn"] = to_json(c.cnn);
  else j["foundation"] = to_json(c.foundation);
  return j;
}

ClassifierConfig classifier_config_from_json(const json& j) {
  const auto family = family_from_string(j.value("family", std::string("foundation")));
  const auto variant = input_variant_from_string(j.value("variant", std::string("G")));
  auto c = family == Family::Cnn ? ClassifierConfig::cnn_canonical() : ClassifierConfig::foundation_canonical();
  c.family = family;
  c.variant = variant;
  if (j.contains("patch")) {
    const auto s = j["patch"].at("size").get<std::vector<std::int64_t>>();
    require(s.size() == 3, ErrorCode::InvalidArgument, "patch size needs three entries");
    c.patch.size = {s[0], s[1], s[2]};
    c.patch.target_spacing = j["patch"].value("target_spacing", c.patch.target_spacing);
  }
  c.allow_patch_override = j.value("allow_patch_override", c.allow_patch_override);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.min_learning_rate = j.value("min_learning_rate", c.min_learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.momentum = j.value("momentum", c.momentum);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
  if (j.contains("schedule")) c.schedule = schedule_from_string(j["schedule"].get<std::string>());
  if (j.contains("loss")) c.loss = loss_from_string(j["loss"].get<std::string>());
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.pos_weight = j.value("pos_weight", c.pos_weight);
  c.augment = j.value("augment", c.augment);
  c.augmentation.rng_seed = j.value("augmentation_seed", c.augmentation.rng_seed);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  if (j.contains("cnn")) c.cnn = cnn_config_from_json(j["cnn"]);
  else if (family == Family::Cnn) c.cnn.in_channels = channel_count(variant);
  if (j.contains("foundation")) c.foundation = foundation_config_from_json(j["foundation"]);
  c.validate();
  return c;
}

std::vector<std::size_t> accumulation_plan(std::size_t samples, int batch_size, int accumulation_steps) {
  require(batch_size >= 1 && accumulation_steps >= 1, ErrorCode::InvalidArgument, "batch and accumulation must be >= 1");
  const std::size_t per_step = static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(accumulation_steps);
  std::vector<std::size_t> plan(samples / per_step, per_step);
  if (samples % per_step) plan.push_back(samples % per_step);
  return plan;
}

double cosine_lr(double base, double min, int epoch, int epochs) {
  require(epochs >= 1 && epoch >= 0, ErrorCode::InvalidArgument, "cosine schedule needs epoch >= 0, epochs >= 1");
  return min + 0.5 * (base - min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / epochs));
}

namespace {

std::shared_ptr<RiskNet> build_net(const ClassifierConfig& cfg) {
  if (cfg.family == Family::Cnn) return std::make_shared<CnnNetImpl>(cfg.cnn);
  auto f = cfg.foundation;
  f.in_channels = channel_count(cfg.variant);
  f.clinical_features = cfg.clinical_width();
  return std::make_shared<FoundationNetImpl>(f);
}

void check_sample(const ClassifierSample& s, const ClassifierConfig& cfg) {
  s.patch.validate();
  require(s.patch.dims() == cfg.patch.size, ErrorCode::GeometryMismatch,
          s.case_id + ": patch shape does not match the configured patch size");
  require(static_cast<std::int64_t>(s.patch.channel_count()) == channel_count(cfg.variant), ErrorCode::GeometryMismatch,
          s.case_id + ": channel count does not match the input variant");
  require(s.label == 0 || s.label == 1, ErrorCode::InvalidArgument, s.case_id + ": label must be 0 or 1");
  if (uses_clinical(cfg.variant)) {
    require(s.clinical.size() == 2, ErrorCode::MissingPrerequisite, s.case_id + ": clinical variables missing");
  }
}

torch::Tensor clinical_tensor(const ClassifierState& state, const std::vector<const ClassifierSample*>& batch) {
  if (!uses_clinical(state.config.variant)) return {};
  std::vector<double> flat;
  for (const auto* s : batch) {
    const auto row = standardize(s->clinical, state.clinical);
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return torch::tensor(flat, torch::kFloat64).reshape({static_cast<std::int64_t>(batch.size()), -1}).to(torch::kFloat32);
}

torch::Tensor loss_of(const ClassifierConfig& cfg, const torch::Tensor& logits, const torch::Tensor& y) {
  return cfg.loss == LossKind::Focal ? focal_loss(logits, y, cfg.focal_alpha, cfg.focal_gamma)
                                     : weighted_bce(logits, y, cfg.pos_weight);
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const ClassifierConfig& cfg, const std::vector<torch::Tensor>& params) {
  switch (cfg.optimizer) {
    case OptimizerKind::Sgd:
      return std::make_unique<torch::optim::SGD>(
          params, torch::optim::SGDOptions(cfg.learning_rate).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
    case OptimizerKind::AdamW:
      return std::make_unique<torch::optim::AdamW>(params,
                                                   torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
    case OptimizerKind::Adam:
      return std::make_unique<torch::optim::Adam>(params,
                                                  torch::optim::AdamOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
  }
  fail(ErrorCode::InvalidArgument, "unknown optimizer");
}

struct Evaluation {
  std::optional<double> auc;
  double loss = 0.0;
};

Evaluation evaluate(const ClassifierState& state, const std::vector<ClassifierSample>& samples) {
  const auto preds = predict_all(state, samples);
  std::vector<double> scores, logits;
  std::vector<int> labels;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    scores.push_back(preds[i].probability);
    logits.push_back(preds[i].logit);
    labels.push_back(samples[i].label);
  }
  Evaluation e;
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos > 0 && pos < static_cast<std::ptrdiff_t>(labels.size())) e.auc = metrics::roc_auc(scores, labels);
  const auto y = torch::tensor(std::vector<double>(labels.begin(), labels.end()), torch::kFloat64);
  e.loss = loss_of(state.config, torch::tensor(logits, torch::kFloat64), y).item<double>();
  return e;
}

}  // namespace

ClassifierState init_classifier(const ClassifierConfig& cfg) {
  cfg.validate();
  nn::seed_everything(cfg.rng_seed);
  ClassifierState state;
  state.config = cfg;
  state.net = build_net(cfg);
  state.net->eval();
  return state;
}

ClassifierState train_classifier(const std::vector<ClassifierSample>& train, const std::vector<ClassifierSample>& val,
                                 const ClassifierConfig& cfg) {
  require(!train.empty(), ErrorCode::InvalidArgument, "classifier train split is empty");
  auto state = init_classifier(cfg);
  for (const auto& s : train) check_sample(s, cfg);
  for (const auto& s : val) check_sample(s, cfg);
  if (uses_clinical(cfg.variant)) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : train) rows.push_back(s.clinical);
    state.clinical = fit_clinical(rows);
  }
  const auto& selection = val.empty() ? train : val;

  std::vector<torch::Tensor> inputs;
  for (const auto& s : train) inputs.push_back(nn::to_tensor(s.patch));

  std::vector<torch::Tensor> params;
  for (auto& p : state.net->parameters())
    if (p.requires_grad()) params.push_back(p);
  auto opt = make_optimizer(cfg, params);
  auto best = build_net(cfg);

  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.schedule == Schedule::Cosine ? cosine_lr(cfg.learning_rate, cfg.min_learning_rate, epoch, cfg.epochs)
                                                       : cfg.learning_rate;
    for (auto& group : opt->param_groups()) group.options().set_lr(lr);
    state.net->train();
    const auto order = torch::randperm(static_cast<std::int64_t>(train.size()), torch::kLong);
    double loss_sum = 0.0;
    std::size_t cursor = 0;
    for (const std::size_t step_samples : accumulation_plan(train.size(), cfg.batch_size, cfg.accumulation_steps)) {
      opt->zero_grad();
      const std::size_t end = cursor + step_samples;
      while (cursor < end) {
        const std::size_t mb_end = std::min(end, cursor + static_cast<std::size_t>(cfg.batch_size));
        std::vector<torch::Tensor> xb;
        std::vector<const ClassifierSample*> batch;
        std::vector<double> yb;
        for (std::size_t k = cursor; k < mb_end; ++k) {
          const auto idx = static_cast<std::size_t>(order[static_cast<std::int64_t>(k)].item<std::int64_t>());
          batch.push_back(&train[idx]);
          yb.push_back(train[idx].label);
          if (cfg.augment) {
            auto aug = cfg.augmentation;
            aug.rng_seed = phantom::derive_seed(cfg.augmentation.rng_seed, static_cast<std::uint64_t>(epoch) * train.size() + idx);
            xb.push_back(nn::to_tensor(imaging::augment(train[idx].patch, aug)));
          } else {
            xb.push_back(inputs[idx]);
          }
        }
        const auto logits = state.net->forward(torch::stack(xb), clinical_tensor(state, batch));
        const auto loss = loss_of(cfg, logits, torch::tensor(yb, torch::kFloat32));
        const double value = loss.item<double>();
        require(std::isfinite(value), ErrorCode::TrainingDiverged,
                "classifier loss became non-finite at epoch " + std::to_string(epoch));
        // weight each micro-batch by its share of the optimizer step
        (loss * (static_cast<double>(batch.size()) / static_cast<double>(step_samples))).backward();
        loss_sum += value * static_cast<double>(batch.size());
        cursor = mb_end;
      }
      opt->step();
      ++steps;
    }
    state.net->eval();
    const auto ev = evaluate(state, selection);
    state.curve.push_back({epoch, loss_sum / static_cast<double>(train.size()), ev.loss, ev.auc, lr, steps});
    const double score = ev.auc ? *ev.auc : -ev.loss;
    if (score > best_score) {
      best_score = score;
      state.best_epoch = epoch;
      nn::copy_parameters(*best, *state.net);
    }
  }
  nn::copy_parameters(*state.net, *best);
  state.net->eval();
  return state;
}

std::vector<RiskPrediction> predict_all(const ClassifierState& state, const std::vector<ClassifierSample>& samples) {
  require(state.net != nullptr, ErrorCode::MissingPrerequisite, "classifier has no network");
  torch::NoGradGuard guard;
  const bool was_training = state.net->is_training();
  state.net->eval();
  std::vector<RiskPrediction> out;
  const std::size_t chunk = 16;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<torch::Tensor> xb;
    std::vector<const ClassifierSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) {
      check_sample(samples[i], state.config);
      xb.push_back(nn::to_tensor(samples[i].patch));
      batch.push_back(&samples[i]);
    }
    const auto logits = state.net->forward(torch::stack(xb), clinical_tensor(state, batch)).to(torch::kFloat64);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      out.push_back(RiskPrediction::from_logit(batch[k]->case_id, logits[static_cast<std::int64_t>(k)].item<double>(),
                                               state.config.model_tag(), state.config.patch.scale_tag()));
    }
  }
  if (was_training) state.net->train();
  return out;
}

RiskPrediction predict(const ClassifierState& state, const ClassifierSample& sample) { return predict_all(state, {sample}).front(); }

TensorFn bound_logit(const ClassifierState& state, const ClassifierSample& sample) {
  check_sample(sample, state.config);
  auto net = state.net;
  const auto patch = nn::to_tensor(sample.patch).unsqueeze(0);
  torch::Tensor clinical = clinical_tensor(state, {&sample});
  const bool prior = uses_prior(state.config.variant);
  return [net, patch, clinical, prior](const torch::Tensor& image) {
    require(image.dim() == 5 && image.size(1) == 1, ErrorCode::GeometryMismatch, "bound logit expects [B, 1, z, y, x]");
    const auto b = image.size(0);
    torch::Tensor x = image;
    if (prior) {
      const auto p = patch.narrow(1, 2, 1).to(image.dtype()).expand({b, 1, -1, -1, -1});
      x = torch::cat({image, image, p}, 1);
    }
    torch::Tensor c = clinical.defined() ? clinical.to(image.dtype()).expand({b, -1}) : clinical;
    return net->forward(x, c);
  };
}

void save_classifier(const std::filesystem::path& dir, const ClassifierState& state) {
  std::filesystem::create_directories(dir);
  nn::save_module(*state.net, dir / "weights.pt");
  json j;
  j["config"] = to_json(state.config);
  j["best_epoch"] = state.best_epoch;
  j["clinical"] = {{"names", state.clinical.names}, {"mean", state.clinical.mean}, {"std", state.clinical.stddev}};
  j["curve"] = json::array();
  for (const auto& e : state.curve) {
    j["curve"].push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss},
                          {"val_auc", e.val_auc ? json(*e.val_auc) : json(nullptr)},
                          {"learning_rate", e.learning_rate},
                          {"optimizer_steps", e.optimizer_steps}});
  }
  std::ofstream(dir / "classifier.json") << j.dump(2);
}

ClassifierState load_classifier(const std::filesystem::path& dir) {
  std::ifstream in(dir / "classifier.json");
  require(in.good(), ErrorCode::NotFound, "no classifier.json in " + dir.string());
  const auto j = json::parse(in);
  auto state = init_classifier(classifier_config_from_json(j.at("config")));
  nn::load_module(*state.net, dir / "weights.pt");
  state.net->eval();
  state.best_epoch = j.value("best_epoch", -1);
  const auto& c = j.at("clinical");
  state.clinical.names = c.at("names").get<std::vector<std::string>>();
  state.clinical.mean = c.at("mean").get<std::vector<double>>();
  state.clinical.stddev = c.at("std").get<std::vector<double>>();
  for (const auto& e : j.at("curve")) {
    ClassifierEpoch ep{e.at("epoch"), e.at("train_loss"), e.at("val_loss"), std::nullopt, e.at("learning_rate"),
                       e.at("optimizer_steps")};
    if (!e.at("val_auc").is_null()) ep.val_auc = e.at("val_auc").get<double>();
    state.curve.push_back(ep);
  }
  return state;
}

}  // namespace vbiopsy::classifier
