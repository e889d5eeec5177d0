#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <random>

#include "vbiopsy/classifier/losses.hpp"
#include "vbiopsy/classifier/model.hpp"
#include "vbiopsy/classifier/prediction.hpp"
#include "vbiopsy/nn/tensor.hpp"
#include "vbiopsy/phantom/cohort.hpp"

namespace vbiopsy::classifier {
namespace {

// Independent scalar references written out longhand.
double ref_focal(double p, int y, double a, double g) {
  return y == 1 ? -a * std::pow(1 - p, g) * std::log(p) : -(1 - a) * std::pow(p, g) * std::log(1 - p);
}
double ref_bce(double p, int y, double w) { return y == 1 ? -w * std::log(p) : -std::log(1 - p); }

TEST(Losses, HandValues) {
  EXPECT_NEAR(focal_loss(0.5, 1, 0.8, 2.0), 0.8 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_loss(0.5, 1, 0.8, 2.0), 0.13863, 1e-5);
  EXPECT_NEAR(weighted_bce(0.5, 1, 2.342), 1.6233, 1e-4);
  EXPECT_NEAR(weighted_bce(0.5, 0, 2.342), std::log(2.0), 1e-12);
  // gamma = 0 and alpha = 0.5 is half of plain BCE
  for (double p : {0.1, 0.4, 0.9})
    for (int y : {0, 1}) EXPECT_NEAR(focal_loss(p, y, 0.5, 0.0), 0.5 * weighted_bce(p, y, 1.0), 1e-12);
  EXPECT_TRUE(std::isfinite(focal_loss(0.0, 1)));
  EXPECT_TRUE(std::isfinite(weighted_bce(1.0, 0)));
}

TEST(Losses, TensorMatchesScalarOracle) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> z(64), y(64);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = n(rng), y[i] = static_cast<double>(rng() % 2);
  const auto zt = torch::tensor(z, torch::kFloat64), yt = torch::tensor(y, torch::kFloat64);
  double f = 0, b = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1 / (1 + std::exp(-z[i]));
    f += ref_focal(p, static_cast<int>(y[i]), 0.8, 2.0);
    b += ref_bce(p, static_cast<int>(y[i]), 2.342);
  }
  EXPECT_NEAR(focal_loss(zt, yt).item<double>(), f / 64, 1e-10);
  EXPECT_NEAR(weighted_bce(zt, yt).item<double>(), b / 64, 1e-10);
}

TEST(Losses, AutogradMatchesFiniteDifferences) {
  const std::vector<double> z{-2.5, -0.3, 0.0, 0.7, 3.1};
  const std::vector<double> y{1, 0, 1, 1, 0};
  const auto yt = torch::tensor(y, torch::kFloat64);
  for (int kind = 0; kind < 2; ++kind) {
    auto loss = [&](const torch::Tensor& t) { return kind == 0 ? focal_loss(t, yt) : weighted_bce(t, yt); };
    auto zt = torch::tensor(z, torch::kFloat64).requires_grad_(true);
    loss(zt).backward();
    const auto g = zt.grad();
    for (std::int64_t i = 0; i < 5; ++i) {
      const double h = 1e-6;
      auto zp = torch::tensor(z, torch::kFloat64), zm = zp.clone();
      zp[i] += h;
      zm[i] -= h;
      const double fd = (loss(zp).item<double>() - loss(zm).item<double>()) / (2 * h);
      EXPECT_NEAR(g[i].item<double>(), fd, 1e-7) << kind << " " << i;
    }
  }
}

TEST(CnnNet, CanonicalFlattenAndZeroHead) {
  auto cfg = CnnConfig::canonical();
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.widths.back() * 64, cfg.head.front());
  // the canonical head is ~85M parameters; shrink it and keep the flatten width
  cfg.widths = {4, 4, 4, 4, 320};
  cfg.blocks = {1, 1, 1, 1};
  cfg.head = {20480, 8, 1};
  CnnNet net(cfg);
  const auto x = torch::randn({2, 3, 8, 32, 32});
  EXPECT_EQ(net->features(x).sizes(), (std::vector<std::int64_t>{2, 20480}));
  torch::NoGradGuard guard;
  net->output_layer()->weight.zero_();
  net->output_layer()->bias.zero_();
  const auto p = torch::sigmoid(net->forward(x, {}));
  EXPECT_EQ(p.sizes(), (std::vector<std::int64_t>{2}));
  EXPECT_TRUE(torch::allclose(p, torch::full({2}, 0.5)));
  EXPECT_THROW(net->forward(x, torch::ones({2, 2})), Error);
  cfg.head = {1000, 1};
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(FoundationNet, SliceEmbeddingShapeAndMeanPermutationInvariance) {
  FoundationConfig cfg;
  cfg.grouper = Grouper::Mean;
  FoundationNet net(cfg);
  torch::NoGradGuard guard;
  net->eval();
  const auto x = torch::randn({2, 3, 6, 24, 24});
  EXPECT_EQ(net->slice_embeddings(x).sizes(), (std::vector<std::int64_t>{2, 6, 512}));
  const auto perm = torch::tensor(std::vector<std::int64_t>{3, 0, 5, 1, 4, 2});
  const auto a = net->forward(x, {}), b = net->forward(x.index_select(2, perm), {});
  EXPECT_TRUE(torch::allclose(a, b, 1e-5, 1e-6));

  cfg.grouper = Grouper::Attention;
  FoundationNet att(cfg);
  att->eval();
  EXPECT_TRUE(torch::allclose(att->forward(x, {}), att->forward(x.index_select(2, perm), {}), 1e-5, 1e-6));
  cfg.squeezer_dim = 256;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(FoundationNet, ClinicalFusionAndFrozenEncoder) {
  FoundationConfig cfg;
  cfg.clinical_features = 2;
  FoundationNet net(cfg);
  const auto x = torch::randn({3, 3, 4, 24, 24});
  EXPECT_EQ(net->embedding(x, torch::zeros({3, 2})).size(1), 512 + 2);
  EXPECT_THROW(net->forward(x, {}), Error);
  for (const auto& p : net->encoder()->parameters()) EXPECT_FALSE(p.requires_grad());
  EXPECT_EQ(net->forward(x, torch::zeros({3, 2})).sizes(), (std::vector<std::int64_t>{3}));
}

TEST(Clinical, StandardizationUsesPopulationStats) {
  const auto s = fit_clinical({{60, 0.1}, {70, 0.3}, {80, 0.2}});
  EXPECT_NEAR(s.mean[0], 70, 1e-12);
  EXPECT_NEAR(s.stddev[0], std::sqrt(200.0 / 3.0), 1e-12);
  const auto z = standardize({80, 0.2}, s);
  EXPECT_NEAR(z[0], 10 / std::sqrt(200.0 / 3.0), 1e-12);
  EXPECT_NEAR(z[1], 0.0, 1e-12);
  EXPECT_THROW(fit_clinical({{60, 0.1}, {60, 0.3}}), Error);
  phantom::CaseRecord r;
  r.case_id = "x";
  EXPECT_THROW(clinical_features(r), Error);
}

TEST(Ensemble, MeanOfProbabilities) {
  const std::vector<RiskPrediction> m{RiskPrediction::from_logit("a", 0.0, "foundation+G", "32x32x8"),
                                      RiskPrediction::from_logit("a", logit_of(0.9), "foundation+G", "28x28x8")};
  const auto e = ensemble_predict(m);
  EXPECT_NEAR(e.probability, 0.7, 1e-12);
  EXPECT_NEAR(sigmoid(e.logit), 0.7, 1e-12);
  EXPECT_EQ(e.members.size(), 2u);
  const auto single = ensemble_predict(std::span(m.data(), 1));
  EXPECT_EQ(single.probability, 0.5);
  auto other = m;
  other[1].case_id = "b";
  EXPECT_THROW(ensemble_predict(other), Error);
  EXPECT_EQ(prediction_from_json(to_json(e)).probability, e.probability);
}

TEST(Schedule, AccumulationAndCosine) {
  const auto plan = accumulation_plan(256, 8, 32);
  ASSERT_EQ(plan.size(), 1u);
  EXPECT_EQ(plan[0], 256u);
  const auto ragged = accumulation_plan(70, 4, 8);
  EXPECT_EQ(ragged, (std::vector<std::size_t>{32, 32, 6}));
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 0, 0, 10), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 0, 5, 10), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(1e-3, 1e-5, 10, 10), 1e-5, 1e-15);
}

TEST(Config, PresetsAndJson) {
  const auto f = ClassifierConfig::foundation_canonical();
  EXPECT_EQ(f.optimizer, OptimizerKind::AdamW);
  EXPECT_EQ(f.batch_size * f.accumulation_steps, 256);
  EXPECT_EQ(f.pos_weight, kPosWeight);
  const auto c = ClassifierConfig::cnn_canonical();
  EXPECT_EQ(c.loss, LossKind::Focal);
  EXPECT_EQ(c.epochs, 250);
  auto d = ClassifierConfig::desk(Family::Cnn, InputVariant::Zones, 2);
  EXPECT_NO_THROW(d.validate());
  const auto back = classifier_config_from_json(to_json(d));
  EXPECT_EQ(to_json(back), to_json(d));
  d.variant = InputVariant::GlandClinical;
  EXPECT_THROW(d.validate(), Error);
  auto big = ClassifierConfig::foundation_canonical();
  big.patch = desk_patch(0);
  EXPECT_THROW(big.validate(), Error);
}

// Dark central blob for positives on a 32x32x8 patch.
ClassifierSample toy(int i, InputVariant v) {
  std::mt19937_64 rng(100 + static_cast<std::uint64_t>(i));
  std::normal_distribution<float> noise(0.0f, 0.05f);
  const int label = i % 2;
  const Dims d{32, 32, 8};
  ScalarGrid img(d, 0.6f), prior(d, 0.0f);
  for (std::int64_t z = 0; z < d.z; ++z)
    for (std::int64_t y = 0; y < d.y; ++y)
      for (std::int64_t x = 0; x < d.x; ++x) {
        const double r = std::hypot(x - 15.5, y - 15.5);
        if (r < 10) prior(x, y, z) = 1.0f;
        if (label && r < 5 && z > 1 && z < 6) img(x, y, z) = 0.2f;
        img(x, y, z) += noise(rng);
      }
  imaging::PatchStack s;
  s.geometry = {{1.5, 1.5, 3.0}, {0, 0, 0}};
  s.channels = {img, img};
  s.roles = {imaging::ChannelRole::Image, imaging::ChannelRole::Image};
  if (uses_prior(v)) {
    s.channels.push_back(prior);
    s.roles.push_back(imaging::ChannelRole::Prior);
  } else {
    s.channels.resize(1);
    s.roles.resize(1);
  }
  return {"toy-" + std::to_string(i), s, {55.0 + i, 0.1 + 0.01 * (i % 7)}, label};
}

TEST(Training, DeterministicAndLearnsToyTask) {
  auto cfg = ClassifierConfig::desk(Family::Foundation, InputVariant::GlandClinical, 0);
  cfg.epochs = 30;
  cfg.rng_seed = 5;
  std::vector<ClassifierSample> train, val;
  for (int i = 0; i < 16; ++i) train.push_back(toy(i, cfg.variant));
  for (int i = 16; i < 24; ++i) val.push_back(toy(i, cfg.variant));
  const auto a = train_classifier(train, val, cfg);
  const auto b = train_classifier(train, val, cfg);
  ASSERT_EQ(a.curve.size(), 30u);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  for (std::size_t e = 0; e < a.curve.size(); ++e) EXPECT_EQ(a.curve[e].train_loss, b.curve[e].train_loss);
  EXPECT_EQ(a.curve.back().optimizer_steps, 30u * 4u);
  ASSERT_TRUE(a.curve[static_cast<std::size_t>(a.best_epoch)].val_auc.has_value());
  EXPECT_GE(*a.curve[static_cast<std::size_t>(a.best_epoch)].val_auc, 0.9);

  const auto dir = std::filesystem::temp_directory_path() / "vbiopsy_clf_test";
  save_classifier(dir, a);
  const auto loaded = load_classifier(dir);
  const auto pa = predict_all(a, val), pb = predict_all(loaded, val);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i].probability, pb[i].probability, 1e-6);
  EXPECT_EQ(pa[0].model_tag, "foundation+G+C");
  std::filesystem::remove_all(dir);
}

TEST(Training, BoundLogitMatchesPredictAndIsDifferentiable) {
  for (auto family : {Family::Cnn, Family::Foundation}) {
    const auto cfg = ClassifierConfig::desk(family, InputVariant::Gland, 0);
    const auto state = init_classifier(cfg);
    const auto s = toy(1, cfg.variant);
    const auto fn = bound_logit(state, s);
    auto img = nn::to_tensor(s.patch).narrow(0, 0, 1).unsqueeze(0).requires_grad_(true);
    const auto z = fn(img);
    EXPECT_NEAR(z.item<double>(), predict(state, s).logit, 1e-5);
    z.sum().backward();
    EXPECT_GT(img.grad().abs().sum().item<double>(), 0.0);
  }
}

TEST(Training, RejectsMismatchedSamples) {
  const auto cfg = ClassifierConfig::desk(Family::Cnn, InputVariant::Gland, 0);
  EXPECT_THROW(train_classifier({}, {}, cfg), Error);
  EXPECT_THROW(train_classifier({toy(0, InputVariant::ImageOnly)}, {}, cfg), Error);
  auto s = toy(0, InputVariant::Gland);
  s.label = 2;
  EXPECT_THROW(train_classifier({s}, {}, cfg), Error);
}

}  // namespace
}  // namespace vbiopsy::classifier
