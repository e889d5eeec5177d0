#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "vbiopsy/classifier/inputs.hpp"
#include "vbiopsy/counterfactual/counterfactual.hpp"
#include "vbiopsy/nn/tensor.hpp"
#include "vbiopsy/phantom/phantom.hpp"

namespace vbiopsy::counterfactual {
namespace {

std::vector<double> vec(const ScalarGrid& g) { return {g.values().begin(), g.values().end()}; }

TEST(VaeGanLoss, WeightedSumAndWarmup) {
  const LossWeights w;
  EXPECT_NEAR(vaegan_total_loss({1, 2, 3, 4}, w, 10), 1.043002, 1e-12);
  EXPECT_NEAR(vaegan_total_loss({1, 2, 3, 4}, w, 9), 1.003002, 1e-12);
  EXPECT_EQ(vaegan_total_loss({0, 0, 0, 0}, w, 50), 0.0);
  EXPECT_THROW(vaegan_total_loss({std::nan(""), 0, 0, 0}, w, 0), Error);
  EXPECT_THROW(vaegan_total_loss({-1, 0, 0, 0}, w, 0), Error);
  EXPECT_NO_THROW(vaegan_total_loss({0, 0, 0, -3}, w, 20));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 5);
  for (int t = 0; t < 200; ++t) {
    const LossComponents c{u(rng), u(rng), u(rng), -u(rng)};
    const int epoch = t % 20;
    const double expect = c.reconstruction + 1e-6 * c.kl + 1e-3 * c.perceptual + (epoch >= 10 ? 1e-2 * c.adversarial : 0.0);
    EXPECT_NEAR(vaegan_total_loss(c, w, epoch), expect, 1e-6 * std::abs(expect));
  }
}

TEST(VaeGanLoss, ComponentIdentities) {
  const auto x = torch::rand({2, 1, 4, 8, 8}, torch::kFloat64);
  EXPECT_EQ(l1_reconstruction(x, x).item<double>(), 0.0);
  EXPECT_NEAR(l1_reconstruction(x, x + 0.25).item<double>(), 0.25, 1e-12);
  const auto zeros = torch::zeros({3, 5}, torch::kFloat64);
  EXPECT_EQ(gaussian_kl(zeros, zeros).item<double>(), 0.0);
  EXPECT_NEAR(gaussian_kl(torch::ones({1, 1}, torch::kFloat64), torch::zeros({1, 1}, torch::kFloat64)).item<double>(), 0.5,
              1e-12);
  EXPECT_THROW(gaussian_kl(zeros, torch::full({3, 5}, -std::numeric_limits<double>::infinity(), torch::kFloat64)), Error);
  classifier::SliceEncoder phi(1, std::vector<std::int64_t>{4, 8});
  EXPECT_EQ(perceptual_loss(perceptual_features(phi, x.to(torch::kFloat32)), perceptual_features(phi, x.to(torch::kFloat32)))
                .item<double>(),
            0.0);
  const auto half = torch::full({4}, 0.5);
  EXPECT_NEAR(adversarial_term(half, half).item<double>(), 2 * std::log(0.5), 1e-6);
  EXPECT_TRUE(std::isfinite(adversarial_term(torch::zeros({2}), torch::ones({2})).item<double>()));
}

// KL(q || p) = E_q[log q(z) - log p(z)], estimated by sampling.
TEST(VaeGanLoss, ClosedFormKlMatchesMonteCarlo) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> um(-1.5, 1.5), us(0.3, 2.0);
  std::normal_distribution<double> n01(0, 1);
  for (int t = 0; t < 20; ++t) {
    const int dim = 1 + t % 4;
    std::vector<double> mu(dim), sigma(dim), logvar(dim);
    for (int d = 0; d < dim; ++d) mu[d] = um(rng), sigma[d] = us(rng), logvar[d] = 2 * std::log(sigma[d]);
    const double closed =
        gaussian_kl(torch::tensor(mu, torch::kFloat64).unsqueeze(0), torch::tensor(logvar, torch::kFloat64).unsqueeze(0))
            .item<double>();
    const int samples = 200000;
    double sum = 0, sq = 0;
    for (int s = 0; s < samples; ++s) {
      double lr = 0;
      for (int d = 0; d < dim; ++d) {
        const double e = n01(rng), z = mu[d] + sigma[d] * e;
        lr += -std::log(sigma[d]) - 0.5 * e * e + 0.5 * z * z;
      }
      sum += lr;
      sq += lr * lr;
    }
    const double mean = sum / samples, se = std::sqrt((sq / samples - mean * mean) / samples);
    EXPECT_LE(std::abs(mean - closed), 3 * se + 1e-12) << t;
  }
}

// Toy stack in double: nonlinear decoder and classifier.
struct Toy {
  torch::Tensor a = torch::randn({6, 6}, torch::kFloat64) * 0.5;
  torch::Tensor w = torch::randn({1, 1, 1, 2, 3}, torch::kFloat64);
  TensorFn decode() const {
    auto a_ = a;
    return [a_](const torch::Tensor& z) { return torch::tanh(z.matmul(a_)).reshape({z.size(0), 1, 1, 2, 3}); };
  }
  TensorFn classify() const {
    auto w_ = w;
    return [w_](const torch::Tensor& x) { return (w_ * torch::sin(x) + 0.3 * x.pow(2)).flatten(1).sum(1); };
  }
};

TEST(LatentGradient, ExactMatchesFiniteDifferences) {
  torch::manual_seed(3);
  const Toy toy;
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const auto z = torch::randn({1, 6}, torch::kFloat64);
    for (bool prob : {false, true}) {
      const auto e = latent_gradient(z, toy.decode(), toy.classify(), GradientMode::Exact, prob);
      const auto f = latent_gradient(z, toy.decode(), toy.classify(), GradientMode::FiniteDifference, prob);
      EXPECT_EQ(e.sizes(), z.sizes());
      worst = std::max(worst, ((e - f).norm() / e.norm()).item<double>());
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(LatentGradient, ClosedFormToys) {
  const auto w = torch::randn({1, 1, 2, 3, 4}, torch::kFloat64);
  const TensorFn id = [](const torch::Tensor& z) { return z; };
  const TensorFn linear = [w](const torch::Tensor& x) { return (w * x).flatten(1).sum(1); };
  const auto z = torch::randn({1, 1, 2, 3, 4}, torch::kFloat64);
  EXPECT_TRUE(torch::allclose(latent_gradient(z, id, linear), w, 0, 1e-12));
  const TensorFn zero = [](const torch::Tensor& x) { return (0.0 * x).flatten(1).sum(1); };
  EXPECT_EQ(latent_gradient(z, id, zero).abs().max().item<double>(), 0.0);
}

LatentModel identity_model() {
  const TensorFn id = [](const torch::Tensor& t) { return t; };
  return {id, id};
}

TEST(Counterfactuals, LinearToyIsMonotoneAndAlphaZeroIsReconstruction) {
  torch::manual_seed(5);
  const auto w = torch::randn({1, 1, 2, 4, 4}, torch::kFloat64) * 0.1;
  const TensorFn clf = [w](const torch::Tensor& x) { return (w * x).flatten(1).sum(1); };
  const auto x = torch::randn({1, 1, 2, 4, 4}, torch::kFloat64);
  for (auto mode : {SweepMode::Linear, SweepMode::Iterative}) {
    CounterfactualConfig cfg;
    cfg.mode = mode;
    const auto job = generate_counterfactuals("toy", x, identity_model(), clf, cfg);
    ASSERT_EQ(job.predictions.size(), 11u);
    for (std::size_t i = 1; i < job.predictions.size(); ++i) EXPECT_GT(job.predictions[i], job.predictions[i - 1]);
    EXPECT_EQ(job.predictions[5], job.reconstruction_prediction);
    EXPECT_EQ(job.delta_p, 0.0);
    // logit is affine in alpha: w.x + alpha |w|^2
    const double w2 = (w * w).sum().item<double>(), base = (w * x).sum().item<double>();
    for (std::size_t i = 0; i < job.alphas.size(); ++i)
      EXPECT_NEAR(job.predictions[i], 1 / (1 + std::exp(-(base + job.alphas[i] * w2))), 1e-12);
  }
  CounterfactualConfig only_zero;
  only_zero.alphas = {0.0};
  const auto z0 = generate_counterfactuals("toy", x, identity_model(), clf, only_zero);
  EXPECT_LT(std::abs(z0.predictions[0] - z0.reconstruction_prediction), 1e-6);
  EXPECT_TRUE(heatmaps(z0).sequential.empty());
}

TEST(Counterfactuals, FidelityGateRefusesWithDeltaP) {
  const TensorFn clf = [](const torch::Tensor& x) { return x.flatten(1).sum(1); };
  const TensorFn enc = [](const torch::Tensor& x) { return x; };
  const TensorFn shifted = [](const torch::Tensor& z) { return z + 0.5 / z[0].numel(); };
  const auto x = torch::zeros({1, 1, 1, 2, 2}, torch::kFloat64);
  try {
    generate_counterfactuals("c1", x, {enc, shifted}, clf, {});
    FAIL() << "expected rejection";
  } catch (const FidelityRejected& e) {
    EXPECT_NEAR(e.delta_p(), 1 / (1 + std::exp(-0.5)) - 0.5, 1e-9);
    EXPECT_EQ(e.code(), ErrorCode::Unprocessable);
  }
}

TEST(Counterfactuals, BoundsAreOutermostShifts) {
  const std::vector<double> a{-2, -1, 0, 1, 2};
  const auto [lo, hi] = shift_bounds(a, {0.2, 0.38, 0.4, 0.47, 0.5}, 0.05);
  EXPECT_EQ(*lo, -2);
  EXPECT_EQ(*hi, 2);
  const auto [lo2, hi2] = shift_bounds(a, {0.39, 0.4, 0.4, 0.41, 0.6}, 0.05);
  EXPECT_FALSE(lo2.has_value());
  EXPECT_EQ(*hi2, 2);
  CounterfactualConfig bad;
  bad.alphas = {-1, 1};
  EXPECT_THROW(bad.validate(), Error);
  bad.alphas = {0, -1};
  EXPECT_THROW(bad.validate(), Error);
  const auto s = CounterfactualConfig{}.schedule();
  EXPECT_EQ(s.size(), 11u);
  EXPECT_EQ(s[5], 0.0);
  EXPECT_EQ(s.front(), -1.0);
}

TEST(Heatmaps, HandExampleAndOrderContract) {
  const ScalarGrid ref({2, 1, 1}, 0.0);
  ScalarGrid a({2, 1, 1}, 0.0), b({2, 1, 1}, 0.0), c({2, 1, 1}, 0.0);
  a[0] = 1;
  b[0] = 3;
  c[1] = 5;
  const auto h = heatmaps({a, b}, ref);
  EXPECT_EQ(h.aggregate[0], 2.0);
  EXPECT_EQ(h.aggregate[1], 0.0);
  ASSERT_EQ(h.sequential.size(), 1u);
  EXPECT_EQ(h.sequential[0][0], 2.0);
  EXPECT_EQ(h.sequential[0][1], 0.0);

  const auto p1 = heatmaps({a, b, c}, ref), p2 = heatmaps({c, a, b}, ref);
  EXPECT_EQ(vec(p1.aggregate), vec(p2.aggregate));
  EXPECT_NE(vec(p1.sequential[0]), vec(p2.sequential[0]));
  const auto z = heatmaps({ref, ref}, ref);
  for (double v : z.aggregate.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(heatmaps({a, b}, ref, HeatmapAggregate::Min).aggregate[0], 1.0);
  EXPECT_EQ((peak_voxel(p1.aggregate)), (std::array<std::int64_t, 3>{1, 0, 0}));
}

TEST(Fidelity, StrictPartitionAndHistogram) {
  const auto r = fidelity_partition({{"a", 0.09}, {"b", 0.11}, {"c", 0.1}, {"d", 0.0}, {"e", 0.5}, {"f", 0.06}});
  EXPECT_EQ(r.passed, (std::vector<std::string>{"a", "d", "f"}));
  EXPECT_EQ(r.failed, (std::vector<std::string>{"b", "c", "e"}));
  ASSERT_EQ(r.histogram.size(), 16u);
  std::size_t total = 0;
  for (auto n : r.histogram) total += n;
  EXPECT_EQ(total, 6u);
  EXPECT_EQ(r.histogram[0], 1u);
  EXPECT_EQ(r.histogram[3], 1u);
  EXPECT_EQ(r.histogram[4], 1u);
  EXPECT_EQ(r.histogram[5], 2u);
  EXPECT_EQ(r.histogram[15], 1u);

  const TensorFn clf = [](const torch::Tensor& x) { return x.flatten(1).sum(1); };
  std::vector<FidelityCase> cases;
  for (int i = 0; i < 5; ++i) cases.push_back({"c" + std::to_string(i), torch::randn({1, 1, 1, 2, 2}), clf});
  const auto id = reconstruction_fidelity(cases, identity_model());
  EXPECT_EQ(id.passed.size(), 5u);
  for (const auto& [k, v] : id.delta_p) EXPECT_EQ(v, 0.0);
}

std::vector<torch::Tensor> phantom_patches(std::uint64_t first, int count) {
  std::vector<torch::Tensor> out;
  const imaging::PatchSpec spec{{32, 32, 8}, {1.5, 1.5, 3.0}};
  for (int i = 0; i < count; ++i) {
    phantom::PhantomParams p;
    p.rng_seed = first + static_cast<std::uint64_t>(i);
    p.lesion_count = i % 2;
    const auto ph = phantom::generate_phantom(p);
    const auto patch = classifier::make_classifier_patch(ph.volume, ph.gland, std::nullopt, spec,
                                                         classifier::InputVariant::ImageOnly);
    out.push_back(nn::to_tensor(patch));
  }
  return out;
}

TEST(VaeGan, DeskTrainingHalvesHeldOutL1AndRoundTrips) {
  auto cfg = VaeGanConfig::desk();
  cfg.epochs = 15;
  cfg.weights.warmup_epochs = 5;
  cfg.rng_seed = 2;
  const auto train = phantom_patches(100, 8), val = phantom_patches(200, 4);
  auto s = train_vaegan(train, val, cfg);
  const double l1 = mean_l1(s, val);
  EXPECT_LE(l1, 0.5 * s.initial_val_l1) << "initial " << s.initial_val_l1;
  EXPECT_GE(s.best_epoch, 0);
  auto again = train_vaegan(train, val, cfg);
  for (std::size_t e = 0; e < s.curve.size(); ++e) EXPECT_EQ(s.curve[e].train_total, again.curve[e].train_total);

  const auto dir = std::filesystem::temp_directory_path() / "vbiopsy_vaegan_test";
  save_vaegan(dir, s);
  auto loaded = load_vaegan(dir);
  EXPECT_NEAR(mean_l1(loaded, val), l1, 1e-6);
  const auto x = val[0].unsqueeze(0);
  const auto model = latent_model(loaded);
  torch::NoGradGuard guard;
  const auto d = loaded.discriminator(x);
  EXPECT_GT(d.item<double>(), 0.0);
  EXPECT_LT(d.item<double>(), 1.0);
  EXPECT_EQ(model.decode(model.encode_mean(x)).sizes(), x.sizes());
  std::filesystem::remove_all(dir);
}

TEST(VaeGan, JobPersistence) {
  const TensorFn clf = [](const torch::Tensor& x) { return x.flatten(1).mean(1); };
  const auto x = torch::rand({1, 1, 2, 3, 4}, torch::kFloat64);
  const auto job = generate_counterfactuals("p1", x, identity_model(), clf, {});
  const auto maps = heatmaps(job);
  EXPECT_EQ(maps.sequential.size(), 10u);
  const auto dir = std::filesystem::temp_directory_path() / "vbiopsy_job_test";
  save_job(dir, job, maps, {{1.5, 1.5, 3}, {0, 0, 0}});
  EXPECT_TRUE(std::filesystem::exists(dir / "heatmap_aggregate.nii.gz"));
  EXPECT_TRUE(std::filesystem::exists(dir / "cf_10.nii.gz"));
  std::ifstream in(dir / "trace.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["case_id"], "p1");
  EXPECT_EQ(j["predictions"].size(), 11u);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace vbiopsy::counterfactual
