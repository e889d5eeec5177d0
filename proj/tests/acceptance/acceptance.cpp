// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "test_oracles.hpp"
#include "trial_oracle.hpp"
#include "vbiopsy/classifier/losses.hpp"
#include "vbiopsy/counterfactual/counterfactual.hpp"
#include "vbiopsy/imaging/augment.hpp"
#include "vbiopsy/metrics/classification.hpp"
#include "vbiopsy/metrics/trial.hpp"
#include "vbiopsy/orchestration/pipeline.hpp"
#include "vbiopsy/phantom/phantom.hpp"
#include "vbiopsy/segmenter/postprocess.hpp"

using namespace vbiopsy;
namespace fs = std::filesystem;
namespace cf = vbiopsy::counterfactual;
namespace orch = vbiopsy::orchestration;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------

void composite_rows(Outcome& o) {
  struct Row {
    const char* name;
    double auc, bacc, sens, spec, score;
  };
  const Row rows[] = {{"challenge winners", 0.716, 0.637, 0.472, 0.802, 0.669},
                      {"UMedPT 224+G", 0.722, 0.720, 0.706, 0.733, 0.720},
                      {"ensemble", 0.793, 0.738, 0.765, 0.711, 0.760}};
  for (const auto& r : rows) {
    const double s = metrics::composite_score(r.auc, r.bacc, r.sens, r.spec);
    o.check(std::abs(s - r.score) <= 1e-3, r.name);
    o.detail << r.name << " " << fmt(s) << " vs " << r.score << "; ";
  }
}

void metric_oracles(Outcome& o) {
  std::mt19937_64 rng(1);
  std::size_t auc_bad = 0;
  for (int t = 0; t < 200; ++t) {
    auto [s, y] = oracle::random_scores(rng, 20 + t % 17, t % 3 == 0);
    auc_bad += metrics::roc_auc(s, y) != oracle::pair_count_auc(s, y);
  }
  o.check(auc_bad == 0, "auc");

  // TP=3 FN=1 TN=4 FP=2
  const std::vector<int> pred{1, 1, 1, 0, 0, 0, 0, 0, 1, 1}, y{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  const auto m = metrics::confusion_metrics(pred, y);
  o.check(m.counts.tp == 3 && m.counts.fn == 1 && m.counts.tn == 4 && m.counts.fp == 2, "confusion counts");
  // hand values as rationals; the library reaches them by a different rounding path
  const double rate_err = std::max({std::abs(*m.sensitivity.value - 0.75), std::abs(*m.specificity.value - 2.0 / 3.0),
                                    std::abs(*m.balanced_accuracy.value - 17.0 / 24.0), std::abs(*m.f1.value - 2.0 / 3.0),
                                    std::abs(*m.accuracy.value - 0.7)});
  o.check(rate_err < 1e-12, "confusion rates");

  const std::vector<int> a{1, 1, 0, 0}, b{1, 0, 1, 0}, r1{1, 1, 1, 0, 0}, r2{1, 1, 0, 0, 0};
  o.check(metrics::cohens_kappa(a, b).value == 0.0 && metrics::cohens_kappa(a, a).value == 1.0, "kappa 0/1");
  o.check(metrics::cohens_kappa(r1, r2).value == (0.8 - 0.48) / 0.52, "kappa 0.615");

  std::size_t dice_bad = 0;
  std::mt19937_64 mrng(22);
  for (int t = 0; t < 100; ++t) {
    const auto p = oracle::random_blobs(mrng, {8, 7, 5}, 1, 0.4);
    const auto q = oracle::random_blobs(mrng, {8, 7, 5}, 1, 0.4);
    dice_bad += segmenter::dice(p, q, 1) != oracle::set_dice(p, q, 1);
  }
  o.check(dice_bad == 0, "dice");
  o.detail << "auc mismatches " << auc_bad << "/200, dice mismatches " << dice_bad << "/100, kappa fixtures exact, confusion rates within "
           << rate_err;
}

void loss_arithmetic(Outcome& o) {
  const cf::LossWeights w;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 5);
  double worst = 0;
  bool both = false, pre = false, post = false;
  for (int t = 0; t < 400; ++t) {
    const cf::LossComponents c{u(rng), u(rng), u(rng), -u(rng)};
    const int epoch = t % 20;
    const bool adv = epoch >= w.warmup_epochs;
    pre |= !adv;
    post |= adv;
    const double expect = c.reconstruction + w.kl * c.kl + w.perceptual * c.perceptual + (adv ? w.adversarial * c.adversarial : 0.0);
    worst = std::max(worst, std::abs(cf::vaegan_total_loss(c, w, epoch) - expect) / std::abs(expect));
  }
  both = pre && post;
  o.check(worst <= 1e-6 && both, "total loss");

  std::normal_distribution<double> n01(0, 1);
  std::uniform_real_distribution<double> um(-1.5, 1.5), us(0.3, 2.0);
  double worst_z = 0;
  for (int t = 0; t < 10; ++t) {
    const int dim = 1 + t % 4;
    std::vector<double> mu(dim), sigma(dim), logvar(dim);
    for (int d = 0; d < dim; ++d) mu[d] = um(rng), sigma[d] = us(rng), logvar[d] = 2 * std::log(sigma[d]);
    const double closed = cf::gaussian_kl(torch::tensor(mu, torch::kFloat64).unsqueeze(0),
                                          torch::tensor(logvar, torch::kFloat64).unsqueeze(0))
                              .item<double>();
    const int n = 200000;
    double sum = 0, sq = 0;
    for (int s = 0; s < n; ++s) {
      double lr = 0;
      for (int d = 0; d < dim; ++d) {
        const double e = n01(rng), z = mu[d] + sigma[d] * e;
        lr += -std::log(sigma[d]) - 0.5 * e * e + 0.5 * z * z;
      }
      sum += lr;
      sq += lr * lr;
    }
    const double mean = sum / n, se = std::sqrt((sq / n - mean * mean) / n);
    worst_z = std::max(worst_z, std::abs(mean - closed) / se);
  }
  o.check(worst_z <= 3.0, "kl");

  const double focal = classifier::focal_loss(0.5, 1, 0.8, 2.0), wbce = classifier::weighted_bce(0.5, 1, 2.342);
  o.check(std::abs(focal - 0.13863) <= 1e-4 && std::abs(wbce - 1.6233) <= 1e-4, "hand values");
  o.detail << "total loss worst rel err " << std::scientific << std::setprecision(1) << worst << std::defaultfloat
           << " (both regimes); KL worst |z| " << fmt(worst_z, 2) << "; focal " << fmt(focal, 5) << ", wbce " << fmt(wbce, 4);
}

void gradient_integrity(Outcome& o) {
  torch::manual_seed(3);
  const auto a = torch::randn({6, 6}, torch::kFloat64) * 0.5;
  const auto wt = torch::randn({1, 1, 1, 2, 3}, torch::kFloat64);
  const cf::TensorFn decode = [a](const torch::Tensor& z) { return torch::tanh(z.matmul(a)).reshape({z.size(0), 1, 1, 2, 3}); };
  const cf::TensorFn classify = [wt](const torch::Tensor& x) { return (wt * torch::sin(x) + 0.3 * x.pow(2)).flatten(1).sum(1); };
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const auto z = torch::randn({1, 6}, torch::kFloat64);
    for (bool prob : {false, true}) {
      const auto e = cf::latent_gradient(z, decode, classify, cf::GradientMode::Exact, prob);
      // central differences written out here, independent of the library's own mode
      auto f = torch::zeros_like(z);
      const double h = 1e-5;
      for (std::int64_t i = 0; i < z.numel(); ++i) {
        auto zp = z.clone(), zm = z.clone();
        zp[0][i] += h;
        zm[0][i] -= h;
        auto score = [&](const torch::Tensor& zz) {
          const auto s = classify(decode(zz));
          return (prob ? torch::sigmoid(s) : s).item<double>();
        };
        f[0][i] = (score(zp) - score(zm)) / (2 * h);
      }
      worst = std::max(worst, ((e - f).norm() / e.norm()).item<double>());
    }
  }
  o.check(worst < 1e-3, "latent gradient");

  const std::vector<double> zs{-2.5, -0.3, 0.0, 0.7, 3.1};
  const auto yt = torch::tensor(std::vector<double>{1, 0, 1, 1, 0}, torch::kFloat64);
  double worst_loss = 0;
  for (int kind = 0; kind < 2; ++kind) {
    auto loss = [&](const torch::Tensor& t) { return kind == 0 ? classifier::focal_loss(t, yt) : classifier::weighted_bce(t, yt); };
    auto zt = torch::tensor(zs, torch::kFloat64).requires_grad_(true);
    loss(zt).backward();
    for (std::int64_t i = 0; i < 5; ++i) {
      const double h = 1e-6;
      auto zp = torch::tensor(zs, torch::kFloat64), zm = zp.clone();
      zp[i] += h;
      zm[i] -= h;
      const double fd = (loss(zp).item<double>() - loss(zm).item<double>()) / (2 * h);
      const double g = zt.grad()[i].item<double>();
      worst_loss = std::max(worst_loss, std::abs(g - fd) / std::max(std::abs(fd), 1e-8));
    }
  }
  o.check(worst_loss < 1e-3, "loss gradients");
  o.detail << "latent worst rel err " << std::scientific << std::setprecision(2) << worst << ", loss worst rel err "
           << worst_loss << std::defaultfloat << " over 100 latents x {logit, probability}";
}

void counterfactual_contracts(Outcome& o) {
  torch::manual_seed(5);
  const cf::TensorFn id = [](const torch::Tensor& t) { return t; };
  const cf::LatentModel identity{id, id};
  const auto w = torch::randn({1, 1, 2, 4, 4}, torch::kFloat64) * 0.1;
  const cf::TensorFn clf = [w](const torch::Tensor& x) { return (w * x).flatten(1).sum(1); };
  const auto x = torch::randn({1, 1, 2, 4, 4}, torch::kFloat64);

  cf::CounterfactualConfig zero;
  zero.alphas = {0.0};
  const auto z0 = cf::generate_counterfactuals("toy", x, identity, clf, zero);
  const double d0 = std::abs(z0.predictions[0] - z0.reconstruction_prediction);
  o.check(d0 < 1e-6, "alpha 0");

  const double w2 = (w * w).sum().item<double>(), base = (w * x).sum().item<double>();
  double worst = 0;
  bool monotone = true;
  for (auto mode : {cf::SweepMode::Linear, cf::SweepMode::Iterative}) {
    cf::CounterfactualConfig c;
    c.mode = mode;
    const auto job = cf::generate_counterfactuals("toy", x, identity, clf, c);
    for (std::size_t i = 1; i < job.predictions.size(); ++i) monotone &= job.predictions[i] > job.predictions[i - 1];
    for (std::size_t i = 0; i < job.alphas.size(); ++i)
      worst = std::max(worst, std::abs(job.predictions[i] - 1 / (1 + std::exp(-(base + job.alphas[i] * w2)))));
  }
  o.check(monotone && worst < 1e-12, "linear toy");

  const auto r = cf::fidelity_partition({{"a", 0.09}, {"b", 0.11}, {"c", 0.1}, {"d", 0.0}, {"e", 0.5}, {"f", 0.0999999}});
  o.check(r.passed == std::vector<std::string>{"a", "d", "f"} && r.failed == std::vector<std::string>{"b", "c", "e"},
          "fidelity partition");
  o.detail << "|dp| at alpha 0 = " << d0 << "; linear toy monotone, closed-form err " << worst
           << "; partition at 0.1 passed {a,d,f} failed {b,c,e}";
}

// ---------------------------------------------------------------------------

struct E2eResult {
  double seg_dice = 0;
  double val_auc_g = 0;
  double test_auc_g = 0, test_auc_image = 0;
  std::size_t fidelity_pass = 0, fidelity_total = 0, peak_inside = 0;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

E2eResult run_e2e(const fs::path& root) {
  E2eResult r;
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& s) { std::cerr << "  [" << fmt(seconds_since(t0), 0) << "s] " << s << std::endl; };

  auto g = orch::PipelineConfig::desk(root / "gland");
  orch::phantom_gen(g);
  log("phantoms generated");
  r.seg_dice = orch::train_seg(g).test_dice;
  log("segmenter test DSC " + fmt(r.seg_dice));
  orch::preprocess(g);
  const auto scales = orch::train_clf(g);
  r.val_auc_g = scales.front().val_auc.value_or(0.0);
  r.test_auc_g = orch::evaluate(g, "test").auc.value.value_or(0.0);
  log("foundation+G val AUC " + fmt(r.val_auc_g) + ", ensemble test AUC " + fmt(r.test_auc_g));

  // same seeds, same data and segmenter; only the input variant differs
  auto img = g;
  img.storage_root = root / "image";
  img.classifier.variant = classifier::InputVariant::ImageOnly;
  fs::create_directories(img.storage_root / "models");
  fs::copy(orch::layout(g).data(), orch::layout(img).data(), fs::copy_options::recursive);
  fs::copy(orch::layout(g).segmenter(), orch::layout(img).segmenter(), fs::copy_options::recursive);
  orch::preprocess(img);
  orch::train_clf(img);
  r.test_auc_image = orch::evaluate(img, "test").auc.value.value_or(0.0);
  log("image-only ensemble test AUC " + fmt(r.test_auc_image));

  orch::train_vaegan_cmd(g);
  log("vae-gan trained");
  const auto fid = orch::fidelity(g, "test");
  r.fidelity_total = fid.passed.size() + fid.failed.size();
  r.fidelity_pass = fid.passed.size();
  std::map<std::string, phantom::CaseRecord> records;
  for (const auto& rec : orch::load_records(g)) records[rec.case_id] = rec;
  for (const auto& id : fid.passed) {
    const auto job = orch::run_counterfactual(g, id);
    const auto peak = cf::peak_voxel(job.maps.aggregate);
    const auto sample = orch::load_sample(g, g.counterfactual_scale, records.at(id));
    for (std::size_t c = 0; c < sample.patch.channel_count(); ++c)
      if (sample.patch.roles[c] == imaging::ChannelRole::Prior) {
        r.peak_inside += sample.patch.channels[c](peak[0], peak[1], peak[2]) > 0.5;
        break;
      }
  }
  log("counterfactuals done");
  return r;
}

void phantom_e2e(Outcome& o, const fs::path& root) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_e2e(root);
  const double frac = r.fidelity_pass ? static_cast<double>(r.peak_inside) / static_cast<double>(r.fidelity_pass) : 0.0;
  o.check(r.seg_dice >= 0.85, "segmenter DSC");
  o.check(r.val_auc_g >= 0.85, "val AUC");
  o.check(r.test_auc_g >= r.test_auc_image, "G vs image-only");
  o.check(r.fidelity_pass > 0 && frac >= 0.8, "heatmap peak");
  o.detail << "gland DSC " << fmt(r.seg_dice) << "; foundation+G val AUC " << fmt(r.val_auc_g) << "; test AUC G "
           << fmt(r.test_auc_g) << " vs image-only " << fmt(r.test_auc_image) << "; peak in gland " << r.peak_inside << "/"
           << r.fidelity_pass << " fidelity-passing (" << r.fidelity_total << " test cases); " << fmt(seconds_since(t0), 0)
           << " s";
}

// ---------------------------------------------------------------------------

void trial_harness(Outcome& o) {
  const auto fx = oracle::figure6_fixture();
  const auto r = metrics::trial_report(fx.sessions, fx.truth, fx.ai);
  const auto& un = r.phases.at(metrics::TrialPhase::Unaided);
  const auto& ai = r.phases.at(metrics::TrialPhase::AiAssisted);
  o.check(std::abs(un.mean_accuracy - 0.72) < 1e-12 && std::abs(ai.mean_accuracy - 0.77) < 1e-12, "accuracy");
  o.check(std::abs(un.time.mean_minutes - 5.3) < 1e-12 && std::abs(ai.time.mean_minutes - 3.1) < 1e-12, "time");

  std::size_t mismatches = 0, illegal = 0, events = 0, assisted = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = oracle::run_trial_sequence(seed);
    mismatches += s.mismatches;
    illegal += s.illegal;
    events += s.events;
    assisted += s.assisted_opened;
  }
  o.check(mismatches == 0, "state machine");
  o.detail << "accuracy " << un.mean_accuracy << "/" << ai.mean_accuracy << ", minutes " << un.time.mean_minutes << "/"
           << ai.time.mean_minutes << "; 1000 sequences, " << events << " events, " << illegal << " illegal all rejected, "
           << mismatches << " disagreements, " << assisted << " legal assisted opens";
}

// Nearest-neighbour replay of one fired spatial transform. The inverse is
// taken per factor in closed form rather than by a generic 3x3 inverse.
using M3 = std::array<std::array<double, 3>, 3>;

M3 mul(const M3& a, const M3& b) {
  M3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

M3 inverse_of(const imaging::FiredTransform& t) {
  const auto& p = t.params;
  switch (t.kind) {
    case imaging::TransformKind::Zoom: return {{{1 / p[0], 0, 0}, {0, 1 / p[0], 0}, {0, 0, 1 / p[0]}}};
    case imaging::TransformKind::Flip: {
      M3 m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
      for (double a : p) m[static_cast<int>(a)][static_cast<int>(a)] = -1;
      return m;
    }
    case imaging::TransformKind::Affine: {
      // forward = R(angle) * Shear(a, b, c) * Scale(s)
      const double c = std::cos(p[0]), s = std::sin(p[0]);
      const M3 rot_t{{{c, s, 0}, {-s, c, 0}, {0, 0, 1}}};
      const double a = p[1], b = p[2], d = p[3];
      const M3 shear_inv{{{1, -a, a * d - b}, {0, 1, -d}, {0, 0, 1}}};
      const M3 scale_inv{{{1 / p[4], 0, 0}, {0, 1 / p[5], 0}, {0, 0, 1 / p[6]}}};
      return mul(scale_inv, mul(shear_inv, rot_t));
    }
    default: throw std::logic_error("not spatial");
  }
}

ScalarGrid replay(const ScalarGrid& in, const M3& inv, const Vec3& sp) {
  const auto& d = in.dims();
  ScalarGrid out(d, 0.0);
  const double cx = (d.x - 1) / 2.0, cy = (d.y - 1) / 2.0, cz = (d.z - 1) / 2.0;
  for (std::int64_t z = 0; z < d.z; ++z)
    for (std::int64_t y = 0; y < d.y; ++y)
      for (std::int64_t x = 0; x < d.x; ++x) {
        const double px = (x - cx) * sp[0], py = (y - cy) * sp[1], pz = (z - cz) * sp[2];
        const double sx = cx + (inv[0][0] * px + inv[0][1] * py + inv[0][2] * pz) / sp[0];
        const double sy = cy + (inv[1][0] * px + inv[1][1] * py + inv[1][2] * pz) / sp[1];
        const double sz = cz + (inv[2][0] * px + inv[2][1] * py + inv[2][2] * pz) / sp[2];
        const auto ix = static_cast<std::int64_t>(std::floor(sx + 0.5));
        const auto iy = static_cast<std::int64_t>(std::floor(sy + 0.5));
        const auto iz = static_cast<std::int64_t>(std::floor(sz + 0.5));
        if (ix >= 0 && iy >= 0 && iz >= 0 && ix < d.x && iy < d.y && iz < d.z) out(x, y, z) = in(ix, iy, iz);
      }
  return out;
}

void prior_hygiene(Outcome& o) {
  phantom::PhantomParams pp;
  pp.rng_seed = 4;
  pp.lesion_count = 1;
  const auto ph = phantom::generate_phantom(pp);
  const auto patch = classifier::make_classifier_patch(ph.volume, ph.gland, ph.zones, classifier::desk_patch(0),
                                                       classifier::InputVariant::Zones);
  std::size_t prior_channels = 0;
  for (auto role : patch.roles) prior_channels += role == imaging::ChannelRole::Prior;

  std::size_t mismatched = 0, spatial_draws = 0, intensity_only = 0, intensity_fired = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    auto cfg = imaging::AugmentationConfig{};
    cfg.rng_seed = seed;
    const auto r = imaging::augment_traced(patch, cfg);
    bool spatial = false, intensity = false;
    for (std::size_t c = 0; c < patch.channel_count(); ++c) {
      if (patch.roles[c] != imaging::ChannelRole::Prior) continue;
      auto expect = patch.channels[c];
      for (const auto& t : r.fired)
        if (imaging::is_spatial(t.kind)) expect = replay(expect, inverse_of(t), patch.geometry.spacing);
      mismatched += !(r.patch.channels[c] == expect);
    }
    for (const auto& t : r.fired) (imaging::is_spatial(t.kind) ? spatial : intensity) = true;
    spatial_draws += spatial;
    intensity_fired += intensity;
    intensity_only += intensity && !spatial;
  }
  o.check(prior_channels > 0 && mismatched == 0, "prior replay");
  o.check(spatial_draws > 0 && intensity_only > 0, "coverage");
  o.detail << "500 draws x " << prior_channels << " prior channels: " << mismatched << " mismatches; " << spatial_draws
           << " draws with spatial, " << intensity_fired << " with intensity (" << intensity_only << " intensity only)";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string root_arg;
  bool keep = false;
  std::vector<int> only;
  app.add_option("--root", root_arg, "work directory for the end-to-end run");
  app.add_flag("--keep", keep, "keep the work directory");
  app.add_option("--only", only, "criterion numbers to run");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  const fs::path root = root_arg.empty() ? fs::temp_directory_path() / ("vbiopsy-acceptance-" + std::to_string(::getpid()))
                                         : fs::path(root_arg);
  fs::remove_all(root);
  fs::create_directories(root);

  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"composite-score reproduction", composite_rows},
      {"metric oracles", metric_oracles},
      {"loss arithmetic", loss_arithmetic},
      {"gradient integrity", gradient_integrity},
      {"counterfactual contracts", counterfactual_contracts},
      {"phantom end-to-end", [&](Outcome& o) { phantom_e2e(o, root); }},
      {"trial harness", trial_harness},
      {"prior-channel hygiene", prior_hygiene},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << criteria[i].first << ": " << o.detail.str() << std::endl;
  }
  if (!keep) fs::remove_all(root);
  std::cout << (failed ? "FAILED " + std::to_string(failed) + " criteria" : std::string("ALL CRITERIA PASS")) << std::endl;
  return failed ? 1 : 0;
}
