#include "vbiopsy/counterfactual/vaegan.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "vbiopsy/classifier/model.hpp"
#include "vbiopsy/common/error.hpp"
#include "vbiopsy/nn/tensor.hpp"

namespace vbiopsy::counterfactual {

using nlohmann::json;
namespace F = torch::nn::functional;

namespace {

constexpr double kSlope = 0.01;
// A discriminator output this close to 0 or 1 counts as saturated.
constexpr double kSaturation = 1e-6;

torch::nn::Conv3dOptions conv(std::int64_t in, std::int64_t out, bool downsample) {
  auto o = torch::nn::Conv3dOptions(in, out, 3).padding(1);
  if (downsample) o.stride({1, 2, 2});
  return o;
}

torch::nn::InstanceNorm3d inorm(std::int64_t c) {
  return torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(c).affine(true));
}

torch::nn::LeakyReLU lrelu(double slope = kSlope) {
  return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(slope));
}

void require_finite_nonneg(double v, const char* name) {
  require(std::isfinite(v), ErrorCode::NonFinite, std::string("loss component ") + name + " is not finite");
  require(v >= 0.0, ErrorCode::InvalidArgument, std::string("loss component ") + name + " must be >= 0");
}

torch::Tensor batch_of(const std::vector<torch::Tensor>& images, const std::vector<std::int64_t>& idx) {
  std::vector<torch::Tensor> xs;
  for (auto i : idx) {
    auto t = images[static_cast<std::size_t>(i)];
    xs.push_back(t.dim() == 3 ? t.unsqueeze(0) : t);
  }
  return torch::stack(xs).to(torch::kFloat32);
}

json components_json(const LossComponents& c) {
  return {{"reconstruction", c.reconstruction}, {"kl", c.kl}, {"perceptual", c.perceptual}, {"adversarial", c.adversarial}};
}

LossComponents components_from_json(const json& j) {
  return {j.at("reconstruction"), j.at("kl"), j.at("perceptual"), j.at("adversarial")};
}

}  // namespace

void LossWeights::validate() const {
  require(kl >= 0 && perceptual >= 0 && adversarial >= 0, ErrorCode::InvalidArgument, "loss weights must be >= 0");
  require(warmup_epochs >= 0, ErrorCode::InvalidArgument, "warm-up epochs must be >= 0");
}

double vaegan_total_loss(const LossComponents& c, const LossWeights& w, int epoch) {
  w.validate();
  require_finite_nonneg(c.reconstruction, "reconstruction");
  require_finite_nonneg(c.kl, "kl");
  require_finite_nonneg(c.perceptual, "perceptual");
  require(std::isfinite(c.adversarial), ErrorCode::NonFinite, "loss component adversarial is not finite");
  double total = c.reconstruction + w.kl * c.kl + w.perceptual * c.perceptual;
  if (epoch >= w.warmup_epochs) total += w.adversarial * c.adversarial;
  return total;
}

torch::Tensor vaegan_total_loss(const torch::Tensor& rec, const torch::Tensor& kl, const torch::Tensor& perc,
                                const torch::Tensor& adv, const LossWeights& w, int epoch) {
  auto total = rec + w.kl * kl + w.perceptual * perc;
  if (epoch >= w.warmup_epochs) total = total + w.adversarial * adv;
  return total;
}

torch::Tensor l1_reconstruction(const torch::Tensor& x, const torch::Tensor& xbar) {
  require(x.sizes() == xbar.sizes(), ErrorCode::GeometryMismatch, "reconstruction shape differs from input");
  return (x - xbar).abs().mean();
}

torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& logvar) {
  require(mu.sizes() == logvar.sizes() && mu.dim() >= 1, ErrorCode::GeometryMismatch, "posterior mu/logvar shapes differ");
  require(torch::isfinite(logvar).all().item<bool>(), ErrorCode::DegenerateInput,
          "degenerate posterior: variance is zero or infinite");
  const auto per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar);
  return per.flatten(1).sum(1).mean();
}

torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& fx, const std::vector<torch::Tensor>& fxbar) {
  require(fx.size() == fxbar.size() && !fx.empty(), ErrorCode::GeometryMismatch, "perceptual feature lists differ");
  auto total = torch::zeros({}, fx[0].options());
  for (std::size_t l = 0; l < fx.size(); ++l) {
    require(fx[l].sizes() == fxbar[l].sizes(), ErrorCode::GeometryMismatch, "perceptual feature shapes differ");
    total = total + (fx[l] - fxbar[l]).pow(2).mean();
  }
  return total;
}

torch::Tensor adversarial_term(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  return torch::log(d_real.clamp(kDiscEps, 1.0 - kDiscEps)).mean() +
         torch::log(1.0 - d_fake.clamp(kDiscEps, 1.0 - kDiscEps)).mean();
}

VaeGanConfig VaeGanConfig::desk() {
  VaeGanConfig c;
  c.patch = {{32, 32, 8}, {1.5, 1.5, 3.0}};
  c.allow_patch_override = true;
  c.epochs = 40;
  c.patience = 15;
  c.generator_lr = 2e-3;
  c.discriminator_lr = 1e-4;
  return c;
}

void VaeGanConfig::validate() const {
  patch.validate(allow_patch_override);
  weights.validate();
  require(!encoder_widths.empty() && !perceptual_widths.empty() && !discriminator_widths.empty(),
          ErrorCode::InvalidArgument, "vae-gan networks need at least one layer");
  require(latent_channels >= 1, ErrorCode::InvalidArgument, "latent channels must be >= 1");
  const std::int64_t div = std::int64_t{1} << encoder_widths.size();
  require(patch.size.x % div == 0 && patch.size.y % div == 0, ErrorCode::InvalidArgument,
          "patch in-plane size must be divisible by " + std::to_string(div));
  require(epochs >= 1 && batch_size >= 1 && patience >= 1, ErrorCode::InvalidArgument,
          "epochs, batch size and patience must be >= 1");
  require(generator_lr > 0 && discriminator_lr > 0, ErrorCode::InvalidArgument, "learning rates must be > 0");
}

json to_json(const VaeGanConfig& c) {
  return {{"patch", {{"size", {c.patch.size.x, c.patch.size.y, c.patch.size.z}}, {"target_spacing", c.patch.target_spacing}}},
          {"allow_patch_override", c.allow_patch_override},
          {"encoder_widths", c.encoder_widths},
          {"latent_channels", c.latent_channels},
          {"perceptual_widths", c.perceptual_widths},
          {"discriminator_widths", c.discriminator_widths},
          {"weights",
           {{"kl", c.weights.kl},
            {"perceptual", c.weights.perceptual},
            {"adversarial", c.weights.adversarial},
            {"warmup_epochs", c.weights.warmup_epochs}}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"generator_lr", c.generator_lr},
          {"discriminator_lr", c.discriminator_lr},
          {"rng_seed", c.rng_seed}};
}

VaeGanConfig vaegan_config_from_json(const json& j) {
  VaeGanConfig c;
  if (j.contains("patch")) {
    const auto s = j["patch"].at("size").get<std::vector<std::int64_t>>();
    require(s.size() == 3, ErrorCode::InvalidArgument, "patch size needs three entries");
    c.patch.size = {s[0], s[1], s[2]};
    c.patch.target_spacing = j["patch"].value("target_spacing", c.patch.target_spacing);
  }
  c.allow_patch_override = j.value("allow_patch_override", c.allow_patch_override);
  c.encoder_widths = j.value("encoder_widths", c.encoder_widths);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.perceptual_widths = j.value("perceptual_widths", c.perceptual_widths);
  c.discriminator_widths = j.value("discriminator_widths", c.discriminator_widths);
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    c.weights.kl = w.value("kl", c.weights.kl);
    c.weights.perceptual = w.value("perceptual", c.weights.perceptual);
    c.weights.adversarial = w.value("adversarial", c.weights.adversarial);
    c.weights.warmup_epochs = w.value("warmup_epochs", c.weights.warmup_epochs);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.generator_lr = j.value("generator_lr", c.generator_lr);
  c.discriminator_lr = j.value("discriminator_lr", c.discriminator_lr);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.validate();
  return c;
}

VaeEncoderImpl::VaeEncoderImpl(const std::vector<std::int64_t>& widths, std::int64_t latent_channels) {
  body_ = torch::nn::Sequential();
  std::int64_t prev = 1;
  for (auto w : widths) {
    body_->push_back(torch::nn::Conv3d(conv(prev, w, true)));
    body_->push_back(inorm(w));
    body_->push_back(lrelu());
    prev = w;
  }
  register_module("body", body_);
  mu_ = register_module("mu", torch::nn::Conv3d(conv(prev, latent_channels, false)));
  logvar_ = register_module("logvar", torch::nn::Conv3d(conv(prev, latent_channels, false)));
}

std::pair<torch::Tensor, torch::Tensor> VaeEncoderImpl::forward(const torch::Tensor& x) {
  require(x.dim() == 5 && x.size(1) == 1, ErrorCode::GeometryMismatch, "vae encoder expects [B, 1, z, y, x]");
  const auto h = body_->forward(x);
  return {mu_(h), logvar_(h)};
}

VaeDecoderImpl::VaeDecoderImpl(const std::vector<std::int64_t>& widths, std::int64_t latent_channels) {
  in_ = register_module("stem", torch::nn::Conv3d(conv(latent_channels, widths.back(), false)));
  for (std::size_t k = widths.size(); k-- > 0;) {
    const auto out = widths[k == 0 ? 0 : k - 1];
    const auto i = ups_.size();
    ups_.push_back(register_module("up" + std::to_string(i), torch::nn::Conv3d(conv(widths[k], out, false))));
    norms_.push_back(register_module("norm" + std::to_string(i), inorm(out)));
  }
  out_ = register_module("out", torch::nn::Conv3d(conv(widths.front(), 1, false)));
}

torch::Tensor VaeDecoderImpl::forward(const torch::Tensor& z) {
  auto h = F::leaky_relu(in_(z), F::LeakyReLUFuncOptions().negative_slope(kSlope));
  for (std::size_t i = 0; i < ups_.size(); ++i) {
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{1.0, 2.0, 2.0})
                              .mode(torch::kTrilinear)
                              .align_corners(false));
    h = F::leaky_relu(norms_[i](ups_[i](h)), F::LeakyReLUFuncOptions().negative_slope(kSlope));
  }
  return out_(h);
}

DiscriminatorImpl::DiscriminatorImpl(const std::vector<std::int64_t>& widths) {
  body_ = torch::nn::Sequential();
  std::int64_t prev = 1;
  for (auto w : widths) {
    body_->push_back(torch::nn::Conv3d(conv(prev, w, true)));
    body_->push_back(lrelu(0.2));
    prev = w;
  }
  register_module("body", body_);
  out_ = register_module("out", torch::nn::Linear(prev, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  const auto h = F::adaptive_avg_pool3d(body_->forward(x), F::AdaptiveAvgPool3dFuncOptions(1)).flatten(1);
  return torch::sigmoid(out_(h)).squeeze(1);
}

std::vector<torch::Tensor> perceptual_features(classifier::SliceEncoder& phi, const torch::Tensor& x) {
  require(x.dim() == 5, ErrorCode::GeometryMismatch, "perceptual features expect [B, C, z, y, x]");
  const auto b = x.size(0), c = x.size(1), d = x.size(2);
  return phi->layer_features(x.permute({0, 2, 1, 3, 4}).reshape({b * d, c, x.size(3), x.size(4)}));
}

VaeGanState init_vaegan(const VaeGanConfig& cfg) {
  cfg.validate();
  nn::seed_everything(cfg.rng_seed);
  VaeGanState s;
  s.config = cfg;
  s.encoder = VaeEncoder(cfg.encoder_widths, cfg.latent_channels);
  s.decoder = VaeDecoder(cfg.encoder_widths, cfg.latent_channels);
  s.discriminator = Discriminator(cfg.discriminator_widths);
  s.perceptual = classifier::SliceEncoder(1, cfg.perceptual_widths);
  for (auto& p : s.perceptual->parameters()) p.set_requires_grad(false);
  s.encoder->eval();
  s.decoder->eval();
  s.discriminator->eval();
  s.perceptual->eval();
  return s;
}

namespace {

struct Step {
  torch::Tensor rec, kl, perc, adv, d_real, d_fake, xbar;
};

Step forward_step(VaeGanState& s, const torch::Tensor& x, bool sample) {
  Step r;
  auto [mu, logvar] = s.encoder(x);
  const auto z = sample ? mu + torch::exp(0.5 * logvar) * torch::randn_like(mu) : mu;
  r.xbar = s.decoder(z);
  r.rec = l1_reconstruction(x, r.xbar);
  r.kl = gaussian_kl(mu, logvar);
  std::vector<torch::Tensor> fx;
  {
    torch::NoGradGuard guard;
    fx = perceptual_features(s.perceptual, x);
  }
  r.perc = perceptual_loss(fx, perceptual_features(s.perceptual, r.xbar));
  r.d_real = s.discriminator(x);
  r.d_fake = s.discriminator(r.xbar);
  r.adv = adversarial_term(r.d_real, r.d_fake);
  return r;
}

void check_images(const std::vector<torch::Tensor>& images, const VaeGanConfig& cfg) {
  const auto& p = cfg.patch.size;
  for (const auto& t : images) {
    const auto x = t.dim() == 3 ? t.unsqueeze(0) : t;
    require(x.dim() == 4 && x.size(0) == 1 && x.size(1) == p.z && x.size(2) == p.y && x.size(3) == p.x,
            ErrorCode::GeometryMismatch, "vae-gan images must be [1, z, y, x] matching the configured patch");
  }
}

void set_mode(VaeGanState& s, bool train) {
  s.encoder->train(train);
  s.decoder->train(train);
  s.discriminator->train(train);
}

}  // namespace

LossComponents evaluate_vaegan(VaeGanState& state, const std::vector<torch::Tensor>& images) {
  require(!images.empty(), ErrorCode::InvalidArgument, "no images to evaluate");
  check_images(images, state.config);
  torch::NoGradGuard guard;
  const bool was = state.encoder->is_training();
  set_mode(state, false);
  LossComponents sum;
  const auto n = static_cast<std::int64_t>(images.size());
  for (std::int64_t start = 0; start < n; start += 8) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min(n, start + 8); ++i) idx.push_back(i);
    const auto r = forward_step(state, batch_of(images, idx), false);
    const double w = static_cast<double>(idx.size());
    sum.reconstruction += w * r.rec.item<double>();
    sum.kl += w * r.kl.item<double>();
    sum.perceptual += w * r.perc.item<double>();
    sum.adversarial += w * r.adv.item<double>();
  }
  set_mode(state, was);
  const double dn = static_cast<double>(n);
  return {sum.reconstruction / dn, sum.kl / dn, sum.perceptual / dn, sum.adversarial / dn};
}

double mean_l1(VaeGanState& state, const std::vector<torch::Tensor>& images) {
  return evaluate_vaegan(state, images).reconstruction;
}

VaeGanState train_vaegan(const std::vector<torch::Tensor>& train, const std::vector<torch::Tensor>& val,
                         const VaeGanConfig& cfg) {
  require(!train.empty(), ErrorCode::InvalidArgument, "vae-gan train split is empty");
  auto s = init_vaegan(cfg);
  check_images(train, cfg);
  check_images(val, cfg);
  const auto& held = val.empty() ? train : val;
  s.initial_val_l1 = mean_l1(s, held);

  std::vector<torch::Tensor> gen_params = s.encoder->parameters();
  for (auto& p : s.decoder->parameters()) gen_params.push_back(p);
  torch::optim::Adam opt_g(gen_params, torch::optim::AdamOptions(cfg.generator_lr));
  torch::optim::Adam opt_d(s.discriminator->parameters(), torch::optim::AdamOptions(cfg.discriminator_lr));

  auto best = init_vaegan(cfg);
  nn::seed_everything(cfg.rng_seed + 1);
  double best_total = std::numeric_limits<double>::infinity();
  const auto n = static_cast<std::int64_t>(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    set_mode(s, true);
    const bool adversarial = epoch >= cfg.weights.warmup_epochs;
    const auto order = torch::randperm(n, torch::kLong);
    LossComponents sum;
    double total_sum = 0.0, real_sum = 0.0, fake_sum = 0.0;
    bool saturated = true;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = start; i < std::min(n, start + cfg.batch_size); ++i) idx.push_back(order[i].item<std::int64_t>());
      const auto x = batch_of(train, idx);
      auto r = forward_step(s, x, true);
      const auto total = vaegan_total_loss(r.rec, r.kl, r.perc, r.adv, cfg.weights, epoch);
      const double tv = total.item<double>();
      require(std::isfinite(tv), ErrorCode::TrainingDiverged,
              "vae-gan loss became non-finite at epoch " + std::to_string(epoch));
      opt_g.zero_grad();
      total.backward();
      opt_g.step();

      torch::Tensor d_real = r.d_real.detach(), d_fake = r.d_fake.detach();
      if (adversarial) {
        opt_d.zero_grad();
        d_real = s.discriminator(x);
        d_fake = s.discriminator(r.xbar.detach());
        (-adversarial_term(d_real, d_fake)).backward();
        opt_d.step();
        d_real = d_real.detach();
        d_fake = d_fake.detach();
      }
      const auto outs = torch::cat({d_real, d_fake}).to(torch::kFloat64);
      saturated = saturated && (torch::minimum(outs, 1.0 - outs) < kSaturation).all().item<bool>();
      const double w = static_cast<double>(idx.size());
      sum.reconstruction += w * r.rec.item<double>();
      sum.kl += w * r.kl.item<double>();
      sum.perceptual += w * r.perc.item<double>();
      sum.adversarial += w * r.adv.item<double>();
      total_sum += w * tv;
      real_sum += d_real.sum().item<double>();
      fake_sum += d_fake.sum().item<double>();
    }
    const double dn = static_cast<double>(n);
    if (adversarial && saturated) {
      fail(ErrorCode::TrainingDiverged,
           "discriminator collapsed at epoch " + std::to_string(epoch) + ": mean D(x) = " +
               std::to_string(real_sum / dn) + ", mean D(xbar) = " + std::to_string(fake_sum / dn) +
               "; lower the discriminator learning rate or adversarial weight");
    }
    VaeGanEpoch e;
    e.epoch = epoch;
    e.train = {sum.reconstruction / dn, sum.kl / dn, sum.perceptual / dn, sum.adversarial / dn};
    e.train_total = total_sum / dn;
    e.val = evaluate_vaegan(s, held);
    e.val_total = vaegan_total_loss(e.val, cfg.weights, epoch);
    e.disc_real_mean = real_sum / dn;
    e.disc_fake_mean = fake_sum / dn;
    s.curve.push_back(e);
    if (e.val_total < best_total) {
      best_total = e.val_total;
      s.best_epoch = epoch;
      nn::copy_parameters(*best.encoder, *s.encoder);
      nn::copy_parameters(*best.decoder, *s.decoder);
      nn::copy_parameters(*best.discriminator, *s.discriminator);
    } else if (epoch - s.best_epoch >= cfg.patience) {
      break;
    }
  }
  nn::copy_parameters(*s.encoder, *best.encoder);
  nn::copy_parameters(*s.decoder, *best.decoder);
  nn::copy_parameters(*s.discriminator, *best.discriminator);
  set_mode(s, false);
  return s;
}

void save_vaegan(const std::filesystem::path& dir, const VaeGanState& state) {
  std::filesystem::create_directories(dir);
  auto enc = state.encoder;
  auto dec = state.decoder;
  auto disc = state.discriminator;
  auto phi = state.perceptual;
  nn::save_module(*enc, dir / "encoder.pt");
  nn::save_module(*dec, dir / "decoder.pt");
  nn::save_module(*disc, dir / "discriminator.pt");
  nn::save_module(*phi, dir / "perceptual.pt");
  json j{{"config", to_json(state.config)},
         {"best_epoch", state.best_epoch},
         {"initial_val_l1", state.initial_val_l1},
         {"curve", json::array()}};
  for (const auto& e : state.curve) {
    j["curve"].push_back({{"epoch", e.epoch},
                          {"train", components_json(e.train)},
                          {"train_total", e.train_total},
                          {"val", components_json(e.val)},
                          {"val_total", e.val_total},
                          {"disc_real_mean", e.disc_real_mean},
                          {"disc_fake_mean", e.disc_fake_mean}});
  }
  std::ofstream(dir / "vaegan.json") << j.dump(2);
}

VaeGanState load_vaegan(const std::filesystem::path& dir) {
  std::ifstream in(dir / "vaegan.json");
  require(in.good(), ErrorCode::NotFound, "no vaegan.json in " + dir.string());
  const auto j = json::parse(in);
  auto s = init_vaegan(vaegan_config_from_json(j.at("config")));
  nn::load_module(*s.encoder, dir / "encoder.pt");
  nn::load_module(*s.decoder, dir / "decoder.pt");
  nn::load_module(*s.discriminator, dir / "discriminator.pt");
  nn::load_module(*s.perceptual, dir / "perceptual.pt");
  set_mode(s, false);
  s.best_epoch = j.value("best_epoch", -1);
  s.initial_val_l1 = j.value("initial_val_l1", 0.0);
  for (const auto& e : j.at("curve")) {
    s.curve.push_back({e.at("epoch"), components_from_json(e.at("train")), e.at("train_total"),
                       components_from_json(e.at("val")), e.at("val_total"), e.at("disc_real_mean"),
                       e.at("disc_fake_mean")});
  }
  return s;
}

}  // namespace vbiopsy::counterfactual
