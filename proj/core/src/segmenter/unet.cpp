#include "vbiopsy/segmenter/unet.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "vbiopsy/nn/tensor.hpp"
#include "vbiopsy/segmenter/postprocess.hpp"

namespace vbiopsy::segmenter {

namespace F = torch::nn::functional;
using imaging::LabelMask;
using nlohmann::json;

void SegmenterConfig::validate() const {
  require(!widths.empty(), ErrorCode::InvalidArgument, "segmenter needs at least one width");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    require(widths[i] > 0, ErrorCode::InvalidArgument, "segmenter widths must be positive");
    require(i == 0 || widths[i] > widths[i - 1], ErrorCode::InvalidArgument, "segmenter widths must increase");
  }
  require(epochs >= 1, ErrorCode::InvalidArgument, "segmenter epochs must be >= 1");
  require(batch_size >= 1, ErrorCode::InvalidArgument, "segmenter batch size must be >= 1");
  require(learning_rate > 0.0, ErrorCode::InvalidArgument, "segmenter learning rate must be > 0");
  require(dice_weight >= 0.0, ErrorCode::InvalidArgument, "dice weight must be >= 0");
  imaging::validate_spacing(spacing);
}

json to_json(const SegmenterConfig& c) {
  return {{"widths", c.widths},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"dice_weight", c.dice_weight},
          {"target", std::string(imaging::to_string(c.target))},
          {"spacing", c.spacing},
          {"rng_seed", c.rng_seed}};
}

SegmenterConfig segmenter_config_from_json(const json& j) {
  SegmenterConfig c;
  c.widths = j.value("widths", c.widths);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.dice_weight = j.value("dice_weight", c.dice_weight);
  if (j.contains("target")) c.target = imaging::label_scheme_from_string(j.at("target").get<std::string>());
  c.spacing = j.value("spacing", c.spacing);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.validate();
  return c;
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out) {
  conv1 = register_module("conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv3d(torch::nn::Conv3dOptions(out, out, 3).padding(1)));
  norm1 = register_module("norm1", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out).affine(true)));
  norm2 = register_module("norm2", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out).affine(true)));
  if (in != out) skip = register_module("skip", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = F::leaky_relu(norm1(conv1(x)), F::LeakyReLUFuncOptions().negative_slope(0.01));
  h = norm2(conv2(h));
  return F::leaky_relu(h + (skip ? skip(x) : x), F::LeakyReLUFuncOptions().negative_slope(0.01));
}

UNet3dImpl::UNet3dImpl(std::int64_t in_channels, std::int64_t classes, const std::vector<std::int64_t>& widths) {
  std::int64_t prev = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    encoders_.push_back(register_module("enc" + std::to_string(i), ResBlock(prev, widths[i])));
    prev = widths[i];
  }
  for (std::size_t i = widths.size() - 1; i > 0; --i) {
    ups_.push_back(register_module(
        "up" + std::to_string(i),
        torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(widths[i], widths[i - 1], {1, 2, 2}).stride({1, 2, 2}))));
    decoders_.push_back(register_module("dec" + std::to_string(i), ResBlock(2 * widths[i - 1], widths[i - 1])));
  }
  head_ = register_module("head", torch::nn::Conv3d(torch::nn::Conv3dOptions(widths[0], classes, 1)));
}

torch::Tensor UNet3dImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> skips;
  for (std::size_t i = 0; i < encoders_.size(); ++i) {
    if (i > 0) x = F::max_pool3d(x, F::MaxPool3dFuncOptions({1, 2, 2}));
    x = encoders_[i](x);
    skips.push_back(x);
  }
  for (std::size_t k = 0; k < ups_.size(); ++k) {
    x = ups_[k](x);
    x = decoders_[k](torch::cat({x, skips[skips.size() - 2 - k]}, 1));
  }
  return head_(x);
}

namespace {

// z-scored [1, z, y', x'] with y/x zero-padded to the net's divisor.
torch::Tensor prepare(const imaging::Volume3D& vol, std::int64_t divisor) {
  auto t = nn::to_tensor(vol.data);
  const auto std = t.std(/*unbiased=*/false).item<double>();
  t = std > 0.0 ? (t - t.mean()) / std : torch::zeros_like(t);
  const auto pad_y = (divisor - t.size(1) % divisor) % divisor;
  const auto pad_x = (divisor - t.size(2) % divisor) % divisor;
  if (pad_x || pad_y) t = F::pad(t, F::PadFuncOptions({0, pad_x, 0, pad_y}));
  return t.unsqueeze(0);
}

torch::Tensor prepare_target(const LabelMask& m, std::int64_t divisor) {
  auto t = nn::to_tensor(m.labels);
  const auto pad_y = (divisor - t.size(1) % divisor) % divisor;
  const auto pad_x = (divisor - t.size(2) % divisor) % divisor;
  if (pad_x || pad_y) t = F::pad(t, F::PadFuncOptions({0, pad_x, 0, pad_y}));
  return t;
}

torch::Tensor soft_dice_loss(const torch::Tensor& logits, const torch::Tensor& target, std::int64_t classes) {
  const auto probs = torch::softmax(logits, 1);
  const auto onehot = F::one_hot(target, classes).permute({0, 4, 1, 2, 3}).to(probs.dtype());
  const std::vector<std::int64_t> dims{0, 2, 3, 4};
  const auto inter = (probs * onehot).sum(dims);
  const auto denom = probs.sum(dims) + onehot.sum(dims);
  const auto dice = (2.0 * inter + 1e-5) / (denom + 1e-5);
  return 1.0 - dice.slice(0, 1).mean();  // foreground classes only
}

void check_sample(const SegmentationSample& s, const SegmenterConfig& cfg) {
  s.image.validate();
  s.target.validate();
  require(s.target.scheme == cfg.target, ErrorCode::InvalidArgument, "segmentation target has the wrong label scheme");
  require(s.image.dims() == s.target.dims(), ErrorCode::GeometryMismatch, "image and target shapes differ");
  require(imaging::same_spacing(s.image.geometry.spacing, cfg.spacing), ErrorCode::GeometryMismatch,
          "segmentation sample is not at the configured spacing");
}

}  // namespace

double mean_foreground_dice(const LabelMask& pred, const LabelMask& truth) {
  const auto top = imaging::max_label(truth.scheme);
  double sum = 0.0;
  for (std::int16_t label = 1; label <= top; ++label) sum += dice(pred, truth, label);
  return sum / static_cast<double>(top);
}

SegmenterState init_segmenter(const SegmenterConfig& cfg) {
  cfg.validate();
  nn::seed_everything(cfg.rng_seed);
  SegmenterState state;
  state.config = cfg;
  state.net = UNet3d(1, cfg.classes(), cfg.widths);
  state.net->eval();
  return state;
}

SegmenterState train_segmenter(const std::vector<SegmentationSample>& train, const std::vector<SegmentationSample>& val,
                               const SegmenterConfig& cfg) {
  require(!train.empty(), ErrorCode::InvalidArgument, "segmenter train split is empty");
  auto state = init_segmenter(cfg);
  for (const auto& s : train) check_sample(s, cfg);
  for (const auto& s : val) check_sample(s, cfg);
  const auto& selection = val.empty() ? train : val;

  auto best = UNet3d(1, cfg.classes(), cfg.widths);
  const auto divisor = state.net->divisor();
  std::vector<torch::Tensor> inputs, targets;
  for (const auto& s : train) {
    inputs.push_back(prepare(s.image, divisor));
    targets.push_back(prepare_target(s.target, divisor));
  }

  torch::optim::Adam opt(state.net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  double best_dice = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.net->train();
    const auto order = torch::randperm(static_cast<std::int64_t>(train.size()), torch::kLong);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::int64_t start = 0; start < order.size(0); start += cfg.batch_size) {
      std::vector<torch::Tensor> xb, yb;
      for (std::int64_t k = start; k < std::min<std::int64_t>(start + cfg.batch_size, order.size(0)); ++k) {
        const auto idx = order[k].item<std::int64_t>();
        xb.push_back(inputs[static_cast<std::size_t>(idx)]);
        yb.push_back(targets[static_cast<std::size_t>(idx)]);
      }
      torch::Tensor x, y;
      try {
        x = torch::stack(xb);
        y = torch::stack(yb);
      } catch (const c10::Error&) {
        fail(ErrorCode::GeometryMismatch, "segmenter batches need equally sized volumes");
      }
      const auto logits = state.net->forward(x);
      const auto loss = F::cross_entropy(logits, y) + cfg.dice_weight * soft_dice_loss(logits, y, cfg.classes());
      const double value = loss.item<double>();
      require(std::isfinite(value), ErrorCode::TrainingDiverged,
              "segmenter loss became non-finite at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += value;
      ++batches;
    }
    state.net->eval();
    double dsum = 0.0;
    for (const auto& s : selection) dsum += mean_foreground_dice(segment(s.image, state), s.target);
    const double val_dice = dsum / static_cast<double>(selection.size());
    state.curve.push_back({epoch, loss_sum / batches, val_dice});
    if (val_dice > best_dice) {
      best_dice = val_dice;
      state.best_epoch = epoch;
      nn::copy_parameters(*best, *state.net);
    }
  }
  nn::copy_parameters(*state.net, *best);
  state.net->eval();
  return state;
}

LabelMask segment(const imaging::Volume3D& vol, const SegmenterState& state) {
  auto net = state.net;  // holder copy; inference does not mutate weights
  require(!net.is_empty(), ErrorCode::MissingPrerequisite, "segmenter has no network");
  vol.validate();
  require(imaging::same_spacing(vol.geometry.spacing, state.config.spacing), ErrorCode::GeometryMismatch,
          "volume spacing does not match the segmenter's training spacing");
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  const auto x = prepare(vol, net->divisor()).unsqueeze(0);
  auto labels = net->forward(x).argmax(1)[0];
  if (was_training) net->train();
  const auto d = vol.dims();
  labels = labels.slice(1, 0, d.y).slice(2, 0, d.x);
  LabelMask out{nn::to_label_grid(labels), state.config.target, vol.geometry};
  return out;
}

void save_segmenter(const std::filesystem::path& dir, const SegmenterState& state) {
  std::filesystem::create_directories(dir);
  auto net = state.net;
  nn::save_module(*net, dir / "weights.pt");
  json j;
  j["config"] = to_json(state.config);
  j["best_epoch"] = state.best_epoch;
  j["curve"] = json::array();
  for (const auto& e : state.curve) j["curve"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"val_dice", e.val_dice}});
  std::ofstream(dir / "segmenter.json") << j.dump(2);
}

SegmenterState load_segmenter(const std::filesystem::path& dir) {
  std::ifstream in(dir / "segmenter.json");
  require(in.good(), ErrorCode::NotFound, "no segmenter.json in " + dir.string());
  const auto j = json::parse(in);
  auto state = init_segmenter(segmenter_config_from_json(j.at("config")));
  nn::load_module(*state.net, dir / "weights.pt");
  state.net->eval();
  state.best_epoch = j.value("best_epoch", -1);
  for (const auto& e : j.at("curve")) state.curve.push_back({e.at("epoch"), e.at("loss"), e.at("val_dice")});
  return state;
}

}  // namespace vbiopsy::segmenter
