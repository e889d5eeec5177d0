#include "vbiopsy/classifier/networks.hpp"

#include <nlohmann/json.hpp>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::classifier {

namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

// Configs are written in (x, y, z); torch wants (z, y, x).
torch::ExpandingArray<3> zyx(const Triple& t) { return torch::ExpandingArray<3>({t[2], t[1], t[0]}); }

torch::Tensor leaky(const torch::Tensor& x, double slope) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(slope));
}

}  // namespace

void CnnConfig::validate() const {
  require(in_channels >= 1, ErrorCode::InvalidArgument, "cnn needs at least one input channel");
  require(widths.size() == strides.size() + 1, ErrorCode::InvalidArgument, "cnn needs one more width than strides");
  require(blocks.size() == strides.size(), ErrorCode::InvalidArgument, "cnn needs a block count per stage");
  for (auto w : widths) require(w > 0, ErrorCode::InvalidArgument, "cnn widths must be positive");
  for (auto b : blocks) require(b >= 1, ErrorCode::InvalidArgument, "cnn stages need >= 1 block");
  require(head.size() >= 2 && head.back() == 1, ErrorCode::InvalidArgument, "cnn head must end in one neuron");
  require(widths.back() * pool[0] * pool[1] * pool[2] == head.front(), ErrorCode::InvalidArgument,
          "cnn head input " + std::to_string(head.front()) + " != last width x pooled voxels " +
              std::to_string(widths.back() * pool[0] * pool[1] * pool[2]));
}

CnnConfig CnnConfig::desk(std::int64_t in_channels) {
  CnnConfig c;
  c.in_channels = in_channels;
  c.widths = {8, 16, 32, 32, 32};
  c.blocks = {1, 1, 1, 1};
  c.head = {32 * 64, 64, 16, 1};
  return c;
}

json to_json(const CnnConfig& c) {
  return {{"in_channels", c.in_channels}, {"stem_kernel", c.stem_kernel}, {"strides", c.strides},
          {"widths", c.widths},           {"blocks", c.blocks},           {"pool", c.pool},
          {"head", c.head},               {"leaky_slope", c.leaky_slope}};
}

CnnConfig cnn_config_from_json(const json& j) {
  CnnConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
  c.strides = j.value("strides", c.strides);
  c.widths = j.value("widths", c.widths);
  c.blocks = j.value("blocks", c.blocks);
  c.pool = j.value("pool", c.pool);
  c.head = j.value("head", c.head);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.validate();
  return c;
}

Res3dImpl::Res3dImpl(std::int64_t in, std::int64_t out, Triple stride, double slope) : slope_(slope) {
  conv1 = register_module("conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(zyx(stride)).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv3d(torch::nn::Conv3dOptions(out, out, 3).padding(1)));
  norm1 = register_module("norm1", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out).affine(true)));
  norm2 = register_module("norm2", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out).affine(true)));
  if (in != out || stride != Triple{1, 1, 1}) {
    skip = register_module("skip", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1).stride(zyx(stride))));
  }
}

torch::Tensor Res3dImpl::forward(const torch::Tensor& x) {
  auto h = leaky(norm1(conv1(x)), slope_);
  h = norm2(conv2(h));
  return leaky(h + (skip ? skip(x) : x), slope_);
}

CnnNetImpl::CnnNetImpl(const CnnConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& k = cfg_.stem_kernel;
  stem_ = register_module("stem", torch::nn::Conv3d(torch::nn::Conv3dOptions(cfg_.in_channels, cfg_.widths[0], zyx(k))
                                                        .padding(zyx({k[0] / 2, k[1] / 2, k[2] / 2}))));
  stem_norm_ = register_module("stem_norm",
                               torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(cfg_.widths[0]).affine(true)));
  torch::nn::Sequential stages;
  for (std::size_t s = 0; s < cfg_.strides.size(); ++s) {
    for (std::int64_t b = 0; b < cfg_.blocks[s]; ++b) {
      const auto in = b == 0 ? cfg_.widths[s] : cfg_.widths[s + 1];
      stages->push_back(Res3d(in, cfg_.widths[s + 1], b == 0 ? cfg_.strides[s] : Triple{1, 1, 1}, cfg_.leaky_slope));
    }
  }
  stages_ = register_module("stages", stages);
  for (std::size_t i = 0; i + 1 < cfg_.head.size(); ++i) {
    linears_.push_back(register_module("head" + std::to_string(i), torch::nn::Linear(cfg_.head[i], cfg_.head[i + 1])));
  }
}

torch::Tensor CnnNetImpl::features(const torch::Tensor& x) {
  require(x.dim() == 5 && x.size(1) == cfg_.in_channels, ErrorCode::GeometryMismatch,
          "cnn expects [B, " + std::to_string(cfg_.in_channels) + ", z, y, x]");
  auto h = leaky(stem_norm_(stem_(x)), cfg_.leaky_slope);
  h = stages_->forward(h);
  h = F::adaptive_max_pool3d(h, F::AdaptiveMaxPool3dFuncOptions(std::vector<int64_t>{cfg_.pool[2], cfg_.pool[1], cfg_.pool[0]}));
  return h.flatten(1);
}

torch::Tensor CnnNetImpl::forward(const torch::Tensor& x, const torch::Tensor& clinical) {
  require(!clinical.defined() || clinical.numel() == 0, ErrorCode::InvalidArgument,
          "the cnn family takes no clinical variables");
  auto h = features(x);
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    h = linears_[i](h);
    if (i + 1 < linears_.size()) h = leaky(h, cfg_.leaky_slope);
  }
  return h.squeeze(1);
}

void FoundationConfig::validate() const {
  require(in_channels >= 1, ErrorCode::InvalidArgument, "foundation model needs input channels");
  require(!encoder_widths.empty(), ErrorCode::InvalidArgument, "slice encoder needs layers");
  require(squeezer_dim == 512, ErrorCode::InvalidArgument, "squeezer output must be 512");
  require(attention_dim >= 1 && head_hidden >= 1 && clinical_features >= 0, ErrorCode::InvalidArgument,
          "foundation head sizes must be positive");
}

json to_json(const FoundationConfig& c) {
  return {{"in_channels", c.in_channels},
          {"encoder_widths", c.encoder_widths},
          {"freeze_encoder", c.freeze_encoder},
          {"squeezer_dim", c.squeezer_dim},
          {"grouper", c.grouper == Grouper::Attention ? "attention" : "mean"},
          {"attention_dim", c.attention_dim},
          {"head_hidden", c.head_hidden},
          {"clinical_features", c.clinical_features},
          {"leaky_slope", c.leaky_slope}};
}

FoundationConfig foundation_config_from_json(const json& j) {
  FoundationConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.encoder_widths = j.value("encoder_widths", c.encoder_widths);
  c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
  c.squeezer_dim = j.value("squeezer_dim", c.squeezer_dim);
  const auto g = j.value("grouper", std::string("attention"));
  require(g == "attention" || g == "mean", ErrorCode::InvalidArgument, "grouper must be 'attention' or 'mean'");
  c.grouper = g == "mean" ? Grouper::Mean : Grouper::Attention;
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.clinical_features = j.value("clinical_features", c.clinical_features);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.validate();
  return c;
}

SliceEncoderImpl::SliceEncoderImpl(std::int64_t in_channels, const std::vector<std::int64_t>& widths, double slope)
    : out_dim_(widths.back()), slope_(slope) {
  std::int64_t prev = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    convs_.push_back(register_module("conv" + std::to_string(i),
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, widths[i], 3).stride(2).padding(1))));
    prev = widths[i];
  }
}

std::vector<torch::Tensor> SliceEncoderImpl::layer_features(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  auto h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = leaky(convs_[i](h), slope_);
    out.push_back(h);
  }
  return out;
}

torch::Tensor SliceEncoderImpl::forward(const torch::Tensor& x) {
  return F::adaptive_max_pool2d(layer_features(x).back(), F::AdaptiveMaxPool2dFuncOptions(1)).flatten(1);
}

FoundationNetImpl::FoundationNetImpl(const FoundationConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = register_module("encoder", SliceEncoder(cfg_.in_channels, cfg_.encoder_widths, cfg_.leaky_slope));
  squeezer_ = register_module("squeezer", torch::nn::Linear(encoder_->out_dim(), cfg_.squeezer_dim));
  if (cfg_.grouper == Grouper::Attention) {
    attn_v_ = register_module("attn_v", torch::nn::Linear(cfg_.squeezer_dim, cfg_.attention_dim));
    attn_w_ = register_module("attn_w", torch::nn::Linear(cfg_.attention_dim, 1));
  }
  hidden_ = register_module("hidden", torch::nn::Linear(cfg_.squeezer_dim + cfg_.clinical_features, cfg_.head_hidden));
  out_ = register_module("out", torch::nn::Linear(cfg_.head_hidden, 1));
  if (cfg_.freeze_encoder) {
    for (auto& p : encoder_->parameters()) p.set_requires_grad(false);
  }
}

torch::Tensor FoundationNetImpl::slice_embeddings(const torch::Tensor& x) {
  require(x.dim() == 5 && x.size(1) == cfg_.in_channels, ErrorCode::GeometryMismatch,
          "foundation model expects [B, " + std::to_string(cfg_.in_channels) + ", D, H, W]");
  const auto b = x.size(0), c = x.size(1), d = x.size(2), h = x.size(3), w = x.size(4);
  const auto slices = x.permute({0, 2, 1, 3, 4}).reshape({b * d, c, h, w});
  const auto feats = encoder_(slices);
  return leaky(squeezer_(feats), cfg_.leaky_slope).reshape({b, d, cfg_.squeezer_dim});
}

torch::Tensor FoundationNetImpl::embedding(const torch::Tensor& x, const torch::Tensor& clinical) {
  const auto rows = slice_embeddings(x);
  // Slices that are pure zero padding do not vote.
  auto mask = x.select(1, 0).abs().flatten(2).amax(2) > 0;  // [B, D]
  mask = mask.logical_or(mask.logical_not().all(1, true));
  torch::Tensor grouped;
  if (cfg_.grouper == Grouper::Attention) {
    auto scores = attn_w_(torch::tanh(attn_v_(rows))).squeeze(2);
    scores = scores.masked_fill(mask.logical_not(), -std::numeric_limits<double>::infinity());
    const auto weights = torch::softmax(scores, 1).unsqueeze(2);
    grouped = (weights * rows).sum(1);
  } else {
    const auto m = mask.to(rows.dtype()).unsqueeze(2);
    grouped = (rows * m).sum(1) / m.sum(1);
  }
  if (cfg_.clinical_features == 0) {
    require(!clinical.defined() || clinical.numel() == 0, ErrorCode::InvalidArgument,
            "clinical variables given to a model built without them");
    return grouped;
  }
  require(clinical.defined() && clinical.dim() == 2 && clinical.size(1) == cfg_.clinical_features &&
              clinical.size(0) == grouped.size(0),
          ErrorCode::InvalidArgument, "model expects " + std::to_string(cfg_.clinical_features) + " clinical features per case");
  return torch::cat({grouped, clinical.to(grouped.dtype())}, 1);
}

torch::Tensor FoundationNetImpl::forward(const torch::Tensor& x, const torch::Tensor& clinical) {
  return out_(leaky(hidden_(embedding(x, clinical)), cfg_.leaky_slope)).squeeze(1);
}

}  // namespace vbiopsy::classifier
