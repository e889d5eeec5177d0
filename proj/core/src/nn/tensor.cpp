#include "vbiopsy/nn/tensor.hpp"

namespace vbiopsy::nn {

namespace {

std::vector<std::int64_t> zyx(const Dims& d) { return {d.z, d.y, d.x}; }

Dims dims_of(const torch::Tensor& t) {
  require(t.dim() >= 3, ErrorCode::InvalidArgument, "tensor needs at least 3 dims");
  for (std::int64_t k = 0; k + 3 < t.dim(); ++k) {
    require(t.size(k) == 1, ErrorCode::InvalidArgument, "only leading singleton dims can be dropped");
  }
  const auto n = t.dim();
  return {t.size(n - 1), t.size(n - 2), t.size(n - 3)};
}

}  // namespace

torch::Tensor to_tensor(const ScalarGrid& grid, torch::Dtype dtype) {
  auto t = torch::from_blob(const_cast<double*>(grid.storage().data()), zyx(grid.dims()), torch::kFloat64);
  return t.to(dtype).clone();
}

torch::Tensor to_tensor(const LabelGrid& grid) {
  auto t = torch::from_blob(const_cast<std::int16_t*>(grid.storage().data()), zyx(grid.dims()), torch::kInt16);
  return t.to(torch::kLong).clone();
}

torch::Tensor to_tensor(const imaging::PatchStack& patch, torch::Dtype dtype) {
  patch.validate();
  std::vector<torch::Tensor> channels;
  channels.reserve(patch.channel_count());
  for (const auto& c : patch.channels) channels.push_back(to_tensor(c, dtype));
  return torch::stack(channels);
}

ScalarGrid to_grid(const torch::Tensor& t) {
  const Dims d = dims_of(t);
  auto c = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  std::vector<double> data(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  return ScalarGrid(d, std::move(data));
}

LabelGrid to_label_grid(const torch::Tensor& t) {
  const Dims d = dims_of(t);
  auto c = t.detach().to(torch::kCPU, torch::kInt16).contiguous();
  std::vector<std::int16_t> data(c.data_ptr<std::int16_t>(), c.data_ptr<std::int16_t>() + c.numel());
  return LabelGrid(d, std::move(data));
}

void seed_everything(std::uint64_t seed) {
  torch::manual_seed(seed);
  at::set_num_threads(1);
}

void save_module(torch::nn::Module& module, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(path.string());
}

void load_module(torch::nn::Module& module, const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::NotFound, "weights not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    module.load(archive);
  } catch (const c10::Error& e) {
    fail(ErrorCode::IntegrityMismatch, "cannot load weights " + path.string() + ": " + e.what_without_backtrace());
  }
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto dp = dst.named_parameters(true);
  for (const auto& p : src.named_parameters(true)) dp[p.key()].copy_(p.value());
  auto db = dst.named_buffers(true);
  for (const auto& b : src.named_buffers(true)) db[b.key()].copy_(b.value());
}

}  // namespace vbiopsy::nn
