#pragma once

#include <torch/torch.h>

#include <filesystem>

#include "vbiopsy/common/grid.hpp"
#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::nn {

// Grids are x-fastest, which is exactly a contiguous [z, y, x] tensor.
torch::Tensor to_tensor(const ScalarGrid& grid, torch::Dtype dtype = torch::kFloat32);
torch::Tensor to_tensor(const LabelGrid& grid);
/// [C, z, y, x]
torch::Tensor to_tensor(const imaging::PatchStack& patch, torch::Dtype dtype = torch::kFloat32);

/// Accepts [z, y, x] or any shape with leading singleton dims.
ScalarGrid to_grid(const torch::Tensor& t);
LabelGrid to_label_grid(const torch::Tensor& t);

/// Seeds torch and pins intra-op threads so CPU runs repeat exactly.
void seed_everything(std::uint64_t seed);

void save_module(torch::nn::Module& module, const std::filesystem::path& path);
void load_module(torch::nn::Module& module, const std::filesystem::path& path);

/// Deep copy of parameters and buffers from `src` into `dst` (same architecture).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace vbiopsy::nn
