#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/common/grid.hpp"

namespace vbiopsy::orchestration {

/// Display window; intensities in [level - width/2, level + width/2] map to 0..255.
struct Window {
  double level = 0.0;
  double width = 1.0;
};

/// 1st to 99th percentile of the whole grid.
Window auto_window(const ScalarGrid& grid);

/// Grayscale slice z. With an overlay, foreground voxels are tinted red.
std::vector<std::uint8_t> render_slice_png(const ScalarGrid& grid, std::size_t z, const Window& window,
                                           const LabelGrid* overlay = nullptr);

/// Signed map on a blue-white-red ramp, symmetric around zero; `scale`
/// defaults to the grid's largest magnitude.
std::vector<std::uint8_t> render_heatmap_png(const ScalarGrid& grid, std::size_t z, std::optional<double> scale = std::nullopt);

}  // namespace vbiopsy::orchestration
