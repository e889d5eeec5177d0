#include "vbiopsy/orchestration/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy::orchestration {

namespace {

std::vector<std::uint8_t> encode(std::vector<std::uint8_t>& pixels, std::size_t w, std::size_t h, bool rgb) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  require(png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr) != 0, ErrorCode::Io,
          std::string("png sizing failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  require(png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr) != 0, ErrorCode::Io,
          std::string("png encoding failed: ") + img.message);
  out.resize(size);
  return out;
}

void check_slice(const Dims& d, std::size_t z) {
  require(static_cast<std::int64_t>(z) < d.z, ErrorCode::InvalidArgument,
          "slice " + std::to_string(z) + " outside [0, " + std::to_string(d.z) + ")");
}

// Image rows run top to bottom, so y is flipped to keep anterior up.
std::size_t row_of(const Dims& d, std::int64_t y) { return static_cast<std::size_t>(d.y - 1 - y); }

}  // namespace

Window auto_window(const ScalarGrid& grid) {
  std::vector<double> v(grid.values().begin(), grid.values().end());
  require(!v.empty(), ErrorCode::InvalidArgument, "empty grid");
  std::sort(v.begin(), v.end());
  const auto at = [&](double q) { return v[static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)))]; };
  const double lo = at(0.01), hi = at(0.99);
  return {(lo + hi) / 2.0, std::max(hi - lo, 1e-12)};
}

std::vector<std::uint8_t> render_slice_png(const ScalarGrid& grid, std::size_t z, const Window& window,
                                           const LabelGrid* overlay) {
  const auto& d = grid.dims();
  check_slice(d, z);
  require(std::isfinite(window.level) && std::isfinite(window.width) && window.width > 0.0, ErrorCode::InvalidArgument,
          "window width must be positive and finite");
  if (overlay) require(overlay->dims() == d, ErrorCode::GeometryMismatch, "overlay shape differs from the image");
  const std::size_t channels = overlay ? 3 : 1;
  std::vector<std::uint8_t> px(d.count() / static_cast<std::size_t>(d.z) * channels);
  const double lo = window.level - window.width / 2.0;
  for (std::int64_t y = 0; y < d.y; ++y)
    for (std::int64_t x = 0; x < d.x; ++x) {
      const double t = std::clamp((grid(x, y, static_cast<std::int64_t>(z)) - lo) / window.width, 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(t * 255.0));
      const std::size_t o = (row_of(d, y) * static_cast<std::size_t>(d.x) + static_cast<std::size_t>(x)) * channels;
      if (!overlay) {
        px[o] = g;
        continue;
      }
      const bool fg = (*overlay)(x, y, static_cast<std::int64_t>(z)) != 0;
      px[o] = fg ? static_cast<std::uint8_t>(std::min(255, g / 2 + 128)) : g;
      px[o + 1] = fg ? static_cast<std::uint8_t>(g / 2) : g;
      px[o + 2] = fg ? static_cast<std::uint8_t>(g / 2) : g;
    }
  return encode(px, static_cast<std::size_t>(d.x), static_cast<std::size_t>(d.y), overlay != nullptr);
}

std::vector<std::uint8_t> render_heatmap_png(const ScalarGrid& grid, std::size_t z, std::optional<double> scale) {
  const auto& d = grid.dims();
  check_slice(d, z);
  double s = 0.0;
  if (scale) s = *scale;
  else
    for (double v : grid.values()) s = std::max(s, std::abs(v));
  require(std::isfinite(s) && s >= 0.0, ErrorCode::InvalidArgument, "heatmap scale must be finite");
  if (s == 0.0) s = 1.0;
  std::vector<std::uint8_t> px(d.count() / static_cast<std::size_t>(d.z) * 3);
  for (std::int64_t y = 0; y < d.y; ++y)
    for (std::int64_t x = 0; x < d.x; ++x) {
      const double t = std::clamp(grid(x, y, static_cast<std::int64_t>(z)) / s, -1.0, 1.0);
      const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(t))));
      const std::size_t o = (row_of(d, y) * static_cast<std::size_t>(d.x) + static_cast<std::size_t>(x)) * 3;
      px[o] = t < 0 ? fade : 255;
      px[o + 1] = fade;
      px[o + 2] = t > 0 ? fade : 255;
    }
  return encode(px, static_cast<std::size_t>(d.x), static_cast<std::size_t>(d.y), true);
}

}  // namespace vbiopsy::orchestration
