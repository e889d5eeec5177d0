#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::imaging {

enum class Interpolation { BSpline, Nearest };

/// Output grid for resampling `dims` voxels at `spacing` onto `target`: the
/// first voxel centre is kept and the output voxel boxes cover the input ones.
Dims resampled_dims(const Dims& dims, const Vec3& spacing, const Vec3& target);

/// Cubic B-spline (interpolating, point-symmetric boundaries) or nearest
/// neighbour resampling. Identical spacing returns the grid untouched.
Volume3D resample(const Volume3D& vol, const Vec3& target_spacing,
                  Interpolation mode = Interpolation::BSpline);
LabelMask resample(const LabelMask& mask, const Vec3& target_spacing);

/// Gland centroid in voxel indices, rounded half away from zero per axis.
std::array<std::int64_t, 3> roi_center(const LabelMask& gland);

/// First voxel of a window of `size` centred at `center`.
std::array<std::int64_t, 3> crop_origin(const std::array<std::int64_t, 3>& center, const Dims& size);

/// Crops a single image channel centred on the gland centroid. Regions outside
/// the volume are zero-padded.
PatchStack crop_to_roi(const Volume3D& vol, const LabelMask& gland, const PatchSpec& spec);
/// Same window as `crop_to_roi`, applied to a label grid.
LabelMask crop_mask_to_roi(const LabelMask& mask, const LabelMask& gland, const PatchSpec& spec);

template <typename T>
Grid3D<T> crop_window(const Grid3D<T>& src, const std::array<std::int64_t, 3>& start, const Dims& size) {
  Grid3D<T> out(size, T{});
  for (std::int64_t z = 0; z < size.z; ++z) {
    for (std::int64_t y = 0; y < size.y; ++y) {
      for (std::int64_t x = 0; x < size.x; ++x) {
        const std::int64_t sx = start[0] + x, sy = start[1] + y, sz = start[2] + z;
        if (src.contains(sx, sy, sz)) out(x, y, z) = src(sx, sy, sz);
      }
    }
  }
  return out;
}

enum class NormalizeMethod { ZScore, PercentileMinMax };

struct NormalizeResult {
  PatchStack patch;
  std::vector<std::size_t> degenerate_channels;
  std::vector<std::string> warnings;
};

inline constexpr double kLowerPercentile = 1.0;
inline constexpr double kUpperPercentile = 99.0;

/// Linear-interpolated percentile on sorted data, q in [0, 100].
double percentile(std::vector<double> values, double q);

NormalizeResult normalize(const PatchStack& patch, NormalizeMethod method);

enum class ChannelMode { ImageOnly, DuplicatePlusPrior };

/// Builds the model input: image_only keeps one image channel; dup_plus_prior
/// yields [image, image, prior] with the prior binarized.
PatchStack assemble_channels(const PatchStack& image, const std::optional<LabelMask>& prior, ChannelMode mode);

}  // namespace vbiopsy::imaging
