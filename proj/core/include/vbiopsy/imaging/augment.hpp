#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vbiopsy/common/range.hpp"
#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::imaging {

// Defaults follow the MONAI-style menu used for classifier training.
struct AugmentationConfig {
  double zoom_prob = 0.2;
  Range zoom{0.9, 1.1};

  double affine_prob = 0.5;
  double rotate_z = 3.14159265358979323846 / 15.0;  // radians, symmetric
  std::array<double, 3> shear{0.1, 0.1, 0.1};
  std::array<double, 3> scale{0.1, 0.1, 0.1};

  double flip_prob = 0.2;
  std::vector<int> flip_axes{0};

  double noise_prob = 0.1;
  double noise_mean = 0.0;
  double noise_std = 0.1;

  double smooth_prob = 0.1;
  std::array<Range, 3> smooth_sigma{Range{0.5, 1.0}, Range{0.5, 1.0}, Range{0.5, 1.0}};

  double scale_intensity_prob = 0.2;
  Range scale_factor{0.8, 1.2};

  double contrast_prob = 0.2;
  Range gamma{0.8, 1.2};

  double bias_field_prob = 0.1;
  Range bias_coeff{0.1, 0.2};
  int bias_degree = 3;

  double gibbs_prob = 0.1;
  Range gibbs_alpha{0.6, 0.8};

  std::uint64_t rng_seed = 0;

  /// All probabilities zero: augment() becomes the identity.
  static AugmentationConfig disabled();
  void validate() const;
};

/// Linear map in physical (mm) coordinates, applied about the patch centre.
using Matrix3 = std::array<std::array<double, 3>, 3>;

enum class TransformKind { Zoom, Affine, Flip, GaussianNoise, GaussianSmooth, ScaleIntensity, Contrast, BiasField, Gibbs };

std::string_view to_string(TransformKind kind);
bool is_spatial(TransformKind kind);

struct FiredTransform {
  TransformKind kind;
  std::vector<double> params;
  Matrix3 matrix{};  // spatial transforms only
};

struct AugmentationResult {
  PatchStack patch;
  std::vector<FiredTransform> fired;
};

/// Image channels are sampled trilinearly, prior channels by nearest neighbour.
/// Samples falling outside the patch are zero.
ScalarGrid apply_spatial(const ScalarGrid& grid, const Matrix3& forward, const Vec3& spacing, bool nearest);

/// Spatial transforms move every channel identically; intensity transforms
/// touch image channels only. Pure in (patch, cfg).
AugmentationResult augment_traced(const PatchStack& patch, const AugmentationConfig& cfg);
PatchStack augment(const PatchStack& patch, const AugmentationConfig& cfg);

}  // namespace vbiopsy::imaging
