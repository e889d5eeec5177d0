#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "vbiopsy/common/grid.hpp"

namespace vbiopsy::imaging {

/// Physical placement of a voxel grid. Spacing is mm per voxel along (x, y, z);
/// origin is the physical position of voxel (0, 0, 0).
struct Geometry {
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  bool operator==(const Geometry&) const = default;
};

void validate_spacing(const Vec3& spacing);

struct Volume3D {
  ScalarGrid data;
  Geometry geometry;

  const Dims& dims() const { return data.dims(); }
  /// Throws if spacing is not strictly positive or any voxel is non-finite.
  void validate() const;
};

enum class LabelScheme { Gland, Zones };

std::string_view to_string(LabelScheme scheme);
LabelScheme label_scheme_from_string(std::string_view name);
/// Largest label value allowed by the scheme: gland {0,1}, zones {0=bg, 1=PZ, 2=TZ}.
int max_label(LabelScheme scheme);

namespace zone {
inline constexpr std::int16_t background = 0;
inline constexpr std::int16_t gland = 1;
inline constexpr std::int16_t peripheral = 1;
inline constexpr std::int16_t transition = 2;
}  // namespace zone

struct LabelMask {
  LabelGrid labels;
  LabelScheme scheme = LabelScheme::Gland;
  Geometry geometry;

  const Dims& dims() const { return labels.dims(); }
  std::size_t count(std::int16_t label) const;
  std::size_t foreground_count() const;
  void validate() const;
};

/// Collapses a zonal mask into a binary gland mask (PZ and TZ both map to 1).
LabelMask to_gland(const LabelMask& zones);

bool same_geometry(const Geometry& a, const Geometry& b, double tolerance = 1e-6);
bool same_spacing(const Vec3& a, const Vec3& b, double tolerance = 1e-6);

enum class ChannelRole { Image, Prior };

std::string_view to_string(ChannelRole role);
ChannelRole channel_role_from_string(std::string_view name);

struct PatchSpec {
  Dims size{224, 224, 28};
  Vec3 target_spacing{0.3125, 0.3125, 3.0};

  static PatchSpec large() { return {{224, 224, 28}, {0.3125, 0.3125, 3.0}}; }
  static PatchSpec medium() { return {{192, 192, 24}, {0.3125, 0.3125, 3.0}}; }
  static PatchSpec small() { return {{160, 160, 20}, {0.3125, 0.3125, 3.0}}; }
  /// Spacing used for segmentation training; same patch triple as `large`.
  static PatchSpec segmentation() { return {{224, 224, 28}, {0.5, 0.5, 3.0}}; }

  bool is_canonical() const;
  /// Canonical sizes are enforced unless the caller opts out explicitly.
  void validate(bool allow_override = false) const;
  /// Short scale tag, "224" for (224, 224, 28) and the x extent otherwise.
  std::string scale_tag() const;
};

struct PatchStack {
  std::vector<ScalarGrid> channels;
  std::vector<ChannelRole> roles;
  Geometry geometry;

  std::size_t channel_count() const { return channels.size(); }
  const Dims& dims() const;
  void validate() const;
};

}  // namespace vbiopsy::imaging
