#include "vbiopsy/imaging/volume.hpp"

#include <algorithm>
#include <cmath>

namespace vbiopsy::imaging {

void validate_spacing(const Vec3& spacing) {
  for (double s : spacing) {
    require(std::isfinite(s) && s > 0.0, ErrorCode::InvalidArgument,
            "spacing components must be finite and > 0");
  }
}

void Volume3D::validate() const {
  validate_spacing(geometry.spacing);
  for (double v : data.values()) {
    require(std::isfinite(v), ErrorCode::NonFinite, "volume contains non-finite voxels");
  }
}

std::string_view to_string(LabelScheme scheme) {
  return scheme == LabelScheme::Gland ? "gland" : "zones";
}

LabelScheme label_scheme_from_string(std::string_view name) {
  if (name == "gland") return LabelScheme::Gland;
  if (name == "zones") return LabelScheme::Zones;
  fail(ErrorCode::InvalidArgument, "unknown label scheme '" + std::string(name) + "'");
}

int max_label(LabelScheme scheme) { return scheme == LabelScheme::Gland ? 1 : 2; }

std::size_t LabelMask::count(std::int16_t label) const {
  return static_cast<std::size_t>(std::count(labels.values().begin(), labels.values().end(), label));
}

std::size_t LabelMask::foreground_count() const {
  return static_cast<std::size_t>(std::count_if(labels.values().begin(), labels.values().end(),
                                                [](std::int16_t v) { return v != 0; }));
}

void LabelMask::validate() const {
  validate_spacing(geometry.spacing);
  const int top = max_label(scheme);
  for (std::int16_t v : labels.values()) {
    require(v >= 0 && v <= top, ErrorCode::InvalidArgument,
            "label " + std::to_string(v) + " outside the " + std::string(to_string(scheme)) + " scheme");
  }
}

LabelMask to_gland(const LabelMask& zones) {
  LabelMask out{zones.labels, LabelScheme::Gland, zones.geometry};
  for (auto& v : out.labels.values()) v = v != 0 ? zone::gland : zone::background;
  return out;
}

bool same_geometry(const Geometry& a, const Geometry& b, double tolerance) {
  for (std::size_t i = 0; i < 3; ++i) {
    if (std::abs(a.spacing[i] - b.spacing[i]) > tolerance) return false;
    if (std::abs(a.origin[i] - b.origin[i]) > tolerance) return false;
  }
  return true;
}

bool same_spacing(const Vec3& a, const Vec3& b, double tolerance) {
  for (std::size_t i = 0; i < 3; ++i)
    if (std::abs(a[i] - b[i]) > tolerance) return false;
  return true;
}

std::string_view to_string(ChannelRole role) { return role == ChannelRole::Image ? "image" : "prior"; }

ChannelRole channel_role_from_string(std::string_view name) {
  if (name == "image") return ChannelRole::Image;
  if (name == "prior") return ChannelRole::Prior;
  fail(ErrorCode::InvalidArgument, "unknown channel role '" + std::string(name) + "'");
}

bool PatchSpec::is_canonical() const {
  return size == Dims{224, 224, 28} || size == Dims{192, 192, 24} || size == Dims{160, 160, 20};
}

void PatchSpec::validate(bool allow_override) const {
  validate_spacing(target_spacing);
  require(size.x >= 1 && size.y >= 1 && size.z >= 1, ErrorCode::InvalidArgument,
          "patch size must be >= 1 per axis");
  require(allow_override || is_canonical(), ErrorCode::InvalidArgument,
          "patch size is not one of (224,224,28), (192,192,24), (160,160,20)");
}

std::string PatchSpec::scale_tag() const { return std::to_string(size.x); }

const Dims& PatchStack::dims() const {
  require(!channels.empty(), ErrorCode::InvalidArgument, "patch stack has no channels");
  return channels.front().dims();
}

void PatchStack::validate() const {
  require(!channels.empty(), ErrorCode::InvalidArgument, "patch stack needs at least one channel");
  require(channels.size() == roles.size(), ErrorCode::InvalidArgument,
          "every channel needs exactly one role");
  const Dims& d = channels.front().dims();
  for (std::size_t c = 0; c < channels.size(); ++c) {
    require(channels[c].dims() == d, ErrorCode::GeometryMismatch, "patch channels differ in shape");
    if (roles[c] == ChannelRole::Prior) {
      for (double v : channels[c].values()) {
        require(v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument, "prior channel values must lie in [0,1]");
      }
    }
  }
}

}  // namespace vbiopsy::imaging
