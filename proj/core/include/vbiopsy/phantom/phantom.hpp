#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/common/range.hpp"
#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::phantom {

enum class RiskLabel { Low, High };

std::string_view to_string(RiskLabel risk);
RiskLabel risk_from_string(std::string_view name);
inline int as_int(RiskLabel risk) { return risk == RiskLabel::High ? 1 : 0; }

struct Lesion {
  Vec3 center_mm{};  // physical position
  double radius_mm = 0.0;
  double contrast = 0.0;
  std::int16_t zone = imaging::zone::peripheral;
};

struct CaseRecord {
  std::string case_id;
  std::string volume_ref;
  double age = 0.0;
  double psa = 0.0;
  std::optional<double> psa_density;
  std::optional<int> ggg;
  RiskLabel risk = RiskLabel::Low;
  std::vector<Lesion> lesions;

  /// risk == High iff ggg >= 3 (when ggg present); psa > 0; age > 0.
  void validate() const;
};

struct PhantomParams {
  Dims grid{40, 40, 12};
  Vec3 spacing{1.5, 1.5, 3.0};
  Vec3 gland_semi_axes_mm{18.0, 14.0, 10.0};
  double gland_axis_jitter = 0.08;   // relative, uniform +-
  double center_jitter_mm = 3.0;     // uniform +- per in-plane axis
  double tz_fraction = 0.55;         // TZ semi-axes = fraction * gland semi-axes
  double tz_anterior_shift_mm = 3.0; // TZ pushed toward +y, thickening posterior PZ
  int lesion_count = 0;
  Range lesion_radius_mm{4.5, 6.0};
  Range lesion_contrast{-0.6, -0.4};
  double tz_lesion_probability = 0.0;
  double high_risk_radius_mm = 4.5;  // any lesion at least this large makes the case high risk
  double background_intensity = 0.25;
  double pz_intensity = 0.85;
  double tz_intensity = 0.55;
  double noise_sigma = 0.04;
  std::uint64_t rng_seed = 0;
  std::string case_id = "case-0000";

  void validate() const;
};

struct Phantom {
  imaging::Volume3D volume;
  imaging::LabelMask gland;
  imaging::LabelMask zones;
  CaseRecord record;
};

Phantom generate_phantom(const PhantomParams& params);

/// GGG assignment used by the generator: no lesion -> 1, sub-threshold -> 2,
/// otherwise 3..5 by how far the largest radius exceeds the threshold.
int assign_ggg(const std::vector<Lesion>& lesions, double high_risk_radius_mm);

}  // namespace vbiopsy::phantom
