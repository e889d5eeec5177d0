#include "vbiopsy/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace vbiopsy::phantom {

using imaging::LabelMask;
using imaging::LabelScheme;
using imaging::Volume3D;
namespace zone = imaging::zone;

std::string_view to_string(RiskLabel risk) { return risk == RiskLabel::High ? "high" : "low"; }

RiskLabel risk_from_string(std::string_view name) {
  if (name == "high") return RiskLabel::High;
  if (name == "low") return RiskLabel::Low;
  fail(ErrorCode::InvalidArgument, "unknown risk label '" + std::string(name) + "'");
}

void CaseRecord::validate() const {
  require(!case_id.empty(), ErrorCode::InvalidArgument, "case_id must not be empty");
  require(std::isfinite(age) && age > 0.0, ErrorCode::InvalidArgument, case_id + ": age must be > 0");
  require(std::isfinite(psa) && psa > 0.0, ErrorCode::InvalidArgument, case_id + ": psa must be > 0");
  if (ggg) {
    require(*ggg >= 1 && *ggg <= 5, ErrorCode::InvalidArgument, case_id + ": ggg must lie in 1..5");
    require((risk == RiskLabel::High) == (*ggg >= 3), ErrorCode::InvalidArgument,
            case_id + ": risk label must be high exactly when ggg >= 3");
  }
  if (psa_density) {
    require(std::isfinite(*psa_density) && *psa_density > 0.0, ErrorCode::InvalidArgument,
            case_id + ": psa_density must be > 0");
  }
}

void PhantomParams::validate() const {
  imaging::validate_spacing(spacing);
  require(grid.x >= 1 && grid.y >= 1 && grid.z >= 1, ErrorCode::InvalidArgument, "grid must be >= 1 per axis");
  for (double a : gland_semi_axes_mm) require(a > 0.0, ErrorCode::InvalidArgument, "gland semi-axes must be > 0");
  require(tz_fraction > 0.0 && tz_fraction < 1.0, ErrorCode::InvalidArgument, "tz_fraction must lie in (0,1)");
  require(gland_axis_jitter >= 0.0 && gland_axis_jitter < 1.0, ErrorCode::InvalidArgument,
          "gland_axis_jitter must lie in [0,1)");
  require(center_jitter_mm >= 0.0, ErrorCode::InvalidArgument, "center_jitter_mm must be >= 0");
  require(lesion_count >= 0, ErrorCode::InvalidArgument, "lesion_count must be >= 0");
  require(lesion_radius_mm.min > 0.0 && lesion_radius_mm.min <= lesion_radius_mm.max, ErrorCode::InvalidArgument,
          "lesion radius range must satisfy 0 < min <= max");
  const double minor = *std::min_element(gland_semi_axes_mm.begin(), gland_semi_axes_mm.end());
  require(lesion_radius_mm.max < minor, ErrorCode::InvalidArgument,
          "lesion radius must be smaller than the gland minor semi-axis");
  require(lesion_contrast.min > -1.0 && lesion_contrast.max < 0.0 && lesion_contrast.min <= lesion_contrast.max,
          ErrorCode::InvalidArgument, "lesion contrast must lie in (-1, 0)");
  require(tz_lesion_probability >= 0.0 && tz_lesion_probability <= 1.0, ErrorCode::InvalidArgument,
          "tz_lesion_probability must lie in [0,1]");
  require(noise_sigma >= 0.0, ErrorCode::InvalidArgument, "noise_sigma must be >= 0");
  // Keep the jittered centre well inside the field of view.
  for (int a = 0; a < 2; ++a) {
    const double half = 0.5 * static_cast<double>(grid[static_cast<std::size_t>(a)] - 1) * spacing[a];
    require(center_jitter_mm < half, ErrorCode::InvalidArgument, "center jitter exceeds the field of view");
  }
}

int assign_ggg(const std::vector<Lesion>& lesions, double high_risk_radius_mm) {
  if (lesions.empty()) return 1;
  double largest = 0.0;
  for (const auto& l : lesions) largest = std::max(largest, l.radius_mm);
  if (largest < high_risk_radius_mm) return 2;
  if (largest < 1.15 * high_risk_radius_mm) return 3;
  if (largest < 1.3 * high_risk_radius_mm) return 4;
  return 5;
}

namespace {

double ellipsoid_value(const Vec3& p, const Vec3& c, const Vec3& a) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = (p[i] - c[i]) / a[i];
    s += d * d;
  }
  return s;
}

}  // namespace

Phantom generate_phantom(const PhantomParams& params) {
  params.validate();
  std::mt19937_64 rng(params.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const Dims& d = params.grid;
  const imaging::Geometry geometry{params.spacing, {0.0, 0.0, 0.0}};
  auto physical = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    return Vec3{static_cast<double>(x) * params.spacing[0], static_cast<double>(y) * params.spacing[1],
                static_cast<double>(z) * params.spacing[2]};
  };

  Vec3 semi = params.gland_semi_axes_mm;
  for (auto& a : semi) a *= 1.0 + draw(-params.gland_axis_jitter, params.gland_axis_jitter);
  Vec3 center{};
  for (int a = 0; a < 3; ++a) center[a] = 0.5 * static_cast<double>(d[static_cast<std::size_t>(a)] - 1) * params.spacing[a];
  center[0] += draw(-params.center_jitter_mm, params.center_jitter_mm);
  center[1] += draw(-params.center_jitter_mm, params.center_jitter_mm);
  Vec3 tz_center = center;
  tz_center[1] += params.tz_anterior_shift_mm;
  Vec3 tz_semi{};
  for (int a = 0; a < 3; ++a) tz_semi[a] = params.tz_fraction * semi[a];

  LabelMask zones{LabelGrid(d, zone::background), LabelScheme::Zones, geometry};
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const Vec3 p = physical(x, y, z);
        if (ellipsoid_value(p, center, semi) > 1.0) continue;
        zones.labels(x, y, z) = ellipsoid_value(p, tz_center, tz_semi) <= 1.0 ? zone::transition : zone::peripheral;
      }
    }
  }
  LabelMask gland = imaging::to_gland(zones);
  require(gland.foreground_count() > 0, ErrorCode::InvalidArgument, "gland ellipsoid does not intersect the grid");

  // Lesions: rejection-sample balls anchored in one zone, clipped to that zone.
  std::vector<Lesion> lesions;
  std::vector<std::uint8_t> lesion_voxel(d.count(), 0);
  std::vector<double> lesion_contrast(d.count(), 0.0);
  for (int k = 0; k < params.lesion_count; ++k) {
    Lesion lesion;
    lesion.radius_mm = draw(params.lesion_radius_mm.min, params.lesion_radius_mm.max);
    lesion.contrast = draw(params.lesion_contrast.min, params.lesion_contrast.max);
    lesion.zone = unit(rng) < params.tz_lesion_probability ? zone::transition : zone::peripheral;
    bool placed = false;
    for (int attempt = 0; attempt < 4000 && !placed; ++attempt) {
      Vec3 c{};
      for (int a = 0; a < 3; ++a) c[a] = center[a] + draw(-semi[a], semi[a]);
      std::vector<std::size_t> ball;
      bool fits = true;
      const auto r = lesion.radius_mm;
      const auto lo = [&](int a) {
        return std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor((c[a] - r) / params.spacing[a])));
      };
      const auto hi = [&](int a) {
        return std::min<std::int64_t>(d[static_cast<std::size_t>(a)] - 1,
                                      static_cast<std::int64_t>(std::ceil((c[a] + r) / params.spacing[a])));
      };
      std::size_t total = 0;
      for (std::int64_t z = lo(2); z <= hi(2); ++z) {
        for (std::int64_t y = lo(1); y <= hi(1); ++y) {
          for (std::int64_t x = lo(0); x <= hi(0); ++x) {
            const Vec3 p = physical(x, y, z);
            const double dist2 = (p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]) + (p[2] - c[2]) * (p[2] - c[2]);
            if (dist2 > r * r) continue;
            ++total;
            const auto i = zones.labels.index(x, y, z);
            if (zones.labels[i] == lesion.zone && !lesion_voxel[i]) ball.push_back(i);
          }
        }
      }
      // Centre inside the zone, at least half the ball in it, ball not clipped by the grid.
      // The part of the ball spilling out of the zone is dropped.
      const auto voxel_of = [&](int a) {
        return std::clamp<std::int64_t>(std::llround(c[a] / params.spacing[a]), 0, d[static_cast<std::size_t>(a)] - 1);
      };
      if (zones.labels(voxel_of(0), voxel_of(1), voxel_of(2)) != lesion.zone) fits = false;
      if (2 * ball.size() < total) fits = false;
      for (int a = 0; a < 3 && fits; ++a) {
        if (c[a] - r < 0.0 || c[a] + r > static_cast<double>(d[static_cast<std::size_t>(a)] - 1) * params.spacing[a]) {
          fits = false;
        }
      }
      if (!fits || ball.empty()) continue;
      for (auto i : ball) {
        lesion_voxel[i] = 1;
        lesion_contrast[i] = lesion.contrast;
      }
      lesion.center_mm = c;
      placed = true;
    }
    require(placed, ErrorCode::InvalidArgument,
            "lesion of radius " + std::to_string(lesion.radius_mm) + " mm cannot fit inside the gland");
    lesions.push_back(lesion);
  }

  Volume3D volume{ScalarGrid(d, params.background_intensity), geometry};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < d.count(); ++i) {
    const auto label = zones.labels[i];
    double v = params.background_intensity;
    if (label == zone::peripheral) v = params.pz_intensity;
    if (label == zone::transition) v = params.tz_intensity;
    if (lesion_voxel[i]) v *= 1.0 + lesion_contrast[i];
    volume.data[i] = v + params.noise_sigma * noise(rng);
  }

  CaseRecord record;
  record.case_id = params.case_id;
  record.volume_ref = params.case_id + "_t2.nii.gz";
  std::normal_distribution<double> age(68.0, 7.0);
  std::normal_distribution<double> log_psa(0.0, 0.45);
  record.age = std::clamp(age(rng), 45.0, 90.0);
  record.psa = 7.5 * std::exp(log_psa(rng));
  record.ggg = assign_ggg(lesions, params.high_risk_radius_mm);
  record.risk = *record.ggg >= 3 ? RiskLabel::High : RiskLabel::Low;
  record.lesions = lesions;
  record.validate();
  return {std::move(volume), std::move(gland), std::move(zones), std::move(record)};
}

}  // namespace vbiopsy::phantom
