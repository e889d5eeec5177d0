#pragma once

#include <cstdint>

#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::segmenter {

struct ComponentFilterResult {
  imaging::LabelMask mask;
  /// Set when the input had no foreground at all.
  bool empty = false;
};

/// Keeps, for every foreground label, only its largest 26-connected component.
/// Ties between equally large components keep the one found first in x-fastest
/// scan order.
ComponentFilterResult largest_component(const imaging::LabelMask& mask);

/// 2|A n B| / (|A| + |B|) for voxels equal to `label`. Both empty -> 1.0.
double dice(const imaging::LabelMask& pred, const imaging::LabelMask& truth, std::int16_t label);

/// Foreground voxel count x voxel volume (mm^3) / 1000.
double gland_volume_cc(const imaging::LabelMask& mask);
double psa_density(double psa_ng_ml, double volume_cc);

}  // namespace vbiopsy::segmenter
