#pragma once

namespace vbiopsy {

/// Closed interval [min, max] used for sampling ranges in configs.
struct Range {
  double min = 0.0;
  double max = 0.0;

  bool operator==(const Range&) const = default;
};

}  // namespace vbiopsy
