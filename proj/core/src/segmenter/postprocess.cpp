#include "vbiopsy/segmenter/postprocess.hpp"

#include <cmath>
#include <set>
#include <vector>

namespace vbiopsy::segmenter {

using imaging::LabelMask;

ComponentFilterResult largest_component(const LabelMask& mask) {
  const Dims& d = mask.dims();
  const auto& labels = mask.labels;
  ComponentFilterResult result{mask, mask.foreground_count() == 0};
  if (result.empty) return result;

  std::set<std::int16_t> present;
  for (auto v : labels.values())
    if (v != 0) present.insert(v);

  std::vector<std::int32_t> component(labels.size(), -1);
  std::vector<std::size_t> stack;
  for (std::int16_t label : present) {
    std::int32_t next_id = 0, best_id = -1;
    std::size_t best_size = 0;
    for (std::size_t seed = 0; seed < labels.size(); ++seed) {
      if (labels[seed] != label || component[seed] >= 0) continue;
      const std::int32_t id = next_id++;
      std::size_t size = 0;
      component[seed] = id;
      stack.push_back(seed);
      while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        ++size;
        const auto x = static_cast<std::int64_t>(i % static_cast<std::size_t>(d.x));
        const auto y = static_cast<std::int64_t>((i / static_cast<std::size_t>(d.x)) % static_cast<std::size_t>(d.y));
        const auto z = static_cast<std::int64_t>(i / static_cast<std::size_t>(d.x * d.y));
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          for (std::int64_t dy = -1; dy <= 1; ++dy) {
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
              const std::int64_t nx = x + dx, ny = y + dy, nz = z + dz;
              if (!labels.contains(nx, ny, nz)) continue;
              const std::size_t j = labels.index(nx, ny, nz);
              if (labels[j] != label || component[j] >= 0) continue;
              component[j] = id;
              stack.push_back(j);
            }
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_id = id;
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label && component[i] != best_id) result.mask.labels[i] = 0;
    }
  }
  return result;
}

double dice(const LabelMask& pred, const LabelMask& truth, std::int16_t label) {
  require(pred.dims() == truth.dims() && imaging::same_geometry(pred.geometry, truth.geometry),
          ErrorCode::GeometryMismatch, "dice: masks do not share geometry");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_a = pred.labels[i] == label;
    const bool in_b = truth.labels[i] == label;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double gland_volume_cc(const LabelMask& mask) {
  imaging::validate_spacing(mask.geometry.spacing);
  const auto& s = mask.geometry.spacing;
  return static_cast<double>(mask.foreground_count()) * s[0] * s[1] * s[2] / 1000.0;
}

double psa_density(double psa_ng_ml, double volume_cc) {
  require(std::isfinite(volume_cc) && volume_cc > 0.0, ErrorCode::DegenerateInput,
          "psa density needs a positive gland volume");
  require(std::isfinite(psa_ng_ml) && psa_ng_ml > 0.0, ErrorCode::InvalidArgument, "psa must be > 0");
  return psa_ng_ml / volume_cc;
}

}  // namespace vbiopsy::segmenter
