#include "vbiopsy/phantom/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace vbiopsy::phantom {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined key.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<PhantomParams> cohort_params(const CohortSpec& spec) {
  require(spec.count >= 1, ErrorCode::InvalidArgument, "cohort needs at least one case");
  require(spec.high_risk_prevalence >= 0.0 && spec.high_risk_prevalence <= 1.0, ErrorCode::InvalidArgument,
          "prevalence must lie in [0,1]");
  require(spec.small_lesion_probability >= 0.0 && spec.small_lesion_probability <= 1.0, ErrorCode::InvalidArgument,
          "small lesion probability must lie in [0,1]");
  spec.base.validate();
  const auto n_high = static_cast<std::size_t>(std::llround(spec.high_risk_prevalence * static_cast<double>(spec.count)));
  std::vector<std::size_t> order(spec.count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(spec.seed, 0xC0407));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> high(spec.count, false);
  for (std::size_t k = 0; k < n_high; ++k) high[order[k]] = true;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double thr = spec.base.high_risk_radius_mm;
  std::vector<PhantomParams> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    PhantomParams p = spec.base;
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%04zu", spec.id_prefix.c_str(), i);
    p.case_id = id;
    p.rng_seed = derive_seed(spec.seed, i);
    if (high[i]) {
      p.lesion_count = 1;
      p.lesion_radius_mm = {std::max(thr, spec.base.lesion_radius_mm.min), std::max(thr, spec.base.lesion_radius_mm.max)};
    } else if (unit(rng) < spec.small_lesion_probability) {
      p.lesion_count = 1;
      p.lesion_radius_mm = {0.5 * thr, 0.8 * thr};
    } else {
      p.lesion_count = 0;
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace vbiopsy::phantom
