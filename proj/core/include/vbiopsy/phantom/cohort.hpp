#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vbiopsy/phantom/phantom.hpp"

namespace vbiopsy::phantom {

struct CohortSpec {
  std::size_t count = 40;
  std::uint64_t seed = 7;
  double high_risk_prevalence = 0.5;
  /// Probability that a low-risk case carries a sub-threshold lesion.
  double small_lesion_probability = 0.0;
  PhantomParams base{};
  std::string id_prefix = "case";
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Per-case parameters: high-risk cases get one lesion at or above the risk
/// radius, low-risk cases none (or a sub-threshold one). Deterministic in seed.
std::vector<PhantomParams> cohort_params(const CohortSpec& spec);

}  // namespace vbiopsy::phantom
