#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "vbiopsy/phantom/phantom.hpp"

namespace vbiopsy::phantom {

inline const std::array<std::string, 3> kSplitNames{"train", "val", "test"};

struct Manifest {
  std::map<std::string, std::vector<std::string>> splits;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
  std::string stratify_by = "risk";

  const std::vector<std::string>& split(const std::string& name) const;
  std::size_t case_count() const;
  /// Splits disjoint; union equals `all_ids` when given.
  void validate() const;
};

/// Stratified train/val/test split. Split sizes follow the ratios by largest
/// remainder; each stratum is spread so every split is within one case of
/// the global proportion. Shuffling inside strata uses `seed`.
Manifest build_manifest(const std::vector<CaseRecord>& cases, const std::array<double, 3>& ratios,
                        const std::string& stratify_by = "risk", std::uint64_t seed = 0);

nlohmann::json to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest load_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const CaseRecord& record);
CaseRecord case_from_json(const nlohmann::json& j);
void save_cases_jsonl(const std::filesystem::path& path, const std::vector<CaseRecord>& cases);
std::vector<CaseRecord> load_cases_jsonl(const std::filesystem::path& path);

}  // namespace vbiopsy::phantom
