#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/metrics/classification.hpp"
#include "vbiopsy/orchestration/storage.hpp"

namespace vbiopsy::orchestration {

enum class Objective { Auc, CompositeScore };

std::string_view to_string(Objective o);
Objective objective_from_string(std::string_view name);

/// Parameter names are classifier config keys; nested keys use dots
/// ("cnn.strides", "foundation.encoder_widths").
struct GridSpec {
  std::map<std::string, std::vector<nlohmann::json>> parameters;
  Objective objective = Objective::CompositeScore;

  void validate() const;
  std::size_t size() const;
};

GridSpec grid_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GridSpec& g);

/// Every combination exactly once, odometer order over sorted parameter
/// names (the last name varies fastest).
std::vector<nlohmann::json> cartesian(const GridSpec& g);

/// Sets dotted keys of `combo` inside `base`; unknown keys are rejected.
nlohmann::json apply_overrides(nlohmann::json base, const nlohmann::json& combo);

using GridEvaluator = std::function<metrics::MetricsReport(const nlohmann::json& combination)>;

struct GridTrial {
  nlohmann::json combination;
  std::optional<metrics::MetricsReport> report;
  /// Missing when the metric was undefined or the evaluation failed.
  std::optional<double> objective;
  std::string error;
  std::filesystem::path run_dir;
};

struct GridResult {
  std::vector<GridTrial> trials;
  /// Highest objective; the first combination wins ties.
  std::optional<std::size_t> best;
};

GridResult run_grid(const GridSpec& spec, const GridEvaluator& evaluate, const std::filesystem::path& root,
                    const Clock& clock = system_clock());
nlohmann::json to_json(const GridResult& r, Objective objective);

}  // namespace vbiopsy::orchestration
