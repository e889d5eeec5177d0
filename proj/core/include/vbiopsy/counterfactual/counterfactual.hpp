#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/common/error.hpp"
#include "vbiopsy/common/grid.hpp"
#include "vbiopsy/counterfactual/vaegan.hpp"
#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::counterfactual {

using TensorFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// encode_mean: [B, 1, z, y, x] -> mu; decode: latent -> [B, 1, z, y, x].
struct LatentModel {
  TensorFn encode_mean;
  TensorFn decode;
};
LatentModel latent_model(const VaeGanState& state);

enum class GradientMode { Exact, FiniteDifference };
inline constexpr double kFiniteDifferenceStep = 1e-3;

/// d(score(decode(z)))/dz, same shape as z. The score is the classifier logit,
/// or the probability with `probability`.
torch::Tensor latent_gradient(const torch::Tensor& z, const TensorFn& decode, const TensorFn& classify,
                              GradientMode mode = GradientMode::Exact, bool probability = false);

enum class SweepMode { Linear, Iterative };
enum class HeatmapAggregate { Mean, Min };

struct CounterfactualConfig {
  std::vector<double> alphas;  // empty: symmetric uniform grid of `points` over [-alpha_max, alpha_max]
  double alpha_max = 1.0;
  int points = 11;
  SweepMode mode = SweepMode::Linear;
  GradientMode gradient = GradientMode::Exact;
  bool probability_gradient = false;
  bool normalize_gradient = false;
  double shift_threshold = 0.05;
  double fidelity_threshold = 0.1;
  HeatmapAggregate aggregate = HeatmapAggregate::Mean;

  std::vector<double> schedule() const;
  void validate() const;
};

nlohmann::json to_json(const CounterfactualConfig& c);
CounterfactualConfig counterfactual_config_from_json(const nlohmann::json& j);

/// Raised when a case fails the fidelity gate; carries the offending delta p.
class FidelityRejected : public Error {
 public:
  FidelityRejected(const std::string& case_id, double delta_p, double threshold);
  double delta_p() const noexcept { return delta_p_; }

 private:
  double delta_p_;
};

struct CounterfactualJob {
  std::string case_id;
  std::vector<double> alphas;
  torch::Tensor z_orig;
  std::vector<ScalarGrid> images;
  std::vector<double> predictions;
  ScalarGrid reconstruction;
  double input_prediction = 0.0;
  double reconstruction_prediction = 0.0;
  double delta_p = 0.0;
  std::optional<double> alpha_lower;
  std::optional<double> alpha_upper;
  SweepMode mode = SweepMode::Linear;
};

/// Outermost alphas on each side of 0 with |p(alpha) - p(0)| >= threshold.
std::pair<std::optional<double>, std::optional<double>> shift_bounds(const std::vector<double>& alphas,
                                                                     const std::vector<double>& predictions,
                                                                     double threshold);

/// x is [1, 1, z, y, x]; classify maps such images to logits [B]. Refuses
/// cases whose reconstruction moves the prediction by >= fidelity_threshold.
CounterfactualJob generate_counterfactuals(const std::string& case_id, const torch::Tensor& x, const LatentModel& model,
                                           const TensorFn& classify, const CounterfactualConfig& cfg);

struct HeatmapSet {
  ScalarGrid aggregate;
  std::vector<ScalarGrid> sequential;
};

HeatmapSet heatmaps(const std::vector<ScalarGrid>& counterfactuals, const ScalarGrid& reference,
                    HeatmapAggregate aggregate = HeatmapAggregate::Mean);
inline HeatmapSet heatmaps(const CounterfactualJob& job, HeatmapAggregate aggregate = HeatmapAggregate::Mean) {
  return heatmaps(job.images, job.reconstruction, aggregate);
}
/// Index (x, y, z) of the maximum; the first in storage order on ties.
std::array<std::int64_t, 3> peak_voxel(const ScalarGrid& grid);

inline constexpr double kFidelityBinWidth = 0.02;
inline constexpr std::size_t kFidelityBins = 15;  // [0, 0.3) plus one overflow bin

struct FidelityReport {
  double threshold = 0.1;
  std::map<std::string, double> delta_p;
  std::vector<std::string> passed;
  std::vector<std::string> failed;
  std::vector<std::size_t> histogram;  // kFidelityBins + 1 counts
};

/// Strict gate: pass iff delta p < threshold.
FidelityReport fidelity_partition(const std::map<std::string, double>& delta_p, double threshold = 0.1);

struct FidelityCase {
  std::string case_id;
  torch::Tensor x;  // [1, 1, z, y, x]
  TensorFn classify;
};
FidelityReport reconstruction_fidelity(const std::vector<FidelityCase>& cases, const LatentModel& model,
                                       double threshold = 0.1);

nlohmann::json to_json(const FidelityReport& r);
nlohmann::json trace_json(const CounterfactualJob& job);

/// NIfTI grids (cf_XX, reconstruction, heatmap_aggregate, heatmap_seq_XX) plus trace.json.
void save_job(const std::filesystem::path& dir, const CounterfactualJob& job, const HeatmapSet& maps,
              const imaging::Geometry& geometry);

}  // namespace vbiopsy::counterfactual
