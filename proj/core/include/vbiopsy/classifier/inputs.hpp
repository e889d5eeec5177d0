#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vbiopsy/imaging/volume.hpp"
#include "vbiopsy/phantom/phantom.hpp"

namespace vbiopsy::classifier {

/// Input combinations named after the fusion experiments: G = gland prior,
/// Z = zonal prior, C = clinical variables.
enum class InputVariant { ImageOnly, Gland, Zones, Clinical, GlandClinical };

std::string_view to_string(InputVariant v);  // "image", "G", "Z", "C", "G+C"
InputVariant input_variant_from_string(std::string_view name);
bool uses_prior(InputVariant v);
bool uses_clinical(InputVariant v);
std::int64_t channel_count(InputVariant v);

/// Standardized [age, psa_density] with statistics from the train split.
struct ClinicalStats {
  std::vector<std::string> names{"age", "psa_density"};
  std::vector<double> mean;
  std::vector<double> stddev;

  bool fitted() const { return !mean.empty(); }
};

/// Raw clinical features; a missing field is an error, never imputed.
std::vector<double> clinical_features(const phantom::CaseRecord& record);
/// Population mean/std per feature; refuses constant features.
ClinicalStats fit_clinical(const std::vector<std::vector<double>>& train_rows);
std::vector<double> standardize(const std::vector<double>& row, const ClinicalStats& stats);

/// Resample to the spec spacing, crop around the gland centroid, percentile
/// min-max normalize, then add the prior channel the variant asks for
/// (binary gland for G, zones scaled to {0, 0.5, 1} for Z).
imaging::PatchStack make_classifier_patch(const imaging::Volume3D& volume, const imaging::LabelMask& gland,
                                          const std::optional<imaging::LabelMask>& zones,
                                          const imaging::PatchSpec& spec, InputVariant variant);

}  // namespace vbiopsy::classifier
