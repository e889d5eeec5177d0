#include "vbiopsy/classifier/inputs.hpp"

#include <cmath>

#include "vbiopsy/imaging/preprocess.hpp"

namespace vbiopsy::classifier {

using imaging::LabelMask;

std::string_view to_string(InputVariant v) {
  switch (v) {
    case InputVariant::ImageOnly: return "image";
    case InputVariant::Gland: return "G";
    case InputVariant::Zones: return "Z";
    case InputVariant::Clinical: return "C";
    case InputVariant::GlandClinical: return "G+C";
  }
  return "image";
}

InputVariant input_variant_from_string(std::string_view name) {
  if (name == "image" || name == "image_only") return InputVariant::ImageOnly;
  if (name == "G" || name == "gland") return InputVariant::Gland;
  if (name == "Z" || name == "zones") return InputVariant::Zones;
  if (name == "C" || name == "clinical") return InputVariant::Clinical;
  if (name == "G+C" || name == "gland+clinical") return InputVariant::GlandClinical;
  fail(ErrorCode::InvalidArgument, "unknown input variant '" + std::string(name) + "'");
}

bool uses_prior(InputVariant v) {
  return v == InputVariant::Gland || v == InputVariant::Zones || v == InputVariant::GlandClinical;
}
bool uses_clinical(InputVariant v) { return v == InputVariant::Clinical || v == InputVariant::GlandClinical; }
std::int64_t channel_count(InputVariant v) { return uses_prior(v) ? 3 : 1; }

std::vector<double> clinical_features(const phantom::CaseRecord& record) {
  require(record.age > 0.0, ErrorCode::InvalidArgument, record.case_id + ": missing age");
  require(record.psa_density.has_value(), ErrorCode::MissingPrerequisite,
          record.case_id + ": psa_density missing (run the gland segmenter first)");
  return {record.age, *record.psa_density};
}

ClinicalStats fit_clinical(const std::vector<std::vector<double>>& rows) {
  require(!rows.empty(), ErrorCode::InvalidArgument, "clinical statistics need training rows");
  ClinicalStats s;
  const std::size_t k = rows.front().size();
  require(k == s.names.size(), ErrorCode::InvalidArgument, "clinical rows have the wrong width");
  s.mean.assign(k, 0.0);
  s.stddev.assign(k, 0.0);
  for (const auto& r : rows) {
    require(r.size() == k, ErrorCode::InvalidArgument, "ragged clinical rows");
    for (std::size_t j = 0; j < k; ++j) s.mean[j] += r[j];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t j = 0; j < k; ++j) s.stddev[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
  for (std::size_t j = 0; j < k; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(rows.size()));
    require(s.stddev[j] > 0.0, ErrorCode::DegenerateInput, "clinical feature '" + s.names[j] + "' is constant in train");
  }
  return s;
}

std::vector<double> standardize(const std::vector<double>& row, const ClinicalStats& stats) {
  require(stats.fitted(), ErrorCode::MissingPrerequisite, "clinical statistics not fitted");
  require(row.size() == stats.mean.size(), ErrorCode::InvalidArgument, "clinical row has the wrong width");
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    require(std::isfinite(row[j]), ErrorCode::NonFinite, "non-finite clinical value");
    out[j] = (row[j] - stats.mean[j]) / stats.stddev[j];
  }
  return out;
}

imaging::PatchStack make_classifier_patch(const imaging::Volume3D& volume, const LabelMask& gland,
                                          const std::optional<LabelMask>& zones, const imaging::PatchSpec& spec,
                                          InputVariant variant) {
  require(volume.dims() == gland.dims() && imaging::same_geometry(volume.geometry, gland.geometry),
          ErrorCode::GeometryMismatch, "volume and gland mask do not share geometry");
  const auto vol = imaging::resample(volume, spec.target_spacing);
  const auto g = imaging::resample(imaging::to_gland(gland), spec.target_spacing);
  auto image = imaging::normalize(imaging::crop_to_roi(vol, g, spec), imaging::NormalizeMethod::PercentileMinMax).patch;
  if (!uses_prior(variant)) return imaging::assemble_channels(image, std::nullopt, imaging::ChannelMode::ImageOnly);
  if (variant != InputVariant::Zones) {
    return imaging::assemble_channels(image, imaging::crop_mask_to_roi(g, g, spec), imaging::ChannelMode::DuplicatePlusPrior);
  }
  require(zones.has_value(), ErrorCode::MissingPrerequisite, "zonal prior requested but no zone mask given");
  const auto z = imaging::crop_mask_to_roi(imaging::resample(*zones, spec.target_spacing), g, spec);
  ScalarGrid prior(z.dims());
  for (std::size_t i = 0; i < prior.size(); ++i) prior[i] = static_cast<double>(z.labels[i]) / 2.0;
  image.channels = {image.channels[0], image.channels[0], std::move(prior)};
  image.roles = {imaging::ChannelRole::Image, imaging::ChannelRole::Image, imaging::ChannelRole::Prior};
  image.validate();
  return image;
}

}  // namespace vbiopsy::classifier
