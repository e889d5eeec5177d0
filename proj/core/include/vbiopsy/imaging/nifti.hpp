#pragma once

#include <filesystem>

#include "vbiopsy/imaging/volume.hpp"

namespace vbiopsy::imaging {

// NIfTI-1 single-file (.nii or .nii.gz) I/O. Axis order on disk is (i, j, k),
// which maps directly onto (x, y, z). Spacing comes from pixdim[1..3], origin
// from the qform offsets.

/// Scalars are stored as float32 unless `as_double` is set.
void write_nifti(const std::filesystem::path& path, const Volume3D& vol, bool as_double = false);
void write_nifti(const std::filesystem::path& path, const LabelMask& mask);

Volume3D read_volume(const std::filesystem::path& path);
LabelMask read_mask(const std::filesystem::path& path, LabelScheme scheme);

/// Saves each channel as <stem>_c<k>.nii.gz plus <stem>.json listing roles.
void write_patch_stack(const std::filesystem::path& directory, const std::string& stem, const PatchStack& patch);
PatchStack read_patch_stack(const std::filesystem::path& directory, const std::string& stem);

}  // namespace vbiopsy::imaging
