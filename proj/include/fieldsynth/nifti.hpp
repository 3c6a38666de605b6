#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fieldsynth/volume.hpp"

namespace fieldsynth {

// Header fields that do not live on Volume but are useful to callers.
struct NiftiInfo {
  std::int16_t datatype = 16;
  std::int16_t bitpix = 32;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  float vox_offset = 352.0f;
  std::string description;
};

struct NiftiImage {
  Volume volume;
  NiftiInfo info;
};

// Reads a single-file little-endian NIfTI-1 (.nii) scalar volume. Intensity
// scaling (slope * v + inter) is applied when scl_slope is non-zero.
NiftiImage load_nifti(const std::filesystem::path& path);

// Writes a 352-byte-header NIfTI-1 file with float32 data and the affine in
// the sform rows.
void save_nifti(const Volume& volume, const std::filesystem::path& path,
                const std::string& description = {});

}  // namespace fieldsynth
