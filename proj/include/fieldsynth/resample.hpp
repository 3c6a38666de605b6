#pragma once

#include <array>
#include <string_view>

#include "fieldsynth/volume.hpp"

namespace fieldsynth {

// (v - min) / (max - min); a constant volume maps to all zeros.
Volume normalize_intensity(const Volume& volume);

// Clamp every value into [lo, hi].
Volume clamp_intensity(const Volume& volume, float lo, float hi);

enum class Interpolation { Nearest, Trilinear, Bicubic };

Interpolation parse_interpolation(std::string_view name);

// Rescale the grid by a per-axis factor. Output dims are round(n * factor)
// (at least 1); output voxel i samples input coordinate (i + 0.5) / factor - 0.5,
// so factor 1 is an exact identity. Samples outside the grid clamp to the
// edge voxel. Bicubic uses the Catmull-Rom kernel and can overshoot.
Volume resample(const Volume& volume, const std::array<double, 3>& factor, Interpolation method);

inline Volume resample(const Volume& volume, double factor, Interpolation method) {
  return resample(volume, {factor, factor, factor}, method);
}

// Resample onto an explicit output grid (same voxel-center convention, with
// factor = out / in per axis).
Volume resample_to(const Volume& volume, Dims out, Interpolation method);

}  // namespace fieldsynth
