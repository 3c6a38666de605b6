#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "fieldsynth/volume.hpp"

namespace fieldsynth {

// Nested-ellipsoid brain stand-in: CSF shell outside, GM shell, WM core.
// Radii are ellipsoid semi-axes in voxels about the grid center.
struct PhantomSpec {
  Dims dims{64, 64, 64};
  std::array<double, 3> csf_radii{30.0, 30.0, 29.0};
  std::array<double, 3> gm_radii{23.0, 23.0, 22.0};
  std::array<double, 3> wm_radii{14.0, 14.0, 13.0};
  double wm_intensity = 0.8;
  double gm_intensity = 0.55;
  double csf_intensity = 0.3;
  double background = 0.05;
  // Additive Gaussian noise std per region; zero gives exact region means.
  double background_noise = 0.0;
  double tissue_noise = 0.0;
  Spacing spacing{1.0, 1.0, 1.0};

  // Throws ArgumentError unless radii nest strictly and WM > GM > CSF.
  void validate() const;
};

struct Phantom {
  Volume volume;
  Segmentation segmentation;
};

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed);

}  // namespace fieldsynth
