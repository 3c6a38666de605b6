#pragma once

#include <cstdint>
#include <vector>

#include "fieldsynth/contrast.hpp"
#include "fieldsynth/volume.hpp"

namespace fieldsynth {

struct ForwardConfig {
  double sigma_smooth = 0.5;  // voxels
  int df = 2;
  // Rician parameters in units of the 0..intensity_scale range.
  double noise_rho = 5.0;
  double noise_sigma = 15.0;
  double intensity_scale = 255.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Normalized discrete Gaussian, radius ceil(4 sigma).
std::vector<double> gaussian_kernel(double sigma);

// Half-sample symmetric reflection of an index into [0, n).
int reflect_index(int i, int n);

// Separable 3D Gaussian with reflective boundaries; sigma 0 is the identity.
Volume gaussian_smooth(const Volume& volume, double sigma);

// Mean over df^3 blocks; trailing partial blocks average what is available.
Volume downsample(const Volume& volume, int df);

// Independent draws sqrt((rho + n1)^2 + n2^2), n ~ N(0, sigma_r^2), keyed by
// (seed, voxel index).
Volume sample_rician(Dims dims, double rho, double sigma_r, std::uint64_t seed);

// Synthetic ULF volume:
//   Y = sum_t downsample(smooth(hf * S_t)) * m_t + noise
// The noise is added on the 0..intensity_scale range and the result is
// brought back to [0,1] and clamped.
Volume simulate_ulf(const Volume& hf, const Segmentation& seg, const DegradationVector& m,
                    const ForwardConfig& config);

// The noise-free part of simulate_ulf (no clamping).
Volume simulate_ulf_clean(const Volume& hf, const Segmentation& seg, const DegradationVector& m,
                          const ForwardConfig& config);

// Labels on the pooled grid: majority class of each df^3 block (ties to the
// lower class index).
Segmentation downsample_labels(const Segmentation& seg, int df);

// Per-tissue ULF masks keeping only blocks whose smoothing footprint at high
// resolution lies entirely inside one tissue.
RoiMasks interior_masks(const Segmentation& hf_seg, const ForwardConfig& config);

}  // namespace fieldsynth
