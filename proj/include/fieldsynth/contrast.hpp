#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "fieldsynth/volume.hpp"

namespace fieldsynth {

// Background noise in magnitude images is Rayleigh distributed; its std
// underestimates the Gaussian noise level by this factor.
inline constexpr double kRayleighCorrection = 1.53;

struct SnrTriple {
  double wm = 0.0;
  double gm = 0.0;
  double csf = 0.0;

  std::array<double, 3> as_array() const { return {wm, gm, csf}; }
  // True when the T1-weighted ordering wm > gm > csf holds.
  bool t1_ordered() const { return wm > gm && gm > csf; }
  friend bool operator==(const SnrTriple&, const SnrTriple&) = default;
};

// (WM-CSF, WM-GM, GM-CSF) contrasts in SNR units.
struct ContrastTriple {
  double wc = 0.0;
  double wg = 0.0;
  double gc = 0.0;

  std::array<double, 3> as_array() const { return {wc, wg, gc}; }
  // |c_wc - (c_wg + c_gc)|; zero for contrasts derived from one set of means.
  double consistency_residual() const;
  friend bool operator==(const ContrastTriple&, const ContrastTriple&) = default;
};

// Tissue-wise contrast scaling between high- and ultra-low-field, each in [0,1].
struct DegradationVector {
  double wm = 1.0;
  double gm = 1.0;
  double csf = 1.0;

  std::array<double, 3> as_array() const { return {wm, gm, csf}; }
  double of(Tissue t) const;
  void validate() const;
  friend bool operator==(const DegradationVector&, const DegradationVector&) = default;
};

using Matrix3 = std::array<std::array<double, 3>, 3>;

struct SolverConfig {
  double epsilon = 1e-3;
  // Lattice resolution; 1 / grid_step must be an integer.
  double grid_step = 1e-3;

  int cells() const;
  void validate() const;
};

struct SolverResult {
  DegradationVector m;
  double objective = 0.0;
};

// Per-tissue binary ROIs plus a background region.
struct RoiMasks {
  std::vector<float> wm;
  std::vector<float> gm;
  std::vector<float> csf;
  std::vector<float> background;

  // ROIs from the classes of a segmentation.
  static RoiMasks from_segmentation(const Segmentation& seg);
};

// mean(ROI_t) / (std(background) * 1.53), population std.
SnrTriple estimate_snr(const Volume& volume, const RoiMasks& masks);

// Population std of the volume over a binary mask.
double masked_std(const Volume& volume, std::span<const float> mask);
double masked_mean(const Volume& volume, std::span<const float> mask);

// Rows (WM-CSF, WM-GM, GM-CSF) applied to (m_wm, m_gm, m_csf).
Matrix3 build_contrast_system(const SnrTriple& snr);

std::array<double, 3> apply(const Matrix3& a, const std::array<double, 3>& m);

// 0.5 * |A m - c|^2 + epsilon * |m|^2
double contrast_objective(const Matrix3& a, const std::array<double, 3>& c, double epsilon,
                          const std::array<double, 3>& m);

// Exact minimizer of the objective over the lattice {0, h, ..., 1}^3; ties
// go to the lexicographically smallest (m_wm, m_gm, m_csf).
SolverResult estimate_m(const SnrTriple& snr, const ContrastTriple& target, const SolverConfig& config);
SolverResult estimate_m(const Matrix3& a, const std::array<double, 3>& c, const SolverConfig& config);

// (mean_i - mean_j) / (bg_sigma * 1.53) for (WM,CSF), (WM,GM), (GM,CSF),
// using hard class masks.
ContrastTriple measure_contrast(const Volume& volume, const Segmentation& seg, double bg_sigma);

// Same, restricted to explicit per-tissue masks (e.g. interior-eroded ones).
ContrastTriple measure_contrast(const Volume& volume, const RoiMasks& masks, double bg_sigma);

}  // namespace fieldsynth
