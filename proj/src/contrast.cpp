#include "fieldsynth/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fieldsynth/error.hpp"

namespace fieldsynth {

double ContrastTriple::consistency_residual() const { return std::abs(wc - (wg + gc)); }

double DegradationVector::of(Tissue t) const {
  switch (t) {
    case Tissue::WhiteMatter: return wm;
    case Tissue::GrayMatter: return gm;
    case Tissue::Csf: return csf;
    case Tissue::Background: break;
  }
  return 0.0;
}

void DegradationVector::validate() const {
  for (double v : as_array())
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("degradation factors must lie in [0,1]");
}

int SolverConfig::cells() const {
  const double n = 1.0 / grid_step;
  return static_cast<int>(std::lround(n));
}

void SolverConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ArgumentError("epsilon must be >= 0");
  if (!(grid_step > 0.0 && grid_step <= 1.0)) throw ArgumentError("grid_step must lie in (0,1]");
  const double n = 1.0 / grid_step;
  if (std::abs(n - std::round(n)) > 1e-9 * n)
    throw ArgumentError("grid_step must divide 1 into an integer number of cells");
}

RoiMasks RoiMasks::from_segmentation(const Segmentation& seg) {
  const Segmentation hard = seg.hardened();
  return {hard.mask(Tissue::WhiteMatter), hard.mask(Tissue::GrayMatter), hard.mask(Tissue::Csf),
          hard.mask(Tissue::Background)};
}

namespace {

struct MaskStats {
  std::size_t n = 0;
  double mean = 0.0;
  double var = 0.0;
};

MaskStats stats(const Volume& volume, std::span<const float> mask, const char* what) {
  if (mask.size() != volume.size())
    throw ArgumentError(std::string(what) + " mask size does not match the volume");
  MaskStats s;
  double sum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] > 0.5f) {
      ++s.n;
      sum += volume[i];
    }
  if (s.n == 0) throw ArgumentError(std::string(what) + " mask is empty");
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] > 0.5f) {
      const double d = volume[i] - s.mean;
      ss += d * d;
    }
  s.var = ss / static_cast<double>(s.n);
  return s;
}

}  // namespace

double masked_mean(const Volume& volume, std::span<const float> mask) {
  return stats(volume, mask, "region").mean;
}

double masked_std(const Volume& volume, std::span<const float> mask) {
  return std::sqrt(stats(volume, mask, "region").var);
}

SnrTriple estimate_snr(const Volume& volume, const RoiMasks& masks) {
  const MaskStats bg = stats(volume, masks.background, "background");
  if (bg.n < 2) throw ArgumentError("background mask needs at least 2 voxels");
  const double sigma = std::sqrt(bg.var);
  if (!(sigma > 0.0)) throw DegenerateError("background standard deviation is zero");
  const double denom = sigma * kRayleighCorrection;
  return {stats(volume, masks.wm, "WM").mean / denom, stats(volume, masks.gm, "GM").mean / denom,
          stats(volume, masks.csf, "CSF").mean / denom};
}

Matrix3 build_contrast_system(const SnrTriple& snr) {
  return {{{snr.wm, 0.0, -snr.csf}, {snr.wm, -snr.gm, 0.0}, {0.0, snr.gm, -snr.csf}}};
}

std::array<double, 3> apply(const Matrix3& a, const std::array<double, 3>& m) {
  std::array<double, 3> out{};
  for (int r = 0; r < 3; ++r) out[r] = a[r][0] * m[0] + a[r][1] * m[1] + a[r][2] * m[2];
  return out;
}

double contrast_objective(const Matrix3& a, const std::array<double, 3>& c, double epsilon,
                          const std::array<double, 3>& m) {
  double res = 0.0;
  for (int r = 0; r < 3; ++r) {
    const double e = a[r][0] * m[0] + a[r][1] * m[1] + a[r][2] * m[2] - c[r];
    res += e * e;
  }
  return 0.5 * res + epsilon * (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]);
}

SolverResult estimate_m(const Matrix3& a, const std::array<double, 3>& c, const SolverConfig& config) {
  config.validate();
  const int n = config.cells();
  const double cells = static_cast<double>(n);
  auto lattice = [cells](int k) { return static_cast<double>(k) / cells; };

  // For fixed (m_wm, m_gm) the objective is a strictly convex quadratic in
  // m_csf, so its lattice minimizer is the floor or ceiling of the clipped
  // continuous minimizer. A is rank deficient, which rules out a local
  // window around a coarse incumbent.
  double alpha = config.epsilon;
  for (int r = 0; r < 3; ++r) alpha += 0.5 * a[r][2] * a[r][2];

  double best = std::numeric_limits<double>::infinity();
  std::array<int, 3> best_k{0, 0, 0};
  for (int i = 0; i <= n; ++i) {
    const double x = lattice(i);
    for (int j = 0; j <= n; ++j) {
      const double y = lattice(j);
      int k_lo = 0, k_hi = n;
      if (alpha > 0.0) {
        double beta = 0.0;
        for (int r = 0; r < 3; ++r) beta += (a[r][0] * x + a[r][1] * y - c[r]) * a[r][2];
        const double z = std::clamp(-beta / (2.0 * alpha), 0.0, 1.0);
        k_lo = std::clamp(static_cast<int>(std::floor(z * cells)), 0, n);
        k_hi = std::min(k_lo + 1, n);
      }
      for (int k = k_lo; k <= k_hi; ++k) {
        const double f = contrast_objective(a, c, config.epsilon, {x, y, lattice(k)});
        if (f < best) {
          best = f;
          best_k = {i, j, k};
        }
      }
    }
  }
  return {{lattice(best_k[0]), lattice(best_k[1]), lattice(best_k[2])}, best};
}

SolverResult estimate_m(const SnrTriple& snr, const ContrastTriple& target, const SolverConfig& config) {
  for (double s : snr.as_array())
    if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("SNR values must be finite and positive");
  return estimate_m(build_contrast_system(snr), target.as_array(), config);
}

ContrastTriple measure_contrast(const Volume& volume, const RoiMasks& masks, double bg_sigma) {
  if (!(bg_sigma > 0.0)) throw ArgumentError("bg_sigma must be positive");
  const double w = stats(volume, masks.wm, "WM").mean;
  const double g = stats(volume, masks.gm, "GM").mean;
  const double cs = stats(volume, masks.csf, "CSF").mean;
  const double denom = bg_sigma * kRayleighCorrection;
  return {(w - cs) / denom, (w - g) / denom, (g - cs) / denom};
}

ContrastTriple measure_contrast(const Volume& volume, const Segmentation& seg, double bg_sigma) {
  if (seg.dims() != volume.dims()) throw ArgumentError("segmentation does not match volume dims");
  for (Tissue t : kTissues)
    if (seg.count(t) == 0)
      throw ArgumentError("tissue class " + std::string(tissue_name(t)) + " is missing");
  return measure_contrast(volume, RoiMasks::from_segmentation(seg), bg_sigma);
}

}  // namespace fieldsynth
