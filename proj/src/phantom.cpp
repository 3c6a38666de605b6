#include "fieldsynth/phantom.hpp"

#include <cmath>

#include "fieldsynth/error.hpp"
#include "fieldsynth/rng.hpp"

namespace fieldsynth {

void PhantomSpec::validate() const {
  if (!dims.valid()) throw ArgumentError("phantom dims must be positive");
  for (int a = 0; a < 3; ++a) {
    if (!(wm_radii[a] > 0.0)) throw ArgumentError("phantom radii must be positive");
    if (!(csf_radii[a] > gm_radii[a] && gm_radii[a] > wm_radii[a]))
      throw ArgumentError("phantom radii must nest strictly: csf > gm > wm on every axis");
  }
  if (!(wm_intensity > gm_intensity && gm_intensity > csf_intensity))
    throw ArgumentError("phantom intensities must satisfy wm > gm > csf");
  if (background_noise < 0.0 || tissue_noise < 0.0) throw ArgumentError("noise std must be >= 0");
  for (double s : spacing)
    if (!(s > 0.0)) throw ArgumentError("phantom spacing must be positive");
}

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Dims d = spec.dims;
  const CounterRng rng(hash_combine(seed, 0x7068616e746f6dULL));

  auto inside = [](const std::array<double, 3>& r, double x, double y, double z) {
    return (x * x) / (r[0] * r[0]) + (y * y) / (r[1] * r[1]) + (z * z) / (r[2] * r[2]) <= 1.0;
  };

  std::vector<float> data(d.count());
  std::vector<std::uint8_t> labels(d.count());
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const double x = i + 0.5 - 0.5 * d.nx;
        const double y = j + 0.5 - 0.5 * d.ny;
        const double z = k + 0.5 - 0.5 * d.nz;
        Tissue t = Tissue::Background;
        double value = spec.background;
        if (inside(spec.wm_radii, x, y, z)) {
          t = Tissue::WhiteMatter;
          value = spec.wm_intensity;
        } else if (inside(spec.gm_radii, x, y, z)) {
          t = Tissue::GrayMatter;
          value = spec.gm_intensity;
        } else if (inside(spec.csf_radii, x, y, z)) {
          t = Tissue::Csf;
          value = spec.csf_intensity;
        }
        const std::size_t v = d.index(i, j, k);
        const double sd = t == Tissue::Background ? spec.background_noise : spec.tissue_noise;
        if (sd > 0.0) value += sd * rng.normal_pair(v).first;
        data[v] = static_cast<float>(value);
        labels[v] = static_cast<std::uint8_t>(t);
      }

  Volume volume(d, spec.spacing, diagonal_affine(spec.spacing), std::move(data));
  return {std::move(volume), Segmentation::hard(d, std::move(labels))};
}

}  // namespace fieldsynth
