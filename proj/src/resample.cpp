#include "fieldsynth/resample.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fieldsynth/error.hpp"

namespace fieldsynth {

Volume normalize_intensity(const Volume& volume) {
  if (volume.empty()) throw ArgumentError("cannot normalize an empty volume");
  const double lo = volume.min();
  const double hi = volume.max();
  std::vector<float> out(volume.size(), 0.0f);
  if (hi > lo) {
    const double range = hi - lo;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>((static_cast<double>(volume[i]) - lo) / range);
  }
  return volume.with_data(std::move(out));
}

Volume clamp_intensity(const Volume& volume, float lo, float hi) {
  std::vector<float> out(volume.data().begin(), volume.data().end());
  for (float& v : out) v = std::clamp(v, lo, hi);
  return volume.with_data(std::move(out));
}

Interpolation parse_interpolation(std::string_view name) {
  if (name == "nearest") return Interpolation::Nearest;
  if (name == "trilinear" || name == "linear") return Interpolation::Trilinear;
  if (name == "bicubic" || name == "cubic") return Interpolation::Bicubic;
  throw ArgumentError("unknown interpolation method: " + std::string(name));
}

namespace {

// Catmull-Rom (a = -0.5) weights for offsets -1, 0, 1, 2 at fraction t.
std::array<double, 4> cubic_weights(double t) {
  const double t2 = t * t, t3 = t2 * t;
  return {0.5 * (-t3 + 2.0 * t2 - t), 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
          0.5 * (-3.0 * t3 + 4.0 * t2 + t), 0.5 * (t3 - t2)};
}

// Per-axis sampling table: source indices and weights for each output index.
struct AxisTable {
  int taps = 1;
  std::vector<int> index;      // out_n * taps
  std::vector<double> weight;  // out_n * taps
};

AxisTable make_axis(int in_n, int out_n, double factor, Interpolation method) {
  AxisTable t;
  t.taps = method == Interpolation::Nearest ? 1 : (method == Interpolation::Trilinear ? 2 : 4);
  t.index.resize(static_cast<std::size_t>(out_n) * t.taps);
  t.weight.resize(t.index.size());
  auto clampi = [in_n](long i) { return static_cast<int>(std::clamp<long>(i, 0, in_n - 1)); };
  for (int o = 0; o < out_n; ++o) {
    const double x = (o + 0.5) / factor - 0.5;
    const std::size_t base = static_cast<std::size_t>(o) * t.taps;
    switch (method) {
      case Interpolation::Nearest:
        t.index[base] = clampi(static_cast<long>(std::floor(x + 0.5)));
        t.weight[base] = 1.0;
        break;
      case Interpolation::Trilinear: {
        const double xc = std::clamp(x, 0.0, static_cast<double>(in_n - 1));
        const long i0 = static_cast<long>(std::floor(xc));
        const double f = xc - static_cast<double>(i0);
        t.index[base] = clampi(i0);
        t.index[base + 1] = clampi(i0 + 1);
        t.weight[base] = 1.0 - f;
        t.weight[base + 1] = f;
        break;
      }
      case Interpolation::Bicubic: {
        const double xc = std::clamp(x, 0.0, static_cast<double>(in_n - 1));
        const long i0 = static_cast<long>(std::floor(xc));
        const auto w = cubic_weights(xc - static_cast<double>(i0));
        for (int k = 0; k < 4; ++k) {
          t.index[base + k] = clampi(i0 - 1 + k);
          t.weight[base + k] = w[k];
        }
        break;
      }
    }
  }
  return t;
}

Volume resample_impl(const Volume& volume, Dims out, const std::array<double, 3>& factor,
                     Interpolation method) {
  const Dims& in = volume.dims();
  const AxisTable tx = make_axis(in.nx, out.nx, factor[0], method);
  const AxisTable ty = make_axis(in.ny, out.ny, factor[1], method);
  const AxisTable tz = make_axis(in.nz, out.nz, factor[2], method);

  std::vector<float> data(out.count());
  for (int z = 0; z < out.nz; ++z)
    for (int y = 0; y < out.ny; ++y)
      for (int x = 0; x < out.nx; ++x) {
        double acc = 0.0;
        for (int c = 0; c < tz.taps; ++c) {
          const std::size_t zc = static_cast<std::size_t>(z) * tz.taps + c;
          for (int b = 0; b < ty.taps; ++b) {
            const std::size_t yb = static_cast<std::size_t>(y) * ty.taps + b;
            const double wzy = tz.weight[zc] * ty.weight[yb];
            double row = 0.0;
            for (int a = 0; a < tx.taps; ++a) {
              const std::size_t xa = static_cast<std::size_t>(x) * tx.taps + a;
              row += tx.weight[xa] * volume.at(tx.index[xa], ty.index[yb], tz.index[zc]);
            }
            acc += wzy * row;
          }
        }
        data[out.index(x, y, z)] = static_cast<float>(acc);
      }

  Spacing spacing{};
  Affine affine = volume.affine();
  for (int j = 0; j < 3; ++j) {
    spacing[j] = volume.spacing()[j] / factor[j];
    const double shift = 0.5 / factor[j] - 0.5;
    for (int r = 0; r < 3; ++r) {
      affine[r][3] += volume.affine()[r][j] * shift;
      affine[r][j] = volume.affine()[r][j] / factor[j];
    }
  }
  return Volume(out, spacing, affine, std::move(data));
}

}  // namespace

Volume resample(const Volume& volume, const std::array<double, 3>& factor, Interpolation method) {
  for (double f : factor)
    if (!(f > 0.0) || !std::isfinite(f)) throw ArgumentError("resample factor must be positive");
  const Dims& in = volume.dims();
  auto out_n = [](int n, double f) { return std::max(1, static_cast<int>(std::lround(n * f))); };
  const Dims out{out_n(in.nx, factor[0]), out_n(in.ny, factor[1]), out_n(in.nz, factor[2])};
  return resample_impl(volume, out, factor, method);
}

Volume resample_to(const Volume& volume, Dims out, Interpolation method) {
  if (!out.valid()) throw ArgumentError("resample target dims must be positive");
  const Dims& in = volume.dims();
  const std::array<double, 3> factor{static_cast<double>(out.nx) / in.nx,
                                     static_cast<double>(out.ny) / in.ny,
                                     static_cast<double>(out.nz) / in.nz};
  return resample_impl(volume, out, factor, method);
}

}  // namespace fieldsynth
