#include "fieldsynth/forward_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "fieldsynth/error.hpp"
#include "fieldsynth/rng.hpp"

namespace fieldsynth {

void ForwardConfig::validate() const {
  if (!(sigma_smooth >= 0.0)) throw ArgumentError("sigma_smooth must be >= 0");
  if (df < 1) throw ArgumentError("downsampling factor must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("noise_sigma must be >= 0");
  if (!(intensity_scale > 0.0)) throw ArgumentError("intensity_scale must be positive");
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("gaussian sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& w : k) w /= sum;
  return k;
}

int reflect_index(int i, int n) {
  const int period = 2 * n;
  int r = i % period;
  if (r < 0) r += period;
  return r < n ? r : period - 1 - r;
}

namespace {

// One separable pass along `axis`, accumulating in double.
std::vector<double> convolve_axis(const std::vector<double>& in, const Dims& d, int axis,
                                  const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const int n = d[axis];
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny);
  std::vector<double> out(in.size());
  std::vector<double> line(n);
  const int na = axis == 0 ? d.ny : d.nx;
  const int nb = axis == 2 ? d.ny : d.nz;
  for (int b = 0; b < nb; ++b)
    for (int a = 0; a < na; ++a) {
      std::size_t base;
      if (axis == 0) base = d.index(0, a, b);
      else if (axis == 1) base = d.index(a, 0, b);
      else base = d.index(a, b, 0);
      for (int i = 0; i < n; ++i) line[i] = in[base + i * stride];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * line[reflect_index(i + k, n)];
        out[base + i * stride] = acc;
      }
    }
  return out;
}

Volume pool_geometry(const Volume& src, Dims out, std::vector<float> data, int df) {
  Spacing spacing{};
  Affine affine = src.affine();
  for (int j = 0; j < 3; ++j) {
    spacing[j] = src.spacing()[j] * df;
    const double shift = 0.5 * (df - 1);
    for (int r = 0; r < 3; ++r) {
      affine[r][3] += src.affine()[r][j] * shift;
      affine[r][j] = src.affine()[r][j] * df;
    }
  }
  return Volume(out, spacing, affine, std::move(data));
}

Dims pooled_dims(const Dims& d, int df) {
  return {(d.nx + df - 1) / df, (d.ny + df - 1) / df, (d.nz + df - 1) / df};
}

}  // namespace

Volume gaussian_smooth(const Volume& volume, double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("gaussian sigma must be >= 0");
  if (sigma == 0.0) return volume;
  const auto kernel = gaussian_kernel(sigma);
  std::vector<double> buf(volume.data().begin(), volume.data().end());
  for (int axis = 0; axis < 3; ++axis) buf = convolve_axis(buf, volume.dims(), axis, kernel);
  std::vector<float> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<float>(buf[i]);
  return volume.with_data(std::move(out));
}

Volume downsample(const Volume& volume, int df) {
  if (df < 1) throw ArgumentError("downsampling factor must be >= 1");
  if (df == 1) return volume;
  const Dims& d = volume.dims();
  const Dims od = pooled_dims(d, df);
  std::vector<float> out(od.count());
  for (int k = 0; k < od.nz; ++k)
    for (int j = 0; j < od.ny; ++j)
      for (int i = 0; i < od.nx; ++i) {
        double sum = 0.0;
        int count = 0;
        for (int z = k * df; z < std::min(d.nz, (k + 1) * df); ++z)
          for (int y = j * df; y < std::min(d.ny, (j + 1) * df); ++y)
            for (int x = i * df; x < std::min(d.nx, (i + 1) * df); ++x) {
              sum += volume.at(x, y, z);
              ++count;
            }
        out[od.index(i, j, k)] = static_cast<float>(sum / count);
      }
  return pool_geometry(volume, od, std::move(out), df);
}

Volume sample_rician(Dims dims, double rho, double sigma_r, std::uint64_t seed) {
  if (!(sigma_r >= 0.0)) throw ArgumentError("rician sigma must be >= 0");
  const CounterRng rng(hash_combine(seed, 0x726963696eULL));
  std::vector<float> out(dims.count());
  for (std::size_t v = 0; v < out.size(); ++v) {
    const auto [n1, n2] = rng.normal_pair(v);
    const double re = rho + sigma_r * n1;
    const double im = sigma_r * n2;
    out[v] = static_cast<float>(std::sqrt(re * re + im * im));
  }
  return Volume(dims, std::move(out));
}

Volume simulate_ulf_clean(const Volume& hf, const Segmentation& seg, const DegradationVector& m,
                          const ForwardConfig& config) {
  config.validate();
  m.validate();
  if (seg.dims() != hf.dims()) throw ArgumentError("segmentation is not aligned with the volume");
  std::vector<double> acc;
  Volume pooled;
  for (Tissue t : kTissues) {
    const std::vector<float> mask = seg.mask(t);
    std::vector<float> masked(hf.size());
    for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = hf[i] * mask[i];
    pooled = downsample(gaussian_smooth(hf.with_data(std::move(masked)), config.sigma_smooth), config.df);
    if (acc.empty()) acc.assign(pooled.size(), 0.0);
    const double w = m.of(t);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * pooled[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return pooled.with_data(std::move(out));
}

Volume simulate_ulf(const Volume& hf, const Segmentation& seg, const DegradationVector& m,
                    const ForwardConfig& config) {
  const Volume clean = simulate_ulf_clean(hf, seg, m, config);
  const Volume noise = sample_rician(clean.dims(), config.noise_rho, config.noise_sigma, config.seed);
  const double scale = config.intensity_scale;
  std::vector<float> out(clean.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = (static_cast<double>(clean[i]) * scale + noise[i]) / scale;
    out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return clean.with_data(std::move(out));
}

Segmentation downsample_labels(const Segmentation& seg, int df) {
  if (df < 1) throw ArgumentError("downsampling factor must be >= 1");
  const Segmentation hard = seg.hardened();
  if (df == 1) return hard;
  const Dims& d = seg.dims();
  const Dims od = pooled_dims(d, df);
  std::vector<std::uint8_t> labels(od.count());
  for (int k = 0; k < od.nz; ++k)
    for (int j = 0; j < od.ny; ++j)
      for (int i = 0; i < od.nx; ++i) {
        std::array<int, kNumClasses> votes{};
        for (int z = k * df; z < std::min(d.nz, (k + 1) * df); ++z)
          for (int y = j * df; y < std::min(d.ny, (j + 1) * df); ++y)
            for (int x = i * df; x < std::min(d.nx, (i + 1) * df); ++x) ++votes[hard.label(d.index(x, y, z))];
        labels[od.index(i, j, k)] =
            static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
  return Segmentation::hard(od, std::move(labels));
}

RoiMasks interior_masks(const Segmentation& hf_seg, const ForwardConfig& config) {
  config.validate();
  const Segmentation hard = hf_seg.hardened();
  const Dims& d = hard.dims();
  const int df = config.df;
  const int r = static_cast<int>(gaussian_kernel(config.sigma_smooth).size() / 2);
  const Dims od = pooled_dims(d, df);
  RoiMasks masks;
  for (auto* m : {&masks.wm, &masks.gm, &masks.csf, &masks.background}) m->assign(od.count(), 0.0f);
  for (int k = 0; k < od.nz; ++k)
    for (int j = 0; j < od.ny; ++j)
      for (int i = 0; i < od.nx; ++i) {
        const std::uint8_t first = hard.label(d.index(i * df, j * df, k * df));
        bool pure = true;
        for (int z = k * df - r; pure && z < std::min(d.nz, (k + 1) * df) + r; ++z)
          for (int y = j * df - r; pure && y < std::min(d.ny, (j + 1) * df) + r; ++y)
            for (int x = i * df - r; pure && x < std::min(d.nx, (i + 1) * df) + r; ++x)
              if (hard.label(d.index(reflect_index(x, d.nx), reflect_index(y, d.ny), reflect_index(z, d.nz))) != first)
                pure = false;
        if (!pure) continue;
        const std::size_t v = od.index(i, j, k);
        switch (static_cast<Tissue>(first)) {
          case Tissue::WhiteMatter: masks.wm[v] = 1.0f; break;
          case Tissue::GrayMatter: masks.gm[v] = 1.0f; break;
          case Tissue::Csf: masks.csf[v] = 1.0f; break;
          case Tissue::Background: masks.background[v] = 1.0f; break;
        }
      }
  return masks;
}

}  // namespace fieldsynth
