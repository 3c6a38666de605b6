#include "fieldsynth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "fieldsynth/error.hpp"
#include "fieldsynth/forward_model.hpp"

namespace fieldsynth::metrics {

namespace {

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (a != b) throw ArgumentError(std::string(what) + ": dimension mismatch");
}

// Summed-volume table with a zero border: t(x, y, z) = sum over [0,x)x[0,y)x[0,z).
class Integral {
 public:
  Integral(const Dims& d, const std::vector<double>& values) : sx_(d.nx + 1), sy_(d.ny + 1), t_(static_cast<std::size_t>(sx_) * sy_ * (d.nz + 1), 0.0) {
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x)
          at(x + 1, y + 1, z + 1) = values[d.index(x, y, z)] + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) +
                                    at(x + 1, y + 1, z) - at(x, y, z + 1) - at(x, y + 1, z) - at(x + 1, y, z) +
                                    at(x, y, z);
  }

  // Sum over [x0,x1)x[y0,y1)x[z0,z1).
  double box(int x0, int y0, int z0, int x1, int y1, int z1) const {
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0) +
           at(x1, y0, z0) - at(x0, y0, z0);
  }

 private:
  double& at(int x, int y, int z) { return t_[x + static_cast<std::size_t>(sx_) * (y + static_cast<std::size_t>(sy_) * z)]; }
  double at(int x, int y, int z) const { return t_[x + static_cast<std::size_t>(sx_) * (y + static_cast<std::size_t>(sy_) * z)]; }

  int sx_, sy_;
  std::vector<double> t_;
};

}  // namespace

double ssim(const Volume& a, const Volume& b) {
  require_same_dims(a.dims(), b.dims(), "ssim");
  if (a.empty()) throw ArgumentError("ssim: empty volume");
  const Dims d = a.dims();
  const std::size_t n = d.count();
  std::vector<double> va(n), vb(n), vaa(n), vbb(n), vab(n);
  for (std::size_t i = 0; i < n; ++i) {
    va[i] = a[i];
    vb[i] = b[i];
    vaa[i] = va[i] * va[i];
    vbb[i] = vb[i] * vb[i];
    vab[i] = va[i] * vb[i];
  }
  const Integral ia(d, va), ib(d, vb), iaa(d, vaa), ibb(d, vbb), iab(d, vab);
  const int wx = std::min(kSsimWindow, d.nx), wy = std::min(kSsimWindow, d.ny), wz = std::min(kSsimWindow, d.nz);
  const double inv = 1.0 / (static_cast<double>(wx) * wy * wz);

  double total = 0.0;
  std::size_t windows = 0;
  for (int z = 0; z + wz <= d.nz; ++z)
    for (int y = 0; y + wy <= d.ny; ++y)
      for (int x = 0; x + wx <= d.nx; ++x) {
        const double ma = ia.box(x, y, z, x + wx, y + wy, z + wz) * inv;
        const double mb = ib.box(x, y, z, x + wx, y + wy, z + wz) * inv;
        const double saa = iaa.box(x, y, z, x + wx, y + wy, z + wz) * inv - ma * ma;
        const double sbb = ibb.box(x, y, z, x + wx, y + wy, z + wz) * inv - mb * mb;
        const double sab = iab.box(x, y, z, x + wx, y + wy, z + wz) * inv - ma * mb;
        total += ((2.0 * ma * mb + kSsimC1) * (2.0 * sab + kSsimC2)) /
                 ((ma * ma + mb * mb + kSsimC1) * (saa + sbb + kSsimC2));
        ++windows;
      }
  return total / static_cast<double>(windows);
}

double mslc(const Volume& a, const Volume& b) {
  require_same_dims(a.dims(), b.dims(), "mslc");
  const Dims d = a.dims();
  double sum = 0.0;
  std::size_t lines = 0;
  std::vector<double> la, lb;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    if (n < 2) continue;
    const std::size_t stride =
        axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny);
    const int na = axis == 0 ? d.ny : d.nx;
    const int nb = axis == 2 ? d.ny : d.nz;
    la.resize(n);
    lb.resize(n);
    for (int q = 0; q < nb; ++q)
      for (int p = 0; p < na; ++p) {
        const std::size_t base = axis == 0 ? d.index(0, p, q) : (axis == 1 ? d.index(p, 0, q) : d.index(p, q, 0));
        for (int i = 0; i < n; ++i) {
          la[i] = a[base + i * stride];
          lb[i] = b[base + i * stride];
        }
        const auto [amin, amax] = std::minmax_element(la.begin(), la.end());
        const auto [bmin, bmax] = std::minmax_element(lb.begin(), lb.end());
        if (*amin == *amax || *bmin == *bmax) continue;
        double ma = 0.0, mb = 0.0;
        for (int i = 0; i < n; ++i) {
          ma += la[i];
          mb += lb[i];
        }
        ma /= n;
        mb /= n;
        double sab = 0.0, saa = 0.0, sbb = 0.0;
        for (int i = 0; i < n; ++i) {
          const double da = la[i] - ma, db = lb[i] - mb;
          sab += da * db;
          saa += da * da;
          sbb += db * db;
        }
        if (saa <= 0.0 || sbb <= 0.0) continue;
        sum += sab / (std::sqrt(saa) * std::sqrt(sbb));
        ++lines;
      }
  }
  if (lines == 0) throw DegenerateError("mslc: no line varies in both volumes");
  return 1.0 - sum / static_cast<double>(lines);
}

double wm_gm_contrast(const Volume& volume, const Segmentation& seg) {
  require_same_dims(volume.dims(), seg.dims(), "wm_gm_contrast");
  std::array<double, kNumClasses> sum{}, sum_sq{};
  std::array<std::size_t, kNumClasses> n{};
  for (std::size_t i = 0; i < volume.size(); ++i) {
    const int c = seg.label(i);
    sum[c] += volume[i];
    ++n[c];
  }
  for (Tissue t : kTissues)
    if (n[static_cast<int>(t)] == 0)
      throw DegenerateError("wm_gm_contrast: class " + std::string(tissue_name(t)) + " is empty");
  const int csf = static_cast<int>(Tissue::Csf);
  const double csf_mean = sum[csf] / static_cast<double>(n[csf]);
  for (std::size_t i = 0; i < volume.size(); ++i)
    if (seg.label(i) == csf) {
      const double e = volume[i] - csf_mean;
      sum_sq[csf] += e * e;
    }
  const double sd = std::sqrt(sum_sq[csf] / static_cast<double>(n[csf]));
  if (!(sd > 0.0)) throw DegenerateError("wm_gm_contrast: CSF intensity has zero variance");
  const int wm = static_cast<int>(Tissue::WhiteMatter), gm = static_cast<int>(Tissue::GrayMatter);
  return (sum[wm] / static_cast<double>(n[wm]) - sum[gm] / static_cast<double>(n[gm])) / sd;
}

std::array<Overlap, kNumClasses> dice_iou(const Segmentation& pred, const Segmentation& ref) {
  require_same_dims(pred.dims(), ref.dims(), "dice_iou");
  std::array<std::size_t, kNumClasses> np{}, nr{}, both{};
  for (std::size_t i = 0; i < pred.dims().count(); ++i) {
    const int p = pred.label(i), r = ref.label(i);
    ++np[p];
    ++nr[r];
    if (p == r) ++both[p];
  }
  std::array<Overlap, kNumClasses> out{};
  for (int c = 0; c < kNumClasses; ++c) {
    if (np[c] + nr[c] == 0) continue;
    const double inter = static_cast<double>(both[c]);
    out[c].dice = 2.0 * inter / static_cast<double>(np[c] + nr[c]);
    out[c].iou = inter / static_cast<double>(np[c] + nr[c] - both[c]);
  }
  return out;
}

Overlap mean_tissue_overlap(const std::array<Overlap, kNumClasses>& per_class) {
  Overlap m{0.0, 0.0};
  for (Tissue t : kTissues) {
    m.dice += per_class[static_cast<int>(t)].dice;
    m.iou += per_class[static_cast<int>(t)].iou;
  }
  m.dice /= static_cast<double>(kTissues.size());
  m.iou /= static_cast<double>(kTissues.size());
  return m;
}

Image2D axial_slice(const Volume& volume, int z) {
  const Dims d = volume.dims();
  if (z < 0 || z >= d.nz) throw ArgumentError("slice index out of range");
  Image2D img{d.nx, d.ny, {}};
  const auto data = volume.data();
  const std::size_t off = d.index(0, 0, z);
  img.pixels.assign(data.begin() + off, data.begin() + off + static_cast<std::size_t>(d.nx) * d.ny);
  return img;
}

void CannyConfig::validate() const {
  if (!(sigma >= 0.0)) throw ArgumentError("canny sigma must be >= 0");
  if (!(low > 0.0 && low < high)) throw ArgumentError("canny thresholds must satisfy 0 < low < high");
}

std::vector<std::uint8_t> canny_edges(const Image2D& image, const CannyConfig& config) {
  config.validate();
  const int w = image.width, h = image.height;
  if (w <= 0 || h <= 0 || image.pixels.size() != static_cast<std::size_t>(w) * h)
    throw ArgumentError("canny: malformed image");
  const std::size_t n = image.pixels.size();
  auto idx = [w](int x, int y) { return static_cast<std::size_t>(y) * w + x; };

  const std::vector<double> k = gaussian_kernel(config.sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(n), s(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[j + r] * image.at(reflect_index(x + j, w), y);
      tmp[idx(x, y)] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) acc += k[j + r] * tmp[idx(x, reflect_index(y + j, h))];
      s[idx(x, y)] = acc;
    }

  std::vector<double> gx(n), gy(n), mag(n);
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xm = reflect_index(x - 1, w), xp = reflect_index(x + 1, w);
      const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
      auto v = [&](int xx, int yy) { return s[idx(xx, yy)]; };
      const double dx = (v(xp, ym) + 2.0 * v(xp, y) + v(xp, yp)) - (v(xm, ym) + 2.0 * v(xm, y) + v(xm, yp));
      const double dy = (v(xm, yp) + 2.0 * v(x, yp) + v(xp, yp)) - (v(xm, ym) + 2.0 * v(x, ym) + v(xp, ym));
      gx[idx(x, y)] = dx;
      gy[idx(x, y)] = dy;
      mag[idx(x, y)] = std::hypot(dx, dy);
      peak = std::max(peak, mag[idx(x, y)]);
    }
  std::vector<std::uint8_t> edges(n, 0);
  if (!(peak > 0.0)) return edges;
  for (double& m : mag) m /= peak;

  // Non-maximum suppression along the quantized gradient direction. Ties
  // are broken toward the earlier pixel so plateaus thin to one pixel.
  std::vector<std::uint8_t> state(n, 0);  // 0 none, 1 weak, 2 strong
  constexpr double kTan22 = 0.41421356237309503;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double m = mag[idx(x, y)];
      if (m < config.low) continue;
      const double ax = std::abs(gx[idx(x, y)]), ay = std::abs(gy[idx(x, y)]);
      int ox, oy;
      if (ay <= kTan22 * ax) {
        ox = 1, oy = 0;
      } else if (ax <= kTan22 * ay) {
        ox = 0, oy = 1;
      } else if ((gx[idx(x, y)] > 0) == (gy[idx(x, y)] > 0)) {
        ox = 1, oy = 1;
      } else {
        ox = 1, oy = -1;
      }
      auto neighbor = [&](int sx, int sy) {
        const int xx = x + sx, yy = y + sy;
        if (xx < 0 || xx >= w || yy < 0 || yy >= h) return 0.0;
        return mag[idx(xx, yy)];
      };
      if (m > neighbor(-ox, -oy) && m >= neighbor(ox, oy)) state[idx(x, y)] = m >= config.high ? 2 : 1;
    }

  // Hysteresis: weak pixels 8-connected to a strong pixel survive.
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < n; ++i)
    if (state[i] == 2) {
      edges[i] = 1;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || xx >= w || yy < 0 || yy >= h) continue;
        const std::size_t j = idx(xx, yy);
        if (state[j] == 1 && !edges[j]) {
          edges[j] = 1;
          stack.push_back(j);
        }
      }
  }
  return edges;
}

double EdgeCounts::f1() const {
  if (predicted == 0 && reference == 0) return 1.0;
  if (predicted == 0 || reference == 0) return 0.0;
  return 2.0 * static_cast<double>(matched) / static_cast<double>(predicted + reference);
}

EdgeCounts match_edges(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& ref, int width,
                       int height, double tolerance) {
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (pred.size() != n || ref.size() != n) throw ArgumentError("edge maps do not match the image size");
  if (!(tolerance >= 0.0)) throw ArgumentError("edge tolerance must be >= 0");
  EdgeCounts counts;
  for (std::size_t i = 0; i < n; ++i) {
    counts.predicted += pred[i] != 0;
    counts.reference += ref[i] != 0;
  }
  const int reach = static_cast<int>(std::floor(tolerance));
  const double tol2 = tolerance * tolerance;
  std::vector<std::uint8_t> taken(n, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!pred[static_cast<std::size_t>(y) * width + x]) continue;
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_j = n;
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dx = -reach; dx <= reach; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || xx >= width || yy < 0 || yy >= height) continue;
          const double d2 = static_cast<double>(dx * dx + dy * dy);
          if (d2 > tol2) continue;
          const std::size_t j = static_cast<std::size_t>(yy) * width + xx;
          if (!ref[j] || taken[j]) continue;
          if (d2 < best) {
            best = d2;
            best_j = j;
          }
        }
      if (best_j < n) {
        taken[best_j] = 1;
        ++counts.matched;
      }
    }
  return counts;
}

double edge_f1(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& ref, int width, int height,
               double tolerance) {
  return match_edges(pred, ref, width, height, tolerance).f1();
}

double edge_f1(const Volume& pred, const Volume& ref, const CannyConfig& config, double tolerance) {
  require_same_dims(pred.dims(), ref.dims(), "edge_f1");
  const Dims d = pred.dims();
  EdgeCounts total;
  for (int z = 0; z < d.nz; ++z) {
    const auto pe = canny_edges(axial_slice(pred, z), config);
    const auto re = canny_edges(axial_slice(ref, z), config);
    const EdgeCounts c = match_edges(pe, re, d.nx, d.ny, tolerance);
    total.matched += c.matched;
    total.predicted += c.predicted;
    total.reference += c.reference;
  }
  return total.f1();
}

void RqsWeights::validate() const {
  for (double w : {ssim, mslc, dice, iou})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ArgumentError("RQS weights must be finite and >= 0");
  if (!(ssim + mslc + dice + iou > 0.0)) throw ArgumentError("RQS weights must not all be zero");
}

double rqs(double ssim_value, double mslc_value, double dice, double iou, const RqsWeights& weights) {
  weights.validate();
  const double num = weights.ssim * ssim_value + weights.mslc * (1.0 - mslc_value / 2.0) + weights.dice * dice +
                     weights.iou * iou;
  return num / (weights.ssim + weights.mslc + weights.dice + weights.iou);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["ssim"] = ssim;
  j["mslc"] = mslc;
  j["wm_gm_contrast"] = wm_gm_contrast ? nlohmann::json(*wm_gm_contrast) : nlohmann::json(nullptr);
  if (overlap) {
    for (int c = 0; c < kNumClasses; ++c) {
      const std::string name(tissue_name(static_cast<Tissue>(c)));
      j["dice"][name] = (*overlap)[c].dice;
      j["iou"][name] = (*overlap)[c].iou;
    }
  } else {
    j["dice"] = nullptr;
    j["iou"] = nullptr;
  }
  j["edge_f1"] = edge_f1 ? nlohmann::json(*edge_f1) : nlohmann::json(nullptr);
  j["rqs"] = rqs ? nlohmann::json(*rqs) : nlohmann::json(nullptr);
  return j;
}

std::string MetricReport::csv_header() {
  std::string h = "label,ssim,mslc,wm_gm_contrast";
  for (const char* m : {"dice", "iou"})
    for (int c = 0; c < kNumClasses; ++c) h += std::string(",") + m + "_" + std::string(tissue_name(static_cast<Tissue>(c)));
  return h + ",edge_f1,rqs";
}

std::string MetricReport::csv_row(const std::string& label) const {
  std::ostringstream os;
  os << std::setprecision(17) << label << ',' << ssim << ',' << mslc << ',';
  if (wm_gm_contrast) os << *wm_gm_contrast;
  for (int c = 0; c < kNumClasses; ++c) {
    os << ',';
    if (overlap) os << (*overlap)[c].dice;
  }
  for (int c = 0; c < kNumClasses; ++c) {
    os << ',';
    if (overlap) os << (*overlap)[c].iou;
  }
  os << ',';
  if (edge_f1) os << *edge_f1;
  os << ',';
  if (rqs) os << *rqs;
  return os.str();
}

MetricReport evaluate(const Volume& pred, const Volume& ref, const Segmentation* pred_seg,
                      const Segmentation* ref_seg, const EvaluateOptions& options) {
  MetricReport report;
  report.ssim = ssim(pred, ref);
  report.mslc = mslc(pred, ref);
  if (ref_seg) report.wm_gm_contrast = wm_gm_contrast(pred, *ref_seg);
  if (pred_seg && ref_seg) report.overlap = dice_iou(*pred_seg, *ref_seg);
  if (options.edges) report.edge_f1 = edge_f1(pred, ref, options.canny, options.edge_tolerance);
  if (report.overlap) {
    const Overlap mean = mean_tissue_overlap(*report.overlap);
    report.rqs = rqs(report.ssim, report.mslc, mean.dice, mean.iou, options.rqs_weights);
  }
  return report;
}

}  // namespace fieldsynth::metrics
