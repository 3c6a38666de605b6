#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fieldsynth/volume.hpp"

namespace fieldsynth::metrics {

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr int kSsimWindow = 7;

// Mean local SSIM over every placement of a 7^3 box window (shrunk to the
// extent of short axes). Population statistics inside each window.
double ssim(const Volume& a, const Volume& b);

// 1 - mean Pearson correlation over all axis-aligned lines that vary in both
// volumes. 0 for identical volumes, 2 for perfectly anti-correlated ones.
double mslc(const Volume& a, const Volume& b);

// (mean WM - mean GM) / std CSF.
double wm_gm_contrast(const Volume& volume, const Segmentation& seg);

struct Overlap {
  double dice = 1.0;
  double iou = 1.0;
};

// Indexed by class (BG, WM, GM, CSF). Soft inputs are hardened by argmax.
std::array<Overlap, kNumClasses> dice_iou(const Segmentation& pred, const Segmentation& ref);

// Mean over WM, GM and CSF.
Overlap mean_tissue_overlap(const std::array<Overlap, kNumClasses>& per_class);

struct Image2D {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // row-major, x fastest

  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Axial slice z of a volume.
Image2D axial_slice(const Volume& volume, int z);

struct CannyConfig {
  double sigma = 1.0;
  double low = 0.1;
  double high = 0.2;

  void validate() const;
};

// Edge map (0/1) with the same layout as the input. Thresholds apply to the
// gradient magnitude divided by its maximum over the image.
std::vector<std::uint8_t> canny_edges(const Image2D& image, const CannyConfig& config = {});

struct EdgeCounts {
  std::size_t matched = 0;
  std::size_t predicted = 0;
  std::size_t reference = 0;

  double f1() const;
};

// Greedy one-to-one matching: each predicted edge pixel, in raster order,
// takes the nearest unmatched reference pixel within `tolerance` (Euclidean).
EdgeCounts match_edges(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& ref, int width,
                       int height, double tolerance = 1.0);

double edge_f1(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& ref, int width, int height,
               double tolerance = 1.0);

// Canny on every axial slice of both volumes, counts pooled over slices.
double edge_f1(const Volume& pred, const Volume& ref, const CannyConfig& config = {}, double tolerance = 1.0);

struct RqsWeights {
  double ssim = 1.0;
  double mslc = 1.0;
  double dice = 1.0;
  double iou = 1.0;

  void validate() const;
};

// Weighted mean of (ssim, 1 - mslc / 2, dice, iou).
double rqs(double ssim, double mslc, double dice, double iou, const RqsWeights& weights = {});

struct MetricReport {
  double ssim = 0.0;
  double mslc = 0.0;
  // Absent when the inputs needed for them were not supplied.
  std::optional<double> wm_gm_contrast;
  std::optional<std::array<Overlap, kNumClasses>> overlap;
  std::optional<double> edge_f1;
  std::optional<double> rqs;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

struct EvaluateOptions {
  bool edges = true;
  CannyConfig canny{};
  double edge_tolerance = 1.0;
  RqsWeights rqs_weights{};
};

// Image metrics against the reference volume. Contrast is measured on the
// prediction with the reference segmentation and needs ref_seg; overlap needs
// both segmentations; RQS needs overlap.
MetricReport evaluate(const Volume& pred, const Volume& ref, const Segmentation* pred_seg,
                      const Segmentation* ref_seg, const EvaluateOptions& options = {});

}  // namespace fieldsynth::metrics
