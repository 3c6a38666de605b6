#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fieldsynth {

struct Dims {
  int nx = 1;
  int ny = 1;
  int nz = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  // x varies fastest, matching the NIfTI on-disk order.
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

using Spacing = std::array<double, 3>;
// Row-major 4x4 voxel-to-world transform.
using Affine = std::array<std::array<double, 4>, 4>;

Affine diagonal_affine(const Spacing& spacing);

// A 3D scalar grid with geometry. Operations take volumes by const reference
// and return new ones.
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, Spacing spacing, Affine affine, std::vector<float> data);
  Volume(Dims dims, std::vector<float> data);
  static Volume filled(Dims dims, float value);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const Affine& affine() const { return affine_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float at(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }
  float& at(int x, int y, int z) { return data_[dims_.index(x, y, z)]; }

  // Same dims, spacing and affine, new values.
  Volume with_data(std::vector<float> data) const;
  Volume with_geometry(Spacing spacing, Affine affine) const;

  float min() const;
  float max() const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Dims dims_{};
  Spacing spacing_{1.0, 1.0, 1.0};
  Affine affine_ = diagonal_affine({1.0, 1.0, 1.0});
  std::vector<float> data_;
};

enum class Tissue : std::uint8_t { Background = 0, WhiteMatter = 1, GrayMatter = 2, Csf = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr std::array<Tissue, 3> kTissues = {Tissue::WhiteMatter, Tissue::GrayMatter,
                                                   Tissue::Csf};

std::string_view tissue_name(Tissue t);

// Per-voxel class assignment over (BG, WM, GM, CSF), either hard labels or a
// probability distribution stored voxel-major (4 floats per voxel).
class Segmentation {
 public:
  enum class Mode { Hard, Soft };

  Segmentation() = default;
  static Segmentation hard(Dims dims, std::vector<std::uint8_t> labels);
  static Segmentation soft(Dims dims, std::vector<float> probs);

  const Dims& dims() const { return dims_; }
  Mode mode() const { return mode_; }
  bool is_soft() const { return mode_ == Mode::Soft; }

  std::span<const std::uint8_t> labels() const { return labels_; }
  std::span<const float> probs() const { return probs_; }

  // Hard label of a voxel; argmax (first maximum) for soft segmentations.
  std::uint8_t label(std::size_t voxel) const;
  float prob(std::size_t voxel, Tissue t) const;

  // Binary mask of class t; soft probabilities are thresholded at 0.5.
  std::vector<float> mask(Tissue t) const;
  std::size_t count(Tissue t) const;

  Segmentation hardened() const;
  // The class label map as a float volume (values 0..3).
  Volume label_volume() const;
  // Probability map of one class as a volume.
  Volume prob_volume(Tissue t) const;

  static Segmentation from_label_volume(const Volume& v);

  friend bool operator==(const Segmentation&, const Segmentation&) = default;

 private:
  Dims dims_{};
  Mode mode_ = Mode::Hard;
  std::vector<std::uint8_t> labels_;
  std::vector<float> probs_;
};

}  // namespace fieldsynth
