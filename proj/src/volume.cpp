#include "fieldsynth/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fieldsynth/error.hpp"

namespace fieldsynth {

Affine diagonal_affine(const Spacing& spacing) {
  Affine a{};
  for (int i = 0; i < 3; ++i) a[i][i] = spacing[i];
  a[3][3] = 1.0;
  return a;
}

Volume::Volume(Dims dims, Spacing spacing, Affine affine, std::vector<float> data)
    : dims_(dims), spacing_(spacing), affine_(affine), data_(std::move(data)) {
  if (!dims_.valid()) throw ArgumentError("volume dims must be positive");
  if (data_.size() != dims_.count())
    throw ArgumentError("volume data length " + std::to_string(data_.size()) +
                        " does not match dims " + std::to_string(dims_.count()));
  for (double s : spacing_)
    if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("voxel spacing must be positive");
}

Volume::Volume(Dims dims, std::vector<float> data)
    : Volume(dims, {1.0, 1.0, 1.0}, diagonal_affine({1.0, 1.0, 1.0}), std::move(data)) {}

Volume Volume::filled(Dims dims, float value) {
  return Volume(dims, std::vector<float>(dims.count(), value));
}

Volume Volume::with_data(std::vector<float> data) const {
  return Volume(dims_, spacing_, affine_, std::move(data));
}

Volume Volume::with_geometry(Spacing spacing, Affine affine) const {
  return Volume(dims_, spacing, affine, data_);
}

float Volume::min() const {
  if (data_.empty()) throw ArgumentError("empty volume");
  return *std::min_element(data_.begin(), data_.end());
}

float Volume::max() const {
  if (data_.empty()) throw ArgumentError("empty volume");
  return *std::max_element(data_.begin(), data_.end());
}

std::string_view tissue_name(Tissue t) {
  switch (t) {
    case Tissue::Background: return "bg";
    case Tissue::WhiteMatter: return "wm";
    case Tissue::GrayMatter: return "gm";
    case Tissue::Csf: return "csf";
  }
  return "?";
}

Segmentation Segmentation::hard(Dims dims, std::vector<std::uint8_t> labels) {
  if (!dims.valid()) throw ArgumentError("segmentation dims must be positive");
  if (labels.size() != dims.count()) throw ArgumentError("label count does not match dims");
  for (auto l : labels)
    if (l >= kNumClasses) throw ArgumentError("segmentation label out of range: " + std::to_string(l));
  Segmentation s;
  s.dims_ = dims;
  s.mode_ = Mode::Hard;
  s.labels_ = std::move(labels);
  return s;
}

Segmentation Segmentation::soft(Dims dims, std::vector<float> probs) {
  if (!dims.valid()) throw ArgumentError("segmentation dims must be positive");
  if (probs.size() != dims.count() * kNumClasses)
    throw ArgumentError("probability count does not match dims x 4");
  for (std::size_t v = 0; v < dims.count(); ++v) {
    double sum = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
      const float p = probs[v * kNumClasses + c];
      if (!(p >= 0.0f)) throw ArgumentError("negative or NaN class probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ArgumentError("class probabilities do not sum to 1");
  }
  Segmentation s;
  s.dims_ = dims;
  s.mode_ = Mode::Soft;
  s.probs_ = std::move(probs);
  return s;
}

std::uint8_t Segmentation::label(std::size_t voxel) const {
  if (mode_ == Mode::Hard) return labels_[voxel];
  const float* p = &probs_[voxel * kNumClasses];
  return static_cast<std::uint8_t>(std::max_element(p, p + kNumClasses) - p);
}

float Segmentation::prob(std::size_t voxel, Tissue t) const {
  const auto c = static_cast<std::uint8_t>(t);
  if (mode_ == Mode::Hard) return labels_[voxel] == c ? 1.0f : 0.0f;
  return probs_[voxel * kNumClasses + c];
}

std::vector<float> Segmentation::mask(Tissue t) const {
  std::vector<float> out(dims_.count());
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (mode_ == Mode::Hard)
      out[v] = labels_[v] == static_cast<std::uint8_t>(t) ? 1.0f : 0.0f;
    else
      out[v] = prob(v, t) >= 0.5f ? 1.0f : 0.0f;
  }
  return out;
}

std::size_t Segmentation::count(Tissue t) const {
  std::size_t n = 0;
  for (std::size_t v = 0; v < dims_.count(); ++v)
    if (label(v) == static_cast<std::uint8_t>(t)) ++n;
  return n;
}

Segmentation Segmentation::hardened() const {
  if (mode_ == Mode::Hard) return *this;
  std::vector<std::uint8_t> labels(dims_.count());
  for (std::size_t v = 0; v < labels.size(); ++v) labels[v] = label(v);
  return hard(dims_, std::move(labels));
}

Volume Segmentation::label_volume() const {
  std::vector<float> data(dims_.count());
  for (std::size_t v = 0; v < data.size(); ++v) data[v] = static_cast<float>(label(v));
  return Volume(dims_, std::move(data));
}

Volume Segmentation::prob_volume(Tissue t) const {
  std::vector<float> data(dims_.count());
  for (std::size_t v = 0; v < data.size(); ++v) data[v] = prob(v, t);
  return Volume(dims_, std::move(data));
}

Segmentation Segmentation::from_label_volume(const Volume& v) {
  std::vector<std::uint8_t> labels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float x = v[i];
    const float r = std::round(x);
    if (!(r >= 0.0f && r < kNumClasses) || std::abs(x - r) > 1e-3f)
      throw ArgumentError("label volume value " + std::to_string(x) + " is not a class in 0..3");
    labels[i] = static_cast<std::uint8_t>(r);
  }
  return hard(v.dims(), std::move(labels));
}

}  // namespace fieldsynth
