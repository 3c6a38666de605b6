#pragma once

#include <cstdint>
#include <span>

#include "fieldsynth/inr.hpp"
#include "fieldsynth/volume.hpp"

namespace fieldsynth::train {

using inr::Mat;

// Each loss returns its value and, when a gradient buffer is given,
// accumulates scale * dLoss/dinput into it.

// Mean absolute error. d|x|/dx at 0 is taken as 0.
template <typename T>
T loss_mae(std::span<const T> pred, std::span<const T> target, std::span<T> grad = {}, T scale = T(1));

struct SegLossParts {
  double dice = 0.0;
  double ce = 0.0;
  double total() const { return dice + ce; }
};

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kProbFloor = 1e-12;

// Soft Dice loss over the 4 classes plus cross entropy of the true class.
// probs is 4 x n, labels holds n class indices.
template <typename T>
SegLossParts loss_seg(const Mat<T>& probs, std::span<const std::uint8_t> labels, Mat<T>* grad = nullptr,
                      T scale = T(1));

// Anisotropic TV: sum over axes of the mean |forward difference| along that
// axis. Axes of extent 1 contribute nothing.
template <typename T>
T loss_tv(std::span<const T> values, Dims dims, std::span<T> grad = {}, T scale = T(1));

// Mean over the batch of |pre|^2 / 5.
template <typename T>
T loss_preact(const Mat<T>& pre, Mat<T>* grad = nullptr, T scale = T(1));

}  // namespace fieldsynth::train
